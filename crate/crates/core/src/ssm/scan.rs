//! The S6 selective-scan layer: discretization, single-step recurrence and
//! the full sequence scan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{softplus, softplus_inv, Tensor};

use super::Linear;

/// Continuous parameters of one S6 layer with `E` channels and state size `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Params {
    /// `E×N`, strictly negative.
    pub a: Tensor,
    /// `E → N`
    pub w_b: Linear,
    /// `E → N`
    pub w_c: Linear,
    /// `E → E`, with bias; output goes through softplus.
    pub delta_proj: Linear,
}

impl S6Params {
    /// Gaussian projections scaled by `1/√fan_in`, `A = −exp(U[0,1])`, and a
    /// Δ bias that puts the initial step size near 0.1.
    pub fn init(rng: &mut SeededRng, channels: usize, state: usize) -> Self {
        let a = rng
            .uniform_tensor([channels, state], 0.0, 1.0)
            .map(|v| -v.exp());
        let delta_bias = Tensor::full([channels], softplus_inv(0.1));
        Self {
            a,
            w_b: Linear::init(rng, channels, state, false),
            w_c: Linear::init(rng, channels, state, false),
            delta_proj: Linear {
                bias: Some(delta_bias),
                ..Linear::init(rng, channels, channels, false)
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.a.dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.a.dim(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (e, n) = self.a.dims2("S6Params")?;
        let checks = [
            ("w_b", &self.w_b, e, n),
            ("w_c", &self.w_c, e, n),
            ("delta_proj", &self.delta_proj, e, e),
        ];
        for (name, lin, i, o) in checks {
            if lin.in_dim() != i || lin.out_dim() != o {
                return Err(Error::shape(
                    "S6Params",
                    format!(
                        "{name} is {}→{}, expected {i}→{o}",
                        lin.in_dim(),
                        lin.out_dim()
                    ),
                ));
            }
        }
        if self.delta_proj.bias.is_none() {
            return Err(Error::InvalidArgument("delta_proj needs a bias".into()));
        }
        Ok(())
    }
}

/// Discrete per-step tensors of one S6 layer.
#[derive(Clone, Debug, PartialEq)]
pub struct S6StepTensors {
    /// `E×N`, `exp(A ⊙ Δ)`
    pub a_bar: Tensor,
    /// `E×N`, `B ⊙ Δ`
    pub b_bar: Tensor,
    /// `N`
    pub c: Tensor,
    /// `E`, softplus output
    pub delta: Tensor,
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new([v.len()], v.to_vec()).expect("1-D")
}

/// Per-step discretization from the S6 input `u_t` and the C-source `z_t`.
pub fn discretize(u_t: &[f64], params: &S6Params, z_t: &[f64]) -> Result<S6StepTensors> {
    let (e, n) = params.a.dims2("discretize")?;
    if u_t.len() != e || z_t.len() != e {
        return Err(Error::shape(
            "discretize",
            format!("u_t {} / z_t {} vs E = {e}", u_t.len(), z_t.len()),
        ));
    }
    let delta: Vec<f64> = params
        .delta_proj
        .apply_vec(u_t)
        .into_iter()
        .map(softplus)
        .collect();
    let b = params.w_b.apply_vec(u_t);
    let c = params.w_c.apply_vec(z_t);
    let a = params.a.data();
    let mut a_bar = vec![0.0; e * n];
    let mut b_bar = vec![0.0; e * n];
    for ch in 0..e {
        for m in 0..n {
            a_bar[ch * n + m] = (a[ch * n + m] * delta[ch]).exp();
            b_bar[ch * n + m] = b[m] * delta[ch];
        }
    }
    Ok(S6StepTensors {
        a_bar: Tensor::new([e, n], a_bar)?,
        b_bar: Tensor::new([e, n], b_bar)?,
        c: vec_tensor(&c),
        delta: vec_tensor(&delta),
    })
}

/// One recurrence step: `h = Ā ⊙ h_prev + B̄ ⊙ u`, `o = h · C` (contracted over N).
pub fn s6_step(h_prev: &Tensor, step: &S6StepTensors, u_t: &[f64]) -> Result<(Tensor, Tensor)> {
    let (e, n) = step.a_bar.dims2("s6_step")?;
    if h_prev.shape() != [e, n]
        || step.b_bar.shape() != [e, n]
        || step.c.shape() != [n]
        || u_t.len() != e
    {
        return Err(Error::shape(
            "s6_step",
            format!("h {:?}, Ā [{e}, {n}], u {}", h_prev.shape(), u_t.len()),
        ));
    }
    let (a, b, c, hp) = (
        step.a_bar.data(),
        step.b_bar.data(),
        step.c.data(),
        h_prev.data(),
    );
    let mut h = vec![0.0; e * n];
    let mut o = vec![0.0; e];
    for ch in 0..e {
        for m in 0..n {
            let k = ch * n + m;
            h[k] = a[k] * hp[k] + b[k] * u_t[ch];
            o[ch] += c[m] * h[k];
        }
    }
    Ok((Tensor::new([e, n], h)?, vec_tensor(&o)))
}

/// Which quantizable activation a hook is looking at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    /// `B̄(t) ⊙ u(t)` before it enters the recurrence.
    Input,
    /// `h(t)` before the `C(t)` contraction.
    Hidden,
}

impl ActKind {
    pub const ALL: [ActKind; 2] = [ActKind::Input, ActKind::Hidden];

    pub fn name(self) -> &'static str {
        match self {
            ActKind::Input => "input",
            ActKind::Hidden => "hidden",
        }
    }
}

/// Identifies one S6 scan inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub direction: usize,
}

/// Observes (and may rewrite) the `E×N` activations of every time-step.
pub trait ScanHook {
    fn on_activation(&mut self, site: Site, kind: ActKind, t: usize, act: &mut [f64]);
}

pub struct NoHook;

impl ScanHook for NoHook {
    fn on_activation(&mut self, _: Site, _: ActKind, _: usize, _: &mut [f64]) {}
}

/// Per-sequence projections feeding the recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    /// `M×E`, after softplus
    pub delta: Tensor,
    /// `M×N`
    pub b: Tensor,
    /// `M×N`
    pub c: Tensor,
}

impl Projections {
    /// `z` is the C-source sequence; the models here always pass `u`.
    pub fn compute(u: &Tensor, params: &S6Params, z: &Tensor) -> Result<Self> {
        Ok(Self {
            delta: params.delta_proj.apply(u)?.map(softplus),
            b: params.w_b.apply(u)?,
            c: params.w_c.apply(z)?,
        })
    }

    pub fn step(&self, a: &Tensor, t: usize) -> S6StepTensors {
        let (e, n) = (a.dim(0), a.dim(1));
        let delta = &self.delta.data()[t * e..(t + 1) * e];
        let b = &self.b.data()[t * n..(t + 1) * n];
        let mut a_bar = vec![0.0; e * n];
        let mut b_bar = vec![0.0; e * n];
        for ch in 0..e {
            for m in 0..n {
                a_bar[ch * n + m] = (a.data()[ch * n + m] * delta[ch]).exp();
                b_bar[ch * n + m] = b[m] * delta[ch];
            }
        }
        S6StepTensors {
            a_bar: Tensor::new([e, n], a_bar).unwrap(),
            b_bar: Tensor::new([e, n], b_bar).unwrap(),
            c: vec_tensor(&self.c.data()[t * n..(t + 1) * n]),
            delta: vec_tensor(delta),
        }
    }
}

/// Discrete tensors and hidden states of a scan, in sequence order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTrace {
    pub steps: Vec<S6StepTensors>,
    /// `h(t)`, each `E×N`
    pub hidden: Vec<Tensor>,
}

impl ScanTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `M×E` matrix of step sizes.
    pub fn deltas(&self) -> Tensor {
        let e = self.steps.first().map_or(0, |s| s.delta.len());
        let data = self
            .steps
            .iter()
            .flat_map(|s| s.delta.data().iter().copied())
            .collect();
        Tensor::new([self.steps.len(), e], data).unwrap()
    }
}

/// Full scan over `u: M×E` with `h(0) = 0`. Returns the `M×E` outputs and,
/// when requested, the trace.
pub fn s6_scan(
    u: &Tensor,
    params: &S6Params,
    z: &Tensor,
    keep_trace: bool,
) -> Result<(Tensor, Option<ScanTrace>)> {
    let proj = Projections::compute(u, params, z)?;
    scan_projected(
        u,
        &params.a,
        &proj,
        keep_trace,
        &mut NoHook,
        Site {
            layer: 0,
            direction: 0,
        },
    )
}

/// Scan from precomputed projections; `hook` sees every quantizable activation.
pub fn scan_projected(
    u: &Tensor,
    a: &Tensor,
    proj: &Projections,
    keep_trace: bool,
    hook: &mut dyn ScanHook,
    site: Site,
) -> Result<(Tensor, Option<ScanTrace>)> {
    let (m, e) = u.dims2("s6_scan")?;
    let n = a.dim(1);
    if m == 0 {
        return Err(Error::InvalidArgument(
            "s6_scan on an empty sequence".into(),
        ));
    }
    if a.dim(0) != e
        || proj.delta.shape() != [m, e]
        || proj.b.shape() != [m, n]
        || proj.c.shape() != [m, n]
    {
        return Err(Error::shape(
            "s6_scan",
            format!("u {:?} vs A {:?}", u.shape(), a.shape()),
        ));
    }
    let (ad, dd, bd, cd, ud) = (
        a.data(),
        proj.delta.data(),
        proj.b.data(),
        proj.c.data(),
        u.data(),
    );
    let mut h = vec![0.0; e * n];
    let mut x = vec![0.0; e * n];
    let mut hq = vec![0.0; e * n];
    let mut out = vec![0.0; m * e];
    let mut trace = keep_trace.then(|| ScanTrace {
        steps: Vec::with_capacity(m),
        hidden: Vec::with_capacity(m),
    });
    for t in 0..m {
        let delta = &dd[t * e..(t + 1) * e];
        let b = &bd[t * n..(t + 1) * n];
        let c = &cd[t * n..(t + 1) * n];
        for ch in 0..e {
            for k in 0..n {
                x[ch * n + k] = b[k] * delta[ch] * ud[t * e + ch];
            }
        }
        hook.on_activation(site, ActKind::Input, t, &mut x);
        for ch in 0..e {
            for k in 0..n {
                let i = ch * n + k;
                h[i] = (ad[i] * delta[ch]).exp() * h[i] + x[i];
            }
        }
        hq.copy_from_slice(&h);
        hook.on_activation(site, ActKind::Hidden, t, &mut hq);
        let o = &mut out[t * e..(t + 1) * e];
        for ch in 0..e {
            o[ch] = (0..n).map(|k| c[k] * hq[ch * n + k]).sum();
        }
        if let Some(tr) = trace.as_mut() {
            tr.steps.push(proj.step(a, t));
            tr.hidden.push(Tensor::new([e, n], h.clone())?);
        }
    }
    Ok((Tensor::new([m, e], out)?, trace))
}

/// Forward of the scan used on the gradient tape: returns `o: M×E` and all
/// hidden states `M×E×N`. `u`, `delta` are `M×E`; `b`, `c` are `M×N`.
pub(crate) fn scan_states(
    u: &[f64],
    a: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    m: usize,
    e: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut hs = vec![0.0; m * e * n];
    let mut o = vec![0.0; m * e];
    for t in 0..m {
        for ch in 0..e {
            let d = delta[t * e + ch];
            let x = d * u[t * e + ch];
            let mut acc = 0.0;
            for k in 0..n {
                let i = ch * n + k;
                let prev = if t == 0 { 0.0 } else { hs[(t - 1) * e * n + i] };
                let h = (a[i] * d).exp() * prev + b[t * n + k] * x;
                hs[t * e * n + i] = h;
                acc += c[t * n + k] * h;
            }
            o[t * e + ch] = acc;
        }
    }
    (o, hs)
}

/// Adjoints of [`scan_states`] with respect to `(u, delta, b, c)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    u: &[f64],
    a: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    hs: &[f64],
    go: &[f64],
    (m, e, n): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gu = vec![0.0; m * e];
    let mut gd = vec![0.0; m * e];
    let mut gb = vec![0.0; m * n];
    let mut gc = vec![0.0; m * n];
    // gh carries ∂L/∂h(t) backwards; `next_decay` holds Ā(t+1).
    let mut gh = vec![0.0; e * n];
    let mut next_decay = vec![0.0; e * n];
    for t in (0..m).rev() {
        for ch in 0..e {
            let d = delta[t * e + ch];
            let ut = u[t * e + ch];
            let g_o = go[t * e + ch];
            for k in 0..n {
                let i = ch * n + k;
                let h = hs[t * e * n + i];
                gc[t * n + k] += g_o * h;
                let g = c[t * n + k] * g_o
                    + if t + 1 < m {
                        next_decay[i] * gh[i]
                    } else {
                        0.0
                    };
                gh[i] = g;
                let decay = (a[i] * d).exp();
                let prev = if t == 0 { 0.0 } else { hs[(t - 1) * e * n + i] };
                gd[t * e + ch] += g * (a[i] * decay * prev + b[t * n + k] * ut);
                gb[t * n + k] += g * d * ut;
                gu[t * e + ch] += g * d * b[t * n + k];
                next_decay[i] = decay;
            }
        }
    }
    (gu, gd, gb, gc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64, e: usize, n: usize) -> S6Params {
        S6Params::init(&mut SeededRng::new(seed), e, n)
    }

    #[test]
    fn init_is_consistent_and_decaying() {
        let p = params(1, 6, 3);
        p.validate().unwrap();
        assert!(p.a.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn zero_delta_projection_gives_log_two() {
        let mut p = params(2, 4, 2);
        p.delta_proj.weight = Tensor::zeros([4, 4]);
        p.delta_proj.bias = Some(Tensor::zeros([4]));
        let u = [0.3, -1.0, 2.0, 0.5];
        let s = discretize(&u, &p, &u).unwrap();
        for &d in s.delta.data() {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_a_gives_unit_transition() {
        let mut p = params(3, 4, 2);
        p.a = Tensor::zeros([4, 2]);
        let s = discretize(&[1.0, 2.0, 3.0, 4.0], &p, &[0.0; 4]).unwrap();
        assert!(s.a_bar.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn discretize_matches_scalar_loop() {
        let mut rng = SeededRng::new(4);
        let p = params(4, 5, 3);
        let u: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let z: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let s = discretize(&u, &p, &z).unwrap();
        let dot = |w: &Tensor, row: usize, x: &[f64]| -> f64 {
            (0..x.len())
                .map(|j| w.data()[row * x.len() + j] * x[j])
                .sum()
        };
        for e in 0..5 {
            let pre =
                dot(&p.delta_proj.weight, e, &u) + p.delta_proj.bias.as_ref().unwrap().data()[e];
            let d = (1.0 + pre.exp()).ln();
            assert!((s.delta.data()[e] - d).abs() < 1e-12);
            for m in 0..3 {
                let ab = (p.a.data()[e * 3 + m] * d).exp();
                let bb = dot(&p.w_b.weight, m, &u) * d;
                assert!((s.a_bar.data()[e * 3 + m] - ab).abs() < 1e-12);
                assert!((s.b_bar.data()[e * 3 + m] - bb).abs() < 1e-12);
            }
        }
        for m in 0..3 {
            assert!((s.c.data()[m] - dot(&p.w_c.weight, m, &z)).abs() < 1e-12);
        }
    }

    #[test]
    fn discretize_rejects_bad_lengths() {
        let p = params(5, 4, 2);
        assert!(discretize(&[0.0; 3], &p, &[0.0; 4]).is_err());
    }

    #[test]
    fn step_degenerate_cases() {
        let s = S6StepTensors {
            a_bar: Tensor::full([2, 3], 1.0),
            b_bar: Tensor::zeros([2, 3]),
            c: Tensor::full([3], 0.5),
            delta: Tensor::full([2], 0.1),
        };
        let h_prev = Tensor::from_fn([2, 3], |i| i as f64);
        let (h, _) = s6_step(&h_prev, &s, &[4.0, -1.0]).unwrap();
        assert_eq!(h, h_prev);

        let (h, o) = s6_step(&Tensor::zeros([2, 3]), &s, &[0.0, 0.0]).unwrap();
        assert_eq!(h, Tensor::zeros([2, 3]));
        assert_eq!(o, Tensor::zeros([2]));
    }

    #[test]
    fn scan_of_length_one_is_one_step() {
        let p = params(6, 4, 2);
        let u = SeededRng::new(6).normal_tensor([1, 4], 1.0);
        let (o, trace) = s6_scan(&u, &p, &u, true).unwrap();
        let step = discretize(u.data(), &p, u.data()).unwrap();
        let (h, o1) = s6_step(&Tensor::zeros([4, 2]), &step, u.data()).unwrap();
        assert!(o
            .data()
            .iter()
            .zip(o1.data())
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(trace.unwrap().hidden[0], h);
    }

    #[test]
    fn scan_zero_input_is_zero() {
        let p = params(7, 4, 2);
        let u = Tensor::zeros([6, 4]);
        let (o, _) = s6_scan(&u, &p, &u, false).unwrap();
        assert_eq!(o, Tensor::zeros([6, 4]));
    }

    #[test]
    fn scan_rejects_empty() {
        let p = params(8, 4, 2);
        let u = Tensor::zeros([0, 4]);
        assert!(s6_scan(&u, &p, &u, false).is_err());
    }

    #[test]
    fn fused_scan_backward_matches_finite_differences() {
        use crate::tape::fd;
        let mut rng = SeededRng::new(12);
        let (m, e, n) = (5, 3, 2);
        let a = rng.uniform_tensor([e, n], 0.0, 1.0).map(|v| -v.exp());
        let u = rng.uniform_tensor([m, e], -2.0, 2.0);
        let d = rng.uniform_tensor([m, e], 0.05, 1.5);
        let b = rng.uniform_tensor([m, n], -2.0, 2.0);
        let c = rng.uniform_tensor([m, n], -2.0, 2.0);
        let probe = rng.uniform_tensor([m, e], -1.0, 1.0);
        let f = |u: &Tensor, d: &Tensor, b: &Tensor, c: &Tensor| {
            let (o, _) = scan_states(u.data(), a.data(), d.data(), b.data(), c.data(), m, e, n);
            o.iter().zip(probe.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let (_, hs) = scan_states(u.data(), a.data(), d.data(), b.data(), c.data(), m, e, n);
        let (gu, gd, gb, gc) = scan_backward(
            u.data(),
            a.data(),
            d.data(),
            b.data(),
            c.data(),
            &hs,
            probe.data(),
            (m, e, n),
        );
        let t = |v: Vec<f64>, s: &Tensor| Tensor::new(s.shape().to_vec(), v).unwrap();
        assert!(
            fd::max_rel_err(
                &t(gu, &u),
                &fd::gradient(&u, 1e-5, |x| f(x, &d, &b, &c)),
                1e-6
            ) <= 1e-4
        );
        assert!(
            fd::max_rel_err(
                &t(gd, &d),
                &fd::gradient(&d, 1e-5, |x| f(&u, x, &b, &c)),
                1e-6
            ) <= 1e-4
        );
        assert!(
            fd::max_rel_err(
                &t(gb, &b),
                &fd::gradient(&b, 1e-5, |x| f(&u, &d, x, &c)),
                1e-6
            ) <= 1e-4
        );
        assert!(
            fd::max_rel_err(
                &t(gc, &c),
                &fd::gradient(&c, 1e-5, |x| f(&u, &d, &b, x)),
                1e-6
            ) <= 1e-4
        );
    }

    #[test]
    fn fused_scan_matches_reference_scan() {
        let p = params(13, 4, 3);
        let u = SeededRng::new(13).normal_tensor([7, 4], 1.0);
        let (o, _) = s6_scan(&u, &p, &u, false).unwrap();
        let proj = Projections::compute(&u, &p, &u).unwrap();
        let (o2, _) = scan_states(
            u.data(),
            p.a.data(),
            proj.delta.data(),
            proj.b.data(),
            proj.c.data(),
            7,
            4,
            3,
        );
        assert!(o.data().iter().zip(&o2).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn trace_matches_stepwise_recurrence() {
        let p = params(9, 4, 3);
        let u = SeededRng::new(9).normal_tensor([8, 4], 1.0);
        let (o, trace) = s6_scan(&u, &p, &u, true).unwrap();
        let trace = trace.unwrap();
        let mut h = Tensor::zeros([4, 3]);
        for t in 0..8 {
            let row = &u.data()[t * 4..(t + 1) * 4];
            let step = discretize(row, &p, row).unwrap();
            assert!(step.a_bar.max_abs_diff(&trace.steps[t].a_bar).unwrap() < 1e-15);
            let (hn, ot) = s6_step(&h, &step, row).unwrap();
            assert!(hn.max_abs_diff(&trace.hidden[t]).unwrap() < 1e-12);
            for e in 0..4 {
                assert!((ot.data()[e] - o.data()[t * 4 + e]).abs() < 1e-12);
            }
            h = hn;
        }
        for s in &trace.steps {
            assert!(s.a_bar.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(s.delta.data().iter().all(|&v| v >= 0.0));
        }
    }
}
