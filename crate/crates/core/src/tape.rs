//! Scoped reverse-mode gradient tape.
//!
//! Operations append nodes in creation order, so node indices already form a
//! topological order and the backward sweep is a single reverse pass. Fused
//! kernels from other modules register themselves through [`GradTape::custom`]
//! with a hand-written vector-Jacobian product.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

/// Vector-Jacobian product of one recorded op: given the adjoint of the
/// output, return one adjoint per parent (same order, same shapes).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct GradTape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::begin()
    }
}

impl GradTape {
    pub fn begin() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Ends the recording scope, returning the number of recorded nodes.
    pub fn end(self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!("{v:?} is not on tape {}", self.id)));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.check(v).expect("var belongs to this tape");
        &self.nodes[idx].value
    }

    /// Records an op whose forward value was computed elsewhere.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        let idx = parents
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(value, idx, Some(backward)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value_checked(x)?.map(f);
        self.custom(
            &[x],
            value,
            Box::new(move |g, p, out| {
                let data = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                Ok(vec![Tensor::new(g.shape().to_vec(), data)?])
            }),
        )
    }

    fn value_checked(&self, v: Var) -> Result<&Tensor> {
        let idx = self.check(v)?;
        Ok(&self.nodes[idx].value)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, tensor::softplus, |x, _| tensor::sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, tensor::silu, |x, _| tensor::silu_grad(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.value_checked(x)?.scale(k);
        self.custom(&[x], value, Box::new(move |g, _, _| Ok(vec![g.scale(k)])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value_checked(a)?.add(self.value_checked(b)?)?;
        self.custom(
            &[a, b],
            value,
            Box::new(|g, _, _| Ok(vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value_checked(a)?.sub(self.value_checked(b)?)?;
        self.custom(
            &[a, b],
            value,
            Box::new(|g, _, _| Ok(vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value_checked(a)?.mul(self.value_checked(b)?)?;
        self.custom(
            &[a, b],
            value,
            Box::new(|g, p, _| Ok(vec![g.mul(p[1])?, g.mul(p[0])?])),
        )
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value_checked(x)?.sum());
        self.custom(
            &[x],
            value,
            Box::new(|g, p, _| Ok(vec![Tensor::full(p[0].shape().to_vec(), g.data()[0])])),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value_checked(x)?.reshape(shape.to_vec())?;
        self.custom(
            &[x],
            value,
            Box::new(|g, p, _| Ok(vec![g.reshape(p[0].shape().to_vec())?])),
        )
    }

    /// 2-D matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value_checked(a)?.matmul(self.value_checked(b)?)?;
        self.custom(
            &[a, b],
            value,
            Box::new(|g, p, _| Ok(vec![g.matmul_t(p[1])?, p[0].t_matmul(g)?])),
        )
    }

    /// Linear map over the last axis: `x[.., k] · wᵀ (+ bias)` for `w: n×k`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.value_checked(x)?;
        let wv = self.value_checked(w)?;
        let value = crate::ssm::linear_apply(xv, wv, bias.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.custom(
            &parents,
            value,
            Box::new(|g, p, _| {
                let (x, w) = (p[0], p[1]);
                let (n, k) = w.dims2("linear")?;
                let rows = x.len() / k;
                let x2 = x.reshape([rows, k])?;
                let g2 = g.reshape([rows, n])?;
                let gx = g2.matmul(w)?.into_reshape(x.shape().to_vec())?;
                let gw = g2.t_matmul(&x2)?;
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    out.push(g2.sum_axis0()?);
                }
                Ok(out)
            }),
        )
    }

    /// Reverse sweep from a scalar `loss`, returning `∂loss/∂v` for each `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let targets = wrt
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;

        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape().to_vec(), 1.0));
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = &node.backward else { continue };
            let (before, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            let parents: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(g, &parents, &node.value)?;
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                before[p] = Some(match before[p].take() {
                    Some(acc) => acc.add(&gp)?,
                    None => gp,
                });
            }
        }
        Ok(targets
            .into_iter()
            .map(|t| {
                grads
                    .get(t)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[t].value.shape().to_vec()))
            })
            .collect())
    }
}

#[cfg(test)]
pub(crate) mod fd {
    use crate::tensor::Tensor;

    /// Central finite-difference gradient of `f` at `x`.
    pub fn gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let mut data = x.data().to_vec();
        let mut out = vec![0.0; data.len()];
        for i in 0..data.len() {
            let orig = data[i];
            data[i] = orig + step;
            let up = f(&Tensor::new(x.shape().to_vec(), data.clone()).unwrap());
            data[i] = orig - step;
            let down = f(&Tensor::new(x.shape().to_vec(), data.clone()).unwrap());
            data[i] = orig;
            out[i] = (up - down) / (2.0 * step);
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    /// Max over entries of `|a − b| / max(|a|, |b|, floor)`.
    pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}
