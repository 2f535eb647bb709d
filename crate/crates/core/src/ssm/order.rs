use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a 2-D patch grid is walked to form the 1-D token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanKind {
    RowMajorForward,
    RowMajorBackward,
    ColumnMajorForward,
    ColumnMajorBackward,
}

impl ScanKind {
    pub const ALL: [ScanKind; 4] = [
        ScanKind::RowMajorForward,
        ScanKind::RowMajorBackward,
        ScanKind::ColumnMajorForward,
        ScanKind::ColumnMajorBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanKind::RowMajorForward => "row-major-forward",
            ScanKind::RowMajorBackward => "row-major-backward",
            ScanKind::ColumnMajorForward => "column-major-forward",
            ScanKind::ColumnMajorBackward => "column-major-backward",
        }
    }
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scan order `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub kind: ScanKind,
    pub rows: usize,
    pub cols: usize,
}

impl ScanOrder {
    pub fn new(kind: ScanKind, rows: usize, cols: usize) -> Self {
        Self { kind, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `perm[s]` is the row-major grid cell visited at sequence step `s`.
    pub fn permutation(&self) -> Vec<usize> {
        let (r, c) = (self.rows, self.cols);
        let row_major = (0..r * c).collect::<Vec<_>>();
        let col_major = (0..r * c).map(|s| (s % r) * c + s / r).collect::<Vec<_>>();
        match self.kind {
            ScanKind::RowMajorForward => row_major,
            ScanKind::RowMajorBackward => row_major.into_iter().rev().collect(),
            ScanKind::ColumnMajorForward => col_major,
            ScanKind::ColumnMajorBackward => col_major.into_iter().rev().collect(),
        }
    }

    /// `pos[cell]` is the sequence step at which `cell` is visited.
    pub fn inverse(&self) -> Vec<usize> {
        invert(&self.permutation())
    }

    /// Grid `(row, col)` of sequence step `s`.
    pub fn cell_of(&self, perm: &[usize], s: usize) -> (usize, usize) {
        (perm[s] / self.cols, perm[s] % self.cols)
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        let ok = match x.shape() {
            [r, c, _] => *r == self.rows && *c == self.cols,
            [m, _] => *m == self.len(),
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                op,
                format!("{:?} vs grid {}x{}", x.shape(), self.rows, self.cols),
            ));
        }
        Ok(*x.shape().last().unwrap())
    }

    /// `rows×cols×E` (or `M×E` in row-major cell order) to `M×E` in scan order.
    pub fn flatten_grid(&self, x: &Tensor) -> Result<Tensor> {
        let e = self.check(x, "flatten_grid")?;
        Ok(gather_rows(x.data(), e, &self.permutation()).into_reshape([self.len(), e])?)
    }

    /// Inverse of [`flatten_grid`](Self::flatten_grid): `M×E` in scan order back to `rows×cols×E`.
    pub fn unflatten_grid(&self, y: &Tensor) -> Result<Tensor> {
        let e = self.check(y, "unflatten_grid")?;
        if y.rank() != 2 {
            return Err(Error::shape("unflatten_grid", "expected M×E input"));
        }
        Ok(gather_rows(y.data(), e, &self.inverse()).into_reshape([self.rows, self.cols, e])?)
    }
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (s, &p) in perm.iter().enumerate() {
        inv[p] = s;
    }
    inv
}

/// `out[s] = x[idx[s]]` over rows of width `width`.
pub(crate) fn gather_rows(x: &[f64], width: usize, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&x[i * width..(i + 1) * width]);
    }
    Tensor::new([idx.len(), width], out).expect("gathered rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn single_cell_is_identity() {
        let x = Tensor::from_fn([1, 1, 3], |i| i as f64);
        for kind in ScanKind::ALL {
            let o = ScanOrder::new(kind, 1, 1);
            assert_eq!(o.flatten_grid(&x).unwrap().data(), x.data());
        }
    }

    #[test]
    fn row_major_forward_visits_cells_in_reading_order() {
        let x = Tensor::from_fn([2, 2, 1], |i| i as f64);
        let o = ScanOrder::new(ScanKind::RowMajorForward, 2, 2);
        assert_eq!(o.flatten_grid(&x).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn column_and_backward_orders() {
        let x = Tensor::from_fn([2, 3, 1], |i| i as f64);
        let col = ScanOrder::new(ScanKind::ColumnMajorForward, 2, 3);
        assert_eq!(
            col.flatten_grid(&x).unwrap().data(),
            &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]
        );
        let back = ScanOrder::new(ScanKind::RowMajorBackward, 2, 3);
        assert_eq!(
            back.flatten_grid(&x).unwrap().data(),
            &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
        );
    }

    #[test]
    fn round_trip_is_identity_for_every_order() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_tensor([3, 4, 5], 1.0);
        for kind in ScanKind::ALL {
            let o = ScanOrder::new(kind, 3, 4);
            let back = o.unflatten_grid(&o.flatten_grid(&x).unwrap()).unwrap();
            assert_eq!(back, x, "{kind}");
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let o = ScanOrder::new(ScanKind::RowMajorForward, 2, 2);
        assert!(o.flatten_grid(&Tensor::zeros([3, 2, 1])).is_err());
    }

    #[test]
    fn names_parse_back() {
        for kind in ScanKind::ALL {
            assert_eq!(kind.name().parse::<ScanKind>().unwrap(), kind);
        }
        assert!("diagonal".parse::<ScanKind>().is_err());
    }
}
