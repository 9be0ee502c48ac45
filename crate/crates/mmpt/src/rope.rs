//! Rotary position encoding. A table holds per-row rotation angles for one
//! attention head; queries and keys get rotated in adjacent-dimension pairs,
//! so logits depend on position differences only.
//!
//! Two layouts share the ladder:
//! - spatial: first half of head dims rotated by the token's grid row, second
//!   half by its grid column;
//! - trajectory: first half by the flattened spatial index, second half by the
//!   frame time index.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometric frequency ladder over one half of a head: m dims give m/2 pairs,
/// pair k turning at base^(−2k/m) radians per position step.
fn half_freqs(half_dims: usize, base: f64) -> Vec<f64> {
    (0..half_dims / 2)
        .map(|k| base.powf(-2.0 * k as f64 / half_dims as f64))
        .collect()
}

#[derive(Debug)]
pub struct RopeTable<S: Scalar> {
    rows: usize,
    pairs: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> RopeTable<S> {
    /// Head dims must split into two even halves: 4 | head_dim.
    fn check_head_dim(head_dim: usize) -> Result<()> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::BadShape {
                op: "rope",
                shape: vec![head_dim],
                why: "head dim must be a positive multiple of 4".into(),
            });
        }
        Ok(())
    }

    /// One row per (row, col) position pair, in the caller's row order.
    pub fn from_positions(positions: &[(i64, i64)], head_dim: usize, base: f64) -> Result<Self> {
        Self::check_head_dim(head_dim)?;
        let freqs = half_freqs(head_dim / 2, base);
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(a, b) in positions {
            for &f in &freqs {
                let th = a as f64 * f;
                cos.push(S::from_f64(th.cos()));
                sin.push(S::from_f64(th.sin()));
            }
            for &f in &freqs {
                let th = b as f64 * f;
                cos.push(S::from_f64(th.cos()));
                sin.push(S::from_f64(th.sin()));
            }
        }
        Ok(RopeTable {
            rows: positions.len(),
            pairs,
            cos,
            sin,
        })
    }

    /// Row-major token grid; `origin` offsets every position (used to probe
    /// translation behavior without touching the grid itself).
    pub fn spatial(
        grid_rows: usize,
        grid_cols: usize,
        head_dim: usize,
        base: f64,
        origin: (i64, i64),
    ) -> Result<Self> {
        let mut positions = Vec::with_capacity(grid_rows * grid_cols);
        for r in 0..grid_rows {
            for c in 0..grid_cols {
                positions.push((r as i64 + origin.0, c as i64 + origin.1));
            }
        }
        Self::from_positions(&positions, head_dim, base)
    }

    /// One row per (spatial index, frame time) token of a trajectory stack.
    pub fn trajectory(cells: &[(usize, usize)], head_dim: usize, base: f64) -> Result<Self> {
        let positions: Vec<(i64, i64)> =
            cells.iter().map(|&(n, t)| (n as i64, t as i64)).collect();
        Self::from_positions(&positions, head_dim, base)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.rotate(x, false)
    }

    /// Transpose of `apply`; used for the backward pass.
    pub fn apply_inverse(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.rotate(x, true)
    }

    fn rotate(&self, x: &Tensor<S>, inverse: bool) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.rows() != self.rows || x.cols() != self.pairs * 2 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: x.shape().to_vec(),
                rhs: vec![self.rows, self.pairs * 2],
            });
        }
        let mut out = vec![S::zero(); x.len()];
        let d = self.pairs * 2;
        for r in 0..self.rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let orow = &mut out[r * d..(r + 1) * d];
            for p in 0..self.pairs {
                let c = self.cos[r * self.pairs + p];
                let s = if inverse {
                    S::zero() - self.sin[r * self.pairs + p]
                } else {
                    self.sin[r * self.pairs + p]
                };
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                orow[2 * p] = c * x0 - s * x1;
                orow[2 * p + 1] = s * x0 + c * x1;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
