//! Rotary position embeddings.
//!
//! Pair `(x[2j], x[2j+1])` of a row at position `m` is rotated by
//! `m · base^(-2j/d_k)`. Scores between rotated queries and keys then depend
//! only on the position difference.

use std::sync::Arc;

use crate::error::{config_err, Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Precomputed `cos`/`sin` rows for positions `0..max_positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    head_dim: usize,
    base: f64,
    max_positions: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64, max_positions: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(config_err(format!("rope head dim must be even and positive, got {head_dim}")));
        }
        let mut table = Self {
            head_dim,
            base,
            max_positions: 0,
            cos: Vec::new(),
            sin: Vec::new(),
        };
        table.grow(max_positions);
        Ok(table)
    }

    pub fn shared(head_dim: usize, base: f64, max_positions: usize) -> Result<Arc<Self>> {
        Self::new(head_dim, base, max_positions).map(Arc::new)
    }

    fn grow(&mut self, new_max: usize) {
        let half = self.head_dim / 2;
        for m in self.max_positions..new_max {
            for j in 0..half {
                let angle = self.angle(m, j);
                self.cos.push(angle.cos());
                self.sin.push(angle.sin());
            }
        }
        self.max_positions = new_max;
    }

    /// Rotation angle of pair `j` at position `m`.
    pub fn angle(&self, m: usize, j: usize) -> f64 {
        let inv_freq = self.base.powf(-2.0 * j as f64 / self.head_dim as f64);
        m as f64 * inv_freq
    }

    /// Table covering `new_max` positions; existing rows are reused unchanged.
    pub fn extend(&self, new_max: usize) -> Self {
        let mut out = self.clone();
        if new_max > self.max_positions {
            out.grow(new_max);
        }
        out
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    /// `(cos, sin)` for position `m`, `head_dim / 2` entries each.
    pub fn row(&self, m: usize) -> (&[f64], &[f64]) {
        let half = self.head_dim / 2;
        (&self.cos[m * half..(m + 1) * half], &self.sin[m * half..(m + 1) * half])
    }

    /// Rotates each `head_dim`-wide row of `data` in place. `inverse` rotates backwards.
    pub(crate) fn rotate<T: Float>(&self, data: &mut [T], dk: usize, positions: &[i64], inverse: bool) -> Result<()> {
        if dk != self.head_dim {
            return Err(config_err(format!(
                "rope table built for head dim {}, applied to width {dk}",
                self.head_dim
            )));
        }
        for (row, &pos) in data.chunks_mut(dk).zip(positions) {
            let m = pos.unsigned_abs() as usize;
            if m >= self.max_positions {
                return Err(config_err(format!(
                    "position {pos} outside rope table of {} positions",
                    self.max_positions
                )));
            }
            let backwards = (pos < 0) != inverse;
            let (cos, sin) = self.row(m);
            for (j, pair) in row.chunks_mut(2).enumerate() {
                let c = T::lit(cos[j]);
                let s = if backwards { -T::lit(sin[j]) } else { T::lit(sin[j]) };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
        Ok(())
    }
}

/// Applies the rotation for `positions` (one per row) to `x[n×d_k]`.
pub fn rope_apply<T: Float>(x: &Tensor<T>, positions: &[i64], table: &Arc<RopeTable>) -> Result<Tensor<T>> {
    x.rope(positions, table)
}

/// Extends a shared table, keeping the old rows bit-identical.
pub fn rope_extend(table: &RopeTable, new_max: usize) -> Result<RopeTable> {
    if new_max <= table.max_positions() {
        return Err(Error::Contract(format!(
            "rope_extend to {new_max} does not grow a table of {}",
            table.max_positions()
        )));
    }
    Ok(table.extend(new_max))
}
