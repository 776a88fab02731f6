use crate::error::{Error, Result};

/// Angular frequency of rotation pair `j` in a head of dimension `dim`:
/// `base^(-2j/dim)`.
pub fn pair_frequency(j: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / dim as f64)
}

/// Per-position `(cos, sin)` table, `positions × dim/2`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: usize, dim: usize, base: f64) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary dimension must be even, got {dim}")));
        }
        let half = dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for m in 0..positions {
            for j in 0..half {
                let angle = m as f64 * pair_frequency(j, dim, base);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self { half, cos, sin })
    }

    /// Rotates `x` (one head) in place for `position`; `inverse` applies the
    /// transpose rotation.
    pub fn apply(&self, x: &mut [f64], position: usize, inverse: bool) {
        let row = position * self.half;
        for j in 0..self.half {
            let c = self.cos[row + j];
            let s = if inverse { -self.sin[row + j] } else { self.sin[row + j] };
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }
}

/// Rotary position encoding of a single vector: pair `(2j, 2j+1)` is rotated
/// by `position · base^(-2j/d)`.
pub fn rope_rotate(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::Config(format!("rotary dimension must be even, got {}", x.len())));
    }
    let mut out = x.to_vec();
    for j in 0..x.len() / 2 {
        let angle = position as f64 * pair_frequency(j, x.len(), base);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    Ok(out)
}
