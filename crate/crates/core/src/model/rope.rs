//! Rotary position encoding over interleaved coordinate pairs.

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};

/// Angular frequency per coordinate pair: `base^(-2i / head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeFrequencies {
    freqs: Vec<f64>,
}

impl RopeFrequencies {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Invalid(format!("rope needs an even head_dim, got {head_dim}")));
        }
        if !(base > 0.0) {
            return Err(Error::Invalid("rope base must be positive".into()));
        }
        let freqs = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self { freqs })
    }

    pub fn head_dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Row-major `positions.len() × head_dim/2` rotation angles.
    pub fn angles(&self, positions: &[f64]) -> Vec<f64> {
        positions
            .iter()
            .flat_map(|&p| self.freqs.iter().map(move |&f| p * f))
            .collect()
    }
}

fn check<E: Real>(x: &Tensor<E>, positions: &[f64], freqs: &RopeFrequencies) -> Result<()> {
    if x.rank() != 2 || x.cols() != freqs.head_dim() || x.rows() != positions.len() {
        return Err(Error::shape("rope_apply", x.shape(), &[positions.len(), freqs.head_dim()]));
    }
    Ok(())
}

/// Rotate each row of `x` (tokens × head_dim) to its position.
pub fn rope_apply<E: Real>(x: &Tensor<E>, positions: &[f64], freqs: &RopeFrequencies) -> Result<Tensor<E>> {
    check(x, positions, freqs)?;
    Ok(ops::rotate_pairs(x, &freqs.angles(positions), false))
}

/// Conjugate rotation; `rope_invert(rope_apply(x, p), p) == x`.
pub fn rope_invert<E: Real>(x: &Tensor<E>, positions: &[f64], freqs: &RopeFrequencies) -> Result<Tensor<E>> {
    check(x, positions, freqs)?;
    Ok(ops::rotate_pairs(x, &freqs.angles(positions), true))
}

/// Sinusoidal embedding of a diffusion step in `[0, 1]`.
pub fn time_embed(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        let (s, c) = (scaled * w).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    if dim % 2 == 1 {
        out[dim - 1] = t;
    }
    out
}
