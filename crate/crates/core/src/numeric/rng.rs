//! Seedable deterministic random stream.
//!
//! The generator is splitmix64: the state advances by a fixed odd constant
//! and the output is a bijective finalizer of the new state. Pure 64-bit
//! integer arithmetic plus exact IEEE-754 float transforms make the stream
//! bit-identical across platforms and runs for the same seed.

use crate::error::{Error, Result};
use crate::numeric::vector::FeatureVector;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    state: u64,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in (0, 1]: the top 53 bits plus one, scaled by 2^-53.
    /// The lower endpoint is excluded so `ln` in the Gaussian transform is
    /// always defined.
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) via the fixed-point multiply reduction.
    pub(crate) fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// Draws `dim` independent samples from N(0, sigma^2) with the Box-Muller
/// transform: each pair of uniforms (u1, u2) in (0, 1] yields
/// r = sqrt(-2 ln u1) and the pair (r cos(2 pi u2), r sin(2 pi u2)).
/// Odd `dim` discards the second output of the last pair, so the stream
/// always advances by two draws per started pair.
pub fn sample_gaussian(rng: &mut RngState, dim: usize, sigma: f64) -> Result<FeatureVector> {
    if dim == 0 {
        return Err(Error::Invalid("sample_gaussian requires dim >= 1".into()));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Invalid(format!(
            "sample_gaussian requires sigma >= 0, got {sigma}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    while out.len() < dim {
        let u1 = rng.next_unit();
        let u2 = rng.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(sigma * r * theta.cos());
        if out.len() < dim {
            out.push(sigma * r * theta.sin());
        }
    }
    FeatureVector::new(out)
}
