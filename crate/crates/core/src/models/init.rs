use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Half-width `sqrt(6 / (fan_in + fan_out))` of the Glorot uniform interval.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> Result<f64> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "glorot init needs positive fans, got fan_in={fan_in} fan_out={fan_out}"
        )));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Draws `len` Glorot-uniform samples from a caller-owned stream.
pub fn glorot_uniform_with<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let limit = glorot_limit(fan_in, fan_out)?;
    let dist = Uniform::new_inclusive(-limit, limit)
        .map_err(|e| Error::invalid(format!("glorot interval: {e}")))?;
    Ok((0..len).map(|_| dist.sample(rng)).collect())
}

/// Draws `len` samples uniformly from `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform_init(fan_in: usize, fan_out: usize, len: usize, seed: u64) -> Result<Vec<f64>> {
    glorot_uniform_with(fan_in, fan_out, len, &mut ChaCha8Rng::seed_from_u64(seed))
}
