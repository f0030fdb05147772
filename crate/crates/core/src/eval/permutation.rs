use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Largest sample size tested by full enumeration.
pub const EXACT_MAX_N: usize = 20;

const TIE_TOL: f64 = 1e-12;

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Data("permutation test needs at least one pair".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

fn flipped_sum(d: &[f64], mut bits: impl FnMut(usize) -> bool) -> f64 {
    d.iter().enumerate().map(|(i, &x)| if bits(i) { -x } else { x }).sum()
}

/// Two-sided paired sign-flip test over all `2^n` sign patterns.
pub fn permutation_test_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = differences(a, b)?;
    if d.len() > 30 {
        return Err(Error::Config(format!("exact permutation test over n={} pairs is intractable", d.len())));
    }
    let observed = d.iter().sum::<f64>().abs();
    let total = 1u64 << d.len();
    let extreme = (0..total)
        .filter(|mask| flipped_sum(&d, |i| mask >> i & 1 == 1).abs() >= observed - TIE_TOL * observed.max(1.0))
        .count();
    Ok(extreme as f64 / total as f64)
}

/// Monte-Carlo variant: `(1 + #extreme) / (1 + iters)`.
pub fn permutation_test_monte_carlo(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64> {
    let d = differences(a, b)?;
    if iters == 0 {
        return Err(Error::Config("permutation test needs at least one iteration".into()));
    }
    let observed = d.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extreme = (0..iters)
        .filter(|_| flipped_sum(&d, |_| rng.random::<bool>()).abs() >= observed - TIE_TOL * observed.max(1.0))
        .count();
    Ok((1 + extreme) as f64 / (1 + iters) as f64)
}

/// Exact for `n <= EXACT_MAX_N`, Monte-Carlo otherwise.
pub fn permutation_test(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64> {
    if a.len() <= EXACT_MAX_N {
        permutation_test_exact(a, b)
    } else {
        permutation_test_monte_carlo(a, b, iters, seed)
    }
}
