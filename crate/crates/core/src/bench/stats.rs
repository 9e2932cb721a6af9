use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Case-insensitive substring containment of `expected` in `response`.
/// An empty expected answer never matches.
pub fn match_answer(response: &str, expected: &str) -> bool {
    let expected = expected.trim();
    if expected.is_empty() {
        return false;
    }
    response.to_lowercase().contains(&expected.to_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Two-sided standard normal quantile for `confidence` (1.959964 at 0.95).
pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence must be in (0, 1), got {confidence}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, confidence: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "wilson interval needs n > 0".into(),
        ));
    }
    if successes > n {
        return Err(Error::InvalidParameter(format!(
            "{successes} successes out of {n}"
        )));
    }
    let z = z_for_confidence(confidence)?;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    // the bounds are exactly 0 and 1 at the extremes
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    Ok(Interval { lo, hi })
}

/// Percentile bootstrap interval of the mean of `outcomes`, resampling
/// indices with replacement from a ChaCha8 stream seeded by `seed`.
///
/// The bounds are order statistics `lo = m[round(B * a / 2)]` and
/// `hi = m[B - 1 - round(B * a / 2)]` of the sorted resample means, where
/// `a = 1 - confidence`.
pub fn bootstrap_ci(
    outcomes: &[bool],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<Interval> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("bootstrap outcomes".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter("resamples must be positive".into()));
    }
    z_for_confidence(confidence)?;
    let n = outcomes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = ((1.0 - confidence) / 2.0 * resamples as f64).round() as usize;
    let tail = tail.min((resamples - 1) / 2);
    Ok(Interval {
        lo: means[tail],
        hi: means[resamples - 1 - tail],
    })
}
