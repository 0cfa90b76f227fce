//! Balanced subsampling of two groups.
//!
//! Trial `t` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `t`, so
//! trials are independent of each other and of thread scheduling. Within a
//! trial each group is sampled without replacement by a partial
//! Fisher-Yates shuffle over that group's outcomes in input order, first
//! group first. Swap partners are drawn as `gen_range(i as u64..len as u64)`
//! so the stream does not depend on pointer width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_known, MetricsError, Outcome};
use crate::dataset::Group;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleSummary {
    pub pair: (String, String),
    pub n_per_group: usize,
    pub trials: usize,
    pub seed: u64,
    pub per_trial: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials divided by the square root of
    /// the trial count.
    pub standard_error: f64,
    /// A single trial has no spread; its error is reported as 0.
    pub degenerate: bool,
}

fn sample_correct(pool: &mut [bool], n: usize, rng: &mut ChaCha8Rng) -> usize {
    let len = pool.len() as u64;
    for i in 0..n {
        let j = rng.gen_range(i as u64..len) as usize;
        pool.swap(i, j);
    }
    pool[..n].iter().filter(|&&c| c).count()
}

/// Mean and standard error of the overall disparity `first - second` over
/// `trials` balanced subsamples of `n_per_group` outcomes per group.
pub fn balanced_resample(
    outcomes: &[Outcome],
    first: Group,
    second: Group,
    n_per_group: usize,
    trials: usize,
    seed: u64,
) -> Result<ResampleSummary, MetricsError> {
    check_known(first)?;
    check_known(second)?;
    if first.attribute() != second.attribute() || first == second {
        return Err(MetricsError::MismatchedGroups);
    }
    if trials == 0 {
        return Err(MetricsError::NoTrials);
    }
    let attribute = first.attribute();
    let pool = |g: Group| -> Result<Vec<bool>, MetricsError> {
        let p: Vec<bool> = outcomes
            .iter()
            .filter(|o| o.group(attribute) == g)
            .map(|o| o.correct)
            .collect();
        if p.len() < n_per_group || n_per_group == 0 {
            return Err(MetricsError::InsufficientGroupSize {
                group: g.label().to_string(),
                available: p.len(),
                needed: n_per_group.max(1),
            });
        }
        Ok(p)
    };
    let (pool_a, pool_b) = (pool(first)?, pool(second)?);

    let per_trial: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let ka = sample_correct(&mut pool_a.clone(), n_per_group, &mut rng);
            let kb = sample_correct(&mut pool_b.clone(), n_per_group, &mut rng);
            ka as f64 / n_per_group as f64 - kb as f64 / n_per_group as f64
        })
        .collect();
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let standard_error = if trials > 1 {
        let var = per_trial.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        var.sqrt() / (trials as f64).sqrt()
    } else {
        0.0
    };
    Ok(ResampleSummary {
        pair: (first.label().to_string(), second.label().to_string()),
        n_per_group,
        trials,
        seed,
        per_trial,
        mean,
        standard_error,
        degenerate: trials == 1,
    })
}
