//! Nonparametric bootstrap over subjects.
//!
//! Replicate `b` draws its indices from a ChaCha stream seeded by a
//! counter-based mix of the master seed and `b`, so the result does not
//! depend on how replicates are scheduled across workers.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy)]
pub struct BootConfig {
    pub replicates: usize,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Largest tolerated fraction of failed replicates.
    pub max_drop_fraction: f64,
    /// Coverage of the percentile intervals.
    pub level: f64,
}

impl Default for BootConfig {
    fn default() -> Self {
        Self { replicates: 500, jobs: None, max_drop_fraction: 0.2, level: 0.95 }
    }
}

/// splitmix64 finalizer
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, replicate as u64))
}

/// Resampling indices of replicate `replicate`.
pub fn resample_indices(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = replicate_rng(seed, replicate);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Runs `f` on a pool of `jobs` threads (or the current pool).
pub fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootSummary {
    pub names: Vec<String>,
    /// Successful replicates, in replicate order.
    pub samples: Vec<Vec<f64>>,
    pub dropped: usize,
    pub total: usize,
    pub sd: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl BootSummary {
    pub fn from_samples(names: Vec<String>, samples: Vec<Vec<f64>>, dropped: usize, level: f64) -> Self {
        let p = names.len();
        let total = samples.len() + dropped;
        let alpha = (1.0 - level) / 2.0;
        let mut sd = Vec::with_capacity(p);
        let mut lower = Vec::with_capacity(p);
        let mut upper = Vec::with_capacity(p);
        for j in 0..p {
            let mut col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            sd.push(std_dev(&col));
            col.sort_by(f64::total_cmp);
            lower.push(quantile_sorted(&col, alpha));
            upper.push(quantile_sorted(&col, 1.0 - alpha));
        }
        Self { names, samples, dropped, total, sd, lower, upper, level }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sample covariance of parameters `a` and `b`.
    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        let m = self.samples.len();
        if m < 2 {
            return f64::NAN;
        }
        let ma = self.samples.iter().map(|s| s[a]).sum::<f64>() / m as f64;
        let mb = self.samples.iter().map(|s| s[b]).sum::<f64>() / m as f64;
        self.samples.iter().map(|s| (s[a] - ma) * (s[b] - mb)).sum::<f64>() / (m - 1) as f64
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let h = (x.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Generic bootstrap driver. `f` maps resampling indices to a parameter
/// vector; replicates returning an error are dropped and counted.
pub fn run_bootstrap<F>(n: usize, config: &BootConfig, seed: u64, names: Vec<String>, f: F) -> Result<BootSummary>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::Config("cannot bootstrap an empty cohort".into()));
    }
    let b = config.replicates;
    let results: Vec<Option<Vec<f64>>> = with_pool(config.jobs, || {
        (0..b)
            .into_par_iter()
            .map(|rep| {
                let idx = resample_indices(n, seed, rep);
                match f(&idx) {
                    Ok(v) if v.iter().all(|x| x.is_finite()) => Some(v),
                    Ok(_) => None,
                    Err(e) => {
                        log::debug!("bootstrap replicate {rep} dropped: {e}");
                        None
                    }
                }
            })
            .collect()
    })?;
    let dropped = results.iter().filter(|r| r.is_none()).count();
    if b > 0 && dropped as f64 > config.max_drop_fraction * b as f64 {
        return Err(Error::TooManyDropped { dropped, total: b });
    }
    let samples = results.into_iter().flatten().collect();
    Ok(BootSummary::from_samples(names, samples, dropped, config.level))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_subjects_give_zero_spread() {
        let data = vec![3.5; 40];
        let cfg = BootConfig { replicates: 60, ..Default::default() };
        let s = run_bootstrap(data.len(), &cfg, 9, vec!["mean".into()], |idx| {
            Ok(vec![idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64])
        })
        .unwrap();
        assert_eq!(s.sd, vec![0.0]);
        assert_eq!(s.lower, vec![3.5]);
        assert_eq!(s.upper, vec![3.5]);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let data: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let run = |jobs| {
            let cfg = BootConfig { replicates: 64, jobs: Some(jobs), ..Default::default() };
            run_bootstrap(data.len(), &cfg, 123, vec!["m".into()], |idx| {
                Ok(vec![idx.iter().map(|&i| data[i]).sum::<f64>()])
            })
            .unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn too_many_failures_is_error() {
        let cfg = BootConfig { replicates: 50, ..Default::default() };
        let r = run_bootstrap(10, &cfg, 1, vec!["x".into()], |idx| {
            if idx[0] < 5 {
                Err(Error::NoEvents)
            } else {
                Ok(vec![1.0])
            }
        });
        assert!(matches!(r, Err(Error::TooManyDropped { .. })));
    }

    #[test]
    fn quantiles_interpolate() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&x, 0.5), 3.0);
        assert_eq!(quantile_sorted(&x, 0.125), 1.5);
        assert_eq!(std_dev(&[2.0, 4.0]), 2f64.sqrt());
    }
}
