use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::modality::ProminenceThresholds;
use super::{ActivityPopulation, OutlierError};
use crate::par::{self, Execution};

/// Number of histogram bins shipped to plots and the inspector UI.
pub const HISTOGRAM_BINS: usize = 200;

/// Iterations drawn from one RNG stream.
const BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootlierParams {
    /// Resample size N.
    pub sample_size: usize,
    /// Points trimmed from each tail, k.
    pub trim: usize,
    /// Bootstrap iterations, i.
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub prominence: ProminenceThresholds,
}

impl BootlierParams {
    pub const MIN_ITERATIONS: usize = 1000;

    pub fn validate(&self, population: usize) -> Result<(), OutlierError> {
        if self.sample_size < 2 * self.trim + 2 {
            return Err(OutlierError::InvalidParams(format!(
                "sample size {} must be at least 2k + 2 = {}",
                self.sample_size,
                2 * self.trim + 2
            )));
        }
        if self.iterations < Self::MIN_ITERATIONS {
            return Err(OutlierError::InvalidParams(format!(
                "need at least {} iterations, got {}",
                Self::MIN_ITERATIONS,
                self.iterations
            )));
        }
        self.prominence.validate()?;
        if population < self.sample_size {
            return Err(OutlierError::InsufficientPopulation {
                needed: self.sample_size,
                available: population,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub density: f64,
}

/// Bootstrap distribution of `mean - trimmed mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootlierHistogram {
    /// One statistic per iteration, in iteration order. Not serialized.
    #[serde(skip)]
    pub statistics: Vec<f64>,
    pub sample_count: usize,
    pub population_size: usize,
    pub population_max: u64,
    pub bins: Vec<HistogramBin>,
    pub params: BootlierParams,
}

pub fn bootlier_histogram(
    pop: &ActivityPopulation,
    params: &BootlierParams,
) -> Result<BootlierHistogram, OutlierError> {
    bootlier_histogram_with(pop, params, Execution::default())
}

pub fn bootlier_histogram_with(
    pop: &ActivityPopulation,
    params: &BootlierParams,
    exec: Execution,
) -> Result<BootlierHistogram, OutlierError> {
    params.validate(pop.len())?;
    let values: Vec<u32> = pop
        .entries
        .iter()
        .map(|e| e.count.min(u32::MAX as u64) as u32)
        .collect();
    let statistics = resample_statistics(&values, params, exec);
    Ok(BootlierHistogram {
        sample_count: statistics.len(),
        population_size: values.len(),
        population_max: pop.max().unwrap_or(0),
        bins: bin(&statistics),
        statistics,
        params: *params,
    })
}

fn resample_statistics(values: &[u32], params: &BootlierParams, exec: Execution) -> Vec<f64> {
    let blocks = params.iterations.div_ceil(BLOCK);
    let n = params.sample_size;
    let k = params.trim;
    par::map_range(exec, blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(b as u64);
        let count = BLOCK.min(params.iterations - b * BLOCK);
        let mut sample = vec![0u32; n];
        (0..count)
            .map(|_| {
                for slot in sample.iter_mut() {
                    *slot = values[rng.gen_range(0..values.len())];
                }
                mean_minus_trimmed_mean(&mut sample, k)
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// `mean(sample) - mean(sample without its k smallest and k largest points)`.
pub(crate) fn mean_minus_trimmed_mean(sample: &mut [u32], k: usize) -> f64 {
    sample.sort_unstable();
    let n = sample.len();
    let total: u64 = sample.iter().map(|&v| v as u64).sum();
    let kept: u64 = sample[k..n - k].iter().map(|&v| v as u64).sum();
    total as f64 / n as f64 - kept as f64 / (n - 2 * k) as f64
}

fn bin(stats: &[f64]) -> Vec<HistogramBin> {
    if stats.is_empty() {
        return Vec::new();
    }
    let lo = stats.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = stats.len() as f64;
    if hi <= lo {
        return vec![HistogramBin {
            lower: lo,
            upper: hi,
            count: stats.len(),
            density: 1.0,
        }];
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &s in stats {
        let idx = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: lo + i as f64 * width,
            upper: lo + (i + 1) as f64 * width,
            count,
            density: count as f64 / (n * width),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outliers::ActivityMetric;

    fn params(n: usize, k: usize) -> BootlierParams {
        BootlierParams {
            sample_size: n,
            trim: k,
            iterations: 2000,
            seed: 7,
            prominence: Default::default(),
        }
    }

    #[test]
    fn trimmed_statistic_by_hand() {
        // mean 22/6, trimmed (k=1) mean of {2,3,4,5} = 3.5
        let mut s = [1, 5, 2, 4, 3, 7];
        let stat = mean_minus_trimmed_mean(&mut s, 1);
        assert!((stat - (22.0 / 6.0 - 3.5)).abs() < 1e-12);
    }

    #[test]
    fn identical_values_give_zero_statistics() {
        let pop = ActivityPopulation::from_values(ActivityMetric::ViewsPerDay, &[3; 100]);
        let h = bootlier_histogram(&pop, &params(20, 7)).unwrap();
        assert_eq!(h.sample_count, 2000);
        assert!(h.statistics.iter().all(|s| *s == 0.0));
        assert_eq!(h.bins.len(), 1);
        assert_eq!(h.bins[0].count, 2000);
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let values: Vec<u64> = (0..500).map(|i| 1 + (i * 7919 % 37) as u64).collect();
        let pop = ActivityPopulation::from_values(ActivityMetric::ViewsPerDay, &values);
        let p = BootlierParams {
            iterations: 5000,
            ..params(50, 7)
        };
        let a = bootlier_histogram_with(&pop, &p, Execution::Sequential).unwrap();
        let b = bootlier_histogram_with(&pop, &p, Execution::Parallel).unwrap();
        let c = bootlier_histogram(&pop, &p).unwrap();
        assert_eq!(a.statistics, b.statistics);
        assert_eq!(a, c);
        assert_eq!(a.bins.iter().map(|b| b.count).sum::<usize>(), 5000);
        assert_eq!(a.bins.len(), HISTOGRAM_BINS);
    }

    #[test]
    fn parameter_validation() {
        let pop = ActivityPopulation::from_values(ActivityMetric::ViewsPerDay, &[1; 30]);
        assert!(matches!(
            bootlier_histogram(&pop, &params(50, 3)),
            Err(OutlierError::InsufficientPopulation {
                needed: 50,
                available: 30
            })
        ));
        assert!(matches!(
            bootlier_histogram(&pop, &params(10, 7)),
            Err(OutlierError::InvalidParams(_))
        ));
        let few = BootlierParams {
            iterations: 10,
            ..params(20, 3)
        };
        assert!(matches!(
            bootlier_histogram(&pop, &few),
            Err(OutlierError::InvalidParams(_))
        ));
    }
}
