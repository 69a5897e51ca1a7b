//! Automated modality scoring of Bootlier statistics: a Gaussian KDE with a
//! Silverman bandwidth, then peak counting by topographic prominence.

use serde::{Deserialize, Serialize};

use super::bootlier::BootlierHistogram;
use super::OutlierError;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MAX_GRID: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProminenceThresholds {
    /// Relative prominence above which a second peak means MULTIMODAL.
    pub multimodal: f64,
    /// Relative prominence above which a second peak means NOISY.
    pub noisy: f64,
}

impl Default for ProminenceThresholds {
    fn default() -> Self {
        ProminenceThresholds {
            multimodal: 0.05,
            noisy: 0.01,
        }
    }
}

impl ProminenceThresholds {
    pub fn validate(&self) -> Result<(), OutlierError> {
        let ok = |r: f64| r > 0.0 && r < 1.0;
        if ok(self.multimodal) && ok(self.noisy) && self.noisy <= self.multimodal {
            Ok(())
        } else {
            Err(OutlierError::InvalidParams(format!(
                "prominence ratios must satisfy 0 < noisy <= multimodal < 1, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModalityVerdict {
    Unimodal,
    Noisy,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: f64,
    pub density: f64,
    pub prominence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub verdict: ModalityVerdict,
    pub peak_count: usize,
    pub bandwidth: f64,
    /// Every local maximum, with its absolute prominence.
    pub peaks: Vec<Peak>,
    /// Density curve as `[x, density]` pairs, thinned for plotting.
    pub curve: Vec<[f64; 2]>,
}

/// Gaussian kernel density estimate evaluated on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Silverman's rule, `0.9 * min(sd, IQR/1.34) * n^(-1/5)`, falling back to the
/// standard deviation when the IQR collapses.
pub(crate) fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Mean spacing between adjacent distinct values in the central 90% of the data.
///
/// Bootlier statistics of small integer counts live on a lattice; a kernel
/// narrower than the lattice pitch turns every lattice point into a peak.
pub(crate) fn lattice_pitch(sorted: &[f64]) -> f64 {
    let lo = quantile(sorted, 0.05);
    let hi = quantile(sorted, 0.95);
    let mut distinct = 0usize;
    let mut last = f64::NAN;
    for &v in sorted.iter().filter(|v| **v >= lo && **v <= hi) {
        if v != last {
            distinct += 1;
            last = v;
        }
    }
    if distinct < 2 {
        0.0
    } else {
        (hi - lo) / (distinct - 1) as f64
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// KDE of `samples`; `None` when the data has no spread.
pub fn kde(samples: &[f64]) -> Option<Kde> {
    kde_with_floor(samples, 0.0)
}

/// KDE whose bandwidth is at least `min_bandwidth`.
pub(crate) fn kde_with_floor(samples: &[f64], min_bandwidth: f64) -> Option<Kde> {
    if samples.len() < 2 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    if hi <= lo {
        return None;
    }
    let h = silverman_bandwidth(&sorted)
        .max(lattice_pitch(&sorted))
        .max(min_bandwidth);
    if h.is_nan() || h <= 0.0 {
        return None;
    }
    Some(binned_kde(&sorted, h, lo - 4.0 * h, hi + 4.0 * h))
}

/// Linear binning onto a grid followed by a discrete convolution with the kernel.
fn binned_kde(samples: &[f64], h: f64, lo: f64, hi: f64) -> Kde {
    let span = hi - lo;
    let grid_len = ((span / (h / 4.0)).ceil() as usize + 1).clamp(512, MAX_GRID);
    let step = span / (grid_len - 1) as f64;

    let mut mass = vec![0.0f64; grid_len];
    for &s in samples {
        let pos = (s - lo) / step;
        let i = (pos.floor() as usize).min(grid_len - 2);
        let frac = pos - i as f64;
        mass[i] += 1.0 - frac;
        mass[i + 1] += frac;
    }

    let radius = ((5.0 * h / step).ceil() as usize).max(1);
    let weights: Vec<f64> = (0..=radius)
        .map(|j| {
            let u = j as f64 * step / h;
            INV_SQRT_2PI * (-0.5 * u * u).exp()
        })
        .collect();
    let norm = samples.len() as f64 * h;
    let density: Vec<f64> = (0..grid_len)
        .map(|i| {
            let from = i.saturating_sub(radius);
            let to = (i + radius).min(grid_len - 1);
            (from..=to).map(|j| mass[j] * weights[i.abs_diff(j)]).sum::<f64>() / norm
        })
        .collect();
    let grid = (0..grid_len).map(|i| lo + i as f64 * step).collect();
    Kde {
        bandwidth: h,
        grid,
        density,
    }
}

/// Local maxima of `y` with their topographic prominence.
pub(crate) fn find_peaks(x: &[f64], y: &[f64]) -> Vec<Peak> {
    let n = y.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            // walk across a plateau
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let mid = (i + j) / 2;
                peaks.push(Peak {
                    x: x[mid],
                    density: y[mid],
                    prominence: prominence(y, i, j),
                });
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn prominence(y: &[f64], left: usize, right: usize) -> f64 {
    let height = y[left];
    let mut left_min = height;
    for k in (0..left).rev() {
        if y[k] > height {
            break;
        }
        left_min = left_min.min(y[k]);
    }
    let mut right_min = height;
    for &v in &y[right + 1..] {
        if v > height {
            break;
        }
        right_min = right_min.min(v);
    }
    height - left_min.max(right_min)
}

/// Scores the shape of a Bootlier histogram.
///
/// Counts are integers, so every statistic is a combination of multiples of
/// `1/N` and `1/(N - 2k)`; the kernel is never narrower than the coarser of
/// the two, or single lattice points would read as separate modes.
pub fn modality(hist: &BootlierHistogram, thresholds: &ProminenceThresholds) -> Modality {
    let kept = hist.params.sample_size.saturating_sub(2 * hist.params.trim).max(1);
    modality_with_floor(&hist.statistics, thresholds, 1.0 / kept as f64)
}

#[cfg(test)]
fn modality_of(samples: &[f64], thresholds: &ProminenceThresholds) -> Modality {
    modality_with_floor(samples, thresholds, 0.0)
}

pub(crate) fn modality_with_floor(samples: &[f64], thresholds: &ProminenceThresholds, min_bandwidth: f64) -> Modality {
    let Some(kde) = kde_with_floor(samples, min_bandwidth) else {
        let x = samples.first().copied().unwrap_or(0.0);
        return Modality {
            verdict: ModalityVerdict::Unimodal,
            peak_count: 1,
            bandwidth: 0.0,
            peaks: vec![Peak {
                x,
                density: f64::INFINITY,
                prominence: f64::INFINITY,
            }],
            curve: vec![[x, 1.0]],
        };
    };
    let peaks = find_peaks(&kde.grid, &kde.density);
    let top = kde.density.iter().copied().fold(0.0, f64::max);
    let above = |ratio: f64| peaks.iter().filter(|p| p.prominence >= ratio * top).count();
    let major = above(thresholds.multimodal);
    let minor = above(thresholds.noisy);
    let (verdict, peak_count) = if major > 1 {
        (ModalityVerdict::Multimodal, major)
    } else if minor > 1 {
        (ModalityVerdict::Noisy, minor)
    } else {
        (ModalityVerdict::Unimodal, 1)
    };
    let stride = kde.grid.len().div_ceil(512);
    let curve = kde
        .grid
        .iter()
        .zip(&kde.density)
        .step_by(stride)
        .map(|(x, d)| [*x, *d])
        .collect();
    Modality {
        verdict,
        peak_count,
        bandwidth: kde.bandwidth,
        peaks,
        curve,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_samples(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn constant_statistics_are_unimodal() {
        let m = modality_of(&[0.0; 1000], &Default::default());
        assert_eq!(m.verdict, ModalityVerdict::Unimodal);
        assert_eq!(m.peak_count, 1);
    }

    #[test]
    fn single_gaussian_is_unimodal() {
        for seed in 0..5 {
            let m = modality_of(&normal_samples(50_000, 0.0, 1.0, seed), &Default::default());
            assert_eq!(m.verdict, ModalityVerdict::Unimodal, "seed {seed}: {:?}", m.peaks);
        }
    }

    #[test]
    fn separated_clusters_are_multimodal() {
        let mut s = normal_samples(25_000, 0.0, 1.0, 1);
        s.extend(normal_samples(25_000, 8.0, 1.0, 2));
        let m = modality_of(&s, &Default::default());
        assert_eq!(m.verdict, ModalityVerdict::Multimodal);
        assert_eq!(m.peak_count, 2);
    }

    #[test]
    fn light_contamination_is_noisy() {
        let mut s = normal_samples(48_500, 0.0, 1.0, 3);
        s.extend(normal_samples(1_500, 10.0, 1.0, 4));
        let m = modality_of(&s, &Default::default());
        assert_eq!(m.verdict, ModalityVerdict::Noisy, "{:?}", m.peaks);
        assert_eq!(m.peak_count, 2);
    }

    #[test]
    fn kde_integrates_to_one() {
        let k = kde(&normal_samples(10_000, 2.0, 0.5, 9)).unwrap();
        let step = k.grid[1] - k.grid[0];
        let area: f64 = k.density.iter().sum::<f64>() * step;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn prominence_of_simple_profile() {
        let y = [0.0, 1.0, 0.2, 0.5, 0.0];
        let x: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let p = find_peaks(&x, &y);
        assert_eq!(p.len(), 2);
        assert!((p[0].prominence - 1.0).abs() < 1e-12);
        assert!((p[1].prominence - 0.3).abs() < 1e-12);
    }

    #[test]
    fn thresholds_validate() {
        assert!(ProminenceThresholds::default().validate().is_ok());
        assert!(ProminenceThresholds {
            multimodal: 0.01,
            noisy: 0.05
        }
        .validate()
        .is_err());
    }
}
