use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::modality::kde;
use super::{ActivityPopulation, OutlierError};

/// Minimum population for a meaningful probe.
pub const MIN_PROBE_POPULATION: usize = 20;
/// Q-Q correlation below which data is declared non-normal.
pub const QQ_CORRELATION_MIN: f64 = 0.95;
const MAX_PLOT_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormalityVerdict {
    Normal,
    NonNormal,
}

/// Plot-ready density and Q-Q data against a fitted normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityProbe {
    pub mean: f64,
    pub sd: f64,
    /// `[x, density]`.
    pub density: Vec<[f64; 2]>,
    /// `[theoretical quantile, sample quantile]`.
    pub qq: Vec<[f64; 2]>,
    pub qq_correlation: Option<f64>,
    pub verdict: NormalityVerdict,
}

pub fn normality_probe(pop: &ActivityPopulation) -> Result<NormalityProbe, OutlierError> {
    let values: Vec<f64> = pop.values().into_iter().map(|v| v as f64).collect();
    probe_values(&values)
}

pub(crate) fn probe_values(values: &[f64]) -> Result<NormalityProbe, OutlierError> {
    if values.len() < MIN_PROBE_POPULATION {
        return Err(OutlierError::InsufficientPopulation {
            needed: MIN_PROBE_POPULATION,
            available: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();

    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    // Blom plotting positions
    let theoretical: Vec<f64> = (0..n)
        .map(|i| std_normal.inverse_cdf((i as f64 + 1.0 - 0.375) / (n as f64 + 0.25)))
        .collect();
    let qq_correlation = correlation(&theoretical, &sorted);
    let verdict = match qq_correlation {
        Some(r) if r >= QQ_CORRELATION_MIN => NormalityVerdict::Normal,
        _ => NormalityVerdict::NonNormal,
    };

    let stride = n.div_ceil(MAX_PLOT_POINTS);
    let qq = theoretical
        .iter()
        .zip(&sorted)
        .step_by(stride)
        .map(|(t, s)| [mean + sd * t, *s])
        .collect();
    let density = match kde(&sorted) {
        Some(k) => {
            let stride = k.grid.len().div_ceil(512);
            k.grid
                .iter()
                .zip(&k.density)
                .step_by(stride)
                .map(|(x, d)| [*x, *d])
                .collect()
        }
        None => vec![[sorted[0], 1.0]],
    };
    Ok(NormalityProbe {
        mean,
        sd,
        density,
        qq,
        qq_correlation,
        verdict,
    })
}

/// Pearson correlation; `None` when either side has no variance.
pub(crate) fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}
