//! Median, MAD and the Hampel X84 rule.

use super::OutlierError;

/// Converts a MAD into a standard-deviation estimate under normality.
pub const MAD_TO_SD: f64 = 1.4826;

/// Median; even-sized inputs average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64, OutlierError> {
    if values.is_empty() {
        return Err(OutlierError::EmptyPopulation);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(sorted_median(&v))
}

pub(crate) fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Result<f64, OutlierError> {
    let m = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&deviations)
}

/// Upper outlier limit `median + x * 1.4826 * MAD`.
pub fn hampel_limit(median: f64, mad: f64, x: f64) -> f64 {
    median + x * MAD_TO_SD * mad
}

/// Indices of values strictly above the Hampel limit.
pub fn hampel_outliers(values: &[f64], x: f64) -> Result<Vec<usize>, OutlierError> {
    let limit = hampel_limit(median(values)?, mad(values)?, x);
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > limit)
        .map(|(i, _)| i)
        .collect())
}
