use super::ScalingError;
use serde::Serialize;

/// Fit-quality metrics. `None` marks a metric whose denominator vanished:
/// `rmae` when some actual value is zero, `r_squared` and `pearson` when an
/// input is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitMetrics {
    pub mae: f64,
    pub rmae: Option<f64>,
    pub mse: f64,
    pub r_squared: Option<f64>,
    pub pearson: Option<f64>,
}

pub fn fit_metrics(predicted: &[f64], actual: &[f64]) -> Result<FitMetrics, ScalingError> {
    if predicted.len() != actual.len() {
        return Err(ScalingError::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(ScalingError::Empty);
    }
    let n = actual.len() as f64;
    let pairs = || predicted.iter().zip(actual);
    let mae = pairs().map(|(p, a)| (p - a).abs()).sum::<f64>() / n;
    let mse = pairs().map(|(p, a)| (p - a).powi(2)).sum::<f64>() / n;
    let rmae = actual
        .iter()
        .all(|&a| a != 0.0)
        .then(|| pairs().map(|(p, a)| ((p - a) / a).abs()).sum::<f64>() / n);

    let mean_a = actual.iter().sum::<f64>() / n;
    let mean_p = predicted.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean_a).powi(2)).sum();
    let ss_res: f64 = pairs().map(|(p, a)| (a - p).powi(2)).sum();
    let ss_p: f64 = predicted.iter().map(|p| (p - mean_p).powi(2)).sum();
    let cov: f64 = pairs().map(|(p, a)| (p - mean_p) * (a - mean_a)).sum();

    let r_squared = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    let pearson =
        (ss_tot > 0.0 && ss_p > 0.0).then(|| (cov / (ss_p * ss_tot).sqrt()).clamp(-1.0, 1.0));
    Ok(FitMetrics {
        mae,
        rmae,
        mse,
        r_squared,
        pearson,
    })
}
