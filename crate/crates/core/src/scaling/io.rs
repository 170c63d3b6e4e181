use super::{evaluate, ScalingError, ScalingLawFit, ScalingObservation};
use crate::trainer::LossLogRow;
use std::fs;
use std::path::Path;

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScalingError {
    ScalingError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One observation per logged step (step 0 rows are skipped), using `loss_total`.
pub fn observations_from_log(
    rows: &[LossLogRow],
    params_millions: f64,
) -> Result<Vec<ScalingObservation>, ScalingError> {
    rows.iter()
        .filter(|r| r.step > 0)
        .map(|r| ScalingObservation::new(params_millions, r.step as f64, r.loss_total))
        .collect()
}

pub fn write_fit(fit: &ScalingLawFit, path: &Path) -> Result<(), ScalingError> {
    let text = serde_json::to_string_pretty(fit).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_fit(path: &Path) -> Result<ScalingLawFit, ScalingError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// `step,actual,predicted` for every observation, in input order.
pub fn write_predictions(
    fit: &ScalingLawFit,
    obs: &[ScalingObservation],
    path: &Path,
) -> Result<(), ScalingError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["step", "actual", "predicted"])
        .map_err(|e| io_err(path, e))?;
    for o in obs {
        let predicted = evaluate(fit, o.m, o.s)?;
        w.write_record([o.s.to_string(), o.loss.to_string(), predicted.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        let mut f =
            ScalingLawFit::from_coefficients([2.66, 1.848, 0.588], [-1.137, -0.225, -1.479]);
        f.residual = 1.25e-9;
        write_fit(&f, &path).unwrap();
        assert_eq!(read_fit(&path).unwrap(), f);
    }

    #[test]
    fn predictions_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let f = ScalingLawFit::from_coefficients([1.0, 0.0, 0.0], [-1.0, -1.0, -1.0]);
        let obs = [ScalingObservation::new(2.0, 10.0, 0.4).unwrap()];
        write_predictions(&f, &obs, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "step,actual,predicted\n10,0.4,0.5\n"
        );
    }
}
