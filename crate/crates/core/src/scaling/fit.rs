use super::{ScalingError, ScalingLawFit, ScalingObservation};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeSet;

/// Six free parameters, twice over.
pub const MIN_OBSERVATIONS: usize = 12;
/// Starting exponents tried for each term; all combinations are run.
pub const START_EXPONENTS: [f64; 5] = [-0.05, -0.25, -0.5, -1.0, -1.5];
pub const MAX_ITERATIONS: usize = 1000;
/// Box for the exponents and log-amplitudes. A term the data cannot see
/// otherwise runs off to infinite amplitude and exponent.
pub const EXPONENT_BOUNDS: (f64, f64) = (-10.0, 2.0);
pub const LOG_AMPLITUDE_BOUNDS: (f64, f64) = (-50.0, 50.0);

fn project(p: &mut [f64; 6]) {
    for k in 0..3 {
        p[2 * k] = p[2 * k].clamp(LOG_AMPLITUDE_BOUNDS.0, LOG_AMPLITUDE_BOUNDS.1);
        p[2 * k + 1] = p[2 * k + 1].clamp(EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Observations before this step are dropped.
    pub min_step: u64,
    /// Only steps divisible by this are kept.
    pub stride: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_step: 200_000,
            stride: 10_000,
        }
    }
}

/// Unknowns are `[ln a_m, b_m, ln a_s, b_s, ln a_c, b_c]`.
struct Problem {
    /// Per observation, the natural log of m, s and m*s.
    logs: Vec<[f64; 3]>,
    y: Vec<f64>,
}

impl Problem {
    fn residuals(&self, p: &[f64; 6]) -> DVector<f64> {
        DVector::from_iterator(
            self.y.len(),
            self.logs.iter().zip(&self.y).map(|(lx, y)| {
                (0..3)
                    .map(|k| (p[2 * k] + p[2 * k + 1] * lx[k]).exp())
                    .sum::<f64>()
                    - y
            }),
        )
    }

    fn jacobian(&self, p: &[f64; 6]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.y.len(), 6);
        for (i, lx) in self.logs.iter().enumerate() {
            for k in 0..3 {
                let term = (p[2 * k] + p[2 * k + 1] * lx[k]).exp();
                j[(i, 2 * k)] = term;
                j[(i, 2 * k + 1)] = term * lx[k];
            }
        }
        j
    }

    /// Amplitudes for fixed exponents by linear least squares, floored so
    /// their logs exist.
    fn initial_amplitudes(&self, betas: [f64; 3]) -> [f64; 3] {
        let a = DMatrix::from_fn(self.y.len(), 3, |i, k| (betas[k] * self.logs[i][k]).exp());
        let y = DVector::from_column_slice(&self.y);
        let scale = self
            .y
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        let solved = a.svd(true, true).solve(&y, 1e-14).ok();
        let mut out = [scale / 3.0; 3];
        if let Some(x) = solved {
            for k in 0..3 {
                if x[k].is_finite() {
                    out[k] = x[k].max(1e-6 * scale);
                }
            }
        }
        out
    }

    /// Levenberg-Marquardt with Marquardt scaling; the damped step is solved
    /// as an augmented least-squares system for conditioning.
    fn solve(&self, start: [f64; 6]) -> (f64, [f64; 6], usize, bool) {
        let mut p = start;
        project(&mut p);
        let mut r = self.residuals(&p);
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let n = self.y.len();
        for iter in 1..=MAX_ITERATIONS {
            let j = self.jacobian(&p);
            let grad = j.transpose() * &r;
            if grad.amax() < 1e-15 * (1.0 + cost) {
                return (cost, p, iter, true);
            }
            let diag: Vec<f64> = (0..6)
                .map(|c| j.column(c).norm_squared().max(1e-30))
                .collect();
            let mut improved = false;
            while lambda < 1e16 {
                let mut aug = DMatrix::zeros(n + 6, 6);
                aug.view_mut((0, 0), (n, 6)).copy_from(&j);
                for c in 0..6 {
                    aug[(n + c, c)] = (lambda * diag[c]).sqrt();
                }
                let mut rhs = DVector::zeros(n + 6);
                rhs.rows_mut(0, n).copy_from(&(-&r));
                let Ok(step) = aug.svd(true, true).solve(&rhs, 1e-300) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut trial = p;
                for c in 0..6 {
                    trial[c] += step[c];
                }
                project(&mut trial);
                let trial_r = self.residuals(&trial);
                let trial_cost = trial_r.norm_squared();
                if trial_cost.is_finite() && trial_cost < cost {
                    let rel_drop = (cost - trial_cost) / cost.max(1e-300);
                    let moved = (0..6).map(|c| (trial[c] - p[c]).abs()).fold(0.0, f64::max);
                    let step_small =
                        moved < 1e-14 * (1.0 + p.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    p = trial;
                    r = trial_r;
                    cost = trial_cost;
                    lambda = (lambda / 3.0).max(1e-15);
                    improved = true;
                    if rel_drop < 1e-15 || step_small || cost < 1e-30 {
                        return (cost, p, iter, true);
                    }
                    break;
                }
                lambda *= 2.0;
            }
            if !improved {
                // no downhill step at any damping: a stationary point
                return (cost, p, iter, true);
            }
        }
        (cost, p, MAX_ITERATIONS, false)
    }
}

/// Least-squares fit over the filtered observations, best of all
/// multi-start runs (ties go to the earliest start).
pub fn fit(
    observations: &[ScalingObservation],
    opts: &FitOptions,
) -> Result<ScalingLawFit, ScalingError> {
    let kept: Vec<&ScalingObservation> = observations
        .iter()
        .filter(|o| o.s >= opts.min_step as f64)
        .filter(|o| {
            opts.stride <= 1 || (o.s.fract() == 0.0 && (o.s as u64).is_multiple_of(opts.stride))
        })
        .collect();
    if kept.len() < MIN_OBSERVATIONS {
        return Err(ScalingError::InsufficientData(format!(
            "{} observations after filtering, need {MIN_OBSERVATIONS}",
            kept.len()
        )));
    }
    let sizes: BTreeSet<u64> = kept.iter().map(|o| o.m.to_bits()).collect();
    if sizes.len() < 2 {
        return Err(ScalingError::InsufficientData(
            "all observations share one model size, so size and compute terms are not separable"
                .into(),
        ));
    }
    if let Some(o) = kept
        .iter()
        .find(|o| !(o.m > 0.0 && o.s > 0.0 && o.loss.is_finite()))
    {
        return Err(ScalingError::Domain { m: o.m, s: o.s });
    }
    let problem = Problem {
        logs: kept
            .iter()
            .map(|o| [o.m.ln(), o.s.ln(), o.c().ln()])
            .collect(),
        y: kept.iter().map(|o| o.loss).collect(),
    };

    let mut best: Option<(f64, [f64; 6], usize, bool)> = None;
    for &bm in &START_EXPONENTS {
        for &bs in &START_EXPONENTS {
            for &bc in &START_EXPONENTS {
                let betas = [bm, bs, bc];
                let alphas = problem.initial_amplitudes(betas);
                let start = [alphas[0].ln(), bm, alphas[1].ln(), bs, alphas[2].ln(), bc];
                let run = problem.solve(start);
                if best.as_ref().is_none_or(|b| run.0 < b.0) {
                    best = Some(run);
                }
            }
        }
    }
    let (cost, p, iterations, converged) = best.expect("at least one start");
    Ok(ScalingLawFit {
        alpha_m: p[0].exp(),
        beta_m: p[1],
        alpha_s: p[2].exp(),
        beta_s: p[3],
        alpha_c: p[4].exp(),
        beta_c: p[5],
        residual: cost.sqrt(),
        converged,
        iterations,
    })
}
