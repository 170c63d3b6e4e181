//! Kabsch superposition: the proper rotation minimising RMSD between two
//! centred point sets, from the SVD of their cross-covariance.

use super::{Coord, MolError};
use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone)]
pub struct KabschResult {
    /// `rotation * (mobile - centroid(mobile)) + centroid(target)`
    pub aligned: Vec<Coord>,
    /// Row-major 3x3 rotation, det = +1.
    pub rotation: [[f64; 3]; 3],
    /// RMSD between `aligned` and `target`.
    pub rmsd: f64,
    /// Fewer than three points or a collinear/coincident mobile set: only
    /// the translation was applied.
    pub degenerate: bool,
}

/// Relative singular-value floor below which the mobile set counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

fn centroid(points: &[Coord]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::new(p[0], p[1], p[2]);
    }
    c / points.len() as f64
}

pub fn kabsch_align(mobile: &[Coord], target: &[Coord]) -> Result<KabschResult, MolError> {
    let n = mobile.len();
    if n != target.len() {
        return Err(MolError::LengthMismatch(n, target.len()));
    }
    if mobile
        .iter()
        .chain(target)
        .flatten()
        .any(|c| !c.is_finite())
    {
        return Err(MolError::NonFinite);
    }
    if n == 0 {
        return Ok(KabschResult {
            aligned: Vec::new(),
            rotation: identity(),
            rmsd: 0.0,
            degenerate: true,
        });
    }
    let cm = centroid(mobile);
    let ct = centroid(target);
    let p: Vec<Vector3<f64>> = mobile
        .iter()
        .map(|c| Vector3::new(c[0], c[1], c[2]) - cm)
        .collect();
    let q: Vec<Vector3<f64>> = target
        .iter()
        .map(|c| Vector3::new(c[0], c[1], c[2]) - ct)
        .collect();

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (pi, qi) in p.iter().zip(&q) {
        scatter += pi * pi.transpose();
        cross += pi * qi.transpose();
    }
    let mut eig = scatter.symmetric_eigen().eigenvalues.as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    let degenerate = n < 3 || eig[0] <= f64::MIN_POSITIVE || eig[1] <= RANK_TOL * eig[0];

    let rotation = if degenerate {
        Matrix3::identity()
    } else {
        let svd = cross.svd(true, true);
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v_t requested").transpose();
        let mut d = Matrix3::identity();
        if (v * u.transpose()).determinant() < 0.0 {
            let smallest = (0..3)
                .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
                .unwrap();
            d[(smallest, smallest)] = -1.0;
        }
        v * d * u.transpose()
    };

    let mut sq = 0.0;
    let aligned: Vec<Coord> = p
        .iter()
        .zip(target)
        .map(|(pi, t)| {
            let a = rotation * pi + ct;
            sq += (0..3).map(|k| (a[k] - t[k]).powi(2)).sum::<f64>();
            [a[0], a[1], a[2]]
        })
        .collect();
    let mut rot = [[0.0; 3]; 3];
    for (r, row) in rot.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = rotation[(r, c)];
        }
    }
    Ok(KabschResult {
        aligned,
        rotation: rot,
        rmsd: (sq / n as f64).sqrt(),
        degenerate,
    })
}

fn identity() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Coord> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ]
            })
            .collect()
    }

    /// Uniform random rotation from a normalised Gaussian quaternion.
    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / norm);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    fn apply(r: &Matrix3<f64>, pts: &[Coord], t: [f64; 3]) -> Vec<Coord> {
        pts.iter()
            .map(|p| {
                let v = r * Vector3::new(p[0], p[1], p[2]);
                [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
            })
            .collect()
    }

    fn rmsd(a: &[Coord], b: &[Coord]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
            .sum();
        (s / a.len() as f64).sqrt()
    }

    fn as_matrix(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| r[i][j])
    }

    #[test]
    fn identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_cloud(&mut rng, 8);
        let res = kabsch_align(&pts, &pts).unwrap();
        assert!(res.rmsd < 1e-12);
        assert!((as_matrix(&res.rotation) - Matrix3::identity()).norm() < 1e-10);
        assert!(!res.degenerate);
    }

    #[test]
    fn exact_rigid_motion_is_undone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_cloud(&mut rng, 10);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let mobile = apply(&rz, &target, [5.0, 0.0, 0.0]);
        let res = kabsch_align(&mobile, &target).unwrap();
        assert!(res.rmsd <= 1e-10, "rmsd {}", res.rmsd);
        let r = as_matrix(&res.rotation);
        assert!((r - rz.transpose()).norm() < 1e-10);
        assert!((r * rz - Matrix3::identity()).norm() < 1e-10);
    }

    #[test]
    fn reflection_is_not_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_cloud(&mut rng, 12);
        let mirror: Vec<Coord> = target.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let res = kabsch_align(&mirror, &target).unwrap();
        let r = as_matrix(&res.rotation);
        assert!((r.determinant() - 1.0).abs() < 1e-8);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-8);
    }

    #[test]
    fn beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mobile = random_cloud(&mut rng, 10);
        let target = random_cloud(&mut rng, 10);
        let res = kabsch_align(&mobile, &target).unwrap();
        let cm = centroid(&mobile);
        let ct = centroid(&target);
        let centred: Vec<Coord> = mobile
            .iter()
            .map(|p| [p[0] - cm[0], p[1] - cm[1], p[2] - cm[2]])
            .collect();
        for _ in 0..10_000 {
            let r = random_rotation(&mut rng);
            let trial = apply(&r, &centred, [ct[0], ct[1], ct[2]]);
            assert!(res.rmsd <= rmsd(&trial, &target) + 1e-12);
        }
        assert!((res.rmsd - rmsd(&res.aligned, &target)).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_pre_rotation_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(3..15);
            let mobile = random_cloud(&mut rng, n);
            let target = random_cloud(&mut rng, n);
            let base = kabsch_align(&mobile, &target).unwrap();
            let r = as_matrix(&base.rotation);
            assert!((r.determinant() - 1.0).abs() < 1e-8);
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-8);
            let q = random_rotation(&mut rng);
            let rotated = apply(&q, &mobile, [1.0, -2.0, 0.5]);
            let again = kabsch_align(&rotated, &target).unwrap();
            for (a, b) in base.aligned.iter().zip(&again.aligned) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs_translate_only() {
        let two = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let target = [[5.0, 5.0, 5.0], [5.0, 6.0, 5.0]];
        let res = kabsch_align(&two, &target).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.rotation, identity());
        assert_eq!(res.aligned[0], [4.5, 5.5, 5.0]);

        let line: Vec<Coord> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let res = kabsch_align(&line, &random_cloud(&mut rng, 5)).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.rotation, identity());
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        assert!(matches!(
            kabsch_align(&[[0.0; 3]], &[[0.0; 3], [1.0; 3]]),
            Err(MolError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            kabsch_align(&[[f64::NAN, 0.0, 0.0]], &[[0.0; 3]]),
            Err(MolError::NonFinite)
        ));
    }
}
