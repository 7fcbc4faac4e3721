use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::normals::smallest_eigvec;
use crate::cloud::PointCloud;
use crate::{Error, Result};

/// Plane `{x : normal·x + d = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub d: f64,
    /// Inliers of the winning hypothesis.
    pub inlier_mask: Vec<bool>,
}

impl Plane {
    pub fn residual(&self, p: &[f64; 3]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.d
    }

    pub fn num_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// RANSAC plane fit.
///
/// Draws `iters` three-point hypotheses from a seeded stream and keeps the one
/// with the most points within `thresh` (the earliest wins ties), then refits
/// the plane to those inliers by PCA. Because hypotheses come from one stream
/// in order, more iterations never lower the returned inlier count.
pub fn ransac_plane(cloud: &PointCloud, iters: usize, thresh: f64, seed: u64) -> Result<Plane> {
    let pts = &cloud.coords;
    let n = pts.len();
    if n < 3 {
        return Err(Error::invalid(format!("RANSAC needs at least 3 points, got {n}")));
    }
    if iters == 0 || !(thresh > 0.0) {
        return Err(Error::invalid("RANSAC needs iters >= 1 and thresh > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        let (a, b, c) = (Vector3::from(pts[i]), Vector3::from(pts[j]), Vector3::from(pts[k]));
        let cross = (b - a).cross(&(c - a));
        let len = cross.norm();
        let scale = (b - a).norm() * (c - a).norm();
        if len <= 1e-12 * scale.max(1e-300) || len == 0.0 {
            continue;
        }
        let nrm = cross / len;
        let d = -nrm.dot(&a);
        let count = pts
            .iter()
            .filter(|p| (nrm.dot(&Vector3::from(**p)) + d).abs() <= thresh)
            .count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, nrm, d));
        }
    }
    let (_, nrm, d) = best.ok_or_else(|| {
        Error::Degenerate(format!("all {iters} RANSAC samples were collinear"))
    })?;
    let inlier_mask: Vec<bool> = pts
        .iter()
        .map(|p| (nrm.dot(&Vector3::from(*p)) + d).abs() <= thresh)
        .collect();
    let inliers: Vec<Vector3<f64>> = pts
        .iter()
        .zip(&inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| Vector3::from(*p))
        .collect();
    let (normal, d) = match smallest_eigvec(&inliers) {
        Some((mean, mut v)) => {
            if v.dot(&nrm) < 0.0 {
                v = -v;
            }
            (v, -v.dot(&mean))
        }
        None => (nrm, d),
    };
    Ok(Plane {
        normal: [normal.x, normal.y, normal.z],
        d,
        inlier_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn planted(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let n_in = n * 7 / 10;
        let coords = (0..n)
            .map(|i| {
                if i < n_in {
                    [10.0 * rng.random::<f64>(), 10.0 * rng.random::<f64>(), noise.sample(&mut rng)]
                } else {
                    [
                        10.0 * rng.random::<f64>(),
                        10.0 * rng.random::<f64>(),
                        10.0 * rng.random::<f64>() - 5.0,
                    ]
                }
            })
            .collect();
        PointCloud::new(coords)
    }

    #[test]
    fn recovers_planted_plane() {
        let cloud = planted(1, 2000);
        let plane = ransac_plane(&cloud, 200, 0.05, 7).unwrap();
        let angle = plane.normal[2].abs().min(1.0).acos().to_degrees();
        assert!(angle < 2.0, "angle {angle}");
        assert!((plane.normal.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exact_plane_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coords: Vec<[f64; 3]> = (0..300)
            .map(|_| {
                let x = rng.random::<f64>();
                let y = rng.random::<f64>();
                [x, y, 0.3 * x - 0.2 * y + 1.0]
            })
            .collect();
        let cloud = PointCloud::new(coords);
        let plane = ransac_plane(&cloud, 50, 0.01, 3).unwrap();
        assert!(plane.inlier_mask.iter().all(|&b| b));
        for p in &cloud.coords {
            assert!(plane.residual(p).abs() <= 1e-9);
        }
    }

    #[test]
    fn too_few_points() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(ransac_plane(&cloud, 10, 0.1, 0).is_err());
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let cloud = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        assert!(matches!(ransac_plane(&cloud, 20, 0.1, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn inliers_monotone_in_iterations() {
        let cloud = planted(4, 800);
        let mut last = 0;
        for iters in [1, 2, 5, 10, 20, 50, 100] {
            let c = ransac_plane(&cloud, iters, 0.05, 11).unwrap().num_inliers();
            assert!(c >= last, "iters {iters}: {c} < {last}");
            last = c;
        }
    }
}
