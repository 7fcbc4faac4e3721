use std::num::NonZeroUsize;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::PointCloud;
use crate::{Error, Result};

const SIGN_EPS: f64 = 1e-9;

/// PCA normals from the `k` nearest neighbours of every point (the point
/// itself included).
///
/// Each normal is the eigenvector of the smallest covariance eigenvalue,
/// oriented so z ≥ 0 (then x ≥ 0, then y ≥ 0 when the leading component is
/// zero). Returns the cloud with normals plus the number of degenerate
/// neighbourhoods, which receive `(0, 0, 1)`.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<(PointCloud, usize)> {
    let n = cloud.len();
    if k < 3 || n <= k {
        return Err(Error::invalid(format!(
            "normal estimation needs N > k >= 3 (N = {n}, k = {k})"
        )));
    }
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(&cloud.coords);
    let kk = NonZeroUsize::new(k).unwrap();
    let mut degenerate = 0;
    let normals = cloud
        .coords
        .iter()
        .map(|q| {
            let nn = tree.nearest_n::<SquaredEuclidean>(q, kk);
            let pts: Vec<Vector3<f64>> = nn
                .iter()
                .map(|h| Vector3::from(cloud.coords[h.item as usize]))
                .collect();
            match pca_normal(&pts) {
                Some(v) => v,
                None => {
                    degenerate += 1;
                    [0.0, 0.0, 1.0]
                }
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate neighbourhoods during normal estimation");
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok((out, degenerate))
}

/// Smallest-eigenvalue eigenvector of the neighbourhood covariance, sign-resolved.
pub(crate) fn pca_normal(pts: &[Vector3<f64>]) -> Option<[f64; 3]> {
    let (_, v) = smallest_eigvec(pts)?;
    Some(orient(v))
}

/// Returns (centroid, unit eigenvector of the smallest covariance eigenvalue),
/// or `None` when the covariance vanishes.
pub(crate) fn smallest_eigvec(pts: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    if cov.norm() < 1e-18 {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(imin).normalize();
    Some((mean, v))
}

fn orient(v: Vector3<f64>) -> [f64; 3] {
    let flip = if v.z.abs() > SIGN_EPS {
        v.z < 0.0
    } else if v.x.abs() > SIGN_EPS {
        v.x < 0.0
    } else {
        v.y < 0.0
    };
    let v = if flip { -v } else { v };
    [v.x, v.y, v.z]
}
