use crate::tensor::{dot, Matrix};
use crate::{Error, Result};

/// Weighted softmax cross-entropy over negative cosine distances to fixed
/// centroids, averaged over points.
///
/// Features and centroids are assumed unit-norm, so the cosine distance is
/// `1 − f·μ`. Returns the loss and its gradient with respect to `features`;
/// centroids receive no gradient.
pub fn cluster_loss(features: &Matrix, labels: &[u32], centroids: &Matrix, weights: &[f64]) -> Result<(f64, Matrix)> {
    let (n, d) = (features.rows(), features.cols());
    let k = centroids.rows();
    if labels.len() != n {
        return Err(Error::shape("labels do not match features"));
    }
    if centroids.cols() != d {
        return Err(Error::shape("feature and centroid dimensions differ"));
    }
    if weights.len() != k {
        return Err(Error::shape("one weight per centroid is required"));
    }
    let mut grad = Matrix::zeros(n, d);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for i in 0..n {
        let f = features.row(i);
        let l = labels[i] as usize;
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for K={k}")));
        }
        for (t, mu) in centroids.iter_rows().enumerate() {
            logits[t] = dot(f, mu) - 1.0;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for t in 0..k {
            probs[t] = (logits[t] - m).exp();
            z += probs[t];
        }
        probs.iter_mut().for_each(|p| *p /= z);
        let w = weights[l];
        total += w * (m + z.ln() - logits[l]);
        let scale = w * inv_n;
        let g = grad.row_mut(i);
        for (t, mu) in centroids.iter_rows().enumerate() {
            let c = scale * (probs[t] - if t == l { 1.0 } else { 0.0 });
            if c != 0.0 {
                g.iter_mut().zip(mu).for_each(|(gv, mv)| *gv += c * mv);
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// The four cluster-loss terms of the two-pathway objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPathwayLoss {
    /// Same-pathway terms: `(f'₁, l¹, μ¹)` and `(f'₂, l², μ²)`.
    pub same: [f64; 2],
    /// Cross-pathway terms: `(f'₁, l², μ²)` and `(f'₂, l¹, μ¹)`.
    pub cross: [f64; 2],
    pub grad: [Matrix; 2],
}

impl TwoPathwayLoss {
    pub fn l1(&self) -> f64 {
        self.same[0] + self.same[1]
    }

    pub fn l2(&self) -> f64 {
        self.cross[0] + self.cross[1]
    }

    pub fn total(&self) -> f64 {
        self.l1() + self.l2()
    }
}

/// Per-pathway labels, centroids and class weights.
#[derive(Debug, Clone, Copy)]
pub struct PathwayTargets<'a> {
    pub labels: &'a [u32],
    pub centroids: &'a Matrix,
    pub weights: &'a [f64],
}

/// Same-pathway plus cross-pathway cluster losses, with the gradient
/// accumulated into both pathway feature tensors.
pub fn two_pathway_loss(
    f1: &Matrix,
    f2: &Matrix,
    t1: PathwayTargets<'_>,
    t2: PathwayTargets<'_>,
) -> Result<TwoPathwayLoss> {
    let (a, mut g1) = cluster_loss(f1, t1.labels, t1.centroids, t1.weights)?;
    let (b, mut g2) = cluster_loss(f2, t2.labels, t2.centroids, t2.weights)?;
    let (c, g1x) = cluster_loss(f1, t2.labels, t2.centroids, t2.weights)?;
    let (d, g2x) = cluster_loss(f2, t1.labels, t1.centroids, t1.weights)?;
    g1.as_mut_slice().iter_mut().zip(g1x.as_slice()).for_each(|(x, y)| *x += y);
    g2.as_mut_slice().iter_mut().zip(g2x.as_slice()).for_each(|(x, y)| *x += y);
    Ok(TwoPathwayLoss {
        same: [a, b],
        cross: [c, d],
        grad: [g1, g2],
    })
}

/// Backward of row-wise L2 normalization `y = x/‖x‖`. Zero rows pass no
/// gradient.
pub(crate) fn normalize_rows_backward(raw: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let x = raw.row(i);
        let nrm = dot(x, x).sqrt();
        if nrm == 0.0 {
            continue;
        }
        let g = dy.row(i);
        let yg = dot(x, g) / nrm;
        for ((o, &xv), &gv) in dx.row_mut(i).iter_mut().zip(x).zip(g) {
            *o = (gv - xv / nrm * yg) / nrm;
        }
    }
    dx
}

pub(crate) fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        crate::tensor::normalize_in_place(out.row_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_centroid_gives_zero_loss() {
        let f = Matrix::from_rows(&[[0.6, 0.8]]);
        let mu = Matrix::from_rows(&[[1.0, 0.0]]);
        let (l, g) = cluster_loss(&f, &[0], &mu, &[1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let f = Matrix::from_rows(&[[1.0, 0.0]]);
        let mu = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let (l, _) = cluster_loss(&f, &[0], &mu, &[1.0, 1.0]).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn weights_scale_the_term() {
        let f = Matrix::from_rows(&[[1.0, 0.0]]);
        let mu = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let (a, _) = cluster_loss(&f, &[0], &mu, &[1.0, 1.0]).unwrap();
        let (b, _) = cluster_loss(&f, &[0], &mu, &[2.0, 1.0]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn identical_pathways_have_symmetric_terms() {
        let f = normalize_rows(&Matrix::from_rows(&[[0.3, 0.9, 0.1], [0.8, -0.2, 0.4]]));
        let mu = normalize_rows(&Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]));
        let t = PathwayTargets {
            labels: &[0, 1],
            centroids: &mu,
            weights: &[1.0, 1.0],
        };
        let out = two_pathway_loss(&f, &f, t, t).unwrap();
        assert_eq!(out.l1(), out.l2());
        assert_eq!(out.total(), out.l1() + out.l2());
    }

    #[test]
    fn normalize_backward_is_tangent() {
        let raw = Matrix::from_rows(&[[3.0, 4.0]]);
        let dy = Matrix::from_rows(&[[0.6, 0.8]]);
        // gradient along the radial direction vanishes
        let dx = normalize_rows_backward(&raw, &dy);
        assert!(dx.as_slice().iter().all(|v| v.abs() < 1e-15));
    }
}
