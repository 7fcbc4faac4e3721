use super::assign_with;
use crate::tensor::{sq_dist, Matrix};
use crate::Result;

/// `Σ_i ‖f_i − μ_{l_i}‖²`.
pub fn lloyd_objective(features: &Matrix, labels: &[u32], centroids: &Matrix) -> f64 {
    features
        .iter_rows()
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, centroids.row(l as usize)))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydStep {
    pub labels: Vec<u32>,
    /// Objective after the assignment step.
    pub assigned: f64,
    /// Objective after the centroid update.
    pub updated: f64,
}

/// One full-batch iteration of superpoint-constrained k-means: assign with
/// the constraint, then move every nonempty cluster's centroid to the exact
/// mean of its members (no normalization). Empty clusters keep their
/// centroid.
pub fn lloyd_step(features: &Matrix, sp_ids: &[u32], centroids: &mut Matrix) -> Result<LloydStep> {
    let labels = assign_with(features, sp_ids, centroids)?.labels;
    let assigned = lloyd_objective(features, &labels, centroids);
    let (k, d) = (centroids.rows(), centroids.cols());
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (x, &l) in features.iter_rows().zip(&labels) {
        counts[l as usize] += 1;
        sums.row_mut(l as usize).iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            let row = centroids.row_mut(c);
            row.iter_mut().zip(sums.row(c)).for_each(|(m, s)| *m = s / n);
        }
    }
    let updated = lloyd_objective(features, &labels, centroids);
    Ok(LloydStep {
        labels,
        assigned,
        updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn converges_on_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let c = if i < 20 { 0.0 } else { 5.0 };
                [c + rng.random::<f64>(), c + rng.random::<f64>()]
            })
            .collect();
        let f = Matrix::from_rows(&rows);
        let sp: Vec<u32> = (0..40).map(|i| i / 2).collect();
        let mut mu = Matrix::from_rows(&[rows[0], rows[1]]);
        let mut last = f64::INFINITY;
        let mut prev_labels = Vec::new();
        for _ in 0..50 {
            let s = lloyd_step(&f, &sp, &mut mu).unwrap();
            assert!(s.assigned <= last + 1e-9 && s.updated <= s.assigned + 1e-9);
            last = s.updated;
            if s.labels == prev_labels {
                break;
            }
            prev_labels = s.labels;
        }
        assert_ne!(prev_labels[0], prev_labels[39]);
    }
}
