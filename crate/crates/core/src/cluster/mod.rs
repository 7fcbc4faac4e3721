//! Superpoint-constrained cluster assignment and online centroid maintenance.

mod lloyd;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use lloyd::{lloyd_objective, lloyd_step, LloydStep};

use crate::network::Archive;
use crate::tensor::{dot, normalize_in_place, sq_dist, Matrix};
use crate::{Error, Result};

/// Perturbation added to every touched centroid during a mini-batch update.
pub const UPDATE_SIGMA: f64 = 1e-4;
/// Noise used when re-seeding an empty cluster from the largest one.
pub const SPLIT_SIGMA: f64 = 1e-3;
/// Guard added to class ratios before the inverse square root.
pub const WEIGHT_EPS: f64 = 1e-6;

/// `K` unit-norm centroids with running assignment counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `K × dim`.
    pub centroids: Matrix,
    pub counts: Vec<u64>,
    /// Which pathway owns the set (1 or 2).
    pub pathway: u8,
}

/// Per-point cluster labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<u32>,
    /// True when every superpoint carries a single label.
    pub sp_constrained: bool,
}

impl CentroidSet {
    /// Normalizes each row of `centroids`; counts start at zero.
    pub fn new(mut centroids: Matrix, pathway: u8) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::invalid("centroid set needs K >= 1 and dim >= 1"));
        }
        for k in 0..centroids.rows() {
            let row = centroids.row_mut(k);
            normalize_in_place(row);
            if dot(row, row) == 0.0 {
                return Err(Error::invalid(format!("centroid {k} is the zero vector")));
            }
        }
        let k = centroids.rows();
        Ok(Self {
            centroids,
            counts: vec![0; k],
            pathway,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != self.k() {
            return Err(Error::shape("count vector length differs from K"));
        }
        for (k, row) in self.centroids.iter_rows().enumerate() {
            if (dot(row, row).sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("centroid {k} is not unit norm")));
            }
        }
        Ok(())
    }

    /// Index of the centroid nearest to `x` (lowest index on ties).
    pub fn nearest(&self, x: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for (k, mu) in self.centroids.iter_rows().enumerate() {
            let d = sq_dist(x, mu);
            if d < best.0 {
                best = (d, k as u32);
            }
        }
        best.1
    }

    /// Online k-means step: each point moves its centroid by `1/count` of
    /// the residual, in input order. Touched centroids are then optionally
    /// perturbed by Gaussian noise and re-normalized.
    pub fn minibatch_update(
        &mut self,
        features: &Matrix,
        labels: &[u32],
        perturb: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::shape("labels do not match features"));
        }
        if features.cols() != self.dim() {
            return Err(Error::shape(format!(
                "features have {} channels, centroids {}",
                features.cols(),
                self.dim()
            )));
        }
        let mut touched = vec![false; self.k()];
        for (x, &l) in features.iter_rows().zip(labels) {
            let l = l as usize;
            if l >= self.k() {
                return Err(Error::invalid(format!("label {l} out of range for K={}", self.k())));
            }
            touched[l] = true;
            self.counts[l] += 1;
            let eta = 1.0 / self.counts[l] as f64;
            for (m, &v) in self.centroids.row_mut(l).iter_mut().zip(x) {
                *m += eta * (v - *m);
            }
        }
        let mut perturb = perturb;
        for (k, _) in touched.iter().enumerate().filter(|(_, &t)| t) {
            let row = self.centroids.row_mut(k);
            if let Some((sigma, rng)) = perturb.as_mut() {
                for m in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(*rng);
                    *m += *sigma * z;
                }
            }
            normalize_in_place(row);
        }
        Ok(())
    }

    /// Re-seeds every empty cluster (ascending label order) from the current
    /// largest one: its centroid plus `N(0, sigma²)` noise, re-normalized,
    /// with the largest cluster's histogram count and running count split
    /// evenly between the two. Returns the adjusted histogram.
    pub fn handle_degenerate(&mut self, histogram: &[u64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
        if histogram.len() != self.k() {
            return Err(Error::shape("histogram length differs from K"));
        }
        if histogram.iter().all(|&c| c == 0) {
            return Err(Error::Degenerate("every cluster is empty; no features were seen".into()));
        }
        let mut hist = histogram.to_vec();
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for j in 0..hist.len() {
            if hist[j] != 0 {
                continue;
            }
            let big = argmax(&hist);
            let mut seed: Vec<f64> = self.centroids.row(big).to_vec();
            seed.iter_mut().for_each(|v| *v += noise.sample(rng));
            normalize_in_place(&mut seed);
            self.centroids.row_mut(j).copy_from_slice(&seed);
            let half = hist[big] / 2;
            hist[j] = half;
            hist[big] -= half;
            let run = self.counts[big] / 2;
            self.counts[j] = run;
            self.counts[big] -= run;
        }
        Ok(hist)
    }

    pub fn write_archive(&self, ar: &mut Archive, prefix: &str) {
        ar.push_tensor(format!("{prefix}centroids"), &[self.k(), self.dim()], self.centroids.as_slice());
        ar.push_ints(format!("{prefix}counts"), &self.counts);
        ar.push_ints(format!("{prefix}pathway"), &[self.pathway as u64]);
    }

    pub fn read_archive(ar: &Archive, prefix: &str, k: usize, dim: usize) -> Result<Self> {
        let c = ar.tensor(&format!("{prefix}centroids"), &[k, dim])?;
        let counts = ar.ints(&format!("{prefix}counts"))?.to_vec();
        let pathway = *ar
            .ints(&format!("{prefix}pathway"))?
            .first()
            .ok_or_else(|| Error::Checkpoint("empty pathway tag".into()))? as u8;
        let set = Self {
            centroids: Matrix::from_vec(k, dim, c.to_vec()),
            counts,
            pathway,
        };
        set.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(set)
    }
}

fn argmax(v: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if c > v[best] {
            best = i;
        }
    }
    best
}

/// Groups row indices by superpoint id, ordered by id.
pub(crate) fn group_by_sp(sp_ids: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &s) in sp_ids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    groups
}

/// Label minimizing `Σ_{i∈group} ‖f_i − μ_k‖²` over `k`.
///
/// The sum equals `n‖μ_k‖² − 2 S·μ_k + Σ‖f_i‖²` with `S = Σ f_i`, so only the
/// first two terms are compared; ties go to the lowest index.
pub(crate) fn best_label(sum: &[f64], n: usize, centroids: &Matrix) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (k, mu) in centroids.iter_rows().enumerate() {
        let score = n as f64 * dot(mu, mu) - 2.0 * dot(sum, mu);
        if score < best.0 {
            best = (score, k as u32);
        }
    }
    best.1
}

/// Superpoint-constrained assignment: every point of a superpoint gets the
/// label whose centroid is nearest to the superpoint's feature mean.
pub fn assign_labels(features: &Matrix, sp_ids: &[u32], centroids: &CentroidSet) -> Result<PseudoLabels> {
    assign_with(features, sp_ids, &centroids.centroids)
}

pub(crate) fn assign_with(features: &Matrix, sp_ids: &[u32], centroids: &Matrix) -> Result<PseudoLabels> {
    if features.rows() != sp_ids.len() {
        return Err(Error::shape("superpoint ids do not match features"));
    }
    if features.cols() != centroids.cols() {
        return Err(Error::shape(format!(
            "features have {} channels, centroids {}",
            features.cols(),
            centroids.cols()
        )));
    }
    let mut labels = vec![0u32; sp_ids.len()];
    let mut sum = vec![0.0; features.cols()];
    for idx in group_by_sp(sp_ids).values() {
        sum.iter_mut().for_each(|s| *s = 0.0);
        for &i in idx {
            sum.iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
        }
        let l = best_label(&sum, idx.len(), centroids);
        idx.iter().for_each(|&i| labels[i] = l);
    }
    Ok(PseudoLabels {
        labels,
        sp_constrained: true,
    })
}

/// Per-label counts.
pub fn histogram(labels: &[u32], k: usize) -> Vec<u64> {
    let mut h = vec![0u64; k];
    for &l in labels {
        h[l as usize] += 1;
    }
    h
}

/// Loss re-weighting: `(ratio_k + ε)^(-1/2)`, rescaled to mean 1.
pub fn class_weights(histogram: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class weights need a nonempty histogram"));
    }
    let raw: Vec<f64> = histogram
        .iter()
        .map(|&c| (c as f64 / total as f64 + WEIGHT_EPS).powf(-0.5))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// k-means++ seeding on the rows of `data` (squared Euclidean `D²`
/// sampling). When fewer than `k` distinct rows exist, the remaining seeds
/// are drawn uniformly.
pub fn kmeans_pp(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let n = data.rows();
    if n == 0 || k == 0 {
        return Err(Error::invalid("k-means++ needs data and k >= 1"));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    Ok(data.select_rows(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(rows: &[&[f64]]) -> CentroidSet {
        CentroidSet::new(Matrix::from_rows(rows), 1).unwrap()
    }

    #[test]
    fn singleton_superpoints_are_nearest_centroid() {
        let c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.5]]);
        let out = assign_labels(&f, &[0, 1, 2], &c).unwrap();
        assert_eq!(out.labels, vec![0, 1, 0]);
    }

    #[test]
    fn constrained_pair_follows_the_joint_optimum() {
        // Centroids are deliberately not unit-norm here: compare raw sums.
        let mu = Matrix::from_rows(&[[-0.1, 0.0], [1.9, 0.0]]);
        let f = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]);
        let cost = |k: usize| f.iter_rows().map(|x| sq_dist(x, mu.row(k))).sum::<f64>();
        assert!((cost(0) - 4.42).abs() < 1e-12 && (cost(1) - 3.62).abs() < 1e-12);
        let out = assign_with(&f, &[7, 7], &mu).unwrap();
        assert_eq!(out.labels, vec![1, 1]);
    }

    #[test]
    fn feature_on_centroid_gets_its_label() {
        let c = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let f = Matrix::from_rows(&[[0.0, 0.0, 1.0]]);
        assert_eq!(assign_labels(&f, &[0], &c).unwrap().labels, vec![2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = Matrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!(assign_labels(&f, &[0], &c).unwrap().labels, vec![0]);
    }

    #[test]
    fn first_point_replaces_a_fresh_centroid() {
        let mut c = set(&[&[1.0, 0.0]]);
        let f = Matrix::from_rows(&[[0.0, 3.0]]);
        c.minibatch_update(&f, &[0], None).unwrap();
        assert_eq!(c.centroids.row(0), &[0.0, 1.0]);
        assert_eq!(c.counts, vec![1]);
    }

    #[test]
    fn repeated_point_is_a_fixed_point() {
        let x = [0.6, 0.8];
        let mut c = set(&[&x]);
        c.minibatch_update(&Matrix::from_rows(&[x, x]), &[0, 0], None).unwrap();
        assert!(sq_dist(c.centroids.row(0), &x) < 1e-30);
    }

    #[test]
    fn sequential_rule_matches_scalar_replay() {
        let mut c = set(&[&[1.0, 0.0]]);
        c.counts[0] = 1;
        c.minibatch_update(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 0], None)
            .unwrap();
        // count 2: μ = e1 + (e1 - e1)/2 = e1; count 3: μ = e1 + (e2 - e1)/3.
        let (a, b) = (2.0 / 3.0, 1.0 / 3.0);
        let n = (a * a + b * b as f64).sqrt();
        assert!((c.centroids.get(0, 0) - a / n).abs() < 1e-15);
        assert!((c.centroids.get(0, 1) - b / n).abs() < 1e-15);
        assert_eq!(c.counts[0], 3);
    }

    #[test]
    fn perturbed_update_stays_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = set(&[&[1.0, 0.0, 0.0]]);
        c.minibatch_update(&Matrix::from_rows(&[[0.0, 1.0, 0.0]]), &[0], Some((UPDATE_SIGMA, &mut rng)))
            .unwrap();
        c.validate().unwrap();
        assert!(c.centroids.get(0, 0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_split_replays_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let hist = c.handle_degenerate(&[10, 0, 2], SPLIT_SIGMA, &mut rng).unwrap();
        assert_eq!(hist, vec![5, 5, 2]);
        assert!(sq_dist(c.centroids.row(1), c.centroids.row(0)) < 1e-4);
        assert_ne!(c.centroids.row(1), c.centroids.row(0));
        c.validate().unwrap();
    }

    #[test]
    fn no_empty_cluster_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let before = c.clone();
        assert_eq!(c.handle_degenerate(&[3, 4], SPLIT_SIGMA, &mut rng).unwrap(), vec![3, 4]);
        assert_eq!(c, before);
    }

    #[test]
    fn consecutive_empty_labels_split_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = set(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[1.0, -1.0]]);
        let hist = c.handle_degenerate(&[0, 0, 12, 3], SPLIT_SIGMA, &mut rng).unwrap();
        // Label 0 splits the 12 into 6/6; label 1 then splits the first 6 (at label 0).
        assert_eq!(hist, vec![3, 3, 6, 3]);
    }

    #[test]
    fn all_empty_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = set(&[&[1.0, 0.0]]);
        assert!(c.handle_degenerate(&[0], SPLIT_SIGMA, &mut rng).is_err());
    }

    #[test]
    fn weights_uniform_and_two_class() {
        assert_eq!(class_weights(&[5, 5, 5]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = class_weights(&[8, 2]).unwrap();
        let raw = [(0.8f64 + 1e-6).powf(-0.5), (0.2f64 + 1e-6).powf(-0.5)];
        let m = (raw[0] + raw[1]) / 2.0;
        assert!((w[0] - raw[0] / m).abs() < 1e-12 && (w[1] - raw[1] / m).abs() < 1e-12);
        assert!((w[0] - 0.667).abs() < 1e-3 && (w[1] - 1.333).abs() < 1e-3);
    }

    #[test]
    fn empty_class_weight_is_bounded() {
        let w = class_weights(&[10, 0]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(w[1] > w[0]);
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn kmeans_pp_picks_distinct_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        let c = kmeans_pp(&data, 3, &mut rng).unwrap();
        let mut rows: Vec<Vec<f64>> = c.iter_rows().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.dedup();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn centroid_archive_round_trip() {
        let mut c = set(&[&[1.0, 2.0], &[3.0, -1.0]]);
        c.counts = vec![4, 9];
        let mut ar = Archive::new();
        c.write_archive(&mut ar, "c1.");
        let back = CentroidSet::read_archive(&Archive::from_bytes(&ar.to_bytes()).unwrap(), "c1.", 2, 2).unwrap();
        assert_eq!(back, c);
    }
}
