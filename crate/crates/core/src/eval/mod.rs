//! Matching predicted clusters to ground truth and scoring the result.

mod hungarian;

use std::fmt::Write as _;

pub use hungarian::{hungarian, min_cost_assignment};

use crate::{Error, Result};

/// `S[i][j]`: points predicted as cluster `i` whose ground truth is `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::shape(format!("{} entries do not form a {n}×{n} matrix", counts.len())));
        }
        Ok(Self { n, counts })
    }

    /// Accumulates prediction/ground-truth pairs.
    pub fn from_labels(pred: &[u32], gt: &[u32], n: usize) -> Result<Self> {
        let mut m = Self::new(n);
        m.add(pred, gt)?;
        Ok(m)
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if p as usize >= self.n || g as usize >= self.n {
                return Err(Error::invalid(format!(
                    "label out of range at point {i}: pred {p}, gt {g}, classes {}",
                    self.n
                )));
            }
            self.counts[p as usize * self.n + g as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion matrices differ in size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Moves row `i` to row `mapping[i]`.
    pub fn relabel(&self, mapping: &[usize]) -> ConfusionMatrix {
        let mut out = Self::new(self.n);
        for (i, &k) in mapping.iter().enumerate() {
            out.counts[k * self.n..(k + 1) * self.n].copy_from_slice(&self.counts[i * self.n..(i + 1) * self.n]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oacc: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes without ground-truth support.
    pub iou: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
}

/// Scores an already matched matrix (rows are predicted classes).
pub fn metrics(m: &ConfusionMatrix) -> Result<Metrics> {
    let n = m.size();
    let total = m.total();
    if total == 0 {
        return Err(Error::invalid("cannot score an empty confusion matrix"));
    }
    let diag: u64 = (0..n).map(|k| m.get(k, k)).sum();
    let mut iou = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    for k in 0..n {
        let tp = m.get(k, k) as f64;
        let row: u64 = (0..n).map(|j| m.get(k, j)).sum();
        let col: u64 = (0..n).map(|i| m.get(i, k)).sum();
        if col == 0 {
            iou.push(None);
            recall.push(None);
        } else {
            recall.push(Some(tp / col as f64));
            iou.push(Some(tp / ((row + col) as f64 - tp)));
        }
    }
    let mean = |v: &[Option<f64>]| {
        let s: Vec<f64> = v.iter().flatten().copied().collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    Ok(Metrics {
        oacc: diag as f64 / total as f64,
        macc: mean(&recall),
        miou: mean(&iou),
        iou,
        recall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub confusion: ConfusionMatrix,
    /// Predicted cluster → ground-truth class.
    pub mapping: Vec<usize>,
    pub metrics: Metrics,
}

/// Dataset-level evaluation: one confusion matrix over every point, one
/// Hungarian matching, then the metrics.
pub fn evaluate(pred: &[u32], gt: &[u32], classes: usize) -> Result<Report> {
    evaluate_matrix(ConfusionMatrix::from_labels(pred, gt, classes)?)
}

pub fn evaluate_matrix(confusion: ConfusionMatrix) -> Result<Report> {
    let mapping = hungarian(confusion.counts(), confusion.size())?;
    let metrics = metrics(&confusion.relabel(&mapping))?;
    Ok(Report {
        confusion,
        mapping,
        metrics,
    })
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

impl Report {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("epoch,oAcc,mAcc,mIoU");
        for k in 0..self.confusion.size() {
            write!(h, ",IoU_{k}").unwrap();
        }
        h
    }

    /// One CSV row; classes without support print `nan`.
    pub fn csv_row(&self, epoch: usize) -> String {
        let m = &self.metrics;
        let mut row = format!("{epoch},{},{},{}", fmt_metric(m.oacc), fmt_metric(m.macc), fmt_metric(m.miou));
        for v in &m.iou {
            match v {
                Some(x) => write!(row, ",{}", fmt_metric(*x)).unwrap(),
                None => row.push_str(",nan"),
            }
        }
        row
    }

    pub fn to_csv(&self, epoch: usize) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row(epoch))
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        writeln!(s, "points  {}", self.confusion.total()).unwrap();
        writeln!(s, "oAcc    {:.4}", m.oacc).unwrap();
        writeln!(s, "mAcc    {:.4}", m.macc).unwrap();
        writeln!(s, "mIoU    {:.4}", m.miou).unwrap();
        for (k, v) in m.iou.iter().enumerate() {
            let cluster = self.mapping.iter().position(|&g| g == k).unwrap_or(k);
            match v {
                Some(x) => writeln!(s, "class {k:<3} <- cluster {cluster:<3} IoU {x:.4}").unwrap(),
                None => writeln!(s, "class {k:<3} <- cluster {cluster:<3} (no ground truth)").unwrap(),
            }
        }
        s
    }
}
