//! Kuhn–Munkres assignment on integer weights.

use crate::{Error, Result};

/// Minimum-cost perfect matching of an `n × n` cost matrix (row-major).
/// Returns `assign[row] = col` and the total cost.
///
/// Shortest augmenting paths with row/column potentials, O(n³).
pub fn min_cost_assignment(cost: &[i64], n: usize) -> (Vec<usize>, i64) {
    if n == 0 {
        return (Vec::new(), 0);
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based internals; column 0 is the virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i * n + assign[i]]).sum();
    (assign, total)
}

fn max_weight(weights: &[i64], n: usize) -> (Vec<usize>, i64) {
    let (assign, cost) = min_cost_assignment(&weights.iter().map(|w| -w).collect::<Vec<_>>(), n);
    (assign, -cost)
}

/// Bijection `f` (row → column) maximizing `Σ S[i][f(i)]`. Among all
/// optimal bijections the lexicographically smallest `(f(0), f(1), …)` is
/// returned.
pub fn hungarian(s: &[u64], n: usize) -> Result<Vec<usize>> {
    if s.len() != n * n {
        return Err(Error::shape(format!("hungarian needs a square matrix, got {} entries for n={n}", s.len())));
    }
    let w: Vec<i64> = s
        .iter()
        .map(|&x| i64::try_from(x).map_err(|_| Error::invalid("count too large")))
        .collect::<Result<_>>()?;
    let (_, best) = max_weight(&w, n);

    // Fix rows one at a time to the smallest column that still admits an
    // optimum over the remaining rows and columns.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut gained = 0i64;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let rest_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != j).collect();
            let m = rest_rows.len();
            let sub: Vec<i64> = rest_rows
                .iter()
                .flat_map(|&r| rest_cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| w[r * n + c])
                .collect();
            let (_, rest) = max_weight(&sub, m);
            if gained + w[i * n + j] + rest == best {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        gained += w[i * n + j];
        used[j] = true;
        fixed.push(j);
    }
    Ok(fixed)
}
