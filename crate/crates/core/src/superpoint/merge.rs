use super::SuperpointPartition;
use crate::{Error, Result};

fn cosine(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedily merges superpoints until `gamma` remain.
///
/// Each step takes the smallest superpoint (lowest id on ties), looks at its
/// two nearest superpoints by centroid distance, and folds it into the one
/// whose normal sum has the higher cosine similarity with its own (the
/// nearer one on ties). Aggregates are updated exactly and ids are
/// re-compacted in order of first appearance over the points.
pub fn merge_superpoints(part: &SuperpointPartition, gamma: usize) -> Result<SuperpointPartition> {
    if gamma == 0 {
        return Err(Error::invalid("target superpoint count must be at least 1"));
    }
    let s0 = part.num_superpoints();
    let mut alive = vec![true; s0];
    let mut sizes = part.sizes.clone();
    let mut centroids = part.centroids.clone();
    let mut normal_sums = part.normal_sums.clone();
    // parent[i] = superpoint that absorbed i.
    let mut parent: Vec<usize> = (0..s0).collect();
    let mut count = s0;

    while count > gamma && count > 1 {
        let small = (0..s0)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (sizes[i], i))
            .unwrap();
        let mut near: Vec<(f64, usize)> = (0..s0)
            .filter(|&j| alive[j] && j != small)
            .map(|j| (dist2(&centroids[small], &centroids[j]), j))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let target = match near.as_slice() {
            [only] => only.1,
            [a, b, ..] => {
                let ca = cosine(&normal_sums[small], &normal_sums[a.1]);
                let cb = cosine(&normal_sums[small], &normal_sums[b.1]);
                if cb > ca {
                    b.1
                } else {
                    a.1
                }
            }
            [] => unreachable!("count > 1 implies a neighbour"),
        };

        let (ns, nt) = (sizes[small] as f64, sizes[target] as f64);
        for a in 0..3 {
            centroids[target][a] = (centroids[target][a] * nt + centroids[small][a] * ns) / (nt + ns);
            normal_sums[target][a] += normal_sums[small][a];
        }
        sizes[target] += sizes[small];
        alive[small] = false;
        parent[small] = target;
        count -= 1;
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let roots: Vec<usize> = (0..s0).map(root).collect();
    let mut new_id = vec![u32::MAX; s0];
    let mut next = 0u32;
    let mut sp_id = Vec::with_capacity(part.num_points());
    for &old in &part.sp_id {
        let r = roots[old as usize];
        if new_id[r] == u32::MAX {
            new_id[r] = next;
            next += 1;
        }
        sp_id.push(new_id[r]);
    }
    let mut order: Vec<usize> = (0..s0).filter(|&i| alive[i]).collect();
    order.sort_by_key(|&i| new_id[i]);
    Ok(SuperpointPartition {
        sp_id,
        sizes: order.iter().map(|&i| sizes[i]).collect(),
        centroids: order.iter().map(|&i| centroids[i]).collect(),
        normal_sums: order.iter().map(|&i| normal_sums[i]).collect(),
    })
}
