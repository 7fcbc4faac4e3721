//! Quick internal consistency checks, run by `u3ds3 selftest`.

use anyhow::{bail, ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use u3ds3_core::cloud::{gen_synthetic, SceneSpec};
use u3ds3_core::eval::{hungarian, metrics};
use u3ds3_core::gradcheck::{self, check_cluster_loss};
use u3ds3_core::network::Archive;
use u3ds3_core::superpoint::{merge_superpoints, vccs_superpoints, SuperpointPartition};
use u3ds3_core::train::{cluster_loss, TrainState};
use u3ds3_core::voxel::{devoxelize, flip_rows, voxelize, FlipSpec};
use u3ds3_core::{pipeline, Config, ConfusionMatrix, Matrix};

type Check = fn() -> Result<()>;

const CHECKS: &[(&str, Check)] = &[
    ("voxel mean", voxel_mean),
    ("devoxelize at cell centers", devoxelize_centers),
    ("flip involution", flip_involution),
    ("hungarian vs brute force", hungarian_brute),
    ("metrics 2x2", metrics_2x2),
    ("cluster loss closed form", loss_closed_form),
    ("finite-difference gradients", gradients),
    ("checkpoint round trip", checkpoint_round_trip),
    ("superpoint merge count", merge_count),
];

pub fn run() -> Result<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", CHECKS.len());
    }
    println!("all {} self-checks passed", CHECKS.len());
    Ok(())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn voxel_mean() -> Result<()> {
    let coords = [[0.1, 0.1, 0.1], [0.2, 0.3, 0.4], [0.9, 0.9, 0.9]];
    let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, -1.0]]);
    let g = voxelize(&f, &coords, 2)?;
    ensure!(g.counts[0] == 2 && g.counts[7] == 1, "counts {:?}", g.counts);
    ensure!(g.data.row(0) == [2.0, 4.0], "cell 0 holds {:?}", g.data.row(0));
    ensure!(g.data.row(7) == [5.0, -1.0], "cell 7 holds {:?}", g.data.row(7));
    ensure!(g.data.row(3).iter().all(|&v| v == 0.0), "empty cells must be zero");
    Ok(())
}

fn devoxelize_centers() -> Result<()> {
    let r = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for m in 0..r {
        for p in 0..r {
            for q in 0..r {
                let c = |i: usize| (i as f64 + 0.5) / r as f64;
                coords.push([c(m), c(p), c(q)]);
                feats.push([rng.random::<f64>(), rng.random::<f64>()]);
            }
        }
    }
    let g = voxelize(&Matrix::from_rows(&feats), &coords, r)?;
    let back = devoxelize(&g, &coords)?;
    for (i, f) in feats.iter().enumerate() {
        ensure!(
            back.row(i).iter().zip(f).all(|(a, b)| close(*a, *b, 1e-12)),
            "point {i}: {:?} vs {f:?}",
            back.row(i)
        );
    }
    Ok(())
}

fn flip_involution() -> Result<()> {
    let r = 4;
    let data = Matrix::from_vec(r * r * r, 2, (0..r * r * r * 2).map(|v| v as f64).collect());
    for axis in 0..3 {
        let once = flip_rows(&data, r, FlipSpec::axis(axis));
        ensure!(once != data, "flip along axis {axis} is the identity");
        ensure!(flip_rows(&once, r, FlipSpec::axis(axis)) == data, "flip along axis {axis} is not an involution");
    }
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_brute() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=5 {
        let perms = permutations(n);
        for _ in 0..20 {
            let s: Vec<u64> = (0..n * n).map(|_| rng.random_range(0..20)).collect();
            let score = |p: &[usize]| (0..n).map(|i| s[i * n + p[i]]).sum::<u64>();
            let best = perms.iter().map(|p| score(p)).max().unwrap();
            let got = hungarian(&s, n)?;
            ensure!(score(&got) == best, "n={n}: matched {} but the optimum is {best}", score(&got));
        }
    }
    Ok(())
}

fn metrics_2x2() -> Result<()> {
    // Rows are predictions, columns ground truth.
    let m = metrics(&ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4])?)?;
    ensure!(close(m.oacc, 0.7, 1e-12), "oacc {}", m.oacc);
    ensure!(close(m.miou, (0.5 + 4.0 / 7.0) / 2.0, 1e-12), "miou {}", m.miou);
    ensure!(close(m.macc, (0.6 + 0.8) / 2.0, 1e-12), "macc {}", m.macc);
    Ok(())
}

fn loss_closed_form() -> Result<()> {
    // Features on the centroids give −log(e/(e + e^0)) for orthogonal pairs.
    let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let mu = f.clone();
    let (l, _) = cluster_loss(&f, &[0, 1], &mu, &[1.0, 1.0])?;
    let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    ensure!(close(l, expect, 1e-12), "loss {l} vs {expect}");
    Ok(())
}

fn gradients() -> Result<()> {
    for (name, c) in gradcheck::run_all(1e-4, 11)? {
        ensure!(c.passes(1e-3), "{name}: max relative error {:.2e} over {} coordinates", c.max_rel, c.checked);
    }
    let c = check_cluster_loss(16, 8, 4, 1e-5, 5)?;
    ensure!(c.passes(1e-4), "cluster loss at h=1e-5: {:.2e}", c.max_rel);
    Ok(())
}

fn checkpoint_round_trip() -> Result<()> {
    let cfg = Config {
        classes: Some(3),
        hidden: vec![4, 4],
        dim: 5,
        ..Config::default()
    };
    let state = TrainState::new(&cfg)?;
    let bytes = state.to_archive().to_bytes();
    let back = TrainState::from_archive(&Archive::from_bytes(&bytes)?)?;
    ensure!(back.to_archive().to_bytes() == bytes, "checkpoint bytes changed after a round trip");
    ensure!(back.net == state.net, "network parameters changed after a round trip");
    Ok(())
}

fn merge_count() -> Result<()> {
    let spec = SceneSpec {
        extent: [0.8, 0.8, 0.4],
        boxes: 1,
        spheres: 0,
        cylinders: 0,
        density: 1500.0,
        ..SceneSpec::default()
    };
    let cfg = Config::default();
    let cloud = pipeline::preprocess(&gen_synthetic(&spec)?, &cfg)?;
    let part: SuperpointPartition = vccs_superpoints(&cloud, &pipeline::vccs_params(&cfg))?;
    let s0 = part.num_superpoints();
    ensure!(s0 > 3, "only {s0} initial superpoints");
    let target = s0 / 2;
    let merged = merge_superpoints(&part, target)?;
    ensure!(merged.num_superpoints() == target, "{} superpoints after merging to {target}", merged.num_superpoints());
    let above = merge_superpoints(&part, s0 + 5)?;
    ensure!(above.num_superpoints() == s0, "merging to a larger count changed the partition");
    Ok(())
}
