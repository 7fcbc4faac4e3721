use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use u3ds3_core::cloud::ply::{load_ply, save_ply};
use u3ds3_core::cloud::{gen_synthetic, tile_points, SceneSpec};
use u3ds3_core::eval::{evaluate, Report};
use u3ds3_core::superpoint::{load_superpoints, save_superpoints};
use u3ds3_core::train::TrainState;
use u3ds3_core::{pipeline, Config, PointCloud};

mod palette;
mod selftest;

/// Unsupervised semantic segmentation of point clouds.
#[derive(Parser, Debug)]
#[command(name = "u3ds3", version)]
struct Cli {
    /// Config file of `key = value` lines. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a labelled synthetic room.
    GenSynth(GenSynth),
    /// Downsample a cloud and estimate normals.
    Preprocess(Preprocess),
    /// Over-segment a preprocessed cloud into superpoints.
    Superpoints(Superpoints),
    /// Train the feature network and centroids on a directory of scenes.
    Train(Train),
    /// Label a preprocessed cloud with a trained checkpoint.
    Segment(Segment),
    /// Score predicted labels against ground truth.
    Eval(Eval),
    /// Write a PLY colored by label.
    ExportPly(ExportPly),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct GenSynth {
    /// Scene description (`key = value`); defaults are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed in the scene description.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Preprocess {
    #[arg(long = "in", value_name = "PLY")]
    input: PathBuf,
    #[arg(long)]
    cell: Option<f64>,
    #[arg(long)]
    block: Option<f64>,
    #[arg(long)]
    pts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the cloud is written under its input file name.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Superpoints {
    #[arg(long = "in", value_name = "PLY")]
    input: PathBuf,
    #[arg(long)]
    gamma: Option<usize>,
    /// Separate the dominant ground plane before clustering (outdoor scans).
    #[arg(long)]
    road_ransac: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    /// Directory of preprocessed `.ply` scenes, with optional `.sp` files beside them.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with the same-pathway loss of the flipped view only.
    #[arg(long)]
    single_pathway: bool,
    /// Single-threaded clustering for bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
    /// Append per-epoch scores to this CSV (scenes must carry labels).
    #[arg(long, value_name = "CSV")]
    report: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Segment {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long = "in", value_name = "PLY")]
    input: PathBuf,
    /// Superpoint file; computed from the checkpoint settings when omitted.
    #[arg(long)]
    sp: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    /// Predictions: a PLY with a label property or one label per line.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth PLY with a label property.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Value written in the epoch column.
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportPly {
    #[arg(long = "in", value_name = "PLY")]
    input: PathBuf,
    /// Labels, one per line; the PLY's own label property is used otherwise.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation rather than bad data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

impl Cmd {
    /// Flag values that override configuration keys.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        let s = |v: Option<f64>| v.map(|x| x.to_string());
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        let flag = |b: bool| b.then(|| "true".to_string());
        match self {
            Cmd::GenSynth(a) => put("seed", a.seed.map(|x| x.to_string())),
            Cmd::Preprocess(a) => {
                put("cell", s(a.cell));
                put("block", s(a.block));
                put("pts", u(a.pts));
                put("seed", a.seed.map(|x| x.to_string()));
            }
            Cmd::Superpoints(a) => {
                put("gamma", u(a.gamma));
                put("road_ransac", flag(a.road_ransac));
                put("seed", a.seed.map(|x| x.to_string()));
            }
            Cmd::Train(a) => {
                put("classes", u(a.classes));
                put("gamma", u(a.gamma));
                put("epochs", u(a.epochs));
                put("batch", u(a.batch));
                put("lr", s(a.lr));
                put("wd", s(a.wd));
                put("res", u(a.res));
                put("dim", u(a.dim));
                put("hidden", a.hidden.clone());
                put("seed", a.seed.map(|x| x.to_string()));
                put("single_pathway", flag(a.single_pathway));
                put("deterministic", flag(a.deterministic));
            }
            Cmd::Eval(a) => put("classes", u(a.classes)),
            Cmd::Segment(_) | Cmd::ExportPly(_) | Cmd::Selftest => {}
        }
        o
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in cli.cmd.overrides() {
        cfg.set(k, &v).map_err(|e| usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    Ok(cfg)
}

fn thread_count(cfg: &Config) -> anyhow::Result<Option<usize>> {
    if cfg.deterministic {
        return Ok(Some(1));
    }
    match std::env::var("U3DS3_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("U3DS3_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = effective_config(cli)?;
    if cli.dump_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    if let Some(n) = thread_count(&cfg)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.cmd {
        Cmd::GenSynth(a) => gen_synth(a),
        Cmd::Preprocess(a) => preprocess(a, &cfg),
        Cmd::Superpoints(a) => superpoints(a, &cfg),
        Cmd::Train(a) => train(a, &cfg),
        Cmd::Segment(a) => segment(a),
        Cmd::Eval(a) => eval(a, &cfg),
        Cmd::ExportPly(a) => export_ply(a),
        Cmd::Selftest => selftest::run(),
    }
}

fn gen_synth(a: &GenSynth) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SceneSpec::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let cloud = gen_synthetic(&spec)?;
    save_ply(&cloud, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} points written to {}", cloud.len(), a.out.display());
    Ok(())
}

fn read_cloud(path: &Path) -> anyhow::Result<PointCloud> {
    let mut cloud = load_ply(path).with_context(|| format!("reading {}", path.display()))?;
    cloud.scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(cloud)
}

fn preprocess(a: &Preprocess, cfg: &Config) -> anyhow::Result<()> {
    let cloud = read_cloud(&a.input)?;
    let out = pipeline::preprocess(&cloud, cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let name = a.input.file_name().context("input path has no file name")?;
    let dest = a.out.join(name);
    save_ply(&out, &dest).with_context(|| format!("writing {}", dest.display()))?;
    let tiles = tile_points(&out, cfg.block);
    let usable = tiles.iter().filter(|t| t.indices.len() >= pipeline::block_params(cfg).min_points).count();
    println!(
        "{} -> {} points, {} tiles ({} usable blocks), written to {}",
        cloud.len(),
        out.len(),
        tiles.len(),
        usable,
        dest.display()
    );
    Ok(())
}

fn superpoints(a: &Superpoints, cfg: &Config) -> anyhow::Result<()> {
    let cloud = read_cloud(&a.input)?;
    let ids = pipeline::superpoints(&cloud, cfg)?;
    save_superpoints(&ids, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let n = ids.iter().max().map_or(0, |&m| m + 1);
    println!("{n} superpoints over {} points, written to {}", ids.len(), a.out.display());
    Ok(())
}

/// Loads every `.ply` in `dir` (sorted by name) with its superpoints.
fn load_scenes(dir: &Path, cfg: &Config) -> anyhow::Result<Vec<(PointCloud, Vec<u32>)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ply scenes in {}", dir.display());
    }
    let mut scenes = Vec::with_capacity(paths.len());
    for path in paths {
        let cloud = read_cloud(&path)?;
        let sp_path = path.with_extension("sp");
        let sp = if sp_path.exists() {
            load_superpoints(&sp_path)?
        } else {
            info!("{}: computing superpoints", path.display());
            pipeline::superpoints(&cloud, cfg).with_context(|| format!("superpoints of {}", path.display()))?
        };
        if sp.len() != cloud.len() {
            bail!("{}: {} superpoint ids for {} points", sp_path.display(), sp.len(), cloud.len());
        }
        scenes.push((cloud, sp));
    }
    Ok(scenes)
}

fn train(a: &Train, cfg: &Config) -> anyhow::Result<()> {
    let k = cfg.classes.ok_or_else(|| usage("train needs --classes K (the number of clusters)"))?;
    let scenes = load_scenes(&a.data, cfg)?;
    let blocks = pipeline::training_blocks(&scenes, cfg)?;
    println!("{} scenes, {} blocks", scenes.len(), blocks.len());
    let gt: Option<Vec<u32>> = if a.report.is_some() {
        let mut all = Vec::new();
        for (c, _) in &scenes {
            let g = c
                .gt_labels
                .as_ref()
                .with_context(|| format!("--report needs labelled scenes; {} has none", c.scene_id))?;
            all.extend_from_slice(g);
        }
        Some(all)
    } else {
        None
    };
    let mut csv = String::new();
    let mut state = TrainState::new(cfg)?;
    let start = Instant::now();
    state.train(&blocks, |st, stats| {
        let mut line = format!(
            "epoch {:>3}  loss {:.5}  clusters {:?}",
            stats.epoch, stats.loss, stats.histograms[1]
        );
        if let Some(gt) = &gt {
            let mut pred = Vec::with_capacity(gt.len());
            for (c, sp) in &scenes {
                pred.extend(st.infer_labels(c, sp)?);
            }
            let report = evaluate(&pred, gt, k)?;
            if csv.is_empty() {
                csv = report.csv_header() + "\n";
            }
            csv += &(report.csv_row(stats.epoch) + "\n");
            line += &format!("  mIoU {:.4}", report.metrics.miou);
        }
        println!("{line}  ({:.0} s)", start.elapsed().as_secs_f64());
        Ok(())
    })?;
    state.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn segment(a: &Segment) -> anyhow::Result<()> {
    let state = TrainState::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let cloud = read_cloud(&a.input)?;
    let sp = match &a.sp {
        Some(p) => load_superpoints(p).with_context(|| format!("reading {}", p.display()))?,
        None => pipeline::superpoints(&cloud, &state.config)?,
    };
    let labels = state.infer_labels(&cloud, &sp)?;
    let out = palette::colorize(&cloud, labels, state.classes());
    save_ply(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} points labelled, written to {}", out.len(), a.out.display());
    Ok(())
}

fn read_labels(path: &Path) -> anyhow::Result<Vec<u32>> {
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")) {
        return read_cloud(path)?
            .gt_labels
            .with_context(|| format!("{} has no label property", path.display()));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .with_context(|| format!("{}: line {}: bad label '{}'", path.display(), i + 1, l.trim()))
        })
        .collect()
}

fn eval(a: &Eval, cfg: &Config) -> anyhow::Result<()> {
    let k = cfg.classes.ok_or_else(|| usage("eval needs --classes K"))?;
    let pred = read_labels(&a.pred)?;
    let gt = read_labels(&a.gt)?;
    let report: Report = evaluate(&pred, &gt, k)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        fs::write(out, report.to_csv(a.epoch)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn export_ply(a: &ExportPly) -> anyhow::Result<()> {
    let cloud = read_cloud(&a.input)?;
    let labels = match &a.labels {
        Some(p) => read_labels(p)?,
        None => cloud
            .gt_labels
            .clone()
            .with_context(|| format!("{} has no labels; pass --labels", a.input.display()))?,
    };
    if labels.len() != cloud.len() {
        bail!("{} labels for {} points", labels.len(), cloud.len());
    }
    let k = labels.iter().max().map_or(1, |&m| m as usize + 1);
    let out = palette::colorize(&cloud, labels, k);
    save_ply(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} points written to {}", out.len(), a.out.display());
    Ok(())
}
