//! Run configuration and its plain-text `key = value` form.

use std::fmt::Write as _;

use crate::network::ChannelPlan;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct KvError {
    pub line: usize,
    pub msg: String,
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(usize, &str, &str)>, KvError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| KvError {
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(KvError {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, k, v.trim()));
    }
    Ok(out)
}

/// Every tunable of the pipeline. Defaults follow the published settings
/// where those exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Downsampling grid pitch, meters.
    pub cell: f64,
    /// Block side on the xy plane, meters.
    pub block: f64,
    /// Points per block.
    pub pts: usize,
    /// Target superpoint count per scene.
    pub gamma: usize,
    /// Number of semantic classes (required by training).
    pub classes: Option<usize>,
    pub res: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    pub road_ransac: bool,
    pub single_pathway: bool,
    pub deterministic: bool,
    pub normals_k: usize,
    pub voxel_res: f64,
    pub seed_res: f64,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
    /// Hidden channel widths of the convolutional layers, input and output excluded.
    pub hidden: Vec<usize>,
    pub kernel: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            cell: 0.03,
            block: 1.5,
            pts: 4096,
            gamma: 40,
            classes: None,
            res: 32,
            dim: 128,
            epochs: 10,
            batch: 4,
            lr: 1e-4,
            wd: 1e-5,
            seed: 0,
            road_ransac: false,
            single_pathway: false,
            deterministic: false,
            normals_k: 20,
            voxel_res: 0.03,
            seed_res: 0.5,
            ransac_iters: 200,
            ransac_thresh: 0.2,
            hidden: ChannelPlan::default().hidden().to_vec(),
            kernel: 3,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "cell",
        "block",
        "pts",
        "gamma",
        "classes",
        "res",
        "dim",
        "epochs",
        "batch",
        "lr",
        "wd",
        "seed",
        "road_ransac",
        "single_pathway",
        "deterministic",
        "normals_k",
        "voxel_res",
        "seed_res",
        "ransac_iters",
        "ransac_thresh",
        "hidden",
        "kernel",
    ];

    /// Sets one key from its textual value. Accepts `-` in place of `_`.
    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let bad = || Error::invalid(format!("bad value '{val}' for '{key}'"));
        let f = || val.parse::<f64>().map_err(|_| bad());
        let u = || val.parse::<usize>().map_err(|_| bad());
        match key.as_str() {
            "cell" => self.cell = f()?,
            "block" => self.block = f()?,
            "pts" => self.pts = u()?,
            "gamma" => self.gamma = u()?,
            "classes" => self.classes = if val == "none" { None } else { Some(u()?) },
            "res" => self.res = u()?,
            "dim" => self.dim = u()?,
            "epochs" => self.epochs = u()?,
            "batch" => self.batch = u()?,
            "lr" => self.lr = f()?,
            "wd" => self.wd = f()?,
            "seed" => self.seed = val.parse().map_err(|_| bad())?,
            "road_ransac" => self.road_ransac = parse_bool(val).ok_or_else(bad)?,
            "single_pathway" => self.single_pathway = parse_bool(val).ok_or_else(bad)?,
            "deterministic" => self.deterministic = parse_bool(val).ok_or_else(bad)?,
            "normals_k" => self.normals_k = u()?,
            "voxel_res" => self.voxel_res = f()?,
            "seed_res" => self.seed_res = f()?,
            "ransac_iters" => self.ransac_iters = u()?,
            "ransac_thresh" => self.ransac_thresh = f()?,
            "hidden" => {
                self.hidden = val
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "kernel" => self.kernel = u()?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let entries = parse_kv(text).map_err(|e| Error::invalid(e.to_string()))?;
        for (line, k, v) in entries {
            self.set(k, v)
                .map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, shortest round-trip numbers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    fn value(&self, key: &str) -> String {
        match key {
            "cell" => self.cell.to_string(),
            "block" => self.block.to_string(),
            "pts" => self.pts.to_string(),
            "gamma" => self.gamma.to_string(),
            "classes" => self.classes.map_or_else(|| "none".into(), |c| c.to_string()),
            "res" => self.res.to_string(),
            "dim" => self.dim.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => format!("{:e}", self.lr),
            "wd" => format!("{:e}", self.wd),
            "seed" => self.seed.to_string(),
            "road_ransac" => self.road_ransac.to_string(),
            "single_pathway" => self.single_pathway.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "normals_k" => self.normals_k.to_string(),
            "voxel_res" => self.voxel_res.to_string(),
            "seed_res" => self.seed_res.to_string(),
            "ransac_iters" => self.ransac_iters.to_string(),
            "ransac_thresh" => self.ransac_thresh.to_string(),
            "hidden" => self
                .hidden
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "kernel" => self.kernel.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        ChannelPlan::new(crate::cloud::FEATURE_DIM, self.hidden.clone(), self.dim)
    }
}
