//! Versioned little-endian binary archive of named tensors.
//!
//! Layout: magic `U3DSCKPT`, `u32` version, `u32` entry count, then per entry
//! a length-prefixed UTF-8 name, a kind byte and its payload. Tensors carry a
//! shape header (`u32` rank, `u64` dims) followed by `f64` values.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ChannelPlan, Layer, NetworkConfig, NetworkParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"U3DSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor { shape: Vec<usize>, data: Vec<f64> },
    Ints(Vec<u64>),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            name,
            Entry::Tensor {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.push(name, Entry::Text(text.into()));
    }

    pub fn push_ints(&mut self, name: impl Into<String>, v: &[u64]) {
        self.push(name, Entry::Ints(v.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| bad(format!("missing entry `{name}`")))
    }

    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        match self.get(name)? {
            Entry::Tensor { shape: s, data } if s == shape => Ok(data),
            Entry::Tensor { shape: s, .. } => Err(bad(format!("`{name}` has shape {s:?}, expected {shape:?}"))),
            _ => Err(bad(format!("`{name}` is not a tensor"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::Ints(v) => Ok(v),
            _ => Err(bad(format!("`{name}` is not an integer array"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Text(t) => Ok(t),
            _ => Err(bad(format!("`{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(VERSION).unwrap();
        w.write_u32::<LE>(self.entries.len() as u32).unwrap();
        for (name, e) in &self.entries {
            w.write_u32::<LE>(name.len() as u32).unwrap();
            w.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor { shape, data } => {
                    w.write_u8(0).unwrap();
                    w.write_u32::<LE>(shape.len() as u32).unwrap();
                    for &d in shape {
                        w.write_u64::<LE>(d as u64).unwrap();
                    }
                    for &v in data {
                        w.write_f64::<LE>(v).unwrap();
                    }
                }
                Entry::Ints(v) => {
                    w.write_u8(1).unwrap();
                    w.write_u64::<LE>(v.len() as u64).unwrap();
                    for &x in v {
                        w.write_u64::<LE>(x).unwrap();
                    }
                }
                Entry::Text(t) => {
                    w.write_u8(2).unwrap();
                    w.write_u64::<LE>(t.len() as u64).unwrap();
                    w.extend_from_slice(t.as_bytes());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        let mut r = Cursor::new(bytes);
        let trunc = |_| bad("truncated checkpoint");
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(trunc)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let n = r.read_u32::<LE>().map_err(trunc)?;
        let mut entries = Vec::with_capacity(n.min(4096) as usize);
        // Guard every length against the remaining input before allocating.
        let remaining = |r: &Cursor<&[u8]>| total - r.position();
        for _ in 0..n {
            let len = r.read_u32::<LE>().map_err(trunc)? as u64;
            if len > remaining(&r) {
                return Err(bad("truncated checkpoint"));
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
            let entry = match r.read_u8().map_err(trunc)? {
                0 => {
                    let rank = r.read_u32::<LE>().map_err(trunc)? as u64;
                    if rank * 8 > remaining(&r) {
                        return Err(bad("truncated checkpoint"));
                    }
                    let shape = (0..rank)
                        .map(|_| r.read_u64::<LE>().map(|d| d as usize))
                        .collect::<std::io::Result<Vec<_>>>()
                        .map_err(trunc)?;
                    let count = shape
                        .iter()
                        .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                        .ok_or_else(|| bad("tensor size overflows"))?;
                    if count.saturating_mul(8) > remaining(&r) {
                        return Err(bad(format!("tensor `{name}` is truncated")));
                    }
                    let mut data = vec![0.0; count as usize];
                    r.read_f64_into::<LE>(&mut data).map_err(trunc)?;
                    Entry::Tensor { shape, data }
                }
                1 => {
                    let count = r.read_u64::<LE>().map_err(trunc)?;
                    if count.saturating_mul(8) > remaining(&r) {
                        return Err(bad("truncated checkpoint"));
                    }
                    let mut v = vec![0u64; count as usize];
                    r.read_u64_into::<LE>(&mut v).map_err(trunc)?;
                    Entry::Ints(v)
                }
                2 => {
                    let len = r.read_u64::<LE>().map_err(trunc)?;
                    if len > remaining(&r) {
                        return Err(bad("truncated checkpoint"));
                    }
                    let mut t = vec![0u8; len as usize];
                    r.read_exact(&mut t).map_err(trunc)?;
                    Entry::Text(String::from_utf8(t).map_err(|_| bad("text entry is not UTF-8"))?)
                }
                k => return Err(bad(format!("unknown entry kind {k}"))),
            };
            entries.push((name, entry));
        }
        if r.position() != total {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn config_text(c: &NetworkConfig) -> String {
    let widths: Vec<String> = c.plan.widths().iter().map(|w| w.to_string()).collect();
    format!(
        "widths={}\nkernel={}\nuse_norm={}\nslope={:e}\neps={:e}\nmomentum={:e}\n",
        widths.join(","),
        c.kernel,
        c.use_norm,
        c.slope,
        c.eps,
        c.momentum
    )
}

fn parse_config_text(t: &str) -> Result<NetworkConfig> {
    let mut widths = None;
    let mut cfg = NetworkConfig::default();
    for line in t.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad value for {k}")));
        match k {
            "widths" => {
                let w = v
                    .split(',')
                    .map(|x| x.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad widths"))?;
                if w.len() < 2 {
                    return Err(bad("channel plan needs at least two widths"));
                }
                widths = Some(w);
            }
            "kernel" => cfg.kernel = v.parse().map_err(|_| bad("bad kernel"))?,
            "use_norm" => cfg.use_norm = v.parse().map_err(|_| bad("bad use_norm"))?,
            "slope" => cfg.slope = num(v)?,
            "eps" => cfg.eps = num(v)?,
            "momentum" => cfg.momentum = num(v)?,
            _ => return Err(bad(format!("unknown network config key `{k}`"))),
        }
    }
    let w = widths.ok_or_else(|| bad("network config lacks widths"))?;
    cfg.plan = ChannelPlan::new(w[0], w[1..w.len() - 1].to_vec(), w[w.len() - 1]);
    Ok(cfg)
}

impl NetworkParams {
    /// Appends this network under `prefix` (e.g. `net.`).
    pub fn write_archive(&self, ar: &mut Archive, prefix: &str) {
        ar.push_text(format!("{prefix}config"), config_text(&self.config));
        let k = self.config.kernel;
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}layer{i}.");
            ar.push_tensor(format!("{p}weight"), &[l.out_ch, l.in_ch, k, k, k], &l.weight);
            ar.push_tensor(format!("{p}bias"), &[l.out_ch], &l.bias);
            ar.push_tensor(format!("{p}gamma"), &[l.out_ch], &l.gamma);
            ar.push_tensor(format!("{p}beta"), &[l.out_ch], &l.beta);
            ar.push_tensor(format!("{p}running_mean"), &[l.out_ch], &l.running_mean);
            ar.push_tensor(format!("{p}running_var"), &[l.out_ch], &l.running_var);
        }
    }

    pub fn read_archive(ar: &Archive, prefix: &str) -> Result<Self> {
        let config = parse_config_text(ar.text(&format!("{prefix}config"))?)?;
        let k = config.kernel;
        let layers = config
            .plan
            .widths()
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (cin, cout) = (w[0], w[1]);
                let p = format!("{prefix}layer{i}.");
                let vec = |name: &str| ar.tensor(&format!("{p}{name}"), &[cout]).map(|d| d.to_vec());
                Ok(Layer {
                    in_ch: cin,
                    out_ch: cout,
                    weight: ar.tensor(&format!("{p}weight"), &[cout, cin, k, k, k])?.to_vec(),
                    bias: vec("bias")?,
                    gamma: vec("gamma")?,
                    beta: vec("beta")?,
                    running_mean: vec("running_mean")?,
                    running_var: vec("running_var")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self { config, layers };
        if !params.is_finite() {
            return Err(bad("checkpoint holds non-finite parameters"));
        }
        Ok(params)
    }
}
