//! Procedural indoor scenes with ground-truth labels.
//!
//! A room is a floor (class 0) and up to four walls (class 1) with boxes, spheres
//! and cylinders standing on the floor. Surfaces are sampled uniformly at a
//! fixed areal density.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::config::{parse_kv, KvError};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Room size along x, y and wall height, in meters.
    pub extent: [f64; 3],
    /// How many of the four walls to draw, in the order x=0, x=max, y=0, y=max.
    pub walls: usize,
    pub boxes: usize,
    pub spheres: usize,
    pub cylinders: usize,
    pub box_class: u32,
    pub sphere_class: u32,
    pub cylinder_class: u32,
    /// One RGB color per class.
    pub palette: Vec<[f64; 3]>,
    /// Points per square meter of surface.
    pub density: f64,
    /// Gaussian position noise, meters.
    pub noise: f64,
    /// Gaussian per-point color noise.
    pub color_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: [1.5, 1.5, 0.8],
            walls: 4,
            boxes: 2,
            spheres: 1,
            cylinders: 1,
            box_class: 2,
            sphere_class: 3,
            cylinder_class: 3,
            palette: vec![
                [0.45, 0.45, 0.45],
                [0.85, 0.80, 0.65],
                [0.80, 0.20, 0.15],
                [0.15, 0.30, 0.80],
            ],
            density: 3000.0,
            noise: 0.003,
            color_noise: 0.03,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) {
            return Err(Error::invalid("density must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.color_noise >= 0.0) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        if self.palette.len() < 2 {
            return Err(Error::invalid("need at least two classes (floor and one more)"));
        }
        if self.walls > 4 {
            return Err(Error::invalid("a room has at most four walls"));
        }
        if self.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("room extent must be positive"));
        }
        let c = self.palette.len() as u32;
        let used = [
            (self.boxes, self.box_class),
            (self.spheres, self.sphere_class),
            (self.cylinders, self.cylinder_class),
        ];
        if used.iter().any(|&(n, cls)| n > 0 && cls >= c) {
            return Err(Error::invalid("object class outside the palette"));
        }
        Ok(())
    }

    /// Parses `key = value` lines. Unknown keys are rejected; missing keys
    /// keep their defaults. `palette` is a `;`-separated list of RGB triples.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for (line, key, val) in parse_kv(text).map_err(kv_err)? {
            let bad = |what: &str| Error::invalid(format!("line {line}: bad {what} '{val}'"));
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad(key));
            let int = |v: &str| v.trim().parse::<u64>().map_err(|_| bad(key));
            match key {
                "extent" => {
                    let v: Vec<f64> = val.split_whitespace().map(num).collect::<Result<_>>()?;
                    spec.extent = v.try_into().map_err(|_| bad("extent"))?;
                }
                "walls" => spec.walls = int(val)? as usize,
                "boxes" => spec.boxes = int(val)? as usize,
                "spheres" => spec.spheres = int(val)? as usize,
                "cylinders" => spec.cylinders = int(val)? as usize,
                "box_class" => spec.box_class = int(val)? as u32,
                "sphere_class" => spec.sphere_class = int(val)? as u32,
                "cylinder_class" => spec.cylinder_class = int(val)? as u32,
                "density" => spec.density = num(val)?,
                "noise" => spec.noise = num(val)?,
                "color_noise" => spec.color_noise = num(val)?,
                "seed" => spec.seed = int(val)?,
                "palette" => {
                    spec.palette = val
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|rgb| {
                            let v: Vec<f64> = rgb.split_whitespace().map(num).collect::<Result<_>>()?;
                            v.try_into().map_err(|_| bad("palette"))
                        })
                        .collect::<Result<_>>()?;
                }
                _ => return Err(Error::invalid(format!("line {line}: unknown key '{key}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = self.extent;
        let _ = writeln!(s, "extent = {} {} {}", e[0], e[1], e[2]);
        let _ = writeln!(s, "walls = {}", self.walls);
        let _ = writeln!(s, "boxes = {}", self.boxes);
        let _ = writeln!(s, "spheres = {}", self.spheres);
        let _ = writeln!(s, "cylinders = {}", self.cylinders);
        let _ = writeln!(s, "box_class = {}", self.box_class);
        let _ = writeln!(s, "sphere_class = {}", self.sphere_class);
        let _ = writeln!(s, "cylinder_class = {}", self.cylinder_class);
        let pal: Vec<String> = self
            .palette
            .iter()
            .map(|c| format!("{} {} {}", c[0], c[1], c[2]))
            .collect();
        let _ = writeln!(s, "palette = {}", pal.join("; "));
        let _ = writeln!(s, "density = {}", self.density);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "color_noise = {}", self.color_noise);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

fn kv_err(e: KvError) -> Error {
    Error::invalid(e.to_string())
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { c: [f64; 2], half: [f64; 2], h: f64 },
    Sphere { c: [f64; 2], r: f64 },
    Cylinder { c: [f64; 2], r: f64, h: f64 },
}

impl Shape {
    fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { half, .. } => (half[0] * half[0] + half[1] * half[1]).sqrt(),
            Shape::Sphere { r, .. } | Shape::Cylinder { r, .. } => r,
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Box { c, .. } | Shape::Sphere { c, .. } | Shape::Cylinder { c, .. } => c,
        }
    }

    /// Whether the floor point (x, y) lies under this object.
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Box { c, half, .. } => (x - c[0]).abs() <= half[0] && (y - c[1]).abs() <= half[1],
            Shape::Cylinder { c, r, .. } => (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r,
            Shape::Sphere { .. } => false,
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    density: f64,
    coords: Vec<[f64; 3]>,
    labels: Vec<u32>,
}

impl Sampler {
    fn count(&self, area: f64) -> usize {
        (area * self.density).round() as usize
    }

    /// Samples an axis-aligned rectangle `origin + s·u + t·v`, s,t ∈ [0,1].
    fn rect(&mut self, origin: [f64; 3], u: [f64; 3], v: [f64; 3], class: u32) {
        let area = cross_norm(u, v);
        for _ in 0..self.count(area) {
            let s: f64 = self.rng.random();
            let t: f64 = self.rng.random();
            self.push(
                [
                    origin[0] + s * u[0] + t * v[0],
                    origin[1] + s * u[1] + t * v[1],
                    origin[2] + s * u[2] + t * v[2],
                ],
                class,
            );
        }
    }

    fn push(&mut self, p: [f64; 3], class: u32) {
        self.coords.push(p);
        self.labels.push(class);
    }
}

fn cross_norm(u: [f64; 3], v: [f64; 3]) -> f64 {
    let c = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(Shape, u32)> {
    let [lx, ly, lz] = spec.extent;
    let margin = 0.05;
    let scale = lx.min(ly);
    let mut placed: Vec<(Shape, u32)> = Vec::new();
    let kinds = std::iter::repeat_n(0, spec.boxes)
        .chain(std::iter::repeat_n(1, spec.spheres))
        .chain(std::iter::repeat_n(2, spec.cylinders));
    for kind in kinds {
        for _attempt in 0..200 {
            let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
            let shape = match kind {
                0 => {
                    let half = [u(0.08, 0.16) * scale, u(0.08, 0.16) * scale];
                    let h = u(0.25, 0.6) * lz;
                    Shape::Box { c: [0.0; 2], half, h }
                }
                1 => Shape::Sphere { c: [0.0; 2], r: u(0.08, 0.13) * scale },
                _ => Shape::Cylinder {
                    c: [0.0; 2],
                    r: u(0.06, 0.1) * scale,
                    h: u(0.4, 0.8) * lz,
                },
            };
            let rad = shape.footprint_radius();
            if lx < 2.0 * (rad + margin) || ly < 2.0 * (rad + margin) {
                break;
            }
            let c = [u(rad + margin, lx - rad - margin), u(rad + margin, ly - rad - margin)];
            let shape = match shape {
                Shape::Box { half, h, .. } => Shape::Box { c, half, h },
                Shape::Sphere { r, .. } => Shape::Sphere { c, r },
                Shape::Cylinder { r, h, .. } => Shape::Cylinder { c, r, h },
            };
            let clear = placed.iter().all(|(o, _)| {
                let oc = o.center();
                let d = ((oc[0] - c[0]).powi(2) + (oc[1] - c[1]).powi(2)).sqrt();
                d > o.footprint_radius() + rad + margin
            });
            if clear {
                let class = [spec.box_class, spec.sphere_class, spec.cylinder_class][kind];
                placed.push((shape, class));
                break;
            }
        }
    }
    placed
}

/// Generates a labeled synthetic room. Deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let [lx, ly, lz] = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng);
    let mut s = Sampler {
        rng,
        density: spec.density,
        coords: Vec::new(),
        labels: Vec::new(),
    };

    // Floor, minus object footprints.
    for _ in 0..s.count(lx * ly) {
        let x = lx * s.rng.random::<f64>();
        let y = ly * s.rng.random::<f64>();
        if objects.iter().all(|(o, _)| !o.covers(x, y)) {
            s.push([x, y, 0.0], 0);
        }
    }
    let wall = 1u32.min(spec.palette.len() as u32 - 1);
    let walls = [
        ([0.0, 0.0, 0.0], [0.0, ly, 0.0]),
        ([lx, 0.0, 0.0], [0.0, ly, 0.0]),
        ([0.0, 0.0, 0.0], [lx, 0.0, 0.0]),
        ([0.0, ly, 0.0], [lx, 0.0, 0.0]),
    ];
    for (origin, u) in walls.into_iter().take(spec.walls) {
        s.rect(origin, u, [0.0, 0.0, lz], wall);
    }

    for &(shape, class) in &objects {
        match shape {
            Shape::Box { c, half, h } => {
                let (x0, x1) = (c[0] - half[0], c[0] + half[0]);
                let (y0, y1) = (c[1] - half[1], c[1] + half[1]);
                let (w, d) = (2.0 * half[0], 2.0 * half[1]);
                s.rect([x0, y0, h], [w, 0.0, 0.0], [0.0, d, 0.0], class);
                s.rect([x0, y0, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], class);
                s.rect([x0, y1, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], class);
                s.rect([x0, y0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], class);
                s.rect([x1, y0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], class);
            }
            Shape::Sphere { c, r } => {
                for _ in 0..s.count(4.0 * PI * r * r) {
                    let z: f64 = 2.0 * s.rng.random::<f64>() - 1.0;
                    let phi = 2.0 * PI * s.rng.random::<f64>();
                    let rho = (1.0 - z * z).sqrt();
                    s.push([c[0] + r * rho * phi.cos(), c[1] + r * rho * phi.sin(), r + r * z], class);
                }
            }
            Shape::Cylinder { c, r, h } => {
                for _ in 0..s.count(2.0 * PI * r * h) {
                    let phi = 2.0 * PI * s.rng.random::<f64>();
                    let z = h * s.rng.random::<f64>();
                    s.push([c[0] + r * phi.cos(), c[1] + r * phi.sin(), z], class);
                }
                for _ in 0..s.count(PI * r * r) {
                    let rho = r * s.rng.random::<f64>().sqrt();
                    let phi = 2.0 * PI * s.rng.random::<f64>();
                    s.push([c[0] + rho * phi.cos(), c[1] + rho * phi.sin(), h], class);
                }
            }
        }
    }

    let Sampler {
        mut rng,
        mut coords,
        labels,
        ..
    } = s;
    if spec.noise > 0.0 {
        let nd = Normal::new(0.0, spec.noise).unwrap();
        for p in coords.iter_mut() {
            for v in p.iter_mut() {
                *v += nd.sample(&mut rng);
            }
        }
    }
    let cd = (spec.color_noise > 0.0).then(|| Normal::new(0.0, spec.color_noise).unwrap());
    let colors = labels
        .iter()
        .map(|&l| {
            let base = spec.palette[l as usize];
            let mut c = base;
            if let Some(cd) = &cd {
                for v in c.iter_mut() {
                    *v = (*v + cd.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            c
        })
        .collect();
    Ok(PointCloud {
        coords,
        colors: Some(colors),
        normals: None,
        gt_labels: Some(labels),
        scene_id: format!("synth_{}", spec.seed),
    })
}
