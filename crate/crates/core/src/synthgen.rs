//! Deterministic synthetic indoor scenes: floor, ceiling, boundary walls,
//! columns, boxes standing on the floor, and clutter blobs.
//!
//! Every surface is sampled uniformly with a per-class base color plus
//! Gaussian noise. Planar surfaces may carry one rectangular hole each;
//! points falling into a hole are rejected and redrawn, so class counts are
//! exact.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::datapipe::PointCloud;
use crate::rng::RngStream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SurfaceKind {
    Floor,
    Ceiling,
    Wall,
    Column,
    Box,
    Clutter,
}

impl SurfaceKind {
    pub const ALL: [SurfaceKind; 6] = [
        SurfaceKind::Floor,
        SurfaceKind::Ceiling,
        SurfaceKind::Wall,
        SurfaceKind::Column,
        SurfaceKind::Box,
        SurfaceKind::Clutter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceKind::Floor => "floor",
            SurfaceKind::Ceiling => "ceiling",
            SurfaceKind::Wall => "wall",
            SurfaceKind::Column => "column",
            SurfaceKind::Box => "box",
            SurfaceKind::Clutter => "clutter",
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            SurfaceKind::Floor => [115.0, 105.0, 90.0],
            SurfaceKind::Ceiling => [225.0, 225.0, 215.0],
            SurfaceKind::Wall => [195.0, 185.0, 160.0],
            SurfaceKind::Column => [165.0, 165.0, 170.0],
            SurfaceKind::Box => [70.0, 100.0, 160.0],
            SurfaceKind::Clutter => [185.0, 80.0, 60.0],
        }
    }
}

impl fmt::Display for SurfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SurfaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SurfaceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Room size along x, y and z (height), in meters.
    pub extent: [f64; 3],
    /// Classes in label order.
    pub classes: Vec<SurfaceKind>,
    pub points_per_class: usize,
    /// Per-class multiplier of `points_per_class`, aligned with `classes`.
    pub imbalance: Vec<f64>,
    /// Chance that a planar surface gets a rectangular hole.
    pub hole_probability: f64,
    pub color_noise: f64,
    pub columns: usize,
    pub boxes: usize,
    pub clutter_blobs: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: [6.0, 5.0, 3.0],
            classes: SurfaceKind::ALL.to_vec(),
            points_per_class: 4000,
            imbalance: alloc::vec![1.0, 1.5, 1.0, 0.3, 0.6, 0.4],
            hole_probability: 0.3,
            color_noise: 12.0,
            columns: 2,
            boxes: 3,
            clutter_blobs: 5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("degenerate room extent {:?}", self.extent)));
        }
        if self.extent[0] < 2.0 || self.extent[1] < 2.0 || self.extent[2] < 1.5 {
            return Err(Error::Config("room must be at least 2 m x 2 m x 1.5 m".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("a scene needs at least 2 classes".into()));
        }
        for (i, k) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(k) {
                return Err(Error::Config(format!("class `{k}` listed twice")));
            }
        }
        if self.imbalance.len() != self.classes.len() || self.imbalance.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::Config("imbalance needs one non-negative ratio per class".into()));
        }
        if !(0.0..=1.0).contains(&self.hole_probability) || !(self.color_noise >= 0.0) {
            return Err(Error::Config(
                "hole probability must lie in [0, 1] and color noise be >= 0".into(),
            ));
        }
        let needs = |k: SurfaceKind, n: usize| !self.classes.contains(&k) || n > 0;
        if !needs(SurfaceKind::Column, self.columns)
            || !needs(SurfaceKind::Box, self.boxes)
            || !needs(SurfaceKind::Clutter, self.clutter_blobs)
        {
            return Err(Error::Config(
                "every listed object class needs at least one instance".into(),
            ));
        }
        Ok(())
    }

    /// Points generated for class `i`.
    pub fn class_count(&self, i: usize) -> usize {
        (self.points_per_class as f64 * self.imbalance[i]).round() as usize
    }
}

/// A rectangle `[u0, u1) × [v0, v1)` in a surface's own coordinates.
#[derive(Clone, Copy, Debug)]
struct Rect {
    u: [f64; 2],
    v: [f64; 2],
}

impl Rect {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u[0] && u < self.u[1] && v >= self.v[0] && v < self.v[1]
    }
}

/// A planar patch `origin + u·du + v·dv`, `u ∈ [0, w]`, `v ∈ [0, h]`.
#[derive(Clone, Debug)]
struct Patch {
    origin: [f64; 3],
    du: [f64; 3],
    dv: [f64; 3],
    size: [f64; 2],
    hole: Option<Rect>,
}

impl Patch {
    fn area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    fn sample(&self, rng: &mut RngStream) -> [f64; 3] {
        loop {
            let u = rng.uniform() * self.size[0];
            let v = rng.uniform() * self.size[1];
            if self.hole.is_some_and(|h| h.contains(u, v)) {
                continue;
            }
            return core::array::from_fn(|a| self.origin[a] + u * self.du[a] + v * self.dv[a]);
        }
    }
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

fn patch(origin: [f64; 3], du: [f64; 3], dv: [f64; 3], size: [f64; 2]) -> Patch {
    Patch {
        origin,
        du,
        dv,
        size,
        hole: None,
    }
}

/// Axis-aligned box side faces (and optionally its top), footprint
/// `[x0, x0+w] × [y0, y0+d]`, height `h`.
fn box_faces(x0: f64, y0: f64, w: f64, d: f64, h: f64, top: bool) -> Vec<Patch> {
    let mut faces = alloc::vec![
        patch([x0, y0, 0.0], X, Z, [w, h]),
        patch([x0, y0 + d, 0.0], X, Z, [w, h]),
        patch([x0, y0, 0.0], Y, Z, [d, h]),
        patch([x0 + w, y0, 0.0], Y, Z, [d, h]),
    ];
    if top {
        faces.push(patch([x0, y0, h], X, Y, [w, d]));
    }
    faces
}

struct Layout {
    patches: Vec<(SurfaceKind, Vec<Patch>)>,
    blobs: Vec<([f64; 3], f64)>,
}

fn layout(spec: &SceneSpec, rng: &mut RngStream) -> Layout {
    let [ex, ey, ez] = spec.extent;
    let mut taken: Vec<[f64; 4]> = Vec::new();
    let mut place = |w: f64, d: f64, rng: &mut RngStream| -> [f64; 2] {
        // Keep a margin from walls and other objects; give up overlapping
        // after a bounded number of tries so generation always terminates.
        let margin = 0.3;
        let mut pos = [0.0; 2];
        for _ in 0..64 {
            pos = [
                margin + rng.uniform() * (ex - w - 2.0 * margin),
                margin + rng.uniform() * (ey - d - 2.0 * margin),
            ];
            let clear = taken.iter().all(|t| {
                pos[0] + w + 0.2 <= t[0] || t[2] + 0.2 <= pos[0] || pos[1] + d + 0.2 <= t[1] || t[3] + 0.2 <= pos[1]
            });
            if clear {
                break;
            }
        }
        taken.push([pos[0], pos[1], pos[0] + w, pos[1] + d]);
        pos
    };

    let mut patches = Vec::new();
    for &kind in &spec.classes {
        let ps = match kind {
            SurfaceKind::Floor => alloc::vec![patch([0.0; 3], X, Y, [ex, ey])],
            SurfaceKind::Ceiling => alloc::vec![patch([0.0, 0.0, ez], X, Y, [ex, ey])],
            SurfaceKind::Wall => alloc::vec![
                patch([0.0, 0.0, 0.0], X, Z, [ex, ez]),
                patch([0.0, ey, 0.0], X, Z, [ex, ez]),
                patch([0.0, 0.0, 0.0], Y, Z, [ey, ez]),
                patch([ex, 0.0, 0.0], Y, Z, [ey, ez]),
            ],
            SurfaceKind::Column => (0..spec.columns)
                .flat_map(|_| {
                    let s = 0.3 + 0.2 * rng.uniform();
                    let [x, y] = place(s, s, rng);
                    box_faces(x, y, s, s, ez, false)
                })
                .collect(),
            SurfaceKind::Box => (0..spec.boxes)
                .flat_map(|_| {
                    let w = 0.5 + 0.7 * rng.uniform();
                    let d = 0.4 + 0.5 * rng.uniform();
                    let h = 0.6 + 0.9 * rng.uniform();
                    let [x, y] = place(w, d, rng);
                    box_faces(x, y, w, d, h, true)
                })
                .collect(),
            SurfaceKind::Clutter => Vec::new(),
        };
        patches.push((kind, ps));
    }
    let mut blobs = Vec::new();
    if spec.classes.contains(&SurfaceKind::Clutter) {
        for _ in 0..spec.clutter_blobs {
            let r = 0.1 + 0.15 * rng.uniform();
            let [x, y] = place(2.0 * r, 2.0 * r, rng);
            let z = r + rng.uniform() * (ez * 0.6 - r);
            blobs.push(([x + r, y + r, z], r));
        }
    }
    // Holes only on the large planar surfaces.
    for (kind, ps) in &mut patches {
        if !matches!(kind, SurfaceKind::Floor | SurfaceKind::Ceiling | SurfaceKind::Wall) {
            continue;
        }
        for p in ps {
            if rng.uniform() < spec.hole_probability {
                let w = p.size[0] * (0.1 + 0.2 * rng.uniform());
                let h = p.size[1] * (0.1 + 0.2 * rng.uniform());
                let u0 = rng.uniform() * (p.size[0] - w);
                let v0 = rng.uniform() * (p.size[1] - h);
                p.hole = Some(Rect {
                    u: [u0, u0 + w],
                    v: [v0, v0 + h],
                });
            }
        }
    }
    Layout { patches, blobs }
}

/// Generates one labeled scene; identical specs give identical clouds.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let Layout { patches, blobs } = layout(spec, &mut rng);
    let mut cloud = PointCloud {
        source: format!("synthetic-{}", spec.seed),
        ..PointCloud::default()
    };
    let mut labels = Vec::new();
    for (label, (kind, ps)) in patches.iter().enumerate() {
        let count = spec.class_count(label);
        let areas: Vec<f64> = ps.iter().map(Patch::area).collect();
        let total: f64 = areas.iter().sum();
        let base = kind.base_color();
        for _ in 0..count {
            let p = if *kind == SurfaceKind::Clutter {
                let (c, r) = blobs[rng.below(blobs.len())];
                let mut q = [0.0; 3];
                loop {
                    let d = [rng.normal(), rng.normal(), rng.normal()];
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if n > 0.0 {
                        let s = r * rng.uniform().cbrt() / n;
                        q.iter_mut().enumerate().for_each(|(a, v)| *v = c[a] + d[a] * s);
                        break;
                    }
                }
                q
            } else {
                let mut pick = rng.uniform() * total;
                let mut which = ps.len() - 1;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        which = i;
                        break;
                    }
                    pick -= a;
                }
                ps[which].sample(&mut rng)
            };
            cloud.xyz.push(p.map(|v| v as f32));
            cloud.rgb.push(core::array::from_fn(|a| {
                (base[a] + spec.color_noise * rng.normal()).round().clamp(0.0, 255.0) as u8
            }));
            labels.push(label as u32);
        }
    }
    cloud.labels = Some(labels);
    Ok(cloud)
}

/// `count` scenes sharing `spec` except for consecutive seeds.
pub fn generate_scenes(spec: &SceneSpec, count: usize) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| {
            let s = SceneSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            generate_scene(&s)
        })
        .collect()
}

/// Splits whole scenes: `round(fraction·n)` scenes, chosen by a seeded
/// shuffle, form the test set.
pub fn train_test_split<S: Clone>(scenes: &[S], fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    let n = scenes.len();
    let test = (fraction * n as f64).round() as usize;
    if n < 2 || test == 0 || test >= n {
        return Err(Error::Config(format!(
            "a test fraction of {fraction} leaves one side empty with {n} scenes"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut is_test = alloc::vec![false; n];
    order[..test].iter().for_each(|&i| is_test[i] = true);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (s, t) in scenes.iter().zip(is_test) {
        if t {
            te.push(s.clone());
        } else {
            tr.push(s.clone());
        }
    }
    Ok((tr, te))
}

/// Class names of a spec in label order.
pub fn class_names(spec: &SceneSpec) -> Vec<String> {
    spec.classes.iter().map(|k| String::from(k.as_str())).collect()
}
