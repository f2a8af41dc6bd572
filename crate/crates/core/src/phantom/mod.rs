//! Synthetic head-like phantoms with optional elliptical tumors.
//!
//! Each phantom is a pure function of `(seed, index)`: a bright skull
//! rim, a mid-gray brain with smooth value noise and two dark ventricles,
//! and with probability `prevalence` a soft-edged bright ellipse. The
//! ground-truth box of a tumor is the tight box of pixels whose tumor
//! intensity delta exceeds half its peak.

mod dataset;
mod manifest;
mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use dataset::Dataset;
pub use manifest::{format_manifest, parse_manifest, read_manifest, write_manifest, Manifest, ManifestEntry, ManifestError};
pub use pgm::{decode_pgm, encode_pgm, GrayImage, PgmError};

use crate::localizer::BBox;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: PgmError,
    },
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Probability that a phantom carries a tumor.
    pub prevalence: f64,
    /// Tumor semi-axis range as a fraction of the image size.
    pub radius_range: (f64, f64),
    /// Tumor peak intensity delta range, in unit intensity.
    pub contrast_range: (f64, f64),
    /// Amplitude of the smooth background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            prevalence: 0.15,
            radius_range: (0.06, 0.14),
            contrast_range: (0.22, 0.4),
            noise: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.image_size < 16 || self.image_size > 4096 {
            return bad(format!("image size {} outside 16..=4096", self.image_size));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} must lie in (0, 1)", self.prevalence));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 0.5) {
            return bad(format!("radius range ({r0}, {r1}) must satisfy 0 < lo <= hi < 0.5"));
        }
        let (c0, c1) = self.contrast_range;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return bad(format!("contrast range ({c0}, {c1}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, 0.5)", self.noise));
        }
        Ok(())
    }
}

/// Width of the Gaussian shoulder outside the tumor core, in units of
/// the ellipse radius.
const TUMOR_EDGE: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tumor {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub contrast: f64,
}

impl Tumor {
    /// Intensity added at the center of pixel `(x, y)`.
    pub fn delta(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let d = (dx * dx + dy * dy).sqrt();
        if d <= 1.0 {
            self.contrast
        } else {
            let t = (d - 1.0) / TUMOR_EDGE;
            self.contrast * (-0.5 * t * t).exp()
        }
    }

    /// Tight box of pixels whose delta exceeds half the peak.
    pub fn half_peak_box(&self, size: usize) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if self.delta(x, y) > 0.5 * self.contrast {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub label: usize,
    pub boxes: Vec<BBox>,
    pub tumor: Option<Tumor>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise over a coarse lattice, in `[-1, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 1;
        ValueNoise {
            cells,
            lattice: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let fx = (u * self.cells as f64).clamp(0.0, self.cells as f64 - 1e-9);
        let fy = (v * self.cells as f64).clamp(0.0, self.cells as f64 - 1e-9);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
        let g = |x: usize, y: usize| self.lattice[y * n + x];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn ellipse_dist(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> f64 {
    let dx = (x - cx) / ax;
    let dy = (y - cy) / ay;
    (dx * dx + dy * dy).sqrt()
}

/// Deterministic phantom for `(config.seed, index)`.
pub fn generate_phantom(config: &PhantomConfig, index: u64) -> Phantom {
    generate_with_prevalence(config, index, config.prevalence)
}

fn generate_with_prevalence(config: &PhantomConfig, index: u64, prevalence: f64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let s = config.image_size as f64;
    let has_tumor = rng.random::<f64>() < prevalence;

    let cx = s * (0.5 + rng.random_range(-0.03..0.03));
    let cy = s * (0.5 + rng.random_range(-0.03..0.03));
    let ax = s * rng.random_range(0.37..0.42);
    let ay = s * rng.random_range(0.42..0.47);
    let rim = rng.random_range(0.08..0.12);
    let skull = rng.random_range(0.82..0.94);
    let brain = rng.random_range(0.38..0.5);
    let vent = brain - rng.random_range(0.15..0.22);
    let vdx = s * rng.random_range(0.06..0.09);
    let (vax, vay) = (s * rng.random_range(0.035..0.05), s * rng.random_range(0.09..0.13));
    let noise = ValueNoise::new(&mut rng, 5);
    let grain = config.noise * 0.3;

    let tumor = has_tumor.then(|| {
        let (r0, r1) = config.radius_range;
        let (c0, c1) = config.contrast_range;
        let rx = s * rng.random_range(r0..=r1);
        let ry = s * rng.random_range(r0..=r1);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let rad = rng.random_range(0.0f64..1.0).sqrt() * 0.5;
        Tumor {
            cx: cx + ang.cos() * rad * ax,
            cy: cy + ang.sin() * rad * ay,
            rx,
            ry,
            contrast: rng.random_range(c0..=c1),
        }
    });

    let n = config.image_size;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ellipse_dist(px, py, cx, cy, ax, ay);
            let mut v = if d > 1.0 {
                0.03
            } else if d > 1.0 - rim {
                skull
            } else {
                let left = ellipse_dist(px, py, cx - vdx, cy - 0.02 * s, vax, vay);
                let right = ellipse_dist(px, py, cx + vdx, cy - 0.02 * s, vax, vay);
                let base = if left.min(right) <= 1.0 { vent } else { brain };
                base + config.noise * noise.at(px / s, py / s)
            };
            if let Some(t) = &tumor {
                v += t.delta(x, y);
            }
            v += grain * rng.random_range(-1.0..1.0);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let boxes = tumor.iter().filter_map(|t| t.half_peak_box(n)).collect();
    Phantom {
        image: GrayImage {
            width: n,
            height: n,
            maxval: 255,
            pixels,
        },
        label: usize::from(has_tumor),
        boxes,
        tumor,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub loc: usize,
    /// Tumor prevalence of the box-annotated localization split.
    pub loc_prevalence: f64,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            val: 400,
            loc: 100,
            loc_prevalence: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub loc: PathBuf,
}

pub const SPLITS: [&str; 3] = ["train", "val", "eval_loc"];

/// Stream index of sample `i` of split `split`; splits never overlap.
fn stream(split: u64, i: usize) -> u64 {
    (split << 40) | i as u64
}

/// Generates one split's phantoms in memory.
pub fn generate_split(config: &PhantomConfig, split: usize, n: usize, prevalence: f64) -> Vec<Phantom> {
    (0..n)
        .map(|i| generate_with_prevalence(config, stream(split as u64, i), prevalence))
        .collect()
}

/// Writes train, val and eval-loc splits under `out` as P5 images plus
/// one manifest per split. Only eval-loc entries carry boxes. Manifests
/// are written last and atomically.
pub fn write_dataset(config: &PhantomConfig, counts: &SplitCounts, out: &Path) -> Result<DatasetPaths, PhantomError> {
    config.validate()?;
    if !(counts.loc_prevalence > 0.0 && counts.loc_prevalence <= 1.0) {
        return Err(PhantomError::Config(format!(
            "localization prevalence {} must lie in (0, 1]",
            counts.loc_prevalence
        )));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PhantomError::Io { path, source }
    };
    let plan = [
        (counts.train, config.prevalence, false),
        (counts.val, config.prevalence, false),
        (counts.loc, counts.loc_prevalence, true),
    ];
    let mut manifests = Vec::new();
    for (split, (&name, &(n, prev, keep_boxes))) in SPLITS.iter().zip(&plan).enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let p = generate_with_prevalence(config, stream(split as u64, i), prev);
            let rel = PathBuf::from(name).join(format!("{i:05}.pgm"));
            let path = out.join(&rel);
            fs::write(&path, encode_pgm(&p.image)).map_err(io(&path))?;
            entries.push(ManifestEntry {
                path: rel,
                label: p.label,
                boxes: if keep_boxes { p.boxes } else { Vec::new() },
            });
        }
        manifests.push((out.join(format!("{name}.tsv")), entries));
    }
    for (path, entries) in &manifests {
        write_manifest(path, entries)?;
    }
    Ok(DatasetPaths {
        train: manifests[0].0.clone(),
        val: manifests[1].0.clone(),
        loc: manifests[2].0.clone(),
    })
}
