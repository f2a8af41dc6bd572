//! Saliency maps to bounding boxes, and IOBB-based detection scoring.
//!
//! IOBB is the intersection over the *detected* box: `|pred ∩ gt| / |pred|`.

mod boxfile;
mod eval;

use std::fmt;

use thiserror::Error;

pub use boxfile::{format_boxes, parse_boxes};
pub use eval::{evaluate_localization, saliency_maps, LocEvalConfig, MethodResult, MethodSpec};

use crate::cam::{SaliencyMap, ValueRange};

#[derive(Debug, Error, PartialEq)]
pub enum LocError {
    #[error("threshold needs a normalized map")]
    NotNormalized,
    #[error("threshold {0} outside [0, 1]")]
    Tau(f64),
    #[error("invalid box ({0}, {1}, {2}, {3}): need x0 < x1 and y0 < y1")]
    Box(i64, i64, i64, i64),
    #[error("box file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Half-open integer box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, LocError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(LocError::Box(x0.into(), y0.into(), x1.into(), y1.into()));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }

    pub fn y0(&self) -> u32 {
        self.y0
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }

    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u64 {
        u64::from(self.x1 - self.x0)
    }

    pub fn height(&self) -> u64 {
        u64::from(self.y1 - self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        u64::from(w) * u64::from(h)
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl std::str::FromStr for BBox {
    type Err = String;

    /// Parses `"x0,y0,x1,y1"`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("box '{s}' needs four comma-separated coordinates"));
        }
        let mut v = [0u32; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| format!("invalid coordinate '{p}' in box '{s}'"))?;
        }
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

/// Intersection over the detected box.
pub fn iobb(pred: &BBox, gt: &BBox) -> f64 {
    pred.intersection_area(gt) as f64 / pred.area() as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask extent");
        Mask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `mask[y,x] = map[y,x] >= tau` on a normalized map.
pub fn threshold_mask(map: &SaliencyMap, tau: f64) -> Result<Mask, LocError> {
    if map.range() != ValueRange::Normalized {
        return Err(LocError::NotNormalized);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(LocError::Tau(tau));
    }
    Ok(Mask::new(
        map.height(),
        map.width(),
        map.values().iter().map(|&v| v >= tau).collect(),
    ))
}

/// Pixels `(x, y)` of one 8-connected component, in scanline order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(u32, u32)>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        BBox::new(x0, y0, x1, y1).ok()
    }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// 8-connected components, two-pass union-find. Components are ordered
/// by their first pixel in scanline order.
pub fn connected_components(mask: &Mask) -> Vec<Region> {
    let (h, w) = (mask.height, mask.width);
    const NONE: usize = usize::MAX;
    let mut label = vec![NONE; h * w];
    let mut parent: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let mut neighbors = [NONE; 4];
            if x > 0 {
                neighbors[0] = label[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbors[1] = label[up + x - 1];
                }
                neighbors[2] = label[up + x];
                if x + 1 < w {
                    neighbors[3] = label[up + x + 1];
                }
            }
            let mut mine = NONE;
            for &n in neighbors.iter().filter(|&&n| n != NONE) {
                if mine == NONE {
                    mine = n;
                } else {
                    union(&mut parent, mine, n);
                }
            }
            if mine == NONE {
                mine = parent.len();
                parent.push(mine);
            }
            label[y * w + x] = mine;
        }
    }
    let mut slot = vec![NONE; parent.len()];
    let mut regions: Vec<Region> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = label[y * w + x];
            if l == NONE {
                continue;
            }
            let root = find(&mut parent, l);
            if slot[root] == NONE {
                slot[root] = regions.len();
                regions.push(Region { pixels: Vec::new() });
            }
            regions[slot[root]].pixels.push((x as u32, y as u32));
        }
    }
    regions
}

/// Tight boxes of regions with at least `min_area` pixels.
pub fn tight_boxes(regions: &[Region], min_area: usize) -> Vec<BBox> {
    regions
        .iter()
        .filter(|r| r.area() >= min_area)
        .filter_map(Region::bbox)
        .collect()
}

/// Default minimum component size at desk scale.
pub const DEFAULT_MIN_AREA: usize = 4;
/// Default IOBB success threshold.
pub const DEFAULT_IOBB: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Mean saliency inside the box.
    pub score: f64,
}

/// Threshold, label, box. Scores are the mean map value inside each box.
pub fn detect(map: &SaliencyMap, tau: f64, min_area: usize) -> Result<Vec<Detection>, LocError> {
    let mask = threshold_mask(map, tau)?;
    let boxes = tight_boxes(&connected_components(&mask), min_area);
    Ok(boxes
        .into_iter()
        .map(|b| {
            let mut sum = 0.0;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    sum += map.get(y as usize, x as usize);
                }
            }
            Detection {
                bbox: b,
                score: sum / b.area() as f64,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LocCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::AddAssign for LocCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Greedy one-to-one matching by descending IOBB. Ties break by lower
/// prediction index, then lower ground-truth index.
pub fn match_and_score(preds: &[BBox], gts: &[BBox], thresh: f64) -> LocCounts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iobb(p, g);
            if v >= thresh && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut tp = 0u64;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    LocCounts {
        tp,
        fp: preds.len() as u64 - tp,
        fn_: gts.len() as u64 - tp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn loc_metrics(c: LocCounts) -> LocMetrics {
    LocMetrics {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        accuracy: ratio(c.tp, c.tp + c.fp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}
