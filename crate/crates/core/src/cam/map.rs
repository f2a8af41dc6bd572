use std::fmt;

use super::CamError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    Raw,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Cam,
    GradCam,
    PgCam,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::PgCam => "pgcam",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cam" => Ok(Method::Cam),
            "gradcam" => Ok(Method::GradCam),
            "pgcam" => Ok(Method::PgCam),
            other => Err(format!("unknown method '{other}' (expected cam, gradcam or pgcam)")),
        }
    }
}

/// Where a map came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub method: Method,
    pub scales: Vec<usize>,
    pub class: usize,
}

/// A row-major `height x width` saliency map.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    range: ValueRange,
    provenance: Option<Provenance>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, CamError> {
        if height == 0 || width == 0 || height.checked_mul(width) != Some(values.len()) {
            return Err(CamError::Invalid(format!(
                "{} values do not form a {height}x{width} map",
                values.len()
            )));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
            range: ValueRange::Raw,
            provenance: None,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        SaliencyMap::new(height, width, values).expect("extents are positive")
    }

    pub(crate) fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the first maximal value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn relu(&self) -> SaliencyMap {
        SaliencyMap {
            values: self.values.iter().map(|&v| v.max(0.0)).collect(),
            range: ValueRange::Raw,
            ..self.clone()
        }
    }

    /// Elementwise sum; extents must match.
    pub fn add(&self, other: &SaliencyMap) -> Result<SaliencyMap, CamError> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(CamError::Invalid(format!(
                "cannot add {}x{} and {}x{} maps",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(SaliencyMap {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            range: ValueRange::Raw,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Corner-aligned source coordinate for output index `i`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 || src == 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

pub fn resize_map(map: &SaliencyMap, height: usize, width: usize, mode: ResizeMode) -> Result<SaliencyMap, CamError> {
    if height == 0 || width == 0 {
        return Err(CamError::Invalid(format!("cannot resize to {height}x{width}")));
    }
    if (height, width) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let (sh, sw) = (map.height, map.width);
    let values = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| {
            let fy = source_coord(y, sh, height);
            let fx = source_coord(x, sw, width);
            match mode {
                ResizeMode::Nearest => map.get((fy.round() as usize).min(sh - 1), (fx.round() as usize).min(sw - 1)),
                ResizeMode::Bilinear => {
                    let y0 = (fy.floor() as usize).min(sh - 1);
                    let x0 = (fx.floor() as usize).min(sw - 1);
                    let y1 = (y0 + 1).min(sh - 1);
                    let x1 = (x0 + 1).min(sw - 1);
                    let ty = fy - y0 as f64;
                    let tx = fx - x0 as f64;
                    let top = map.get(y0, x0) * (1.0 - tx) + map.get(y0, x1) * tx;
                    let bottom = map.get(y1, x0) * (1.0 - tx) + map.get(y1, x1) * tx;
                    top * (1.0 - ty) + bottom * ty
                }
            }
        })
        .collect();
    Ok(SaliencyMap {
        height,
        width,
        values,
        range: ValueRange::Raw,
        provenance: map.provenance.clone(),
    })
}

/// Affine rescale to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_map(map: &SaliencyMap) -> SaliencyMap {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let values = if span > 0.0 && span.is_finite() {
        map.values.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; map.values.len()]
    };
    SaliencyMap {
        values,
        range: ValueRange::Normalized,
        ..map.clone()
    }
}

const PGSM_MAGIC: &[u8; 4] = b"PGSM";

/// `"PGSM"`, u32 height, u32 width, row-major f32 values, all little-endian.
pub fn encode_pgsm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values.len());
    out.extend_from_slice(PGSM_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_pgsm(bytes: &[u8]) -> Result<SaliencyMap, CamError> {
    let bad = |m: String| Err(CamError::Format(m));
    if bytes.len() < 12 {
        return bad(format!("{} bytes is shorter than the 12-byte header", bytes.len()));
    }
    if &bytes[..4] != PGSM_MAGIC {
        return bad("bad magic (expected PGSM)".into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    match h.checked_mul(w).and_then(|n| n.checked_mul(4)) {
        Some(n) if n == body.len() && n > 0 => {}
        _ => return bad(format!("{h}x{w} map does not match a {}-byte body", body.len())),
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    SaliencyMap::new(h, w, values)
}

/// 8-bit grayscale rendering: min maps to 0, max to 255.
pub fn render_gray(map: &SaliencyMap) -> Vec<u8> {
    normalize_map(map)
        .values
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect()
}

pub fn encode_png(map: &SaliencyMap) -> Result<Vec<u8>, CamError> {
    let img = image::GrayImage::from_raw(map.width as u32, map.height as u32, render_gray(map))
        .ok_or_else(|| CamError::Invalid("map extents overflow an image".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CamError::Format(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}
