//! Saliency-to-box evaluation over a box-annotated dataset.

use std::fmt;

use super::{detect, loc_metrics, match_and_score, Detection, LocCounts, LocMetrics, DEFAULT_IOBB, DEFAULT_MIN_AREA};
use crate::cam::{cam_batch, fuse, grad_cam_batch, normalize_map, resize_map, CamError, CamOptions, Method, SaliencyMap};
use crate::models::Model;
use crate::phantom::Dataset;
use crate::tensor::Element;

/// One localization method: saliency kind, scales and threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    /// Scales used by Grad-CAM (exactly one) or PG-CAM (one or more).
    /// Ignored by CAM, which always reads the head's tap.
    pub scales: Vec<usize>,
    pub tau: f64,
    pub opts: CamOptions,
}

impl MethodSpec {
    pub fn default_tau(method: Method) -> f64 {
        match method {
            Method::PgCam => 0.4,
            Method::Cam | Method::GradCam => 0.8,
        }
    }

    pub fn new(method: Method, scales: &[usize]) -> Self {
        MethodSpec {
            method,
            scales: scales.to_vec(),
            tau: Self::default_tau(method),
            opts: CamOptions::default(),
        }
    }

    /// Row label such as `pgcam:1,4`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Cam => "cam".into(),
            _ => format!(
                "{}:{}",
                self.method,
                self.scales.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocEvalConfig {
    pub min_area: usize,
    pub iobb: f64,
    /// Class whose saliency is localized.
    pub class: usize,
    pub batch: usize,
}

impl Default for LocEvalConfig {
    fn default() -> Self {
        LocEvalConfig {
            min_area: DEFAULT_MIN_AREA,
            iobb: DEFAULT_IOBB,
            class: 1,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub spec: MethodSpec,
    pub counts: LocCounts,
    pub metrics: LocMetrics,
    /// Detections per image, in dataset order.
    pub detections: Vec<Vec<Detection>>,
}

fn check_spec<T: Element>(model: &Model<T>, spec: &MethodSpec) -> Result<(), CamError> {
    let avail = model.tap_scales();
    match spec.method {
        Method::Cam => {}
        Method::GradCam if spec.scales.len() != 1 => {
            return Err(CamError::Invalid(format!(
                "gradcam takes exactly one scale, got {:?}; use pgcam to fuse scales",
                spec.scales
            )))
        }
        _ if spec.scales.is_empty() => return Err(CamError::EmptyScales),
        _ => {}
    }
    if spec.method != Method::Cam {
        if let Some(p) = spec.scales.iter().find(|p| !avail.contains(p)) {
            return Err(CamError::Invalid(format!("scale {p} is not tapped (available: {avail:?})")));
        }
    }
    if !(0.0..=1.0).contains(&spec.tau) {
        return Err(CamError::Invalid(format!("threshold {} outside [0, 1]", spec.tau)));
    }
    Ok(())
}

/// Normalized input-resolution saliency for each spec and image,
/// indexed `[spec][image]`. Extraction is shared across specs: one
/// forward and backward pass per batch.
pub fn saliency_maps<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    specs: &[MethodSpec],
    cfg: &LocEvalConfig,
) -> Result<Vec<Vec<SaliencyMap>>, CamError> {
    for s in specs {
        check_spec(model, s)?;
    }
    let size = model.config().input_size;
    if data.image_size() != size && !data.is_empty() {
        return Err(CamError::Invalid(format!(
            "dataset images are {0}x{0}, model expects {size}x{size}",
            data.image_size()
        )));
    }
    let mut grad_scales: Vec<usize> = Vec::new();
    for s in specs.iter().filter(|s| s.method != Method::Cam) {
        for &p in &s.scales {
            if !grad_scales.contains(&p) {
                grad_scales.push(p);
            }
        }
    }
    grad_scales.sort_unstable();
    let seeds: Vec<_> = {
        let mut v: Vec<_> = specs.iter().filter(|s| s.method != Method::Cam).map(|s| s.opts.seed).collect();
        v.dedup();
        v
    };
    if seeds.len() > 1 {
        return Err(CamError::Invalid("all gradient methods in one evaluation must share a seed".into()));
    }
    let need_cam = specs.iter().any(|s| s.method == Method::Cam);
    let mut out: Vec<Vec<SaliencyMap>> = vec![Vec::with_capacity(data.len()); specs.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch.max(1)) {
        let images = data.batch::<T>(chunk);
        let cams = if need_cam { cam_batch(model, &images, cfg.class)? } else { Vec::new() };
        let grads = match seeds.first() {
            Some(&seed) => grad_cam_batch(model, &images, cfg.class, &grad_scales, seed)?,
            None => Vec::new(),
        };
        for b in 0..chunk.len() {
            for (si, s) in specs.iter().enumerate() {
                let pick = |p: usize| &grads[b][grad_scales.iter().position(|&q| q == p).expect("scale extracted")];
                let raw = match s.method {
                    Method::Cam => resize_map(&cams[b], size, size, s.opts.resize)?,
                    Method::GradCam => resize_map(pick(s.scales[0]), size, size, s.opts.resize)?,
                    Method::PgCam => {
                        let maps: Vec<&SaliencyMap> = s.scales.iter().map(|&p| pick(p)).collect();
                        fuse(&maps, size, &s.opts)?
                    }
                };
                out[si].push(normalize_map(&raw));
            }
        }
    }
    Ok(out)
}

/// Extracts, thresholds, boxes and matches every image for every spec.
/// Counts are aggregated per box over the whole dataset.
pub fn evaluate_localization<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    specs: &[MethodSpec],
    cfg: &LocEvalConfig,
) -> Result<Vec<MethodResult>, CamError> {
    if !(0..data.len()).any(|i| !data.boxes(i).is_empty()) {
        return Err(CamError::Invalid("localization needs a box-annotated dataset".into()));
    }
    let maps = saliency_maps(model, data, specs, cfg)?;
    let mut results = Vec::with_capacity(specs.len());
    for (spec, maps) in specs.iter().zip(maps) {
        let mut counts = LocCounts::default();
        let mut detections = Vec::with_capacity(maps.len());
        for (i, m) in maps.iter().enumerate() {
            let dets = detect(m, spec.tau, cfg.min_area).map_err(|e| CamError::Invalid(e.to_string()))?;
            let preds: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            counts += match_and_score(&preds, data.boxes(i), cfg.iobb);
            detections.push(dets);
        }
        results.push(MethodResult {
            spec: spec.clone(),
            counts,
            metrics: loc_metrics(counts),
            detections,
        });
    }
    Ok(results)
}
