//! Class activation maps (CAM), gradient-weighted CAMs (Grad-CAM) at any
//! tapped scale, and their pyramidal fusion (PG-CAM).
//!
//! For a feature map `f` with `K` channels at some scale and class `c`:
//!
//! * CAM is `sum_k w[c,k] f_k(y,x)` using the linear head weights; it is
//!   only defined at the tap feeding the head and is not rectified.
//! * Grad-CAM weights each channel by the spatial mean of the gradient of
//!   the seed with respect to `f_k`, sums, and applies ReLU.
//! * PG-CAM resizes each selected scale's Grad-CAM to input resolution and
//!   sums them.

mod map;

use thiserror::Error;

pub use map::{
    decode_pgsm, encode_pgsm, encode_png, normalize_map, render_gray, resize_map, Method, Provenance, ResizeMode,
    SaliencyMap, ValueRange,
};

use crate::models::{Model, ModelError};
use crate::tensor::{BnMode, Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class {class} out of range for a {classes}-class model")]
    Class { class: usize, classes: usize },
    #[error("PG-CAM needs at least one scale")]
    EmptyScales,
    #[error("{0}")]
    Invalid(String),
    #[error("saliency map format: {0}")]
    Format(String),
}

/// Scalar that Grad-CAM differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradSeed {
    /// Pre-softmax class score.
    #[default]
    ClassLogit,
    /// Log-probability of the class, the negated class loss.
    LogProb,
}

/// How per-scale maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    /// Sum raw resized maps; normalize once afterwards.
    #[default]
    SumThenNormalize,
    /// Normalize each resized map before summing.
    NormalizeThenSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CamOptions {
    pub seed: GradSeed,
    pub fusion: Fusion,
    pub resize: ResizeMode,
}

fn check_class<T: Element>(model: &Model<T>, class: usize) -> Result<(), CamError> {
    let classes = model.config().classes;
    if class >= classes {
        return Err(CamError::Class { class, classes });
    }
    Ok(())
}

fn batch_of<T: Element>(images: &Tensor<T>) -> usize {
    images.dims().first().copied().unwrap_or(0)
}

fn single<T>(mut v: Vec<T>) -> T {
    v.swap_remove(0)
}

fn require_single<T: Element>(image: &Tensor<T>) -> Result<(), CamError> {
    if batch_of(image) != 1 {
        return Err(CamError::Invalid(format!("expected a single image [1,C,H,W], got {}", image.shape())));
    }
    Ok(())
}

/// Weighted channel sums `sum_k weights[b][k] * f[b,k]` of an NCHW feature map.
fn channel_sums<T: Element>(f: &Tensor<T>, weights: &[Vec<f64>]) -> Vec<(usize, usize, Vec<f64>)> {
    let d = f.dims();
    let (k, h, w) = (d[1], d[2], d[3]);
    let plane = h * w;
    f.data()
        .chunks_exact(k * plane)
        .zip(weights)
        .map(|(img, wb)| {
            let mut acc = vec![0.0f64; plane];
            for (ch, &wk) in img.chunks_exact(plane).zip(wb) {
                for (a, &v) in acc.iter_mut().zip(ch) {
                    *a += wk * v.to_f64_lossless();
                }
            }
            (h, w, acc)
        })
        .collect()
}

/// CAM for each image of a batch, at the head's tap resolution.
pub fn cam_batch<T: Element>(model: &Model<T>, images: &Tensor<T>, class: usize) -> Result<Vec<SaliencyMap>, CamError> {
    check_class(model, class)?;
    let scale = model.head_scale();
    let fwd = model.forward(images, &[scale], BnMode::Infer)?;
    let tap = fwd.tap(scale).expect("captured");
    let head = model.head_weight();
    let k = head.dims()[1];
    let row: Vec<f64> = head.data()[class * k..(class + 1) * k].iter().map(|v| v.to_f64_lossless()).collect();
    let weights = vec![row; batch_of(images)];
    let prov = Provenance {
        method: Method::Cam,
        scales: vec![scale],
        class,
    };
    channel_sums(fwd.tape.value(tap.id), &weights)
        .into_iter()
        .map(|(h, w, v)| Ok(SaliencyMap::new(h, w, v)?.with_provenance(prov.clone())))
        .collect()
}

pub fn cam<T: Element>(model: &Model<T>, image: &Tensor<T>, class: usize) -> Result<SaliencyMap, CamError> {
    require_single(image)?;
    Ok(single(cam_batch(model, image, class)?))
}

/// Grad-CAMs at every requested scale for every image, from one forward
/// and one backward pass. Result is indexed `[image][scale position]`.
///
/// Inference-mode batch norm keeps images independent, so each image's
/// tap gradient depends only on its own score.
pub fn grad_cam_batch<T: Element>(
    model: &Model<T>,
    images: &Tensor<T>,
    class: usize,
    scales: &[usize],
    seed: GradSeed,
) -> Result<Vec<Vec<SaliencyMap>>, CamError> {
    check_class(model, class)?;
    let mut fwd = model.forward(images, scales, BnMode::Infer)?;
    let s = match seed {
        GradSeed::ClassLogit => fwd.tape.class_score(fwd.logits, class)?,
        GradSeed::LogProb => fwd.tape.class_log_prob(fwd.logits, class)?,
    };
    let grads = fwd.tape.backward(s)?;
    let b = batch_of(images);
    let mut out: Vec<Vec<SaliencyMap>> = (0..b).map(|_| Vec::with_capacity(scales.len())).collect();
    for &p in scales {
        let tap = fwd.tap(p).expect("captured");
        let g = grads.grad_of(tap.id)?;
        let plane = tap.extent * tap.extent;
        let alphas: Vec<Vec<f64>> = g
            .data()
            .chunks_exact(tap.channels * plane)
            .map(|img| {
                img.chunks_exact(plane)
                    .map(|ch| ch.iter().map(|v| v.to_f64_lossless()).sum::<f64>() / plane as f64)
                    .collect()
            })
            .collect();
        let prov = Provenance {
            method: Method::GradCam,
            scales: vec![p],
            class,
        };
        for (i, (h, w, v)) in channel_sums(fwd.tape.value(tap.id), &alphas).into_iter().enumerate() {
            out[i].push(SaliencyMap::new(h, w, v)?.relu().with_provenance(prov.clone()));
        }
    }
    Ok(out)
}

pub fn grad_cam<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    scale: usize,
    seed: GradSeed,
) -> Result<SaliencyMap, CamError> {
    require_single(image)?;
    Ok(single(single(grad_cam_batch(model, image, class, &[scale], seed)?)))
}

/// Combines per-scale Grad-CAMs into one map at `size x size`.
pub fn fuse(per_scale: &[&SaliencyMap], size: usize, opts: &CamOptions) -> Result<SaliencyMap, CamError> {
    let (first, rest) = per_scale.split_first().ok_or(CamError::EmptyScales)?;
    let prep = |m: &SaliencyMap| -> Result<SaliencyMap, CamError> {
        let r = resize_map(m, size, size, opts.resize)?;
        Ok(match opts.fusion {
            Fusion::SumThenNormalize => r,
            Fusion::NormalizeThenSum => normalize_map(&r),
        })
    };
    let mut acc = prep(first)?;
    for m in rest {
        acc = acc.add(&prep(m)?)?;
    }
    let mut scales = Vec::new();
    let mut class = 0;
    for m in per_scale {
        if let Some(p) = m.provenance() {
            scales.extend_from_slice(&p.scales);
            class = p.class;
        }
    }
    Ok(acc.with_provenance(Provenance {
        method: Method::PgCam,
        scales,
        class,
    }))
}

/// PG-CAM over `scales`, raw, at input resolution.
pub fn pg_cam<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    scales: &[usize],
    opts: &CamOptions,
) -> Result<SaliencyMap, CamError> {
    require_single(image)?;
    if scales.is_empty() {
        return Err(CamError::EmptyScales);
    }
    let maps = single(grad_cam_batch(model, image, class, scales, opts.seed)?);
    let refs: Vec<&SaliencyMap> = maps.iter().collect();
    fuse(&refs, model.config().input_size, opts)
}

/// Parses a scale list such as `"1,4"` or `"1, 2, 3"`.
pub fn parse_scales(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let p: usize = part
            .trim()
            .parse()
            .map_err(|_| format!("invalid scale '{}' in '{s}'", part.trim()))?;
        if p == 0 {
            return Err("scales are numbered from 1".into());
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_baseline, build_dcfpn, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            base_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        Tensor::from_fn([1, 1, 16, 16], |i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0)
    }

    #[test]
    fn per_scale_extents() {
        let m = build_dcfpn::<f64>(&cfg()).unwrap();
        let maps = grad_cam_batch(&m, &image(1), 0, &[1, 2, 3, 4], GradSeed::ClassLogit).unwrap();
        let ext: Vec<usize> = maps[0].iter().map(|m| m.height()).collect();
        assert_eq!(ext, vec![16, 8, 4, 2]);
        assert!(maps[0].iter().all(|m| m.values().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn batch_matches_single_images() {
        let m = build_dcfpn::<f64>(&cfg()).unwrap();
        let a = image(1);
        let b = image(2);
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let both = Tensor::new([2, 1, 16, 16], both).unwrap();
        let batched = grad_cam_batch(&m, &both, 1, &[1, 3], GradSeed::ClassLogit).unwrap();
        let single_b = grad_cam_batch(&m, &b, 1, &[1, 3], GradSeed::ClassLogit).unwrap();
        for (x, y) in batched[1].iter().zip(&single_b[0]) {
            for (u, v) in x.values().iter().zip(y.values()) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn errors() {
        let m = build_baseline::<f64>(&cfg()).unwrap();
        assert!(matches!(cam(&m, &image(0), 5), Err(CamError::Class { .. })));
        assert!(matches!(
            pg_cam(&m, &image(0), 0, &[], &CamOptions::default()),
            Err(CamError::EmptyScales)
        ));
        assert!(matches!(
            grad_cam(&m, &image(0), 0, 1, GradSeed::ClassLogit),
            Err(CamError::Model(ModelError::UnknownScale { .. }))
        ));
    }

    #[test]
    fn scale_list_parsing() {
        assert_eq!(parse_scales("1,4").unwrap(), vec![1, 4]);
        assert_eq!(parse_scales(" 2 , 2,3").unwrap(), vec![2, 3]);
        assert!(parse_scales("0").is_err());
        assert!(parse_scales("1,,2").is_err());
    }
}
