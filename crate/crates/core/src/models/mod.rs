//! The densely connected feature pyramid network (DC-FPN) and the
//! single-scale GAP-head baseline.
//!
//! Both models end in global average pooling followed by a linear
//! classifier, and both expose feature taps keyed by scale index `p`
//! (1 = finest, input resolution). A tap at scale `p` has spatial extent
//! `input_size / 2^(p-1)`.
//!
//! DC-FPN topology at `n` scales:
//!
//! * encoder scale `p`: (max-pool if `p > 1`), two 3x3 conv+ReLU, dense
//!   concat of the block input with its output followed by batch norm,
//!   then a 3x3 transition conv for `p < n` whose output is both the
//!   same-scale skip and the next scale's input;
//! * decoder scale `p`: 2x2 stride-2 transposed conv from scale `p+1`
//!   (absent at `p = n`), concat with the encoder skip, two 3x3
//!   conv+ReLU, dense concat + batch norm. The block output is tap `p`;
//! * tap 1 feeds the GAP + linear head.
//!
//! That is `2n + (n-1)` encoder and `2n + (n-1)` decoder conv layers,
//! 22 at the default `n = 4`. With dense connections off, blocks emit
//! only their conv output and no batch norm is applied.

mod checkpoint;
mod layout;

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, Record, CHECKPOINT_VERSION};
pub use layout::ParamStore;

use crate::tensor::{BatchMoments, BnMode, BnState, Element, Tape, Tensor, TensorError, TensorId};
use layout::{Bn, Conv, Layout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("scale {scale} is not tapped by this model (available: {available:?})")]
    UnknownScale { scale: usize, available: Vec<usize> },
    #[error("input batch {got} does not match model input [B,{channels},{size},{size}]")]
    InputShape {
        got: crate::tensor::Shape,
        channels: usize,
        size: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Dcfpn,
    Baseline,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Dcfpn => 0,
            ModelKind::Baseline => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Dcfpn),
            1 => Some(ModelKind::Baseline),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Dcfpn => "dcfpn",
            ModelKind::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dcfpn" => Ok(ModelKind::Dcfpn),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(format!("unknown model '{other}' (expected dcfpn or baseline)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input extent.
    pub input_size: usize,
    /// Number of pyramid scales `n`.
    pub scales: usize,
    pub base_channels: usize,
    pub classes: usize,
    pub dense: bool,
    pub in_channels: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            scales: 4,
            base_channels: 8,
            classes: 2,
            dense: true,
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 224x224 input, as used for full-size MR slices.
    pub fn paper_scale() -> Self {
        ModelConfig {
            input_size: 224,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.scales < 2 {
            return bad(format!("scale count must be at least 2, got {}", self.scales));
        }
        if self.scales > 16 {
            return bad(format!("scale count {} is unreasonably large", self.scales));
        }
        let step = 1usize << (self.scales - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return bad(format!(
                "input size {} is not divisible by 2^(n-1) = {step}",
                self.input_size
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }

    /// Encoder width at scale `p`: `base * 2^(p-1)`, capped at `8 * base`.
    pub fn width(&self, p: usize) -> usize {
        self.base_channels * (1usize << (p - 1).min(3))
    }

    pub fn tap_extent(&self, p: usize) -> usize {
        self.input_size >> (p - 1)
    }
}

/// A captured feature map `f^{s_p}` on a forward tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureTap {
    pub scale: usize,
    pub id: TensorId,
    /// Unit count `k_p`.
    pub channels: usize,
    pub extent: usize,
}

/// Result of one forward pass; the tape is retained for backward.
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub logits: TensorId,
    pub taps: Vec<FeatureTap>,
    /// Tape ids of the model parameters, in store order.
    pub params: Vec<TensorId>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub moments: Vec<(usize, BatchMoments<T>)>,
}

impl<T: Element> Forward<T> {
    pub fn tap(&self, scale: usize) -> Option<&FeatureTap> {
        self.taps.iter().find(|t| t.scale == scale)
    }
}

#[derive(Clone, PartialEq)]
pub struct Model<T> {
    kind: ModelKind,
    config: ModelConfig,
    params: ParamStore<T>,
    bn: Vec<(String, BnState<T>)>,
    layout: Layout,
    tap_channels: Vec<Option<usize>>,
}

impl<T: Element> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.kind)
            .field("config", &self.config)
            .field("params", &self.params.numel())
            .finish()
    }
}

pub fn build_dcfpn<T: Element>(config: &ModelConfig) -> Result<Model<T>, ModelError> {
    Model::build(ModelKind::Dcfpn, config)
}

pub fn build_baseline<T: Element>(config: &ModelConfig) -> Result<Model<T>, ModelError> {
    Model::build(ModelKind::Baseline, config)
}

struct Ctx<'a, T> {
    tape: Tape<T>,
    ids: Vec<TensorId>,
    bn: &'a [(String, BnState<T>)],
    mode: BnMode,
    moments: Vec<(usize, BatchMoments<T>)>,
}

impl<T: Element> Ctx<'_, T> {
    fn conv(&mut self, x: TensorId, c: Conv) -> Result<TensorId, TensorError> {
        self.tape.conv2d(x, self.ids[c.w], Some(self.ids[c.b]), 1, 1)
    }

    fn conv_relu(&mut self, x: TensorId, c: Conv) -> Result<TensorId, TensorError> {
        let y = self.conv(x, c)?;
        self.tape.relu(y)
    }

    fn bn(&mut self, x: TensorId, bn: Bn) -> Result<TensorId, TensorError> {
        let (y, m) = self.tape.batch_norm(
            x,
            self.ids[bn.gamma],
            self.ids[bn.beta],
            &self.bn[bn.state].1,
            self.mode,
        )?;
        if let Some(m) = m {
            self.moments.push((bn.state, m));
        }
        Ok(y)
    }
}

impl<T: Element> Model<T> {
    pub fn build(kind: ModelKind, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let built = layout::build(kind, config);
        Ok(Model {
            kind,
            config: config.clone(),
            params: built.params,
            bn: built.bn,
            layout: built.layout,
            tap_channels: built.tap_channels,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[(String, BnState<T>)] {
        &self.bn
    }

    /// Number of convolution and transposed-convolution layers.
    pub fn conv_layer_count(&self) -> usize {
        self.layout.conv_layers()
    }

    /// Scales at which this model exposes a feature tap.
    pub fn tap_scales(&self) -> Vec<usize> {
        (1..=self.config.scales)
            .filter(|p| self.tap_channels[p - 1].is_some())
            .collect()
    }

    /// Channel count `k_p` of the tap at scale `p`.
    pub fn tap_channels(&self, p: usize) -> Option<usize> {
        self.tap_channels.get(p.wrapping_sub(1)).copied().flatten()
    }

    /// The scale whose tap feeds the GAP + linear head.
    pub fn head_scale(&self) -> usize {
        match self.kind {
            ModelKind::Dcfpn => 1,
            ModelKind::Baseline => self.config.scales,
        }
    }

    /// Classifier weights `w_c^k` as a `[classes, k]` tensor.
    pub fn head_weight(&self) -> &Tensor<T> {
        self.params.get(self.layout.head().w)
    }

    pub fn head_bias(&self) -> &Tensor<T> {
        self.params.get(self.layout.head().b)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.is_finite())
            && self
                .bn
                .iter()
                .all(|(_, s)| s.running_mean.iter().chain(&s.running_var).all(|v| v.is_finite()))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn absorb_moments(&mut self, moments: &[(usize, BatchMoments<T>)]) {
        for (i, m) in moments {
            self.bn[*i].1.absorb(m);
        }
    }

    /// Runs the network on `batch [B, in_channels, S, S]`, retaining the
    /// feature maps of the `capture` scales as tapped tensors.
    pub fn forward(&self, batch: &Tensor<T>, capture: &[usize], mode: BnMode) -> Result<Forward<T>, ModelError> {
        let c = &self.config;
        match batch.dims() {
            [_, ch, h, w] if *ch == c.in_channels && *h == c.input_size && *w == c.input_size => {}
            _ => {
                return Err(ModelError::InputShape {
                    got: batch.shape().clone(),
                    channels: c.in_channels,
                    size: c.input_size,
                })
            }
        }
        let available = self.tap_scales();
        if let Some(&bad) = capture.iter().find(|p| !available.contains(p)) {
            return Err(ModelError::UnknownScale { scale: bad, available });
        }
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = self.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let mut ctx = Ctx {
            tape,
            ids,
            bn: &self.bn,
            mode,
            moments: Vec::new(),
        };
        let x = ctx.tape.constant(batch.clone());
        let mut maps: Vec<Option<TensorId>> = vec![None; c.scales];
        let head_in = match &self.layout {
            Layout::Dcfpn { encoder, decoder, .. } => {
                let mut h = x;
                let mut skips = Vec::with_capacity(c.scales);
                for (i, block) in encoder.iter().enumerate() {
                    if i > 0 {
                        h = ctx.tape.maxpool2d(h, 2, 2)?;
                    }
                    let y = ctx.conv_relu(h, block.conv1)?;
                    let y = ctx.conv_relu(y, block.conv2)?;
                    let out = match block.bn {
                        Some(bn) => {
                            let cat = ctx.tape.concat_channels(&[h, y])?;
                            let normed = ctx.bn(cat, bn)?;
                            ctx.tape.relu(normed)?
                        }
                        None => y,
                    };
                    h = match block.transition {
                        Some(t) => {
                            let e = ctx.conv_relu(out, t)?;
                            skips.push(e);
                            e
                        }
                        None => out,
                    };
                }
                let mut below = h;
                for p in (1..=c.scales).rev() {
                    let block = &decoder[p - 1];
                    let input = match block.up {
                        Some(up) => {
                            let u = ctx.tape.transposed_conv2d(below, ctx.ids[up], 2)?;
                            ctx.tape.concat_channels(&[u, skips[p - 1]])?
                        }
                        None => below,
                    };
                    let y = ctx.conv_relu(input, block.conv1)?;
                    let y = ctx.conv_relu(y, block.conv2)?;
                    let out = match block.bn {
                        Some(bn) => {
                            let cat = ctx.tape.concat_channels(&[input, y])?;
                            let normed = ctx.bn(cat, bn)?;
                            ctx.tape.relu(normed)?
                        }
                        None => y,
                    };
                    maps[p - 1] = Some(out);
                    below = out;
                }
                below
            }
            Layout::Baseline { stages, .. } => {
                let mut h = x;
                for (i, stage) in stages.iter().enumerate() {
                    if i > 0 {
                        h = ctx.tape.maxpool2d(h, 2, 2)?;
                    }
                    for &(conv, bn) in stage {
                        let y = ctx.conv(h, conv)?;
                        let y = ctx.bn(y, bn)?;
                        h = ctx.tape.relu(y)?;
                    }
                }
                maps[c.scales - 1] = Some(h);
                h
            }
        };
        let head = self.layout.head();
        let pooled = ctx.tape.global_avg_pool(head_in)?;
        let logits = ctx.tape.linear(pooled, ctx.ids[head.w], ctx.ids[head.b])?;

        let mut taps = Vec::with_capacity(capture.len());
        let mut seen = Vec::new();
        for &p in capture {
            if seen.contains(&p) {
                continue;
            }
            seen.push(p);
            let id = maps[p - 1].expect("available scales have maps");
            ctx.tape.tap(id)?;
            taps.push(FeatureTap {
                scale: p,
                id,
                channels: ctx.tape.shape(id).dims()[1],
                extent: ctx.tape.shape(id).dims()[2],
            });
        }
        Ok(Forward {
            tape: ctx.tape,
            logits,
            taps,
            params: ctx.ids,
            moments: ctx.moments,
        })
    }

    /// Inference-mode logits for a batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let f = self.forward(batch, &[], BnMode::Infer)?;
        Ok(f.tape.value(f.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut records: Vec<Record> = self
            .params
            .iter()
            .map(|(name, t)| Record::from_tensor(name, t))
            .collect();
        for (name, s) in &self.bn {
            let c = s.channels();
            records.push(Record::from_tensor(
                &format!("{name}.running_mean"),
                &Tensor::new([c], s.running_mean.clone()).expect("channel vector"),
            ));
            records.push(Record::from_tensor(
                &format!("{name}.running_var"),
                &Tensor::new([c], s.running_var.clone()).expect("channel vector"),
            ));
        }
        Checkpoint {
            kind: self.kind,
            config: self.config.clone(),
            records,
        }
    }

    /// Rebuilds a model from a checkpoint, requiring every record of the
    /// described topology with matching shapes. Records under the
    /// `optim.` prefix belong to the trainer and are ignored here.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Model::<T>::build(ckpt.kind, &ckpt.config)?;
        let mut used = vec![false; ckpt.records.len()];
        let mut take = |name: &str, dims: &[usize]| -> Result<Tensor<T>, CheckpointError> {
            let (i, r) = ckpt
                .records
                .iter()
                .enumerate()
                .find(|(_, r)| r.name == name)
                .ok_or_else(|| CheckpointError::Topology(format!("missing record '{name}'")))?;
            if r.dims != dims {
                return Err(CheckpointError::Topology(format!(
                    "record '{name}' has shape {:?}, topology expects {dims:?}",
                    r.dims
                )));
            }
            used[i] = true;
            r.to_tensor()
        };
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let dims = model.params.get(i).dims().to_vec();
            *model.params.get_mut(i) = take(&name, &dims)?;
        }
        for (name, s) in model.bn.iter_mut() {
            let c = s.channels();
            s.running_mean = take(&format!("{name}.running_mean"), &[c])?.into_data();
            s.running_var = take(&format!("{name}.running_var"), &[c])?.into_data();
            if s.running_var.iter().any(|&v| v <= T::zero()) {
                return Err(CheckpointError::Malformed(format!("non-positive running variance in '{name}'")).into());
            }
        }
        if let Some((_, r)) = ckpt
            .records
            .iter()
            .zip(&used)
            .map(|(r, u)| (u, r))
            .find(|(u, r)| !**u && !r.name.starts_with("optim."))
        {
            return Err(CheckpointError::Topology(format!("unexpected record '{}'", r.name)).into());
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        if !self.all_finite() {
            return Err(CheckpointError::Malformed("refusing to save non-finite parameters".into()).into());
        }
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint, rejecting it unless it was written for the
    /// given model kind and configuration.
    pub fn load_checkpoint_for(path: &Path, kind: ModelKind, config: &ModelConfig) -> Result<Self, ModelError> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != kind || &ckpt.config != config {
            return Err(CheckpointError::Topology(format!(
                "checkpoint is a {} {:?}, expected a {} {:?}",
                ckpt.kind, ckpt.config, kind, config
            ))
            .into());
        }
        Self::from_checkpoint(&ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &ModelConfig, b: usize) -> Tensor<f32> {
        Tensor::from_fn([b, 1, cfg.input_size, cfg.input_size], |i| ((i * 7) % 13) as f32 / 13.0)
    }

    #[test]
    fn default_dcfpn_has_22_conv_layers() {
        let m = build_dcfpn::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(m.conv_layer_count(), 22);
        assert_eq!(m.tap_scales(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn tap_ladder_at_desk_scale() {
        let cfg = ModelConfig::default();
        let m = build_dcfpn::<f32>(&cfg).unwrap();
        let f = m.forward(&input(&cfg, 1), &[1, 2, 3, 4], BnMode::Infer).unwrap();
        let extents: Vec<usize> = f.taps.iter().map(|t| t.extent).collect();
        assert_eq!(extents, vec![64, 32, 16, 8]);
        for t in &f.taps {
            assert_eq!(f.tape.shape(t.id).dims(), &[1, t.channels, t.extent, t.extent]);
            assert_eq!(Some(t.channels), m.tap_channels(t.scale));
        }
    }

    #[test]
    fn dense_channels_grow_by_block_width() {
        let cfg = ModelConfig::default();
        let m = build_dcfpn::<f32>(&cfg).unwrap();
        // decoder p: input 2w (p<n), output 3w; bottom: input 8b + 4b + ... see layout
        assert_eq!(m.tap_channels(1), Some(3 * 8));
        assert_eq!(m.tap_channels(2), Some(3 * 16));
        assert_eq!(m.tap_channels(3), Some(3 * 32));
        // encoder bottom 32 + 64 = 96 in, +64 growth
        assert_eq!(m.tap_channels(4), Some(96 + 64));
        let plain = build_dcfpn::<f32>(&ModelConfig { dense: false, ..cfg.clone() }).unwrap();
        assert_eq!(plain.tap_channels(1), Some(8));
        assert_eq!(plain.tap_channels(4), Some(64));
        assert_eq!(plain.conv_layer_count(), 22);
        let f = plain.forward(&input(&cfg, 2), &[1, 4], BnMode::Infer).unwrap();
        assert_eq!(f.tape.shape(f.logits).dims(), &[2, 2]);
        assert_eq!(f.taps[1].extent, 8);
    }

    #[test]
    fn baseline_single_coarse_tap() {
        let cfg = ModelConfig::default();
        let m = build_baseline::<f32>(&cfg).unwrap();
        assert_eq!(m.tap_scales(), vec![4]);
        assert_eq!(m.conv_layer_count(), 14);
        let f = m.forward(&input(&cfg, 1), &[4], BnMode::Infer).unwrap();
        // 8x smaller per side: 64x smaller in area
        assert_eq!(f.taps[0].extent * 8, cfg.input_size);
        assert!(matches!(
            m.forward(&input(&cfg, 1), &[1], BnMode::Infer),
            Err(ModelError::UnknownScale { scale: 1, .. })
        ));
    }

    #[test]
    fn empty_capture_and_determinism() {
        let cfg = ModelConfig {
            input_size: 32,
            ..ModelConfig::default()
        };
        let m = build_dcfpn::<f32>(&cfg).unwrap();
        let x = input(&cfg, 2);
        let a = m.forward(&x, &[], BnMode::Infer).unwrap();
        assert!(a.taps.is_empty());
        assert_eq!(a.tape.taps().count(), 0);
        let b = m.forward(&x, &[], BnMode::Infer).unwrap();
        assert_eq!(a.tape.value(a.logits), b.tape.value(b.logits));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            input_size: 60,
            ..ModelConfig::default()
        };
        assert!(build_dcfpn::<f32>(&bad).is_err());
        let one = ModelConfig {
            scales: 1,
            ..ModelConfig::default()
        };
        assert!(build_baseline::<f32>(&one).is_err());
    }

    #[test]
    fn wrong_input_extent_is_rejected() {
        let m = build_baseline::<f32>(&ModelConfig::default()).unwrap();
        let x = Tensor::<f32>::zeros([1, 1, 32, 32]);
        assert!(matches!(m.forward(&x, &[], BnMode::Infer), Err(ModelError::InputShape { .. })));
    }
}
