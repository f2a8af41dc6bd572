use std::collections::{BTreeSet, HashMap};
use std::fmt;

use super::ops::{self, BatchMoments, BnMode, BnState};
use super::{invalid, Element, Result, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

enum Op<T> {
    Constant,
    Param,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Relu {
        x: TensorId,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    Concat {
        inputs: Vec<TensorId>,
    },
    Slice {
        x: TensorId,
        start: usize,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    ClassScore {
        logits: TensorId,
        class: usize,
    },
    ClassLogProb {
        logits: TensorId,
        class: usize,
        probs: Tensor<T>,
    },
    Scale {
        x: TensorId,
        alpha: T,
    },
    WeightedSum {
        x: TensorId,
        weights: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::TransposedConv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::MaxPool { x, .. }
            | Op::Relu { x }
            | Op::Slice { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Scale { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. }
            | Op::ClassScore { logits, .. }
            | Op::ClassLogProb { logits, .. } => vec![*logits],
        }
    }
}

/// Linear record of a forward computation.
///
/// Values are appended in execution order, so every node's inputs precede
/// it. Gradients are retained for parameters and for explicitly tapped
/// intermediates.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    taps: BTreeSet<TensorId>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            taps: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> TensorId {
        self.values.push(value);
        self.ops.push(op);
        TensorId(self.values.len() - 1)
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id.0 < self.values.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownId(id.0))
        }
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &Shape {
        self.values[id.0].shape()
    }

    /// Records an input that needs no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.push(t, Op::Constant)
    }

    /// Records a trainable leaf; its gradient is always retained.
    pub fn param(&mut self, t: Tensor<T>) -> TensorId {
        self.push(t, Op::Param)
    }

    /// Retains the gradient of `id` in the next backward pass.
    pub fn tap(&mut self, id: TensorId) -> Result<()> {
        self.check(id)?;
        self.taps.insert(id);
        Ok(())
    }

    pub fn taps(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.taps.iter().copied()
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn transposed_conv2d(&mut self, x: TensorId, w: TensorId, stride: usize) -> Result<TensorId> {
        self.check(x)?;
        self.check(w)?;
        let y = ops::transposed_conv2d(self.value(x), self.value(w), stride)?;
        Ok(self.push(y, Op::TransposedConv2d { x, w, stride }))
    }

    pub fn maxpool2d(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        self.check(x)?;
        let (y, argmax) = ops::maxpool2d(self.value(x), k, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let y = ops::relu(self.value(x));
        Ok(self.push(y, Op::Relu { x }))
    }

    /// Batch normalization. In training mode the batch moments are
    /// returned so the caller can fold them into `state`.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &BnState<T>,
        mode: BnMode,
    ) -> Result<(TensorId, Option<BatchMoments<T>>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let f = ops::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), state, mode)?;
        let id = self.push(
            f.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                mode,
            },
        );
        Ok((id, f.moments))
    }

    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        for &i in inputs {
            self.check(i)?;
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let y = ops::concat_channels(&refs)?;
        Ok(self.push(
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check(x)?;
        let y = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Scalar mean cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        self.check(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn class_checked(&self, logits: TensorId, class: usize, op: &'static str) -> Result<usize> {
        self.check(logits)?;
        match self.shape(logits).dims() {
            [_, k] if class < *k => Ok(*k),
            _ => invalid(op, format!("class {class} invalid for logits {}", self.shape(logits))),
        }
    }

    /// Sum over the batch of the pre-softmax score of `class`.
    pub fn class_score(&mut self, logits: TensorId, class: usize) -> Result<TensorId> {
        let k = self.class_checked(logits, class, "class_score")?;
        let s = self.value(logits).data().chunks_exact(k).map(|r| r[class]).sum();
        Ok(self.push(Tensor::scalar(s), Op::ClassScore { logits, class }))
    }

    /// Sum over the batch of `log softmax(logits)[class]`, i.e. the
    /// negated per-image cross-entropy of `class`.
    pub fn class_log_prob(&mut self, logits: TensorId, class: usize) -> Result<TensorId> {
        let k = self.class_checked(logits, class, "class_log_prob")?;
        let z = self.value(logits);
        let s = z.data().chunks_exact(k).map(|r| ops::log_softmax_at(r, class)).sum();
        let probs = ops::softmax(z)?;
        Ok(self.push(Tensor::scalar(s), Op::ClassLogProb { logits, class, probs }))
    }

    pub fn scale(&mut self, x: TensorId, alpha: T) -> Result<TensorId> {
        self.check(x)?;
        let y = self.value(x).map(|v| v * alpha);
        Ok(self.push(y, Op::Scale { x, alpha }))
    }

    /// `sum(x * weights)` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: TensorId, weights: Tensor<T>) -> Result<TensorId> {
        self.check(x)?;
        if weights.shape() != self.shape(x) {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(x).clone(),
                rhs: weights.shape().clone(),
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Reverse-mode accumulation from a scalar seed.
    pub fn backward(&self, seed: TensorId) -> Result<Gradients<T>> {
        self.check(seed)?;
        if self.value(seed).numel() != 1 {
            return Err(TensorError::NonScalarSeed(self.shape(seed).clone()));
        }
        let n = seed.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = matches!(self.ops[i], Op::Param)
                || self.taps.contains(&TensorId(i))
                || self.ops[i].inputs().iter().any(|j| needs[j.0]);
        }
        let retained = |i: usize| matches!(self.ops[i], Op::Param) || self.taps.contains(&TensorId(i));

        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(self.shape(seed).clone(), T::one()));
        let mut kept = HashMap::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if retained(i) {
                kept.insert(TensorId(i), g.clone());
            }
            if !needs[i] {
                continue;
            }
            self.backprop_node(i, &g, &needs, &mut grads)?;
        }
        let mut params = Vec::new();
        for i in 0..self.values.len() {
            let id = TensorId(i);
            if retained(i) {
                if matches!(self.ops[i], Op::Param) {
                    params.push(id);
                }
                // unreachable from the seed: zero gradient
                kept.entry(id).or_insert_with(|| Tensor::zeros(self.shape(id).clone()));
            }
        }
        Ok(Gradients {
            grads: kept,
            taps: self.taps.iter().copied().collect(),
            params,
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        needs: &[bool],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let need = |id: &TensorId| needs[id.0];
        let mut acc = |id: TensorId, d: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.ops[i] {
            Op::Constant | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                if need(w) || need(x) || b.as_ref().is_some_and(need) {
                    let cg = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        g,
                        *stride,
                        *pad,
                        need(x),
                    )?;
                    if let Some(dx) = cg.dx {
                        acc(*x, dx);
                    }
                    if need(w) {
                        acc(*w, cg.dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        if need(b) {
                            acc(*b, db);
                        }
                    }
                }
            }
            Op::TransposedConv2d { x, w, stride } => {
                let (dx, dw) =
                    ops::transposed_conv2d_backward(self.value(*x), self.value(*w), g, *stride, need(x))?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if need(w) {
                    acc(*w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if need(x) {
                    acc(*x, ops::maxpool2d_backward(self.value(*x), argmax, g));
                }
            }
            Op::Relu { x } => {
                if need(x) {
                    acc(*x, ops::relu_backward(self.value(*x), g));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (b, c, h, w) = self.shape(*x).nchw("batch_norm")?;
                let (dx, dgamma, dbeta) =
                    ops::batch_norm_backward((b, c, h * w), self.value(*gamma), xhat, inv_std, *mode, g);
                if need(x) {
                    acc(*x, dx);
                }
                if need(gamma) {
                    acc(*gamma, dgamma);
                }
                if need(beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &inp in inputs {
                    let c = self.shape(inp).dims()[1];
                    if need(&inp) {
                        acc(inp, ops::slice_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                if need(x) {
                    let mut dx = Tensor::zeros(self.shape(*x).clone());
                    ops::scatter_channels(&mut dx, g, *start);
                    acc(*x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if need(x) {
                    acc(*x, ops::global_avg_pool_backward(self.shape(*x), g));
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g, need(x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if need(w) {
                    acc(*w, dw);
                }
                if need(b) {
                    acc(*b, db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if need(logits) {
                    let k = probs.dims()[1];
                    let scale = g.item() / T::from_f64(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &l) in d.data_mut().chunks_exact_mut(k).zip(labels) {
                        row[l] = row[l] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    acc(*logits, d);
                }
            }
            Op::ClassScore { logits, class } => {
                if need(logits) {
                    let mut d = Tensor::zeros(self.shape(*logits).clone());
                    let k = d.dims()[1];
                    for row in d.data_mut().chunks_exact_mut(k) {
                        row[*class] = g.item();
                    }
                    acc(*logits, d);
                }
            }
            Op::ClassLogProb { logits, class, probs } => {
                if need(logits) {
                    let k = probs.dims()[1];
                    let s = g.item();
                    let mut d = probs.clone();
                    for row in d.data_mut().chunks_exact_mut(k) {
                        row.iter_mut().for_each(|v| *v = -*v * s);
                        row[*class] = row[*class] + s;
                    }
                    acc(*logits, d);
                }
            }
            Op::Scale { x, alpha } => {
                if need(x) {
                    acc(*x, g.map(|v| v * *alpha));
                }
            }
            Op::WeightedSum { x, weights } => {
                if need(x) {
                    let s = g.item();
                    acc(*x, weights.map(|v| v * s));
                }
            }
        }
        Ok(())
    }
}

/// Gradients retained by one backward pass: every parameter and every
/// tapped intermediate.
#[derive(Clone)]
pub struct Gradients<T> {
    grads: HashMap<TensorId, Tensor<T>>,
    taps: Vec<TensorId>,
    params: Vec<TensorId>,
}

impl<T: Element> Gradients<T> {
    pub fn grad_of(&self, id: TensorId) -> Result<&Tensor<T>> {
        self.grads.get(&id).ok_or_else(|| TensorError::NotTapped {
            id: id.0,
            available: self.taps.iter().map(|t| t.0).collect(),
        })
    }

    pub fn params(&self) -> &[TensorId] {
        &self.params
    }

    pub fn taps(&self) -> &[TensorId] {
        &self.taps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.grad_of(x).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarSeed(_))));
    }

    #[test]
    fn untapped_id_lists_available_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let r = tape.relu(x).unwrap();
        tape.tap(r).unwrap();
        let p = tape.global_avg_pool(r).unwrap();
        let w = tape.param(Tensor::full([1, 1], 1.0));
        let b = tape.param(Tensor::zeros([1]));
        let y = tape.linear(p, w, b).unwrap();
        let s = tape.class_score(y, 0).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad_of(r).unwrap().shape(), tape.shape(r));
        let err = g.grad_of(p).unwrap_err();
        assert_eq!(
            err,
            TensorError::NotTapped {
                id: p.index(),
                available: vec![r.index()]
            }
        );
        assert!(err.to_string().contains(&format!("[{}]", r.index())));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4, 4], |i| (i as f32 * 0.37).sin()));
        let w = tape.param(Tensor::from_fn([2, 3, 3, 3], |i| (i as f32 * 0.11).cos()));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        let l = tape.softmax_cross_entropy(p, &[0, 1]).unwrap();
        let a = tape.backward(l).unwrap();
        let b = tape.backward(l).unwrap();
        assert_eq!(a.grad_of(w).unwrap(), b.grad_of(w).unwrap());
    }

    #[test]
    fn tapping_a_constant_still_yields_its_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 2, 2, 2], 1.0));
        tape.tap(x).unwrap();
        let y = tape.weighted_sum(x, Tensor::full([1, 2, 2, 2], 0.5)).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.grad_of(x).unwrap().data().iter().all(|&v| v == 0.5));
    }
}
