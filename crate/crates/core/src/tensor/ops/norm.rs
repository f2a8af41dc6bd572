use super::super::{invalid, Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// are trainable parameters and live with the other model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Element> BnState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(Self::DEFAULT_MOMENTUM),
            eps: T::from_f64(Self::DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update from one training batch. The
    /// running variance uses the unbiased batch estimate.
    pub fn absorb(&mut self, m: &BatchMoments<T>) {
        let keep = T::one() - self.momentum;
        let n = m.count as f64;
        let unbias = if m.count > 1 { T::from_f64(n / (n - 1.0)) } else { T::one() };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + self.momentum * m.mean[c];
            self.running_var[c] = keep * self.running_var[c] + self.momentum * m.var[c] * unbias;
        }
    }
}

/// Per-channel batch mean and biased variance over `count` values.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub(crate) struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub moments: Option<BatchMoments<T>>,
}

pub(crate) fn batch_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BnState<T>,
    mode: BnMode,
) -> Result<BnForward<T>> {
    const OP: &str = "batch_norm";
    let (b, c, h, w) = x.shape().nchw(OP)?;
    if b == 0 || h * w == 0 {
        return invalid(OP, format!("cannot normalize an empty batch {}", x.shape()));
    }
    if state.channels() != c || gamma.dims() != [c] || beta.dims() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: x.shape().clone(),
            rhs: gamma.shape().clone(),
        });
    }
    let hw = h * w;
    let (mean, var, moments) = match mode {
        BnMode::Train => {
            // Welford over (batch, spatial)
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let (mut m, mut m2, mut n) = (0.0f64, 0.0f64, 0.0f64);
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for &v in &x.data()[off..off + hw] {
                        let v = v.to_f64_lossless();
                        n += 1.0;
                        let d = v - m;
                        m += d / n;
                        m2 += d * (v - m);
                    }
                }
                mean[ch] = T::from_f64(m);
                var[ch] = T::from_f64(m2 / n);
            }
            let moments = BatchMoments {
                mean: mean.clone(),
                var: var.clone(),
                count: b * hw,
            };
            (mean, var, Some(moments))
        }
        BnMode::Infer => (state.running_mean.clone(), state.running_var.clone(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = Tensor::zeros(x.shape().clone());
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let xh = (x.data()[i] - mu) * is;
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        moments,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Element>(
    dims: (usize, usize, usize),
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    mode: BnMode,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, hw) = dims;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let dyd = dy.data();
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] = dgamma[ch] + dyd[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + dyd[i];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape().clone());
    let n = T::from_f64((b * hw) as f64);
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let g = gamma.data()[ch];
            let is = inv_std[ch];
            for i in off..off + hw {
                dx.data_mut()[i] = match mode {
                    BnMode::Infer => dyd[i] * g * is,
                    // dxhat = dy*g; dx = is/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                    BnMode::Train => {
                        g * is / n * (n * dyd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    }
                };
            }
        }
    }
    (
        dx,
        Tensor::new([c], dgamma).expect("channel vector"),
        Tensor::new([c], dbeta).expect("channel vector"),
    )
}
