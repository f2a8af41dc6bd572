use super::super::gemm::{gemm, Mat};
use super::super::{invalid, Element, Result, Shape, Tensor, TensorError};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at exactly 0.
pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().clone(), data).expect("same shape")
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = match inputs.first() {
        Some(t) => *t,
        None => return invalid(OP, "no inputs"),
    };
    let (b, _, h, w) = first.shape().nchw(OP)?;
    let mut total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.shape().nchw(OP)?;
        if (tb, th, tw) != (b, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: first.shape().clone(),
                rhs: t.shape().clone(),
            });
        }
        total += tc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for t in inputs {
            let c = t.dims()[1];
            data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new([b, total, h, w], data)
}

pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    const OP: &str = "slice_channels";
    let (b, c, h, w) = x.shape().nchw(OP)?;
    if start + len > c {
        return invalid(OP, format!("channels {start}..{} out of range for {}", start + len, x.shape()));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * len * hw);
    for bi in 0..b {
        let off = (bi * c + start) * hw;
        data.extend_from_slice(&x.data()[off..off + len * hw]);
    }
    Tensor::new([b, len, h, w], data)
}

/// Adds `dy` (a channel slice gradient) into `dx` at channel `start`.
pub(crate) fn scatter_channels<T: Element>(dx: &mut Tensor<T>, dy: &Tensor<T>, start: usize) {
    let (b, c, h, w) = (dx.dims()[0], dx.dims()[1], dx.dims()[2], dx.dims()[3]);
    let len = dy.dims()[1];
    let hw = h * w;
    for bi in 0..b {
        let dst = (bi * c + start) * hw;
        let src = bi * len * hw;
        for i in 0..len * hw {
            let v = dx.data()[dst + i] + dy.data()[src + i];
            dx.data_mut()[dst + i] = v;
        }
    }
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "global_avg_pool";
    let (b, c, h, w) = x.shape().nchw(OP)?;
    if h * w == 0 {
        return invalid(OP, "empty spatial extent");
    }
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([b, c], data)
}

pub(crate) fn global_avg_pool_backward<T: Element>(input: &Shape, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.dims()[2], input.dims()[3]);
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut data = Vec::with_capacity(input.numel());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input.clone(), data).expect("input shape")
}

pub(crate) fn linear_check(x: &Shape, w: &Shape, b: &Shape) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    let mismatch = |l: &Shape, r: &Shape| TensorError::ShapeMismatch {
        op: OP,
        lhs: l.clone(),
        rhs: r.clone(),
    };
    let (bs, c) = match x.dims() {
        [bs, c] => (*bs, *c),
        _ => return Err(mismatch(x, w)),
    };
    let k = match w.dims() {
        [k, wc] if *wc == c => *k,
        _ => return Err(mismatch(x, w)),
    };
    if b.dims() != [k] {
        return Err(mismatch(w, b));
    }
    Ok((bs, c, k))
}

/// `x [B,C] · wᵀ [C,K] + b`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, c, k) = linear_check(x.shape(), w.shape(), b.shape())?;
    let mut out = Tensor::zeros([bs, k]);
    gemm(
        Mat::row_major(x.data(), bs, c),
        Mat::row_major(w.data(), k, c).t(),
        out.data_mut(),
        false,
    );
    for row in out.data_mut().chunks_exact_mut(k) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = *v + bv;
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (bs, c) = (x.dims()[0], x.dims()[1]);
    let k = w.dims()[0];
    let mut dw = Tensor::zeros([k, c]);
    gemm(
        Mat::row_major(dy.data(), bs, k).t(),
        Mat::row_major(x.data(), bs, c),
        dw.data_mut(),
        false,
    );
    let mut db = Tensor::zeros([k]);
    for row in dy.data().chunks_exact(k) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros([bs, c]);
        gemm(
            Mat::row_major(dy.data(), bs, k),
            Mat::row_major(w.data(), k, c),
            dx.data_mut(),
            false,
        );
        dx
    });
    (dx, dw, db)
}

/// Row-wise softmax of `[B,K]` logits, max-subtracted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match logits.dims() {
        [_, k] if *k > 0 => *k,
        _ => return invalid("softmax", format!("expected [B,K] logits, got {}", logits.shape())),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Ok(out)
}

/// Stable `log softmax(row)[idx]`.
pub(crate) fn log_softmax_at<T: Element>(row: &[T], idx: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    row[idx] - lse
}

/// Mean over the batch of `-log softmax(logits)[label]`; also returns the
/// softmax probabilities for the backward pass.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_cross_entropy";
    let (b, k) = match logits.dims() {
        [b, k] if *k > 0 => (*b, *k),
        _ => return invalid(OP, format!("expected [B,K] logits, got {}", logits.shape())),
    };
    if labels.len() != b {
        return invalid(OP, format!("{} labels for a batch of {b}", labels.len()));
    }
    if b == 0 {
        return invalid(OP, "empty batch");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return invalid(OP, format!("label {bad} out of range for {k} classes"));
    }
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        loss = loss - log_softmax_at(row, l);
    }
    Ok((loss / T::from_f64(b as f64), softmax(logits)?))
}
