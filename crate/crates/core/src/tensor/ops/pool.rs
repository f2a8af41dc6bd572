use super::super::{invalid, Element, Result, Tensor};

/// Max pooling; returns the output and, per output element, the flat
/// input index of the window maximum (first row-major maximum on ties).
pub fn maxpool2d<T: Element>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    let (b, c, h, w) = x.shape().nchw(OP)?;
    if k == 0 || stride == 0 {
        return invalid(OP, "window and stride must be positive");
    }
    if h % stride != 0 || w % stride != 0 || h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return invalid(
            OP,
            format!("extent {h}x{w} is not divisible into {k}x{k} windows at stride {stride}"),
        );
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + k {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                od[o] = xd[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2d_backward<T: Element>(input: &Tensor<T>, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input.shape().clone());
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(dy.data()) {
        d[src] = d[src] + g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f64>::full([1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = maxpool2d_backward(&x, &arg, &Tensor::full([1, 1, 2, 2], 1.0));
        assert_eq!(dx.data().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(dx.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn rejects_indivisible_extent() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 4]);
        assert!(maxpool2d(&x, 2, 2).is_err());
    }
}
