//! 2-D convolution and transposed convolution kernels.
//!
//! Both lower to a column buffer (`im2col`) and a GEMM. The transposed
//! convolution is literally the input-gradient of a convolution with the
//! same weight memory, which is what makes the two an adjoint pair.

use super::super::gemm::{gemm, Mat};
use super::super::{invalid, Element, Result, Shape, Tensor, TensorError};

/// Geometry of a convolution seen from its (padded) input side.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return invalid(op, "stride must be positive");
        }
        if kh == 0 || kw == 0 {
            return invalid(op, "kernel extents must be positive");
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return invalid(
                op,
                format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            );
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return invalid(
                op,
                format!(
                    "output extent not integral: ({ph} - {kh}) / {stride} or ({pw} - {kw}) / {stride}"
                ),
            );
        }
        Ok(ConvGeom {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // ox*s + k - pad in [0, extent)
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        let hi = if extent + self.pad <= k {
            0
        } else {
            ((extent - 1 + self.pad - k) / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.wo);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        line[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto an image (adjoint of `im2col`).
fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.wo);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kj - g.pad;
                        dst[ix] = dst[ix] + line[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_geom(
    x: &Shape,
    w: &Shape,
    bias: Option<&Shape>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    const OP: &str = "conv2d";
    let (b, cin, h, wd) = x.nchw(OP)?;
    let mismatch = || TensorError::ShapeMismatch {
        op: OP,
        lhs: x.clone(),
        rhs: w.clone(),
    };
    let (cout, wcin, kh, kw) = w.nchw(OP).map_err(|_| mismatch())?;
    if wcin != cin {
        return Err(mismatch());
    }
    if let Some(bs) = bias {
        if bs.dims() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: w.clone(),
                rhs: bs.clone(),
            });
        }
    }
    let g = ConvGeom::new(OP, cin, (h, wd), (kh, kw), stride, pad)?;
    Ok((b, cout, g))
}

/// Cross-correlation of `x [B,Cin,H,W]` with `w [Cout,Cin,kh,kw]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (b, cout, g) = conv2d_geom(x.shape(), w.shape(), bias.map(|t| t.shape()), stride, pad)?;
    let (k, n) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros([b, cout, g.ho, g.wo]);
    let mut col = vec![T::zero(); k * n];
    let in_len = g.channels * g.h * g.w;
    let wm = Mat::row_major(w.data(), cout, k);
    for (xb, ob) in x
        .data()
        .chunks_exact(in_len)
        .zip(out.data_mut().chunks_exact_mut(cout * n))
    {
        im2col(xb, &g, &mut col);
        gemm(wm, Mat::row_major(&col, k, n), ob, false);
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_exact_mut(n).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input, given the upstream
/// gradient `dy [B,Cout,H',W']` and the input spatial extent.
pub fn conv2d_backward_input<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    input_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_backward_input";
    let (b, dcout, dh, dw) = dy.shape().nchw(OP)?;
    let (cout, cin, kh, kw) = w.shape().nchw(OP)?;
    if cout != dcout {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: dy.shape().clone(),
            rhs: w.shape().clone(),
        });
    }
    let g = ConvGeom::new(OP, cin, input_hw, (kh, kw), stride, pad)?;
    if (g.ho, g.wo) != (dh, dw) {
        return invalid(
            OP,
            format!(
                "upstream gradient {} inconsistent with input extent {:?}",
                dy.shape(),
                input_hw
            ),
        );
    }
    let mut dx = Tensor::zeros([b, cin, g.h, g.w]);
    scatter_input_grad(dy.data(), w.data(), cout, &g, dx.data_mut());
    Ok(dx)
}

fn scatter_input_grad<T: Element>(dy: &[T], w: &[T], cout: usize, g: &ConvGeom, dx: &mut [T]) {
    let (k, n) = (g.col_rows(), g.col_cols());
    let mut dcol = vec![T::zero(); k * n];
    let wt = Mat::row_major(w, cout, k).t();
    let in_len = g.channels * g.h * g.w;
    for (dyb, dxb) in dy.chunks_exact(cout * n).zip(dx.chunks_exact_mut(in_len)) {
        gemm(wt, Mat::row_major(dyb, cout, n), &mut dcol, false);
        col2im(&dcol, g, dxb);
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (_, cout, g) = conv2d_geom(x.shape(), w.shape(), None, stride, pad)?;
    let (k, n) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.h * g.w;
    let mut dw = Tensor::zeros(w.shape().clone());
    let mut col = vec![T::zero(); k * n];
    for (xb, dyb) in x
        .data()
        .chunks_exact(in_len)
        .zip(dy.data().chunks_exact(cout * n))
    {
        im2col(xb, &g, &mut col);
        gemm(
            Mat::row_major(dyb, cout, n),
            Mat::row_major(&col, k, n).t(),
            dw.data_mut(),
            true,
        );
    }
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros([cout]);
        for dyb in dy.data().chunks_exact(cout * n) {
            for (acc, row) in db.data_mut().iter_mut().zip(dyb.chunks_exact(n)) {
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().clone());
        scatter_input_grad(dy.data(), w.data(), cout, &g, dx.data_mut());
        dx
    });
    Ok(ConvGrads { dx, dw, db })
}

/// Geometry of a transposed convolution: `(batch, cout, geom)` where the
/// geometry describes the matching forward convolution over the output.
pub(crate) fn transposed_geom(x: &Shape, w: &Shape, stride: usize) -> Result<(usize, usize, ConvGeom)> {
    const OP: &str = "transposed_conv2d";
    let (b, cin, h, wd) = x.nchw(OP)?;
    let mismatch = || TensorError::ShapeMismatch {
        op: OP,
        lhs: x.clone(),
        rhs: w.clone(),
    };
    let (wcin, cout, kh, kw) = w.nchw(OP).map_err(|_| mismatch())?;
    if wcin != cin {
        return Err(mismatch());
    }
    if stride == 0 {
        return invalid(OP, "stride must be positive");
    }
    if kh != kw || kh < stride || !(kh - stride).is_multiple_of(2) {
        return invalid(
            OP,
            format!("kernel {kh}x{kw} with stride {stride} cannot scale extents exactly by {stride}"),
        );
    }
    let pad = (kh - stride) / 2;
    let g = ConvGeom::new(OP, cout, (h * stride, wd * stride), (kh, kw), stride, pad)?;
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    Ok((b, cout, g))
}

/// Transposed convolution of `x [B,Cin,H,W]` with `w [Cin,Cout,k,k]`;
/// the output is `[B,Cout,H*stride,W*stride]`.
pub fn transposed_conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (b, cout, g) = transposed_geom(x.shape(), w.shape(), stride)?;
    let cin = x.dims()[1];
    let mut out = Tensor::zeros([b, cout, g.h, g.w]);
    scatter_input_grad(x.data(), w.data(), cin, &g, out.data_mut());
    Ok(out)
}

pub(crate) fn transposed_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (_, _, g) = transposed_geom(x.shape(), w.shape(), stride)?;
    let cin = x.dims()[1];
    let (k, n) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.h * g.w;
    let wm = Mat::row_major(w.data(), cin, k);
    let mut col = vec![T::zero(); k * n];
    let mut dw = Tensor::zeros(w.shape().clone());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().clone()));
    for (bi, (xb, dyb)) in x
        .data()
        .chunks_exact(cin * n)
        .zip(dy.data().chunks_exact(out_len))
        .enumerate()
    {
        im2col(dyb, &g, &mut col);
        gemm(
            Mat::row_major(xb, cin, n),
            Mat::row_major(&col, k, n).t(),
            dw.data_mut(),
            true,
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * n..(bi + 1) * cin * n];
            gemm(wm, Mat::row_major(&col, k, n), dxb, false);
        }
    }
    Ok((dx, dw))
}
