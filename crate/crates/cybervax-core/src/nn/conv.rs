//! 2-D convolution with im2col + GEMM, plus the exact input/weight
//! gradients. Supports stride, symmetric zero padding, and channel groups
//! (depthwise filters use `groups == channels`).
//!
//! Data layout is `N×C×H×W`; weights are `C_out × C_in/groups × kh × kw`.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::Scalar;

/// Output spatial extent of a convolution; `None` when the kernel does not
/// fit even once.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold `C×H×W` into a `(C·kh·kw) × (Ho·Wo)` patch matrix with virtual
/// zero padding.
pub fn im2col<S: Scalar>(
    x: ArrayView3<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_size(h, kh, stride, pad).expect("invalid conv geometry");
    let wo = conv_out_size(w, kw, stride, pad).expect("invalid conv geometry");
    let mut col = Array2::<S>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut col_row = col.index_axis_mut(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch matrix back into `C×H×W`, accumulating overlaps — the
/// adjoint of [`im2col`].
pub fn col2im<S: Scalar>(
    col: ArrayView2<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<S> {
    let ho = conv_out_size(h, kh, stride, pad).expect("invalid conv geometry");
    let wo = conv_out_size(w, kw, stride, pad).expect("invalid conv geometry");
    let mut out = ndarray::Array3::<S>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let col_row = col.index_axis(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] =
                            out[[ci, iy as usize, ix as usize]] + col_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward pass. Bias handling lives in the graph (a broadcast
/// add), keeping this op pure.
pub fn conv2d_forward<S: Scalar>(
    x: ArrayView4<S>,
    weight: ArrayView4<S>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Array4<S> {
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cig, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    debug_assert_eq!(c_in, cig * groups, "input channels vs weight/groups");
    debug_assert_eq!(c_out % groups, 0);
    let cog = c_out / groups;
    let ho = conv_out_size(h, kh, stride, pad).expect("invalid conv geometry");
    let wo = conv_out_size(w, kw, stride, pad).expect("invalid conv geometry");

    let mut y = Array4::<S>::zeros((n, c_out, ho, wo));
    for ni in 0..n {
        for g in 0..groups {
            let xg = x.slice(ndarray::s![ni, g * cig..(g + 1) * cig, .., ..]);
            let col = im2col(xg, kh, kw, stride, pad);
            let wg = weight
                .slice(ndarray::s![g * cog..(g + 1) * cog, .., .., ..])
                .to_shape((cog, cig * kh * kw))
                .expect("weight slice is contiguous")
                .to_owned();
            let out: Array2<S> = wg.dot(&col); // (cog, ho*wo)
            let mut dst = y.slice_mut(ndarray::s![ni, g * cog..(g + 1) * cog, .., ..]);
            dst.assign(&out.to_shape((cog, ho, wo)).expect("dot result length matches"));
        }
    }
    y
}

/// Gradients of the convolution with respect to input and weight. The
/// `need_*` flags skip either gradient when the corresponding operand is a
/// leaf that does not require one (fixed kernels, data inputs).
pub fn conv2d_backward<S: Scalar>(
    x: ArrayView4<S>,
    weight: ArrayView4<S>,
    dy: ArrayView4<S>,
    stride: usize,
    pad: usize,
    groups: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<S>>, Option<Array4<S>>) {
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cig, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let cog = c_out / groups;
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);

    let mut dw = need_dw.then(|| Array4::<S>::zeros((c_out, cig, kh, kw)));
    let mut dx = need_dx.then(|| Array4::<S>::zeros((n, c_in, h, w)));

    for ni in 0..n {
        for g in 0..groups {
            let dyg = dy
                .slice(ndarray::s![ni, g * cog..(g + 1) * cog, .., ..])
                .to_shape((cog, ho * wo))
                .expect("grad slice is contiguous")
                .to_owned();
            if let Some(dw) = dw.as_mut() {
                let xg = x.slice(ndarray::s![ni, g * cig..(g + 1) * cig, .., ..]);
                let col = im2col(xg, kh, kw, stride, pad);
                // dW += dY · colᵀ
                let dwg: Array2<S> = dyg.dot(&col.t());
                let mut dw_dst = dw.slice_mut(ndarray::s![g * cog..(g + 1) * cog, .., .., ..]);
                let dwg4 = dwg.to_shape((cog, cig, kh, kw)).expect("dot result length matches");
                dw_dst.zip_mut_with(&dwg4, |a, &b| *a = *a + b);
            }

            if let Some(dx) = dx.as_mut() {
                let wg = weight
                    .slice(ndarray::s![g * cog..(g + 1) * cog, .., .., ..])
                    .to_shape((cog, cig * kh * kw))
                    .expect("weight slice is contiguous")
                    .to_owned();
                // dcol = Wᵀ · dY, folded back with col2im.
                let dcol: Array2<S> = wg.t().dot(&dyg);
                let dxg = col2im(dcol.view(), cig, h, w, kh, kw, stride, pad);
                let mut dst = dx.slice_mut(ndarray::s![ni, g * cig..(g + 1) * cig, .., ..]);
                dst.zip_mut_with(&dxg, |a, &b| *a = *a + b);
            }
        }
    }
    (dx, dw)
}
