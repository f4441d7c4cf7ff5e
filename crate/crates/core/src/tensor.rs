//! Dense f64 array kernels: im2col convolutions (2D and temporal 3D),
//! pooling, upsampling, and the Sobel edge map used by the frozen teacher.
//!
//! Forward and backward passes share these functions; the autograd layer in
//! [`crate::autograd`] only wires them together.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Valid output range along one spatial axis: the `o` values for which
/// `o*stride + k - pad` lands inside `0..len`, clipped to `0..out_len`.
fn valid_span(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    // Smallest o with o*stride + k - pad >= 0.
    let start = ((pad - k).max(0) as usize).div_ceil(stride);
    // Largest o with o*stride + k - pad < len, exclusive.
    let end = ((len as isize - 1 - k + pad) / stride as isize + 1).clamp(0, out_len as isize) as usize;
    (start.min(end), end)
}

/// Unfolds `(N, C, H, W)` into a `(C*kh*kw, N*oh*ow)` matrix with zero
/// padding; column index runs over `(n, oy, ox)` with `n` slowest.
pub fn im2col_2d(
    input: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, (usize, usize)) {
    let (n, c, h, w) = input.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::zeros((c * kh * kw, n * oh * ow));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("freshly allocated");
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            let (oy0, oy1) = valid_span(h, oh, ky, stride, pad);
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * row_len;
                let (ox0, ox1) = valid_span(w, ow, kx, stride, pad);
                for ni in 0..n {
                    let src_nc = (ni * c + ci) * h * w;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let src_row = src_nc + iy * w;
                        let dst_row = row_base + (ni * oh + oy) * ow;
                        if ox1 <= ox0 {
                            continue;
                        }
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            dst[dst_row + ox0..dst_row + ox1]
                                .copy_from_slice(&src[src_row + ix0..src_row + ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[dst_row + ox] = src[src_row + ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, (oh, ow))
}

/// Scatter-add inverse of [`im2col_2d`]: folds a column-gradient matrix back
/// onto the input shape.
pub fn col2im_2d(
    cols: &Array2<f64>,
    input_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = Array4::zeros(input_dim);
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("freshly allocated");
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            let (oy0, oy1) = valid_span(h, oh, ky, stride, pad);
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * row_len;
                let (ox0, ox1) = valid_span(w, ow, kx, stride, pad);
                for ni in 0..n {
                    let dst_nc = (ni * c + ci) * h * w;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let dst_row = dst_nc + iy * w;
                        let src_row = row_base + (ni * oh + oy) * ow;
                        if ox1 <= ox0 {
                            continue;
                        }
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            let d = &mut dst[dst_row + ix0..dst_row + ix0 + (ox1 - ox0)];
                            let s = &src[src_row + ox0..src_row + ox1];
                            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                                *dv += *sv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[dst_row + ox * stride + kx - pad] += src[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution of `(N, C_in, H, W)` with `(C_out, C_in, kh, kw)` weights.
///
/// Stride-1 convolutions take a direct accumulate-over-shifts path (cache
/// friendly at full resolution); strided ones go through im2col + matmul.
pub fn conv2d(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, _, _) = input.dim();
    let (c_out, wc_in, kh, kw) = weight.dim();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    if stride == 1 {
        return conv2d_direct(input, weight, bias, pad);
    }
    let (cols, (oh, ow)) = im2col_2d(input, kh, kw, stride, pad);
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut y_mat = w_mat.dot(&cols);
    if let Some(b) = bias {
        for (mut row, bv) in y_mat.outer_iter_mut().zip(b.iter()) {
            row += *bv;
        }
    }
    let y = y_mat
        .into_shape_with_order((c_out, n, oh, ow))
        .expect("conv2d output reshape");
    y.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned()
}

fn conv2d_direct(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, w) = input.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let oh = conv_out_len(h, kh, 1, pad);
    let ow = conv_out_len(w, kw, 1, pad);
    let mut out = Array4::zeros((n, c_out, oh, ow));
    let input = input.as_standard_layout();
    let xs = input.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let ws = weight.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("freshly allocated");

    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..c_out {
                let base = (ni * c_out + co) * oh * ow;
                os[base..base + oh * ow].fill(b[co]);
            }
        }
    }
    for ni in 0..n {
        for co in 0..c_out {
            let out_base = (ni * c_out + co) * oh * ow;
            for ci in 0..c_in {
                let in_base = (ni * c_in + ci) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_span(h, oh, ky, 1, pad);
                    for kx in 0..kw {
                        let wv = ws[((co * c_in + ci) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_span(w, ow, kx, 1, pad);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let ix0 = ox0 + kx - pad;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - pad;
                            let orow = out_base + oy * ow;
                            let irow = in_base + iy * w;
                            let dst = &mut os[orow + ox0..orow + ox1];
                            let src = &xs[irow + ix0..irow + ix0 + (ox1 - ox0)];
                            for (ov, iv) in dst.iter_mut().zip(src.iter()) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Direct gradients for stride-1 convolutions; mirrors the loop structure
/// of [`conv2d_direct`].
fn conv2d_direct_backward(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c_in, h, w) = input.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = grad_out.dim();
    let mut d_input = Array4::zeros((n, c_in, h, w));
    let mut d_weight = Array4::zeros((c_out, c_in, kh, kw));
    let mut d_bias = Array1::zeros(c_out);

    let input = input.as_standard_layout();
    let xs = input.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let ws = weight.as_slice().expect("standard layout");
    let grad_out = grad_out.as_standard_layout();
    let gs = grad_out.as_slice().expect("standard layout");
    let dxs = d_input.as_slice_mut().expect("freshly allocated");
    let dws = d_weight.as_slice_mut().expect("freshly allocated");

    for ni in 0..n {
        for co in 0..c_out {
            let g_base = (ni * c_out + co) * oh * ow;
            d_bias[co] += gs[g_base..g_base + oh * ow].iter().sum::<f64>();
            for ci in 0..c_in {
                let in_base = (ni * c_in + ci) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_span(h, oh, ky, 1, pad);
                    for kx in 0..kw {
                        let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                        let wv = ws[widx];
                        let (ox0, ox1) = valid_span(w, ow, kx, 1, pad);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let ix0 = ox0 + kx - pad;
                        let mut dw_acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - pad;
                            let grow = g_base + oy * ow;
                            let irow = in_base + iy * w;
                            let g_seg = &gs[grow + ox0..grow + ox1];
                            let x_seg = &xs[irow + ix0..irow + ix0 + (ox1 - ox0)];
                            let dx_seg = &mut dxs[irow + ix0..irow + ix0 + (ox1 - ox0)];
                            for ((gv, xv), dxv) in
                                g_seg.iter().zip(x_seg.iter()).zip(dx_seg.iter_mut())
                            {
                                dw_acc += gv * xv;
                                *dxv += wv * gv;
                            }
                        }
                        dws[widx] += dw_acc;
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    if stride == 1 {
        return conv2d_direct_backward(input, weight, grad_out, pad);
    }
    let (c_out, c_in, kh, kw) = weight.dim();
    let (n, _, oh, ow) = grad_out.dim();
    let gy_mat = grad_out
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c_out, n * oh * ow))
        .expect("grad reshape");
    let (cols, _) = im2col_2d(input, kh, kw, stride, pad);
    let d_w_mat = gy_mat.dot(&cols.t());
    let d_weight = d_w_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("dW reshape");
    let d_bias = gy_mat.sum_axis(ndarray::Axis(1));
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let d_cols = w_mat.t().dot(&gy_mat);
    let d_input = col2im_2d(&d_cols, input.dim(), kh, kw, stride, pad);
    (d_input, d_weight, d_bias)
}

/// Unfolds a batchless `(C, D, H, W)` volume for a 3D convolution
/// (stride 1 on every axis).
pub fn im2col_3d(
    input: &ArrayView4<f64>,
    k: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Array2<f64> {
    let (c, d, h, w) = input.dim();
    let (kd, kh, kw) = k;
    let (pd, ph, pw) = pad;
    let od = conv_out_len(d, kd, 1, pd);
    let oh = conv_out_len(h, kh, 1, ph);
    let ow = conv_out_len(w, kw, 1, pw);
    let mut cols = Array2::zeros((c * kd * kh * kw, od * oh * ow));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("freshly allocated");
    let row_len = od * oh * ow;
    for ci in 0..c {
        for kz in 0..kd {
            let (oz0, oz1) = valid_span(d, od, kz, 1, pd);
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(h, oh, ky, 1, ph);
                for kx in 0..kw {
                    let row_base = (((ci * kd + kz) * kh + ky) * kw + kx) * row_len;
                    let (ox0, ox1) = valid_span(w, ow, kx, 1, pw);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let ix0 = ox0 + kx - pw;
                    for oz in oz0..oz1 {
                        let iz = oz + kz - pd;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - ph;
                            let src_row = ((ci * d + iz) * h + iy) * w + ix0;
                            let dst_row = row_base + (oz * oh + oy) * ow + ox0;
                            dst[dst_row..dst_row + (ox1 - ox0)]
                                .copy_from_slice(&src[src_row..src_row + (ox1 - ox0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_3d(
    cols: &Array2<f64>,
    input_dim: (usize, usize, usize, usize),
    k: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Array4<f64> {
    let (c, d, h, w) = input_dim;
    let (kd, kh, kw) = k;
    let (pd, ph, pw) = pad;
    let od = conv_out_len(d, kd, 1, pd);
    let oh = conv_out_len(h, kh, 1, ph);
    let ow = conv_out_len(w, kw, 1, pw);
    let mut out = Array4::zeros(input_dim);
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("freshly allocated");
    let row_len = od * oh * ow;
    for ci in 0..c {
        for kz in 0..kd {
            let (oz0, oz1) = valid_span(d, od, kz, 1, pd);
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(h, oh, ky, 1, ph);
                for kx in 0..kw {
                    let row_base = (((ci * kd + kz) * kh + ky) * kw + kx) * row_len;
                    let (ox0, ox1) = valid_span(w, ow, kx, 1, pw);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let ix0 = ox0 + kx - pw;
                    for oz in oz0..oz1 {
                        let iz = oz + kz - pd;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - ph;
                            let dst_row = ((ci * d + iz) * h + iy) * w + ix0;
                            let src_row = row_base + (oz * oh + oy) * ow + ox0;
                            let d_slice = &mut dst[dst_row..dst_row + (ox1 - ox0)];
                            let s_slice = &src[src_row..src_row + (ox1 - ox0)];
                            for (dv, sv) in d_slice.iter_mut().zip(s_slice.iter()) {
                                *dv += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3D convolution over a `(C_in, D, H, W)` volume with stride 1; all output
/// dims preserved when `pad = (k-1)/2`.
pub fn conv3d(
    input: &ArrayView4<f64>,
    weight: &ndarray::ArrayView5<f64>,
    bias: Option<&Array1<f64>>,
    pad: (usize, usize, usize),
) -> Array4<f64> {
    let (c_in, d, h, w) = input.dim();
    let (c_out, wc_in, kd, kh, kw) = weight.dim();
    assert_eq!(c_in, wc_in, "conv3d channel mismatch");
    let od = conv_out_len(d, kd, 1, pad.0);
    let oh = conv_out_len(h, kh, 1, pad.1);
    let ow = conv_out_len(w, kw, 1, pad.2);
    let cols = im2col_3d(input, (kd, kh, kw), pad);
    let w_mat = weight
        .to_shape((c_out, c_in * kd * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut y_mat = w_mat.dot(&cols);
    if let Some(b) = bias {
        for (mut row, bv) in y_mat.outer_iter_mut().zip(b.iter()) {
            row += *bv;
        }
    }
    y_mat
        .into_shape_with_order((c_out, od, oh, ow))
        .expect("conv3d output reshape")
}

pub fn conv3d_backward(
    input: &ArrayView4<f64>,
    weight: &ndarray::ArrayView5<f64>,
    grad_out: &ArrayView4<f64>,
    pad: (usize, usize, usize),
) -> (Array4<f64>, ndarray::Array5<f64>, Array1<f64>) {
    let (c_out, c_in, kd, kh, kw) = weight.dim();
    let (_, od, oh, ow) = grad_out.dim();
    let gy_mat = grad_out
        .to_shape((c_out, od * oh * ow))
        .expect("grad reshape")
        .to_owned();
    let cols = im2col_3d(input, (kd, kh, kw), pad);
    let d_weight = gy_mat
        .dot(&cols.t())
        .into_shape_with_order((c_out, c_in, kd, kh, kw))
        .expect("dW reshape");
    let d_bias = gy_mat.sum_axis(ndarray::Axis(1));
    let w_mat = weight
        .to_shape((c_out, c_in * kd * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let d_cols = w_mat.t().dot(&gy_mat);
    let d_input = col2im_3d(&d_cols, input.dim(), (kd, kh, kw), pad);
    (d_input, d_weight, d_bias)
}

/// Adaptive average pooling over the spatial axes of `(N, C, H, W)` using
/// the conventional bin partition `start = floor(i*H/oh)`,
/// `end = ceil((i+1)*H/oh)`.
pub fn adaptive_avg_pool2d(input: &ArrayView4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = input.dim();
    let mut out = Array4::zeros((n, c, oh, ow));
    for oy in 0..oh {
        let y0 = oy * h / oh;
        let y1 = ((oy + 1) * h).div_ceil(oh);
        for ox in 0..ow {
            let x0 = ox * w / ow;
            let x1 = ((ox + 1) * w).div_ceil(ow);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += input[[ni, ci, y, x]];
                        }
                    }
                    out[[ni, ci, oy, ox]] = sum / count;
                }
            }
        }
    }
    out
}

pub fn adaptive_avg_pool2d_backward(
    grad_out: &ArrayView4<f64>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (_, _, oh, ow) = grad_out.dim();
    let mut out = Array4::zeros(input_dim);
    for oy in 0..oh {
        let y0 = oy * h / oh;
        let y1 = ((oy + 1) * h).div_ceil(oh);
        for ox in 0..ow {
            let x0 = ox * w / ow;
            let x1 = ((ox + 1) * w).div_ceil(ow);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let g = grad_out[[ni, ci, oy, ox]] / count;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            out[[ni, ci, y, x]] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbor 2x upsampling of `(N, C, H, W)`.
pub fn upsample_nearest_2x(input: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = input.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = input[[ni, ci, y, x]];
                    out[[ni, ci, 2 * y, 2 * x]] = v;
                    out[[ni, ci, 2 * y, 2 * x + 1]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * x]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * x + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_2x_backward(grad_out: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ni, ci, y, x]] = grad_out[[ni, ci, 2 * y, 2 * x]]
                        + grad_out[[ni, ci, 2 * y, 2 * x + 1]]
                        + grad_out[[ni, ci, 2 * y + 1, 2 * x]]
                        + grad_out[[ni, ci, 2 * y + 1, 2 * x + 1]];
                }
            }
        }
    }
    out
}

/// Mean-pools a single-channel image by an exact integer factor.
pub fn avg_pool_exact(input: &ArrayView2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = input.dim();
    assert!(
        h % factor == 0 && w % factor == 0,
        "avg_pool_exact needs divisible dims"
    );
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::zeros((oh, ow));
    let norm = (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let block = input.slice(s![
                oy * factor..(oy + 1) * factor,
                ox * factor..(ox + 1) * factor
            ]);
            out[[oy, ox]] = block.sum() / norm;
        }
    }
    out
}

/// Sobel gradient magnitude of a single-channel image (zero-padded borders),
/// scaled by 1/4 so [0,1] inputs stay O(1).
pub fn sobel_magnitude(input: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = input.dim();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            0.0
        } else {
            input[[y as usize, x as usize]]
        }
    };
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            out[[y as usize, x as usize]] = 0.25 * (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    fn seq_array4(dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let n: usize = dim.0 * dim.1 * dim.2 * dim.3;
        Array4::from_shape_vec(dim, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    /// Direct 6-loop convolution as the oracle.
    fn conv2d_naive(
        input: &Array4<f64>,
        weight: &Array4<f64>,
        bias: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c_in, h, w) = input.dim();
        let (c_out, _, kh, kw) = weight.dim();
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w, kw, stride, pad);
        let mut out = Array4::zeros((n, c_out, oh, ow));
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += input[[ni, ci, iy as usize, ix as usize]]
                                            * weight[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let input = seq_array4((2, 3, 6, 5));
        let weight = seq_array4((4, 3, 3, 3));
        let bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d(&input.view(), &weight.view(), Some(&bias), stride, pad);
            let slow = conv2d_naive(&input, &weight, &bias, stride, pad);
            let diff = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} pad {pad}: diff {diff}");
        }
    }

    #[test]
    fn conv3d_identity_kernel() {
        // Kernel that copies the center voxel of channel 0.
        let input = seq_array4((2, 4, 3, 3)); // (C=2, D=4, H=3, W=3)
        let mut weight = Array5::zeros((1, 2, 3, 3, 3));
        weight[[0, 0, 1, 1, 1]] = 1.0;
        let out = conv3d(&input.view(), &weight.view(), None, (1, 1, 1));
        assert_eq!(out.dim(), (1, 4, 3, 3));
        assert_eq!(out[[0, 2, 1, 1]], input[[0, 2, 1, 1]]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let input = seq_array4((1, 2, 5, 4));
        let weight = seq_array4((3, 2, 3, 3));
        let bias = Array1::from_vec(vec![0.05, -0.1, 0.2]);
        let stride = 2;
        let pad = 1;
        // Loss = sum of outputs, so grad_out = ones.
        let out = conv2d(&input.view(), &weight.view(), Some(&bias), stride, pad);
        let grad_out = Array4::ones(out.dim());
        let (d_in, d_w, d_b) =
            conv2d_backward(&input.view(), &weight.view(), &grad_out.view(), stride, pad);

        let h = 1e-6;
        let loss = |inp: &Array4<f64>, wt: &Array4<f64>, b: &Array1<f64>| {
            conv2d(&inp.view(), &wt.view(), Some(b), stride, pad).sum()
        };
        for idx in [[0, 0, 0, 0], [0, 1, 3, 2], [0, 0, 4, 3]] {
            let mut p = input.clone();
            p[idx] += h;
            let mut m = input.clone();
            m[idx] -= h;
            let fd = (loss(&p, &weight, &bias) - loss(&m, &weight, &bias)) / (2.0 * h);
            assert!((fd - d_in[idx]).abs() < 1e-6, "d_input at {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 1]] {
            let mut p = weight.clone();
            p[idx] += h;
            let mut m = weight.clone();
            m[idx] -= h;
            let fd = (loss(&input, &p, &bias) - loss(&input, &m, &bias)) / (2.0 * h);
            assert!((fd - d_w[idx]).abs() < 1e-6, "d_weight at {idx:?}");
        }
        for i in 0..3 {
            let mut p = bias.clone();
            p[i] += h;
            let mut m = bias.clone();
            m[i] -= h;
            let fd = (loss(&input, &weight, &p) - loss(&input, &weight, &m)) / (2.0 * h);
            assert!((fd - d_b[i]).abs() < 1e-6, "d_bias at {i}");
        }
    }

    #[test]
    fn conv3d_backward_matches_finite_differences() {
        let input = seq_array4((2, 4, 3, 3));
        let weight = {
            let n = 2 * 2 * 27;
            Array5::from_shape_vec(
                (2, 2, 3, 3, 3),
                (0..n).map(|i| (i as f64 * 0.13).cos() * 0.3).collect(),
            )
            .unwrap()
        };
        let bias = Array1::from_vec(vec![0.1, -0.05]);
        let pad = (1, 1, 1);
        let out = conv3d(&input.view(), &weight.view(), Some(&bias), pad);
        let grad_out = Array4::ones(out.dim());
        let (d_in, d_w, _) = conv3d_backward(&input.view(), &weight.view(), &grad_out.view(), pad);

        let h = 1e-6;
        let loss = |inp: &Array4<f64>, wt: &Array5<f64>| {
            conv3d(&inp.view(), &wt.view(), Some(&bias), pad).sum()
        };
        for idx in [[0, 0, 0, 0], [1, 2, 1, 2], [0, 3, 2, 1]] {
            let mut p = input.clone();
            p[idx] += h;
            let mut m = input.clone();
            m[idx] -= h;
            let fd = (loss(&p, &weight) - loss(&m, &weight)) / (2.0 * h);
            assert!((fd - d_in[idx]).abs() < 1e-6, "d_input at {idx:?}");
        }
        for idx in [[0, 0, 0, 0, 0], [1, 1, 2, 2, 2], [0, 1, 1, 0, 2]] {
            let mut p = weight.clone();
            p[idx] += h;
            let mut m = weight.clone();
            m[idx] -= h;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * h);
            assert!((fd - d_w[idx]).abs() < 1e-6, "d_weight at {idx:?}");
        }
    }

    #[test]
    fn adaptive_pool_brute_force_bins() {
        let input = seq_array4((1, 2, 7, 5));
        let (oh, ow) = (3, 2);
        let out = adaptive_avg_pool2d(&input.view(), oh, ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * 7 / oh;
                let y1 = ((oy + 1) * 7).div_ceil(oh);
                let x0 = ox * 5 / ow;
                let x1 = ((ox + 1) * 5).div_ceil(ow);
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += input[[0, 1, y, x]];
                        cnt += 1.0;
                    }
                }
                assert!((out[[0, 1, oy, ox]] - sum / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let input = Array4::from_elem((1, 1, 13, 9), 0.7);
        let out = adaptive_avg_pool2d(&input.view(), 4, 4);
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let input = seq_array4((2, 3, 4, 4));
        let up = upsample_nearest_2x(&input.view());
        assert_eq!(up.dim(), (2, 3, 8, 8));
        let g = upsample_nearest_2x_backward(&up.view());
        // Each input cell fans out to 4 outputs; backward sums them.
        assert!((g[[0, 0, 0, 0]] - 4.0 * input[[0, 0, 0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn sobel_flat_image_is_zero_inside() {
        let flat = Array2::from_elem((8, 8), 0.5);
        let mag = sobel_magnitude(&flat.view());
        // Interior must be zero; borders see the zero padding.
        assert_eq!(mag[[4, 4]], 0.0);
        assert!(mag[[0, 4]] > 0.0);
    }

    #[test]
    fn sobel_vertical_edge_detected() {
        let mut img = Array2::zeros((8, 8));
        img.slice_mut(s![.., 4..]).fill(1.0);
        let mag = sobel_magnitude(&img.view());
        assert!(mag[[4, 4]] > 0.5);
        assert_eq!(mag[[4, 1]], 0.0);
    }
}
