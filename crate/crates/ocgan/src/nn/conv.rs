//! Strided 2-d convolution and transposed convolution.
//!
//! Both directions are lowered to a single large GEMM per batch via
//! im2col/col2im, with column blocks laid out batch-major so one matrix
//! multiply covers the whole batch. The transposed convolution is the exact
//! adjoint of a convolution with the same kernel/stride/padding; its output
//! size is `(in-1)*stride - 2*pad + kernel + out_pad`.

use ndarray::{s, Array1, Array2, Array4, ArrayBase, Axis, Data, Ix1, Ix4};

use crate::Real;

type A4<'a, S> = &'a ArrayBase<S, Ix4>;
type A1<'a, S> = &'a ArrayBase<S, Ix1>;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Gather conv patches of `img` (one batch element, standard layout) into
/// `cols`, a row-major `(c*k*k, row_stride_total)` buffer, writing the block
/// of `oh*ow` columns starting at `col_offset`. Out-of-image taps stay zero.
fn im2col_into<R: Real>(
    img: &[R],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [R],
    row_stride: usize,
    col_offset: usize,
) {
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let rbase = row * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = (ci * h + iy as usize) * w;
                    let obase = rbase + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[obase + ox] = img[ibase + ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-add a column block back into an image.
fn col2im_into<R: Real>(
    cols: &[R],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    img: &mut [R],
    row_stride: usize,
    col_offset: usize,
) {
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let rbase = row * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = (ci * h + iy as usize) * w;
                    let obase = rbase + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[ibase + ix as usize] = img[ibase + ix as usize] + cols[obase + ox];
                    }
                }
            }
        }
    }
}

/// Batched im2col: `(c*k*k, b*oh*ow)` with batch-major column blocks.
fn batched_im2col<R: Real, S: Data<Elem = R>>(
    x: A4<'_, S>,
    g: ConvGeom,
    (oh, ow): (usize, usize),
) -> Array2<R> {
    let (b, c, h, w) = x.dim();
    let n = oh * ow;
    let mut cols = Array2::<R>::zeros((c * g.kernel * g.kernel, b * n));
    let row_stride = b * n;
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    let x_std = x.as_standard_layout();
    let x_slice = x_std.as_slice().expect("standard layout");
    let img_len = c * h * w;
    for bi in 0..b {
        im2col_into(
            &x_slice[bi * img_len..(bi + 1) * img_len],
            (c, h, w),
            g,
            (oh, ow),
            cols_slice,
            row_stride,
            bi * n,
        );
    }
    cols
}

/// Flatten `(b, c, h, w)` to `(c, b*h*w)` with batch-major column blocks.
fn batch_major_flat<R: Real, S: Data<Elem = R>>(x: A4<'_, S>) -> Array2<R> {
    let (b, c, h, w) = x.dim();
    let n = h * w;
    let mut out = Array2::<R>::zeros((c, b * n));
    for bi in 0..b {
        let src = x.index_axis(Axis(0), bi);
        let mut dst = out.slice_mut(s![.., bi * n..(bi + 1) * n]);
        for ci in 0..c {
            let flat = src.index_axis(Axis(0), ci);
            let flat = flat.to_shape(n).expect("contiguous channel");
            dst.row_mut(ci).assign(&flat);
        }
    }
    out
}

/// Inverse of [`batch_major_flat`].
fn unflatten_batch_major<R: Real>(flat: &Array2<R>, (b, c, h, w): (usize, usize, usize, usize)) -> Array4<R> {
    let n = h * w;
    let mut out = Array4::<R>::zeros((b, c, h, w));
    for bi in 0..b {
        let src = flat.slice(s![.., bi * n..(bi + 1) * n]);
        let mut dst = out.index_axis_mut(Axis(0), bi);
        for ci in 0..c {
            let row = src.row(ci);
            let row = row.to_shape((h, w)).expect("row-major");
            dst.index_axis_mut(Axis(0), ci).assign(&row);
        }
    }
    out
}

/// `y[b,o] = sum_c w[o,c] * x[b,c] + bias[o]` with the given geometry.
/// Weights have shape `(out_ch, in_ch, k, k)`.
pub fn conv2d_forward<R: Real, Sx, Sw, Sb>(
    x: A4<'_, Sx>,
    w: A4<'_, Sw>,
    bias: A1<'_, Sb>,
    g: ConvGeom,
) -> Array4<R>
where
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sb: Data<Elem = R>,
{
    let (b, c, h, width) = x.dim();
    let (o, wc, k, _) = w.dim();
    assert_eq!(c, wc, "channel mismatch");
    assert_eq!(k, g.kernel);
    let (oh, ow) = (g.out_side(h), g.out_side(width));
    let cols = batched_im2col(x, g, (oh, ow));
    let wm = w.view().into_shape((o, c * k * k)).expect("contiguous");
    let y_flat = wm.dot(&cols); // (o, b*n)
    let mut y = unflatten_batch_major(&y_flat, (b, o, oh, ow));
    for oi in 0..o {
        y.slice_mut(s![.., oi, .., ..]).mapv_inplace(|v| v + bias[oi]);
    }
    y
}

/// Gradients of a conv layer. `dw`/`db` are skipped when `param_grads` is
/// false (input-gradient-only backprop, used by latent mining).
pub struct ConvGrads<R: Real> {
    pub dx: Array4<R>,
    pub dw: Option<Array4<R>>,
    pub db: Option<Array1<R>>,
}

pub fn conv2d_backward<R: Real, Sx, Sw, Sy>(
    x: A4<'_, Sx>,
    w: A4<'_, Sw>,
    g: ConvGeom,
    dy: A4<'_, Sy>,
    param_grads: bool,
) -> ConvGrads<R>
where
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sy: Data<Elem = R>,
{
    let (b, c, h, width) = x.dim();
    let (o, _, k, _) = w.dim();
    let (oh, ow) = (g.out_side(h), g.out_side(width));
    let n = oh * ow;
    let dy_flat = batch_major_flat(dy); // (o, b*n)
    let wm = w.view().into_shape((o, c * k * k)).expect("contiguous");

    let (dw, db) = if param_grads {
        let cols = batched_im2col(x, g, (oh, ow));
        let dw_flat = dy_flat.dot(&cols.t()); // (o, c*k*k)
        let dw = dw_flat.into_shape((o, c, k, k)).expect("sized");
        let db = Array1::from_iter((0..o).map(|oi| dy.slice(s![.., oi, .., ..]).sum()));
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    let dcols = wm.t().dot(&dy_flat); // (c*k*k, b*n)
    let mut dx = Array4::<R>::zeros((b, c, h, width));
    let dx_slice = dx.as_slice_mut().expect("standard layout");
    let dcols_slice = dcols.as_slice().expect("standard layout");
    let img_len = c * h * width;
    for bi in 0..b {
        col2im_into(
            dcols_slice,
            (c, h, width),
            g,
            (oh, ow),
            &mut dx_slice[bi * img_len..(bi + 1) * img_len],
            b * n,
            bi * n,
        );
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution; weights have shape `(in_ch, out_ch, k, k)`.
/// `out_pad` resolves the output-size ambiguity of strided convolutions.
pub fn convt2d_forward<R: Real, Sx, Sw, Sb>(
    x: A4<'_, Sx>,
    w: A4<'_, Sw>,
    bias: A1<'_, Sb>,
    g: ConvGeom,
    out_pad: usize,
) -> Array4<R>
where
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sb: Data<Elem = R>,
{
    let (b, c_in, h, width) = x.dim();
    let (wc_in, c_out, k, _) = w.dim();
    assert_eq!(c_in, wc_in, "channel mismatch");
    assert_eq!(k, g.kernel);
    assert!(out_pad < g.stride, "out_pad must be smaller than stride");
    let oh = (h - 1) * g.stride + k + out_pad - 2 * g.pad;
    let ow = (width - 1) * g.stride + k + out_pad - 2 * g.pad;
    // The forward pass is the adjoint of a conv mapping (oh,ow) -> (h,w).
    debug_assert_eq!(g.out_side(oh), h);
    debug_assert_eq!(g.out_side(ow), width);

    let x_flat = batch_major_flat(x); // (c_in, b*h*w)
    let wm = w.view().into_shape((c_in, c_out * k * k)).expect("contiguous");
    let cols = wm.t().dot(&x_flat); // (c_out*k*k, b*h*w)

    let mut y = Array4::<R>::zeros((b, c_out, oh, ow));
    let y_slice = y.as_slice_mut().expect("standard layout");
    let cols_slice = cols.as_slice().expect("standard layout");
    let img_len = c_out * oh * ow;
    let n = h * width;
    for bi in 0..b {
        col2im_into(
            cols_slice,
            (c_out, oh, ow),
            g,
            (h, width),
            &mut y_slice[bi * img_len..(bi + 1) * img_len],
            b * n,
            bi * n,
        );
    }
    for oi in 0..c_out {
        y.slice_mut(s![.., oi, .., ..]).mapv_inplace(|v| v + bias[oi]);
    }
    y
}

pub fn convt2d_backward<R: Real, Sx, Sw, Sy>(
    x: A4<'_, Sx>,
    w: A4<'_, Sw>,
    g: ConvGeom,
    dy: A4<'_, Sy>,
    param_grads: bool,
) -> ConvGrads<R>
where
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sy: Data<Elem = R>,
{
    let (b, c_in, h, width) = x.dim();
    let (_, c_out, k, _) = w.dim();
    let wm = w.view().into_shape((c_in, c_out * k * k)).expect("contiguous");
    // dy has shape (b, c_out, oh, ow); gather it like the adjoint conv input.
    let dy_cols = batched_im2col(dy, g, (h, width)); // (c_out*k*k, b*h*w)

    let dx_flat = wm.dot(&dy_cols); // (c_in, b*h*w)
    let dx = unflatten_batch_major(&dx_flat, (b, c_in, h, width));

    let (dw, db) = if param_grads {
        let x_flat = batch_major_flat(x);
        let dw_flat = x_flat.dot(&dy_cols.t()); // (c_in, c_out*k*k)
        let dw = dw_flat.into_shape((c_in, c_out, k, k)).expect("sized");
        let db = Array1::from_iter((0..c_out).map(|oi| dy.slice(s![.., oi, .., ..]).sum()));
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Direct nested-loop convolution, the oracle for the GEMM path.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: &Array1<f64>,
        g: ConvGeom,
    ) -> Array4<f64> {
        let (b, c, h, width) = x.dim();
        let (o, _, k, _) = w.dim();
        let (oh, ow) = (g.out_side(h), g.out_side(width));
        let mut y = Array4::<f64>::zeros((b, o, oh, ow));
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < width as isize
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[oi, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[bi, oi, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct transposed convolution oracle.
    fn convt_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: &Array1<f64>,
        g: ConvGeom,
        out_pad: usize,
    ) -> Array4<f64> {
        let (b, c_in, h, width) = x.dim();
        let (_, c_out, k, _) = w.dim();
        let oh = (h - 1) * g.stride + k + out_pad - 2 * g.pad;
        let ow = (width - 1) * g.stride + k + out_pad - 2 * g.pad;
        let mut y = Array4::<f64>::zeros((b, c_out, oh, ow));
        for bi in 0..b {
            for ci in 0..c_in {
                for iy in 0..h {
                    for ix in 0..width {
                        for oi in 0..c_out {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                                    let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                                    if oy >= 0
                                        && oy < oh as isize
                                        && ox >= 0
                                        && ox < ow as isize
                                    {
                                        y[[bi, oi, oy as usize, ox as usize]] +=
                                            x[[bi, ci, iy, ix]] * w[[ci, oi, ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for oi in 0..c_out {
            y.slice_mut(s![.., oi, .., ..]).mapv_inplace(|v| v + bias[oi]);
        }
        y
    }

    fn assert_close(a: &Array4<f64>, b: &Array4<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ConvGeom { kernel: 5, stride: 2, pad: 2 };
        let x = randn4(&mut rng, (3, 2, 9, 9));
        let w = randn4(&mut rng, (4, 2, 5, 5));
        let bias = Array1::from_shape_simple_fn(4, || rng.gen::<f64>());
        assert_close(
            &conv2d_forward(&x, &w, &bias, g),
            &conv_naive(&x, &w, &bias, g),
            1e-12,
        );
    }

    #[test]
    fn convt_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom { kernel: 5, stride: 2, pad: 2 };
        for out_pad in [0usize, 1] {
            let x = randn4(&mut rng, (2, 3, 4, 4));
            let w = randn4(&mut rng, (3, 2, 5, 5));
            let bias = Array1::from_shape_simple_fn(2, || rng.gen::<f64>());
            assert_close(
                &convt2d_forward(&x, &w, &bias, g, out_pad),
                &convt_naive(&x, &w, &bias, g, out_pad),
                1e-12,
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = randn4(&mut rng, (2, 2, 5, 5));
        let w = randn4(&mut rng, (3, 2, 3, 3));
        let bias = Array1::from_shape_simple_fn(3, || rng.gen::<f64>());
        // Scalar objective: weighted sum of outputs.
        let y0 = conv2d_forward(&x, &w, &bias, g);
        let weights = randn4(&mut rng, y0.dim());
        let loss = |x: &Array4<f64>, w: &Array4<f64>, bias: &Array1<f64>| {
            (&conv2d_forward(x, w, bias, g) * &weights).sum()
        };
        let grads = conv2d_backward(&x, &w, g, &weights, true);
        let eps = 1e-6;
        // Probe a few coordinates of each gradient tensor.
        for idx in [[0, 0, 1, 2], [1, 1, 4, 3], [0, 1, 0, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * eps);
            assert!((grads.dx[idx] - fd).abs() < 1e-6, "dx {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm2 = w.clone();
            wm2[idx] -= eps;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm2, &bias)) / (2.0 * eps);
            assert!(
                (grads.dw.as_ref().unwrap()[idx] - fd).abs() < 1e-6,
                "dw {idx:?}"
            );
        }
        for oi in 0..3 {
            let mut bp = bias.clone();
            bp[oi] += eps;
            let mut bm = bias.clone();
            bm[oi] -= eps;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((grads.db.as_ref().unwrap()[oi] - fd).abs() < 1e-6, "db {oi}");
        }
    }

    #[test]
    fn convt_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom { kernel: 5, stride: 2, pad: 2 };
        let out_pad = 1;
        let x = randn4(&mut rng, (2, 3, 3, 3));
        let w = randn4(&mut rng, (3, 2, 5, 5));
        let bias = Array1::from_shape_simple_fn(2, || rng.gen::<f64>());
        let y0 = convt2d_forward(&x, &w, &bias, g, out_pad);
        let weights = randn4(&mut rng, y0.dim());
        let loss = |x: &Array4<f64>, w: &Array4<f64>, bias: &Array1<f64>| {
            (&convt2d_forward(x, w, bias, g, out_pad) * &weights).sum()
        };
        let grads = convt2d_backward(&x, &w, g, &weights, true);
        let eps = 1e-6;
        for idx in [[0, 0, 1, 2], [1, 2, 0, 1], [0, 1, 2, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * eps);
            assert!((grads.dx[idx] - fd).abs() < 1e-6, "dx {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [2, 1, 4, 4], [1, 0, 3, 2]] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm2 = w.clone();
            wm2[idx] -= eps;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm2, &bias)) / (2.0 * eps);
            assert!(
                (grads.dw.as_ref().unwrap()[idx] - fd).abs() < 1e-6,
                "dw {idx:?}"
            );
        }
    }

    #[test]
    fn stride2_pad2_k5_halves_spatial_size() {
        let g = ConvGeom { kernel: 5, stride: 2, pad: 2 };
        assert_eq!(g.out_side(28), 14);
        assert_eq!(g.out_side(14), 7);
        assert_eq!(g.out_side(7), 4);
        assert_eq!(g.out_side(8), 4);
        assert_eq!(g.out_side(4), 2);
        assert_eq!(g.out_side(2), 1);
    }
}
