//! Differentiable tensor operations.
//!
//! Shaped operations (convolution, linear, pooling, batch norm, loss) return
//! `Result` and report offending dimensions; elementwise ops assert since a
//! mismatch there is a graph-construction bug, not a configuration error.
//!
//! conv2d and linear are backed by a GEMM (ndarray / matrixmultiply); the
//! convolution lowers to im2col per batch element. Backward passes rebuild
//! the column matrix instead of keeping it alive, trading a little compute
//! for a much smaller live graph.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view2 shape")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view2_mut shape")
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let out: Vec<f64> = {
        let ad = a.data();
        let bd = b.data();
        ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
    };
    let shape = a.shape();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
        pa.accum_grad(g);
        pb.accum_grad(g);
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let out: Vec<f64> = {
        let ad = a.data();
        let bd = b.data();
        ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()
    };
    let shape = a.shape();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
        let da: Vec<f64> = {
            let bd = pb.data();
            g.iter().zip(bd.iter()).map(|(gi, y)| gi * y).collect()
        };
        let db: Vec<f64> = {
            let ad = pa.data();
            g.iter().zip(ad.iter()).map(|(gi, x)| gi * x).collect()
        };
        pa.accum_grad(&da);
        pb.accum_grad(&db);
    })
}

/// Fixed-coefficient contraction to a scalar: sum_i w[i] * t[i].
///
/// The workhorse for scalarizing outputs in gradient checks and probes.
pub fn weighted_sum(t: &Tensor, coeffs: &[f64]) -> Tensor {
    assert_eq!(t.numel(), coeffs.len(), "weighted_sum: length mismatch");
    let value: f64 = {
        let d = t.data();
        d.iter().zip(coeffs).map(|(x, w)| x * w).sum()
    };
    let pt = t.clone();
    let w = coeffs.to_vec();
    Tensor::from_op(vec![value], vec![1], vec![t.clone()], move |g| {
        let s = g[0];
        let dt: Vec<f64> = w.iter().map(|wi| wi * s).collect();
        pt.accum_grad(&dt);
    })
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let shape = x.shape();
    let px = x.clone();
    Tensor::from_op(out, shape, vec![x.clone()], move |g| {
        let dx: Vec<f64> = {
            let xd = px.data();
            g.iter()
                .zip(xd.iter())
                .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                .collect()
        };
        px.accum_grad(&dx);
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let shape = x.shape();
    let px = x.clone();
    let saved = out.clone();
    Tensor::from_op(out, shape, vec![x.clone()], move |g| {
        let dx: Vec<f64> = g
            .iter()
            .zip(saved.iter())
            .map(|(gi, y)| gi * y * (1.0 - y))
            .collect();
        px.accum_grad(&dx);
    })
}

pub fn tanh(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    let shape = x.shape();
    let px = x.clone();
    let saved = out.clone();
    Tensor::from_op(out, shape, vec![x.clone()], move |g| {
        let dx: Vec<f64> = g
            .iter()
            .zip(saved.iter())
            .map(|(gi, y)| gi * (1.0 - y * y))
            .collect();
        px.accum_grad(&dx);
    })
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Affine map: `x [B,n] -> x @ weight^T + bias`, weight is `[m,n]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(shape_err(
            "linear",
            format!("input {:?} vs weight {:?} (inner dims must agree)", xs, ws),
        ));
    }
    let (b, n) = (xs[0], xs[1]);
    let m = ws[0];
    if let Some(bt) = bias {
        let bs = bt.shape();
        if bs != [m] {
            return Err(shape_err(
                "linear",
                format!("bias {:?} vs output features {}", bs, m),
            ));
        }
    }

    let mut out = vec![0.0; b * m];
    {
        let xd = x.data();
        let wd = weight.data();
        general_mat_mul(
            1.0,
            &view2(&xd, b, n),
            &view2(&wd, m, n).t(),
            0.0,
            &mut view2_mut(&mut out, b, m),
        );
    }
    if let Some(bt) = bias {
        let bd = bt.data();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(bd.iter()) {
                *o += bv;
            }
        }
    }

    let px = x.clone();
    let pw = weight.clone();
    let pb = bias.cloned();
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    Ok(Tensor::from_op(out, vec![b, m], parents, move |g| {
        if px.needs_grad() {
            let mut dx = vec![0.0; b * n];
            {
                let wd = pw.data();
                general_mat_mul(
                    1.0,
                    &view2(g, b, m),
                    &view2(&wd, m, n),
                    0.0,
                    &mut view2_mut(&mut dx, b, n),
                );
            }
            px.accum_grad(&dx);
        }
        if pw.needs_grad() {
            let mut dw = vec![0.0; m * n];
            {
                let xd = px.data();
                general_mat_mul(
                    1.0,
                    &view2(g, b, m).t(),
                    &view2(&xd, b, n),
                    0.0,
                    &mut view2_mut(&mut dw, m, n),
                );
            }
            pw.accum_grad(&dw);
        }
        if let Some(bt) = &pb {
            if bt.needs_grad() {
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                bt.accum_grad(&db);
            }
        }
    }))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn pix(&self) -> usize {
        self.h_out * self.w_out
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Whole-batch im2col: `col[(c*kh + ky)*kw + kx, b*pix + y*w_out + x]`,
/// shape `[c*kh*kw, b*h_out*w_out]`. One big GEMM per conv instead of one
/// per batch element.
fn im2col(input: &[f64], d: ConvDims, col: &mut [f64]) {
    let (pix, ckk) = (d.pix(), d.ckk());
    debug_assert_eq!(col.len(), ckk * d.b * pix);
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * d.b * pix;
                for bi in 0..d.b {
                    let plane = &input[(bi * d.c + ci) * d.h * d.w..];
                    let dst = &mut col[row + bi * pix..row + (bi + 1) * pix];
                    let mut idx = 0;
                    for y in 0..d.h_out {
                        let iy = (y * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            dst[idx..idx + d.w_out].fill(0.0);
                            idx += d.w_out;
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for x in 0..d.w_out {
                            let ix = (x * d.stride + kx) as isize - d.pad as isize;
                            dst[idx] = if ix < 0 || ix >= d.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of `im2col`.
fn col2im_accum(col: &[f64], d: ConvDims, out: &mut [f64]) {
    let pix = d.pix();
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * d.b * pix;
                for bi in 0..d.b {
                    let plane = &mut out[(bi * d.c + ci) * d.h * d.w..(bi * d.c + ci + 1) * d.h * d.w];
                    let src = &col[row + bi * pix..row + (bi + 1) * pix];
                    let mut idx = 0;
                    for y in 0..d.h_out {
                        let iy = (y * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            idx += d.w_out;
                            continue;
                        }
                        let base = iy as usize * d.w;
                        for x in 0..d.w_out {
                            let ix = (x * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                plane[base + ix as usize] += src[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// `[K, b*pix]` row-major -> `[b, K, pix]`.
fn scatter_rows_to_batches(rows: &[f64], k_out: usize, b: usize, pix: usize, out: &mut [f64]) {
    for ki in 0..k_out {
        let row = &rows[ki * b * pix..(ki + 1) * b * pix];
        for bi in 0..b {
            out[(bi * k_out + ki) * pix..(bi * k_out + ki + 1) * pix]
                .copy_from_slice(&row[bi * pix..(bi + 1) * pix]);
        }
    }
}

/// `[b, K, pix]` -> `[K, b*pix]` row-major.
fn gather_batches_to_rows(batches: &[f64], k_out: usize, b: usize, pix: usize, out: &mut [f64]) {
    for ki in 0..k_out {
        let row = &mut out[ki * b * pix..(ki + 1) * b * pix];
        for bi in 0..b {
            row[bi * pix..(bi + 1) * pix]
                .copy_from_slice(&batches[(bi * k_out + ki) * pix..(bi * k_out + ki + 1) * pix]);
        }
    }
}

/// 2D cross-correlation: input `[B,C,H,W]`, kernel `[K,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let xs = input.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected 4-d input/kernel, got {:?} and {:?}", xs, ks),
        ));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (k_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return Err(shape_err(
            "conv2d",
            format!("input channels {} vs kernel channels {}", c, kc),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(shape_err(
            "conv2d",
            format!(
                "kernel {}x{} exceeds padded extents {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    let dims = ConvDims {
        b,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        h_out: conv_out_extent(h, kh, stride, padding),
        w_out: conv_out_extent(w, kw, stride, padding),
    };
    let (ckk, pix) = (dims.ckk(), dims.pix());

    let mut out = vec![0.0; b * k_out * pix];
    {
        let xd = input.data();
        let wd = kernel.data();
        let mut col = vec![0.0; ckk * b * pix];
        im2col(&xd, dims, &mut col);
        let mut rows = vec![0.0; k_out * b * pix];
        general_mat_mul(
            1.0,
            &view2(&wd, k_out, ckk),
            &view2(&col, ckk, b * pix),
            0.0,
            &mut view2_mut(&mut rows, k_out, b * pix),
        );
        scatter_rows_to_batches(&rows, k_out, b, pix, &mut out);
    }

    let px = input.clone();
    let pk = kernel.clone();
    Ok(Tensor::from_op(
        out,
        vec![b, k_out, dims.h_out, dims.w_out],
        vec![input.clone(), kernel.clone()],
        move |g| {
            let mut grows = vec![0.0; k_out * b * pix];
            gather_batches_to_rows(g, k_out, b, pix, &mut grows);
            let gmat = view2(&grows, k_out, b * pix);

            let dw: Option<Vec<f64>> = if pk.needs_grad() {
                // The column matrix is rebuilt rather than kept alive.
                let xd = px.data();
                let mut col = vec![0.0; ckk * b * pix];
                im2col(&xd, dims, &mut col);
                let mut dw = vec![0.0; k_out * ckk];
                general_mat_mul(
                    1.0,
                    &gmat,
                    &view2(&col, ckk, b * pix).t(),
                    0.0,
                    &mut view2_mut(&mut dw, k_out, ckk),
                );
                Some(dw)
            } else {
                None
            };
            let dx: Option<Vec<f64>> = if px.needs_grad() {
                let wd = pk.data();
                let mut dcol = vec![0.0; ckk * b * pix];
                general_mat_mul(
                    1.0,
                    &view2(&wd, k_out, ckk).t(),
                    &gmat,
                    0.0,
                    &mut view2_mut(&mut dcol, ckk, b * pix),
                );
                let mut dx = vec![0.0; b * c * h * w];
                col2im_accum(&dcol, dims, &mut dx);
                Some(dx)
            } else {
                None
            };
            if let Some(dw) = dw {
                pk.accum_grad(&dw);
            }
            if let Some(dx) = dx {
                px.accum_grad(&dx);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// pooling and channel attention plumbing
// ---------------------------------------------------------------------------

/// Per-channel spatial mean: `[B,N,H,W] -> [B,N]`.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
        return Err(shape_err(
            "global_average_pool",
            format!("expected 4-d input with nonzero spatial extents, got {:?}", xs),
        ));
    }
    let (b, n, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let area = (h * w) as f64;
    let mut out = vec![0.0; b * n];
    {
        let xd = input.data();
        for (o, plane) in out.iter_mut().zip(xd.chunks(h * w)) {
            *o = plane.iter().sum::<f64>() / area;
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        out,
        vec![b, n],
        vec![input.clone()],
        move |g| {
            let mut dx = vec![0.0; b * n * h * w];
            for (gi, plane) in g.iter().zip(dx.chunks_mut(h * w)) {
                let v = gi / area;
                plane.iter_mut().for_each(|p| *p = v);
            }
            px.accum_grad(&dx);
        },
    ))
}

/// Scales every spatial position of channel n by `scale[b,n]`.
pub fn channelwise_mul(features: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let fs = features.shape();
    let ss = scale.shape();
    if fs.len() != 4 || ss.len() != 2 || fs[0] != ss[0] || fs[1] != ss[1] {
        return Err(shape_err(
            "channelwise_mul",
            format!("features {:?} vs scale {:?}", fs, ss),
        ));
    }
    let (b, n, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let area = h * w;
    let mut out = vec![0.0; b * n * area];
    {
        let fd = features.data();
        let sd = scale.data();
        for ((o, f), s) in out.chunks_mut(area).zip(fd.chunks(area)).zip(sd.iter()) {
            for (ov, fv) in o.iter_mut().zip(f) {
                *ov = fv * s;
            }
        }
    }
    let pf = features.clone();
    let ps = scale.clone();
    Ok(Tensor::from_op(
        out,
        fs.clone(),
        vec![features.clone(), scale.clone()],
        move |g| {
            if pf.needs_grad() {
                let df: Vec<f64> = {
                    let sd = ps.data();
                    let mut df = vec![0.0; b * n * area];
                    for ((d, gch), s) in df.chunks_mut(area).zip(g.chunks(area)).zip(sd.iter()) {
                        for (dv, gv) in d.iter_mut().zip(gch) {
                            *dv = gv * s;
                        }
                    }
                    df
                };
                pf.accum_grad(&df);
            }
            if ps.needs_grad() {
                let ds: Vec<f64> = {
                    let fd = pf.data();
                    g.chunks(area)
                        .zip(fd.chunks(area))
                        .map(|(gch, fch)| gch.iter().zip(fch).map(|(gv, fv)| gv * fv).sum())
                        .collect()
                };
                ps.accum_grad(&ds);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel running statistics for batch norm inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Per-channel standardization with affine scale/shift.
///
/// Training mode normalizes with batch moments and folds them into the
/// running statistics (exponential moving average, unbiased variance);
/// inference mode uses the running statistics unchanged.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    training: bool,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err(
            "batch_norm",
            format!("expected 4-d input, got {:?}", xs),
        ));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
        return Err(shape_err(
            "batch_norm",
            format!(
                "channel mismatch: input {:?}, gamma {:?}, beta {:?}, stats {}",
                xs,
                gamma.shape(),
                beta.shape(),
                stats.mean.len()
            ),
        ));
    }
    let m = b * h * w;
    if training && m < 2 {
        return Err(shape_err(
            "batch_norm",
            format!("training mode needs at least 2 samples per channel, got {}", m),
        ));
    }
    let area = h * w;

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * area..(bi * c + ci + 1) * area];
                mean[ci] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * area..(bi * c + ci + 1) * area];
                let mu = mean[ci];
                var[ci] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };

    if training {
        let unbias = m as f64 / (m as f64 - 1.0);
        for ci in 0..c {
            stats.mean[ci] = (1.0 - momentum) * stats.mean[ci] + momentum * mean[ci];
            stats.var[ci] = (1.0 - momentum) * stats.var[ci] + momentum * var[ci] * unbias;
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; b * c * area];
    let mut out = vec![0.0; b * c * area];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * area;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in 0..area {
                    let xh = (xd[base + i] - mu) * is;
                    xhat[base + i] = xh;
                    out[base + i] = ga * xh + be;
                }
            }
        }
    }

    let px = x.clone();
    let pg = gamma.clone();
    let pbeta = beta.clone();
    Ok(Tensor::from_op(
        out,
        xs.clone(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            // Per-channel reductions over the batch and spatial dims.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * area;
                    for i in 0..area {
                        sum_g[ci] += g[base + i];
                        sum_gx[ci] += g[base + i] * xhat[base + i];
                    }
                }
            }
            if pbeta.needs_grad() {
                pbeta.accum_grad(&sum_g);
            }
            if pg.needs_grad() {
                pg.accum_grad(&sum_gx);
            }
            if px.needs_grad() {
                let gd = pg.data();
                let mut dx = vec![0.0; b * c * area];
                if training {
                    let mf = m as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * area;
                            let scale = gd[ci] * inv_std[ci] / mf;
                            for i in 0..area {
                                dx[base + i] = scale
                                    * (mf * g[base + i]
                                        - sum_g[ci]
                                        - xhat[base + i] * sum_gx[ci]);
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * area;
                            let scale = gd[ci] * inv_std[ci];
                            for i in 0..area {
                                dx[base + i] = scale * g[base + i];
                            }
                        }
                    }
                }
                drop(gd);
                px.accum_grad(&dx);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labels under softmax(logits),
/// stabilized by max subtraction. Returns a scalar tensor.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("logits {:?} vs {} labels", ls, labels.len()),
        ));
    }
    let (b, k) = (ls[0], ls[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("label {} out of range for {} classes", bad, k),
        ));
    }

    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    {
        let ld = logits.data();
        for (i, row) in ld.chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= (row[labels[i]] - mx - z.ln()) / b as f64;
        }
    }

    let pl = logits.clone();
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        move |g| {
            let s = g[0] / b as f64;
            let mut dl = vec![0.0; b * k];
            for i in 0..b {
                for j in 0..k {
                    let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                    dl[i * k + j] = s * (probs[i * k + j] - indicator);
                }
            }
            pl.accum_grad(&dl);
        },
    ))
}

/// Row-wise argmax of `[B,K]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let ls = logits.shape();
    assert_eq!(ls.len(), 2);
    let k = ls[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut data = vec![0.0; shape.iter().product()];
        rng.fill_uniform(&mut data, lo, hi);
        Tensor::from_vec(data, shape)
    }

    /// Direct 6-nested-loop cross-correlation, the conv oracle.
    fn conv_reference(
        x: &[f64],
        (b, c, h, w): (usize, usize, usize, usize),
        kern: &[f64],
        (ko, _kc, kh, kw): (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * ko * h_out * w_out];
        for bi in 0..b {
            for k in 0..ko {
                for y in 0..h_out {
                    for xo in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xi = ((bi * c + ci) * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = ((k * c + ci) * kh + ky) * kw + kx;
                                        acc += x[xi] * kern[wi];
                                    }
                                }
                            }
                        }
                        out[((bi * ko + k) * h_out + y) * w_out + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_sums_kernel_window() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = Rng::new(17);
        let dims = (2usize, 3usize, 5usize, 5usize);
        let kdims = (4usize, 3usize, 3usize, 3usize);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let x = rand_tensor(&mut rng, &[dims.0, dims.1, dims.2, dims.3], -2.0, 2.0);
            let k = rand_tensor(&mut rng, &[kdims.0, kdims.1, kdims.2, kdims.3], -2.0, 2.0);
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let want = conv_reference(&x.to_vec(), dims, &k.to_vec(), kdims, stride, pad);
            for (a, b) in got.to_vec().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 5, 5]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5x5") && msg.contains("3x3"), "{msg}");
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::ones(&[1, 2, 3, 3]);
        let k = Tensor::ones(&[1, 3, 2, 2]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn linear_identity_and_bias_broadcast() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let eye = Tensor::from_vec(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        );
        let zero_b = Tensor::zeros(&[3]);
        let y = linear(&x, &eye, Some(&zero_b)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let zero_w = Tensor::zeros(&[3, 3]);
        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]);
        let y = linear(&x, &zero_w, Some(&bias)).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_matches_triple_loop_reference() {
        let mut rng = Rng::new(23);
        let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let bias = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        let y = linear(&x, &w, Some(&bias)).unwrap();

        let (xd, wd, bd) = (x.to_vec(), w.to_vec(), bias.to_vec());
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = bd[j];
                for p in 0..4 {
                    acc += xd[i * 4 + p] * wd[j * 4 + p];
                }
                assert!((y.to_vec()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let x = Tensor::ones(&[2, 3]);
        let w = Tensor::ones(&[4, 5]);
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn gap_constant_and_singleton() {
        let x = Tensor::full(&[2, 3, 4, 4], 2.5);
        let y = global_average_pool(&x).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert!(y.to_vec().iter().all(|v| (*v - 2.5).abs() < 1e-15));

        let mut rng = Rng::new(2);
        let x = rand_tensor(&mut rng, &[2, 5, 1, 1], -1.0, 1.0);
        let y = global_average_pool(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn gap_matches_direct_summation() {
        let mut rng = Rng::new(9);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let y = global_average_pool(&x).unwrap();
        let xd = x.to_vec();
        for b in 0..2 {
            for c in 0..3 {
                let base = (b * 3 + c) * 16;
                let s: f64 = xd[base..base + 16].iter().sum();
                assert!((y.to_vec()[b * 3 + c] - s / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channelwise_mul_identity_zero_and_reference() {
        let mut rng = Rng::new(4);
        let f = rand_tensor(&mut rng, &[2, 3, 2, 2], -2.0, 2.0);
        let ones = Tensor::ones(&[2, 3]);
        assert_eq!(channelwise_mul(&f, &ones).unwrap().to_vec(), f.to_vec());

        let zeros = Tensor::zeros(&[2, 3]);
        assert!(channelwise_mul(&f, &zeros)
            .unwrap()
            .to_vec()
            .iter()
            .all(|v| *v == 0.0));

        let s = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let y = channelwise_mul(&f, &s).unwrap();
        let (fd, sd, yd) = (f.to_vec(), s.to_vec(), y.to_vec());
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    let idx = (b * 3 + c) * 4 + i;
                    assert!((yd[idx] - fd[idx] * sd[b * 3 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn activation_point_values() {
        let x = Tensor::from_vec(vec![0.0, -3.0, 2.0], &[3]);
        assert!((sigmoid(&x).to_vec()[0] - 0.5).abs() < 1e-15);
        assert_eq!(relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
        assert!((tanh(&x).to_vec()[0]).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_standardized_input_is_fixed_point() {
        // Channel values already have zero mean / unit variance.
        let vals = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(vals.clone(), &[2, 1, 2, 2]);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let mut stats = RunningStats::new(1);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, true, 1e-5, 0.1).unwrap();
        for (a, b) in y.to_vec().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_constant_input_returns_beta() {
        let x = Tensor::full(&[2, 3, 2, 2], 7.0);
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::from_vec(vec![0.1, -0.5, 2.0], &[3]);
        let mut stats = RunningStats::new(3);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, true, 1e-5, 0.1).unwrap();
        let yd = y.to_vec();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    let want = beta.to_vec()[c];
                    assert!((yd[(b * 3 + c) * 4 + i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_training_output_moments() {
        let mut rng = Rng::new(31);
        let x = rand_tensor(&mut rng, &[4, 3, 5, 5], -3.0, 3.0);
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let mut stats = RunningStats::new(3);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, true, 1e-12, 0.1).unwrap();
        let yd = y.to_vec();
        let m = 4 * 25;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for b in 0..4 {
                let base = (b * 3 + c) * 25;
                for i in 0..25 {
                    sum += yd[base + i];
                    sumsq += yd[base + i] * yd[base + i];
                }
            }
            let mean = sum / m as f64;
            let var = sumsq / m as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let x = Tensor::ones(&[1, 2, 1, 1]);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let mut stats = RunningStats::new(2);
        assert!(batch_norm(&x, &gamma, &beta, &mut stats, true, 1e-5, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let x = Tensor::zeros(&[2, 10]);
        let loss = softmax_cross_entropy(&x, &[3, 7]).unwrap();
        assert!((loss.item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_is_near_zero() {
        let mut data = vec![0.0; 10];
        data[4] = 100.0;
        let x = Tensor::from_vec(data, &[1, 10]);
        let loss = softmax_cross_entropy(&x, &[4]).unwrap();
        assert!(loss.item().abs() < 1e-12, "loss {}", loss.item());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&x, &[3]).is_err());
        assert!(softmax_cross_entropy(&x, &[0, 1]).is_err());
    }
}
