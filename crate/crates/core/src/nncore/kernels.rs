//! Forward and backward kernels over flat row-major buffers.
//!
//! Shapes are validated by the tape before any kernel runs; kernels only
//! `debug_assert!` them.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. A transposed operand is stored in its natural `[k, m]` /
/// `[n, k]` layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every index reachable with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided window sweep.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Range of output coordinates `o` whose input coordinate `o*stride + tap - pad`
/// falls inside `[0, extent)`.
#[inline]
fn valid_range(extent: usize, out: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // lo = ceil((pad - tap) / stride) clamped at 0
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // largest o with o*stride + tap - pad <= extent - 1
    let limit = extent + pad;
    let hi = if limit <= tap { 0 } else { ((limit - tap - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                let row = &mut col[((c * g.k + ky) * g.k + kx) * plane..][..plane];
                row.fill(0.0);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                let row = &col[((c * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, K, K]`, `b: [Co]`.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut out = vec![0.0f32; g.n * g.c_out * plane];
    let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0f32; rows * plane] };
    for n in 0..g.n {
        let xn = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        let yn = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        for (co, chunk) in yn.chunks_mut(plane).enumerate() {
            chunk.fill(b[co]);
        }
        let src: &[f32] = if direct {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        gemm(g.c_out, rows, plane, w, false, src, false, 1.0, yn);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let in_size = g.c_in * g.h * g.w;
    let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut dx = need_dx.then(|| vec![0.0f32; g.n * in_size]);
    let mut dw = need_dw.then(|| vec![0.0f32; g.c_out * rows]);
    let mut db = need_dw.then(|| vec![0.0f32; g.c_out]);
    let mut col = vec![0.0f32; rows * plane];
    for n in 0..g.n {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let dyn_ = &dy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let src: &[f32] = if direct {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            // dw[Co, rows] += dy[Co, plane] * src[rows, plane]^T
            gemm(g.c_out, plane, rows, dyn_, false, src, true, 1.0, dw);
            for (co, chunk) in dyn_.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if direct {
                gemm(rows, g.c_out, plane, w, true, dyn_, false, 1.0, dxn);
            } else {
                // dcol[rows, plane] = w^T[rows, Co] * dy[Co, plane]
                gemm(rows, g.c_out, plane, w, true, dyn_, false, 0.0, &mut col);
                col2im_add(&col, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution, `w: [C, 1, K, K]`; `g.c_out == g.c_in`.
pub(crate) fn depthwise_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (hw, plane, kk) = (g.h * g.w, g.out_plane(), g.k * g.k);
    let mut out = vec![0.0f32; g.n * g.c_in * plane];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let xc = &x[(n * g.c_in + c) * hw..][..hw];
            let yc = &mut out[(n * g.c_in + c) * plane..][..plane];
            yc.fill(b[c]);
            let wc = &w[c * kk..(c + 1) * kk];
            for ky in 0..g.k {
                let (oy0, oy1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
                for kx in 0..g.k {
                    let (ox0, ox1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                    let wv = wc[ky * g.k + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &xc[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut yc[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (hw, plane, kk) = (g.h * g.w, g.out_plane(), g.k * g.k);
    let mut dx = need_dx.then(|| vec![0.0f32; g.n * g.c_in * hw]);
    let mut dw = need_dw.then(|| vec![0.0f32; g.c_in * kk]);
    let mut db = need_dw.then(|| vec![0.0f32; g.c_in]);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let xc = &x[(n * g.c_in + c) * hw..][..hw];
            let dyc = &dy[(n * g.c_in + c) * plane..][..plane];
            if let Some(db) = db.as_mut() {
                db[c] += dyc.iter().sum::<f32>();
            }
            for ky in 0..g.k {
                let (oy0, oy1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
                for kx in 0..g.k {
                    let (ox0, ox1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                    let tap = c * kk + ky * g.k + kx;
                    let wv = w[tap];
                    let mut acc = 0.0f32;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let g_row = &dyc[oy * g.wo..(oy + 1) * g.wo];
                        let x_row = &xc[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += g_row[ox] * x_row[ox * g.stride + kx - g.pad];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dx_row = &mut dx[(n * g.c_in + c) * hw + iy * g.w..][..g.w];
                            for ox in ox0..ox1 {
                                dx_row[ox * g.stride + kx - g.pad] += wv * g_row[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[tap] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y[N, Out] = x[N, In] * w[Out, In]^T + b`.
pub(crate) fn dense_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; n * d_out];
    for row in y.chunks_mut(d_out) {
        row.copy_from_slice(b);
    }
    gemm(n, d_in, d_out, x, false, w, true, 1.0, &mut y);
    y
}

#[allow(clippy::type_complexity)]
pub(crate) fn dense_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    d_in: usize,
    d_out: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; n * d_in];
        gemm(n, d_out, d_in, dy, false, w, false, 0.0, &mut dx);
        dx
    });
    let (dw, db) = if need_dw {
        let mut dw = vec![0.0f32; d_out * d_in];
        gemm(d_out, n, d_in, dy, true, x, false, 0.0, &mut dw);
        let mut db = vec![0.0f32; d_out];
        for row in dy.chunks(d_out) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += *b;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    (dx, dw, db)
}

/// Max pooling without padding. Returns the pooled values and, for each output,
/// the flat input index of its (first) maximum.
pub(crate) fn max_pool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f32>, Vec<u32>) {
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut arg = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}
