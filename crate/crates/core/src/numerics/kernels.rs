//! Slice-level kernels behind the tape operations.
//!
//! Image-like buffers are `[n, c, h, w]` row-major. Nothing here allocates
//! tape state, so the density module reuses the resampling kernels directly.

/// `c = a * b + beta * c` with `c` row-major `m x n` and arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the strided views touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[c, h, w]` sample into a `[c*kh*kw, out_h*out_w]` matrix.
fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let ohw = g.out_len();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                // output columns whose source column lies inside the image
                let ox0 = g.pad.saturating_sub(kx);
                let ox1 = (g.w + g.pad).saturating_sub(kx).min(g.out_w);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || ox0 >= ox1 {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..ox0].fill(0.0);
                    out_row[ox1..].fill(0.0);
                    let ix0 = ox0 + kx - g.pad;
                    out_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into a `[c, h, w]` sample.
fn col2im_add(g: &ConvGeom, col: &[f64], grad_input: &mut [f64]) {
    let ohw = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                let ox0 = g.pad.saturating_sub(kx);
                let ox1 = (g.w + g.pad).saturating_sub(kx).min(g.out_w);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = ox0 + kx - g.pad;
                    let dst = &mut plane[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + (ox1 - ox0)];
                    let s = &src[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let ohw = g.out_len();
    let out_len = g.c_out * ohw;
    let mut out = vec![0.0; batch * out_len];
    let mut col = vec![0.0; g.patch_len() * ohw];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (c, chunk) in y.chunks_mut(ohw).enumerate() {
            chunk.fill(bias[c]);
        }
        gemm(g.c_out, g.patch_len(), ohw, weight, (g.patch_len(), 1), &col, (ohw, 1), 1.0, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let in_len = g.c_in * g.h * g.w;
    let ohw = g.out_len();
    let out_len = g.c_out * ohw;
    let k = g.patch_len();
    let mut gi = need_input.then(|| vec![0.0; batch * in_len]);
    let mut gw = need_weight.then(|| vec![0.0; g.c_out * k]);
    let mut gb = need_bias.then(|| vec![0.0; g.c_out]);
    let mut col = vec![0.0; k * ohw];
    for n in 0..batch {
        let dy = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = gb.as_mut() {
            for (c, chunk) in dy.chunks(ohw).enumerate() {
                gb[c] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
            // dW += dY (c_out x ohw) * col^T (ohw x k)
            gemm(g.c_out, ohw, k, dy, (ohw, 1), &col, (1, ohw), 1.0, gw);
        }
        if let Some(gi) = gi.as_mut() {
            // dcol = W^T (k x c_out) * dY (c_out x ohw)
            gemm(k, g.c_out, ohw, weight, (1, k), dy, (ohw, 1), 0.0, &mut col);
            col2im_add(g, &col, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// 2x2 max pooling over `[planes, h, w]`; an odd trailing row or column is
/// replicated. Returns the pooled values and, per output, the flat input index
/// of the winning cell (first maximum in scan order).
pub(crate) fn maxpool2_forward(planes: usize, h: usize, w: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let rows = [2 * oy, (2 * oy + 1).min(h - 1)];
            for ox in 0..ow {
                let cols = [2 * ox, (2 * ox + 1).min(w - 1)];
                let mut best = base + rows[0] * w + cols[0];
                for &y in &rows {
                    for &x in &cols {
                        let idx = base + y * w + x;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-axis interpolation table for corner-aligned bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_table(src: usize, dst: usize) -> AxisTable {
    let mut t = AxisTable {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = if src == 1 || dst == 1 {
            0.0
        } else {
            (o * (src - 1)) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - lo as f64);
    }
    t
}

pub(crate) fn bilinear_forward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    input: &[f64],
) -> Vec<f64> {
    let ty = axis_table(h, oh);
    let tx = axis_table(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_out: &[f64],
) -> Vec<f64> {
    let ty = axis_table(h, oh);
    let tx = axis_table(w, ow);
    let mut gi = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gi[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    gi
}
