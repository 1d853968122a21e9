//! Raw loops behind the graph ops. Everything here works on flat row-major slices.

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically `[m, k]`
/// and `b` logically `[k, n]`. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Unfolds `[B, C, H, W]` into `[C*kh*kw, B*oh*ow]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let plane = g.oh * g.ow;
    let mut cols = vec![0.0; g.patch_len() * ncol];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_c + c) * g.h * g.w..(b * g.in_c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C*kh*kw, B*oh*ow]` back into `[B, C, H, W]`, summing overlaps.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let plane = g.oh * g.ow;
    let mut x = vec![0.0; g.batch * g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let base = (b * g.in_c + c) * g.h * g.w;
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut x[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let ncol = g.cols();
    let mut out_mat = vec![0.0; g.out_c * ncol];
    gemm(g.out_c, g.patch_len(), ncol, weight, false, &cols, false, &mut out_mat, false);
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.batch * g.out_c * plane];
    for k in 0..g.out_c {
        let row = &out_mat[k * ncol..(k + 1) * ncol];
        for b in 0..g.batch {
            let dst = &mut out[(b * g.out_c + k) * plane..(b * g.out_c + k + 1) * plane];
            for (d, s) in dst.iter_mut().zip(&row[b * plane..(b + 1) * plane]) {
                *d = s + bias[k];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let ncol = g.cols();
    let plane = g.oh * g.ow;
    // [B, K, oh, ow] -> [K, B*oh*ow]
    let mut gmat = vec![0.0; g.out_c * ncol];
    for b in 0..g.batch {
        for k in 0..g.out_c {
            let src = &grad_out[(b * g.out_c + k) * plane..(b * g.out_c + k + 1) * plane];
            gmat[k * ncol + b * plane..k * ncol + (b + 1) * plane].copy_from_slice(src);
        }
    }
    let bias = need[2].then(|| {
        (0..g.out_c)
            .map(|k| gmat[k * ncol..(k + 1) * ncol].iter().sum())
            .collect()
    });
    let weight_grad = need[1].then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; g.out_c * g.patch_len()];
        gemm(g.out_c, ncol, g.patch_len(), &gmat, false, &cols, true, &mut dw, false);
        dw
    });
    let input = need[0].then(|| {
        let mut dcols = vec![0.0; g.patch_len() * ncol];
        gemm(g.patch_len(), g.out_c, ncol, weight, true, &gmat, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// 3×3 window mean, stride 1, zero padding 1, always divided by 9.
pub(crate) fn avg_pool3x3(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in i.saturating_sub(1)..(i + 2).min(h) {
                    for dj in j.saturating_sub(1)..(j + 2).min(w) {
                        acc += src[di * w + dj];
                    }
                }
                dst[i * w + j] = acc / 9.0;
            }
        }
    }
    out
}
