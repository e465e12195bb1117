//! Raw numeric kernels behind the tape ops. Everything here works on plain
//! slices in NCHW order; shape validation happens in the callers.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents cover the strided
    // m×k, k×n and m×n views; the asserts below check the largest index.
    unsafe {
        if k > 0 {
            debug_assert!(((m - 1) as isize * rsa + (k - 1) as isize * csa) < a.len() as isize);
            debug_assert!(((k - 1) as isize * rsb + (n - 1) as isize * csb) < b.len() as isize);
        }
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

/// Unfold `x` into a `[k, n·p]` patch matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (np, p) = (g.n * g.p(), g.p());
    let mut cols = vec![0.0f32; g.k() * np];
    for ic in 0..g.ic {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ic * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.ic + ic) * g.h * g.w..(n * g.ic + ic + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * p..(n + 1) * p];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let out = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                        for (ow, o) in out.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *o = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into image space.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (np, p) = (g.n * g.p(), g.p());
    for ic in 0..g.ic {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ic * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.ic + ic) * g.h * g.w..(n * g.ic + ic + 1) * g.h * g.w];
                    let src = &src_row[n * p..(n + 1) * p];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let s = &src[oh * g.ow..(oh + 1) * g.ow];
                        for (ow, v) in s.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (k, p, np) = (g.k(), g.p(), g.n * g.p());
    let cols = im2col(x, g);
    let mut out_mat = vec![0.0f32; g.oc * np];
    gemm(g.oc, k, np, w, k as isize, 1, &cols, np as isize, 1, 0.0, &mut out_mat);
    let mut out = vec![0.0f32; g.n * g.oc * p];
    for oc in 0..g.oc {
        let bias = b.map_or(0.0, |b| b[oc]);
        for n in 0..g.n {
            let src = &out_mat[oc * np + n * p..oc * np + (n + 1) * p];
            let dst = &mut out[(n * g.oc + oc) * p..(n * g.oc + oc + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (k, p, np) = (g.k(), g.p(), g.n * g.p());
    let mut gmat = vec![0.0f32; g.oc * np];
    for oc in 0..g.oc {
        for n in 0..g.n {
            gmat[oc * np + n * p..oc * np + (n + 1) * p]
                .copy_from_slice(&dout[(n * g.oc + oc) * p..(n * g.oc + oc + 1) * p]);
        }
    }
    let db = need_db.then(|| {
        (0..g.oc)
            .map(|oc| gmat[oc * np..(oc + 1) * np].iter().sum())
            .collect()
    });
    let dw = need_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0f32; g.oc * k];
        gemm(g.oc, np, k, &gmat, np as isize, 1, &cols, 1, np as isize, 0.0, &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; k * np];
        gemm(k, g.oc, np, w, 1, k as isize, &gmat, np as isize, 1, 0.0, &mut dcols);
        let mut dx = vec![0.0f32; g.n * g.ic * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per (n, c) plane normalisation; returns the normalised output and the
/// inverse standard deviation of every plane.
pub(crate) fn instance_norm_forward(x: &[f32], planes: usize, hw: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0f32; x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    for i in 0..planes {
        let src = &x[i * hw..(i + 1) * hw];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (o, &v) in out[i * hw..(i + 1) * hw].iter_mut().zip(src) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
        inv_std.push(inv as f32);
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward(y: &[f32], inv_std: &[f32], dy: &[f32], hw: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for (i, &inv) in inv_std.iter().enumerate() {
        let ys = &y[i * hw..(i + 1) * hw];
        let gs = &dy[i * hw..(i + 1) * hw];
        let mean_g = gs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &y)| (g * y) as f64).sum::<f64>() / hw as f64;
        for ((d, &g), &y) in dx[i * hw..(i + 1) * hw].iter_mut().zip(gs).zip(ys) {
            *d = (inv as f64 * (g as f64 - mean_g - y as f64 * mean_gy)) as f32;
        }
    }
    dx
}

/// Index of `out[n, c, r·h + i, r·w + j]` read from `in[n, c·r² + i·r + j, h, w]`.
pub(crate) fn pixel_shuffle(x: &[f32], n: usize, c_out: usize, h: usize, w: usize, r: usize, inverse: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    let (oh, ow) = (h * r, w * r);
    for b in 0..n {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for y in 0..h {
                        for xw in 0..w {
                            let src = ((b * c_out * r * r + ic) * h + y) * w + xw;
                            let dst = ((b * c_out + c) * oh + y * r + i) * ow + xw * r + j;
                            if inverse {
                                out[src] = x[dst];
                            } else {
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len() * 4];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xw in 0..2 * w {
                dst[y * 2 * w + xw] = src[(y / 2) * w + xw / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xw in 0..2 * w {
                dst[(y / 2) * w + xw / 2] += src[y * 2 * w + xw];
            }
        }
    }
    dx
}

/// `y = a · x · bᵀ` for every `h×w` plane of `x`.
pub(crate) fn separable(x: &[f32], planes: usize, h: usize, w: usize, a: &[f32], oh: usize, b: &[f32], ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * oh * ow];
    let mut tmp = vec![0.0f32; h * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        // tmp[h×ow] = plane[h×w] · bᵀ[w×ow]
        gemm(h, w, ow, plane, w as isize, 1, b, 1, w as isize, 0.0, &mut tmp);
        gemm(oh, h, ow, a, h as isize, 1, &tmp, ow as isize, 1, 0.0, &mut out[p * oh * ow..(p + 1) * oh * ow]);
    }
    out
}

pub(crate) fn separable_backward(dy: &[f32], planes: usize, h: usize, w: usize, a: &[f32], oh: usize, b: &[f32], ow: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; planes * h * w];
    let mut tmp = vec![0.0f32; h * ow];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        // tmp[h×ow] = aᵀ[h×oh] · g[oh×ow]
        gemm(h, oh, ow, a, 1, h as isize, g, ow as isize, 1, 0.0, &mut tmp);
        // dx[h×w] = tmp[h×ow] · b[ow×w]
        gemm(h, ow, w, &tmp, ow as isize, 1, b, w as isize, 1, 0.0, &mut dx[p * h * w..(p + 1) * h * w]);
    }
    dx
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = vec![0.0; g.n * g.oc * g.p()];
        for n in 0..g.n {
            for oc in 0..g.oc {
                for oh in 0..g.oh {
                    for ow in 0..g.ow {
                        let mut acc = 0.0f64;
                        for ic in 0..g.ic {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.ic + ic) * g.h + ih as usize) * g.w + iw as usize];
                                    let wv = w[((oc * g.ic + ic) * g.kh + ki) * g.kw + kj];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out[((n * g.oc + oc) * g.oh + oh) * g.ow + ow] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, kh) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let (h, w) = (6, 5);
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kh) / stride + 1;
            let g = ConvGeom { n: 2, ic: 3, h, w, oc: 4, kh, kw: kh, stride, pad, oh, ow };
            let x: Vec<f32> = (0..g.n * g.ic * h * w).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
            let wt: Vec<f32> = (0..g.oc * g.k()).map(|i| ((i * 13 % 11) as f32 - 5.0) / 5.0).collect();
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { n: 1, ic: 2, h: 5, w: 4, oc: 1, kh: 3, kw: 3, stride: 2, pad: 1, oh: 3, ow: 2 };
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let cols_len = g.k() * g.p();
        let c: Vec<f32> = (0..cols_len).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| (a * b) as f64).sum();
        let mut back = vec![0.0; 40];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
