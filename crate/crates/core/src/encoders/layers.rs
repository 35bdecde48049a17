//! Forward/backward kernels shared by the toy backbones. Activations are
//! planar `C×H×W` or row-major `T×D`, all in `f64`.

/// `c = beta·c + op(a)·op(b)` with `op(a)` of shape `m×k` and `op(b)` of
/// shape `k×n`; `*_t` selects the transpose of a row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every operand to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Unfolds `input` (`in_c×h×w`) into `(in_c·k·k) × (oh·ow)` columns.
    pub fn im2col(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let positions = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * positions];
        for ci in 0..self.in_c {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates column gradients back
    /// onto the input grid.
    pub fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let positions = oh * ow;
        let mut out = vec![0.0; self.in_c * h * w];
        for ci in 0..self.in_c {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(output, columns)`; the columns are kept for the backward pass.
    pub fn forward(&self, weight: &[f64], bias: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let cols = self.im2col(input, h, w);
        let (oh, ow) = self.output_size(h, w);
        let positions = oh * ow;
        let mut out = vec![0.0; self.out_c * positions];
        for (o, b) in out.chunks_exact_mut(positions).zip(bias) {
            o.iter_mut().for_each(|v| *v = *b);
        }
        gemm(self.out_c, self.patch_len(), positions, weight, false, &cols, false, 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        weight: &[f64],
        cols: &[f64],
        d_out: &[f64],
        h: usize,
        w: usize,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.output_size(h, w);
        let positions = oh * ow;
        gemm(self.out_c, positions, self.patch_len(), d_out, false, cols, true, 1.0, d_weight);
        for (db, row) in d_bias.iter_mut().zip(d_out.chunks_exact(positions)) {
            *db += row.iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let mut d_cols = vec![0.0; self.patch_len() * positions];
        gemm(self.patch_len(), self.out_c, positions, weight, true, d_out, false, 0.0, &mut d_cols);
        Some(self.col2im(&d_cols, h, w))
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the (post-activation) output was not positive.
pub(crate) fn relu_backward_inplace(d: &mut [f64], activated: &[f64]) {
    for (g, a) in d.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Bin `i` of `out` over `len` inputs covers `[floor(i·len/out), ceil((i+1)·len/out))`.
fn bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Average pooling of each `h×w` plane onto a fixed `gh×gw` grid; output is
/// channel-major (`c·gh·gw`).
pub(crate) fn adaptive_avg_pool(input: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * gh * gw];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for by in 0..gh {
            let (y0, y1) = bin(by, h, gh);
            for bx in 0..gw {
                let (x0, x1) = bin(bx, w, gw);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[(ch * gh + by) * gw + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(d_out: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut d_in[ch * h * w..(ch + 1) * h * w];
        for by in 0..gh {
            let (y0, y1) = bin(by, h, gh);
            for bx in 0..gw {
                let (x0, x1) = bin(bx, w, gw);
                let g = d_out[(ch * gh + by) * gw + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    d_in
}

/// `y = W·x + b` for `W` of shape `out×in`.
pub(crate) fn linear(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, weight, false, x, false, 1.0, &mut y);
    y
}

pub(crate) fn linear_backward(
    weight: &[f64],
    x: &[f64],
    d_y: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    gemm(d_y.len(), 1, x.len(), d_y, false, x, false, 1.0, d_weight);
    d_bias.iter_mut().zip(d_y).for_each(|(b, g)| *b += g);
    let mut d_x = vec![0.0; x.len()];
    gemm(x.len(), d_y.len(), 1, weight, true, d_y, false, 0.0, &mut d_x);
    d_x
}

/// Returns `(x/‖x‖, ‖x‖)`.
pub(crate) fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (x.iter().map(|v| v / norm).collect(), norm)
}

pub(crate) fn l2_normalize_backward(y: &[f64], norm: f64, d_y: &[f64]) -> Vec<f64> {
    let proj: f64 = y.iter().zip(d_y).map(|(a, b)| a * b).sum();
    y.iter().zip(d_y).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

/// Row-wise softmax of a `rows×cols` matrix, in place.
pub(crate) fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Given softmax output `a` and upstream `d_a`, the gradient w.r.t. the logits.
pub(crate) fn softmax_rows_backward(a: &[f64], d_a: &[f64], cols: usize) -> Vec<f64> {
    let mut d = vec![0.0; a.len()];
    for ((dr, ar), gr) in d.chunks_exact_mut(cols).zip(a.chunks_exact(cols)).zip(d_a.chunks_exact(cols)) {
        let inner: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum();
        for ((o, x), g) in dr.iter_mut().zip(ar).zip(gr) {
            *o = x * (g - inner);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let expected = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t, bb, b_t) in [(&a, false, &b, false), (&at, true, &b, false), (&a, false, &bt, true), (&at, true, &bt, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, a_t, bb, b_t, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let g = ConvGeometry { in_c: 2, out_c: 3, kernel: 3, stride: 2, pad: 1 };
        let (h, w) = (5, 7);
        let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..g.out_c * g.in_c * g.kernel * g.kernel).map(|i| ((i * 3) % 5) as f64 * 0.1 - 0.2).collect();
        let bias = [0.1, -0.2, 0.3];
        let (out, _) = g.forward(&weight, &bias, &input, h, w);
        let (oh, ow) = g.output_size(h, w);
        assert_eq!((oh, ow), (3, 4));
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += weight[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * input[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(co * oh + oy) * ow + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry { in_c: 2, out_c: 1, kernel: 3, stride: 2, pad: 1 };
        let (h, w) = (6, 5);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let cols = g.im2col(&x, h, w);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).sin()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = g.col2im(&y, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_bins_cover_uneven_sizes() {
        // 1 channel, 3x5 onto 2x2 bins: rows [0,2),[1,3); cols [0,3),[2,5)
        let x: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let p = adaptive_avg_pool(&x, 1, 3, 5, 2, 2);
        let mean = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
            let mut s = 0.0;
            let mut n = 0.0;
            for y in ys {
                for xx in xs.clone() {
                    s += x[y * 5 + xx];
                    n += 1.0;
                }
            }
            s / n
        };
        assert_eq!(p, vec![mean(0..2, 0..3), mean(0..2, 2..5), mean(1..3, 0..3), mean(1..3, 2..5)]);
        let d = [1.0, 2.0, 3.0, 4.0];
        let back = adaptive_avg_pool_backward(&d, 1, 3, 5, 2, 2);
        let lhs: f64 = p.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 0.7];
        let d_y = [0.5, 0.1, -0.4];
        let (y, norm) = l2_normalize(&x);
        let g = l2_normalize_backward(&y, norm, &d_y);
        for i in 0..3 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let f = |v: &[f64]| -> f64 { l2_normalize(v).0.iter().zip(&d_y).map(|(a, b)| a * b).sum() };
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
