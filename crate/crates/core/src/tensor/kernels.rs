//! Raw numeric kernels on flat row-major slices. No shape checking here;
//! callers in `tape.rs` validate shapes before dispatching.

/// C (m×n) = A·B (+ C when `accumulate`), with either operand optionally
/// read transposed. `a` is stored m×k (or k×m when `trans_a`), `b` is k×n
/// (or n×k when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above
    // and `c` does not alias `a` or `b` (distinct borrows).
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

/// C += A·B where every output entry accumulates its k products strictly in
/// index order, with no fused multiply-add. Used where results must agree
/// bit-for-bit with a naive loop.
pub(crate) fn gemm_ordered_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const CHUNK: usize = 512;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + CHUNK).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        j0 = j1;
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold the input into a (C·kh·kw) × (out_h·out_w) matrix; padded taps are 0.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols_n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeometry, dinput: &mut [f64]) {
    let cols_n = g.out_len();
    for c in 0..g.channels {
        let plane = &mut dinput[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Direct nested-loop cross-correlation, the reference the im2col path is
/// checked against. Shapes: input C×H×W, kernels O×C×k×k, bias O.
pub fn conv2d_reference(
    input: &[f64],
    in_shape: [usize; 3],
    kernels: &[f64],
    out_channels: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [c_in, h, w] = in_shape;
    let oh = conv_output_size(h, k, stride, padding).expect("kernel fits");
    let ow = conv_output_size(w, k, stride, padding).expect("kernel fits");
    let mut out = vec![0.0; out_channels * oh * ow];
    for o in 0..out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for i in 0..k {
                        for j in 0..k {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            let ix = (ox * stride + j) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let kv = kernels[((o * c_in + c) * k + i) * k + j];
                            acc += kv * input[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + bias.map_or(0.0, |b| b[o]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut c = want.clone();
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn ordered_gemm_matches_naive_exactly() {
        let (m, k, n) = (5, 7, 700);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_ordered_acc(m, k, n, &a, &b, &mut c);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn output_size_rule() {
        assert_eq!(conv_output_size(64, 3, 1, 1), Some(64));
        assert_eq!(conv_output_size(5, 3, 2, 0), Some(2));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
    }
}
