//! Loops behind the differentiable ops.
//!
//! Every kernel is single-threaded with a fixed summation order, so results
//! are bit-reproducible across runs on the same machine. Matrix products go
//! through `matrixmultiply`, which picks a SIMD kernel at runtime.

use std::ops::Range;

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: callers pass slices holding at least the strided extents, and `c` is `m * n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1))
}

/// `[m,n] x [k,n]^T -> [m,k]`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    assert!(a.len() >= m * n && b.len() >= k * n);
    gemm(m, n, k, a, (n as isize, 1), b, (1, n as isize))
}

/// `[m,k]^T x [m,n] -> [k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= m * n);
    gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1))
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a 1-D convolution over `[batch, in_channels, length]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub length: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_length: usize,
}

impl ConvGeometry {
    /// Range of output positions `t` whose tap `j` lands inside the input.
    #[inline]
    fn valid_range(&self, j: usize) -> (usize, usize) {
        // input index = t * stride + j - pad_left, must lie in [0, length)
        let lo = if j >= self.pad_left {
            0
        } else {
            (self.pad_left - j).div_ceil(self.stride)
        };
        let limit = self.length + self.pad_left; // t*stride + j < limit
        let hi = if limit > j {
            ((limit - j - 1) / self.stride + 1).min(self.out_length)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeometry {
    /// Unfolds batch rows `rows` into `[in_channels * kernel, rows.len() * out_length]`.
    fn im2col(&self, x: &[f64], rows: Range<usize>) -> Vec<f64> {
        let (l, lo) = (self.length, self.out_length);
        let width = rows.len() * lo;
        let mut cols = vec![0.0; self.in_channels * self.kernel * width];
        for c in 0..self.in_channels {
            for j in 0..self.kernel {
                let (t0, t1) = self.valid_range(j);
                let row = &mut cols[(c * self.kernel + j) * width..][..width];
                for (i, b) in rows.clone().enumerate() {
                    let x_row = &x[(b * self.in_channels + c) * l..][..l];
                    let col = &mut row[i * lo..][..lo];
                    if self.stride == 1 {
                        let s0 = t0 + j - self.pad_left;
                        col[t0..t1].copy_from_slice(&x_row[s0..s0 + (t1 - t0)]);
                    } else {
                        for t in t0..t1 {
                            col[t] = x_row[t * self.stride + j - self.pad_left];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds an unfolded gradient for batch rows `rows` back onto the input layout.
    fn col2im(&self, cols: &[f64], rows: Range<usize>, dx: &mut [f64]) {
        let (l, lo) = (self.length, self.out_length);
        let width = rows.len() * lo;
        for c in 0..self.in_channels {
            for j in 0..self.kernel {
                let (t0, t1) = self.valid_range(j);
                let row = &cols[(c * self.kernel + j) * width..][..width];
                for (i, b) in rows.clone().enumerate() {
                    let dx_row = &mut dx[(b * self.in_channels + c) * l..][..l];
                    let col = &row[i * lo..][..lo];
                    for t in t0..t1 {
                        dx_row[t * self.stride + j - self.pad_left] += col[t];
                    }
                }
            }
        }
    }

    /// Batch rows per unfolded block, so one block stays cache-sized.
    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let per_row = (self.in_channels * self.kernel * self.out_length).max(1);
        let step = (CONV_BLOCK / per_row).clamp(1, self.batch.max(1));
        let batch = self.batch;
        (0..batch).step_by(step).map(move |b| b..(b + step).min(batch))
    }
}

const CONV_BLOCK: usize = 1 << 14;

pub fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (lo, ck, o) = (g.out_length, g.in_channels * g.kernel, g.out_channels);
    let mut out = vec![0.0; g.batch * o * lo];
    for rows in g.chunks() {
        let width = rows.len() * lo;
        let y = matmul(w, &g.im2col(x, rows.clone()), o, ck, width);
        for (ch, y_row) in y.chunks_exact(width.max(1)).enumerate() {
            let shift = bias.map_or(0.0, |b| b[ch]);
            for (i, b) in rows.clone().enumerate() {
                let dst = &mut out[(b * o + ch) * lo..][..lo];
                for (d, v) in dst.iter_mut().zip(&y_row[i * lo..][..lo]) {
                    *d = v + shift;
                }
            }
        }
    }
    out
}

/// Gradients of a 1-D convolution: `(d_input, d_kernel, d_bias)`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (lo, ck, o) = (g.out_length, g.in_channels * g.kernel, g.out_channels);
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = need_db.then(|| vec![0.0; o]);
    for rows in g.chunks() {
        let width = rows.len() * lo;
        // dy for these rows as [out_channels, rows * out_length]
        let mut dy_t = vec![0.0; o * width];
        for (i, b) in rows.clone().enumerate() {
            for ch in 0..o {
                dy_t[ch * width + i * lo..][..lo].copy_from_slice(&dy[(b * o + ch) * lo..][..lo]);
            }
        }
        if let Some(db) = db.as_mut() {
            for (d, r) in db.iter_mut().zip(dy_t.chunks_exact(width.max(1))) {
                *d += r.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let part = matmul_nt(&dy_t, &g.im2col(x, rows.clone()), o, width, ck);
            for (d, p) in dw.iter_mut().zip(&part) {
                *d += p;
            }
        }
        if let Some(dx) = dx.as_mut() {
            g.col2im(&matmul_tn(w, &dy_t, o, ck, width), rows, dx);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_length];
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                for t in 0..g.out_length {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for j in 0..g.kernel {
                            let pos = (t * g.stride + j) as isize - g.pad_left as isize;
                            if pos >= 0 && (pos as usize) < g.length {
                                s += w[(o * g.in_channels + c) * g.kernel + j]
                                    * x[(b * g.in_channels + c) * g.length + pos as usize];
                            }
                        }
                    }
                    out[(b * g.out_channels + o) * g.out_length + t] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops_for_strides_and_padding() {
        for &(stride, pad_left, pad_right) in &[(1, 0, 0), (1, 2, 2), (2, 1, 1), (3, 0, 2)] {
            let (length, kernel) = (11, 4);
            let out_length = (length + pad_left + pad_right - kernel) / stride + 1;
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 2,
                length,
                kernel,
                stride,
                pad_left,
                out_length,
            };
            let x: Vec<f64> = (0..2 * 3 * length).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let w: Vec<f64> = (0..2 * 3 * kernel).map(|i| ((i * 5 % 11) as f64) * 0.1).collect();
            let fast = conv1d_forward(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad_left}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
    }
}
