//! Dense kernels shared by the tape's forward and backward passes.
//!
//! All kernels accumulate into `out` in a fixed loop order so results are
//! reproducible bit-for-bit across runs.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 1 {
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let mut acc = out[i];
            for (x, y) in row.iter().zip(b) {
                acc += x * y;
            }
            out[i] = acc;
        }
        return;
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += s * gv;
            }
        }
    }
}

/// Geometry of a single-sample 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Source pixel index for patch row `r` and output position `(oy, ox)`,
    /// or `None` when the tap falls into the zero padding.
    #[inline]
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let kk = self.kernel_h * self.kernel_w;
        let c = r / kk;
        let ki = (r % kk) / self.kernel_w;
        let kj = r % self.kernel_w;
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }
}

/// Unfolds `x[C×H×W]` into a `[C·kh·kw × H'·W']` patch matrix.
pub fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let cols = oh * ow;
    let mut out = vec![0.0; geo.patch_len() * cols];
    for r in 0..geo.patch_len() {
        let row = &mut out[r * cols..(r + 1) * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                if let Some(src) = geo.source(r, oy, ox) {
                    row[oy * ow + ox] = x[src];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub fn col2im(cols: &[f64], geo: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let n = oh * ow;
    for r in 0..geo.patch_len() {
        let row = &cols[r * n..(r + 1) * n];
        for oy in 0..oh {
            for ox in 0..ow {
                if let Some(src) = geo.source(r, oy, ox) {
                    dx[src] += row[oy * ow + ox];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
        // out = a·b, so aᵀ·out and out·bᵀ give known products.
        let mut at_out = vec![0.0; k * n];
        gemm_tn(&a, &out, &mut at_out, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * out[i * n + j]).sum();
                assert!((at_out[p * n + j] - want).abs() < 1e-12);
            }
        }
        let mut out_bt = vec![0.0; m * k];
        gemm_nt(&out, &b, &mut out_bt, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| out[i * n + j] * b[p * n + j]).sum();
                assert!((out_bt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let geo = ConvGeometry {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sqrt()).collect();
        let cols = im2col(&x, &geo);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 11) as f64).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &geo, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
