//! Dense kernels: GEMM and the im2col/col2im pair behind convolution.

use crate::exec;

/// Boundary handling for convolution padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Wrap around the opposite edge (torus topology).
    Circular,
}

/// Sliding-window geometry of one convolution on a single `c × h × w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn valid(&self) -> bool {
        self.stride >= 1
            && self.h + 2 * self.pad >= self.kh
            && self.w + 2 * self.pad >= self.kw
            && (self.mode == PadMode::Zero || (self.pad <= self.h && self.pad <= self.w))
    }

    #[inline]
    fn source(&self, iy: isize, ix: isize) -> Option<usize> {
        let (h, w) = (self.h as isize, self.w as isize);
        if iy >= 0 && iy < h && ix >= 0 && ix < w {
            return Some(iy as usize * self.w + ix as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Circular => {
                Some(iy.rem_euclid(h) as usize * self.w + ix.rem_euclid(w) as usize)
            }
        }
    }
}

/// Unfold `x` (`c·h·w`) into `col` (`c·kh·kw × oh·ow`).
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    debug_assert_eq!(col.len(), g.col_rows() * plane);
    exec::for_each_chunk_mut(col, plane, |row, dst| {
        let kj = row % g.kw;
        let ki = (row / g.kw) % g.kh;
        let ci = row / (g.kw * g.kh);
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for oy in 0..oh {
            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
            for ox in 0..ow {
                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                dst[oy * ow + ox] = g.source(iy, ix).map_or(0.0, |i| src[i]);
            }
        }
    });
}

/// Adjoint of [`im2col`]: fold `col` back, accumulating into `x`.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let hw = g.h * g.w;
    exec::for_each_chunk_mut(x, hw, |ci, dst| {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if let Some(i) = g.source(iy, ix) {
                            dst[i] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
}

/// `c ← op(a)·op(b) + beta·c` for row-major matrices, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. With `trans_a` the buffer `a` holds a
/// `k × m` matrix (likewise for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
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

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_handles_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for mode in [PadMode::Zero, PadMode::Circular] {
            let g = ConvGeom { c: 2, h: 5, w: 6, kh: 3, kw: 3, stride: 2, pad: 1, mode };
            let x: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64 * 0.7).sin()).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut col = vec![0.0; y.len()];
            im2col(&x, &g, &mut col);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn circular_padding_wraps() {
        let g = ConvGeom { c: 1, h: 3, w: 3, kh: 3, kw: 3, stride: 1, pad: 1, mode: PadMode::Circular };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(&x, &g, &mut col);
        // top-left tap at output (0,0) reads input (-1,-1) → (2,2)
        assert_eq!(col[0], 8.0);
    }
}
