//! Low-level dense kernels: strided GEMM and the im2col/col2im pair used by
//! both convolution directions.

/// Strided matrix view for [`gemm`]: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], isize, isize);

/// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`
/// row-major with row stride `c_rs`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64], c_rs: isize) {
    if m == 0 || n == 0 {
        return;
    }
    let (a, a_rs, a_cs) = a;
    let (b, b_rs, b_cs) = b;
    let max_a = extent(m, k, a_rs, a_cs);
    let max_b = extent(k, n, b_rs, b_cs);
    let max_c = extent(m, n, c_rs, 1);
    assert!(max_a <= a.len() && max_b <= b.len() && max_c <= c.len(), "gemm view out of bounds");
    // SAFETY: the asserts above bound every element the strided views touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            c_rs,
            1,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

/// Geometry of a 2-D convolution mapping a `h×w` map to `out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Calls `f(column_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ncols = self.col_cols();
        let out_hw = self.out_h * self.out_w;
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let row_base = row * ncols;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.h * self.w;
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = plane + iy as usize * self.w;
                            let dst_row = row_base + b * out_hw + oy * self.out_w;
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(dst_row + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `(B, C, H, W)` input into a `(C·k·k, B·out_h·out_w)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    g.for_each_tap(|dst, src| cols[dst] = x[src]);
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `(B, C, H, W)` map.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut x = vec![0.0; g.batch * g.channels * g.h * g.w];
    g.for_each_tap(|src, dst| x[dst] += cols[src]);
    x
}

/// `(B, C, P)` → `(C, B·P)`.
pub(crate) fn batch_to_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = (b * channels + c) * plane;
            let dst = c * batch * plane + b * plane;
            out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
        }
    }
    out
}

/// `(C, B·P)` → `(B, C, P)`.
pub(crate) fn channel_to_batch_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let dst = (b * channels + c) * plane;
            let src = c * batch * plane + b * plane;
            out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
        }
    }
    out
}
