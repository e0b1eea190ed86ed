// Row-major dense kernels. Every routine accumulates into its output buffer.
// Reduction order is fixed per output element, so results do not depend on
// whether rows are processed in parallel.

use rayon::prelude::*;

use super::parallel_enabled;

const PAR_MIN_WORK: usize = 1 << 16;

/// Row-major view of a matrix with explicit strides.
#[derive(Clone, Copy)]
struct Strided<'a> {
    data: &'a [f32],
    rs: isize,
    cs: isize,
}

impl Strided<'_> {
    fn rows_from(self, first: usize) -> Self {
        Strided {
            data: &self.data[first * self.rs as usize..],
            ..self
        }
    }
}

/// `c[m×n] += a · b`, splitting rows of `c` across threads in parallel mode.
fn gemm(m: usize, k: usize, n: usize, a: Strided<'_>, b: Strided<'_>, c: &mut [f32]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let block = |(bi, c_blk): (usize, &mut [f32]), rows_per: usize| {
        let rows = c_blk.len() / n;
        let a = a.rows_from(bi * rows_per);
        // SAFETY: every operand slice covers the strided extent it is read or
        // written through, and `c_blk` is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                1.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    let threads = rayon::current_num_threads();
    if parallel_enabled() && threads > 1 && m * k * n >= PAR_MIN_WORK && m > 1 {
        let rows_per = m.div_ceil(threads);
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|blk| block(blk, rows_per));
    } else {
        block((0, c), m);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let a = Strided { data: a, rs: k as isize, cs: 1 };
    let b = Strided { data: b, rs: n as isize, cs: 1 };
    gemm(m, k, n, a, b, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let a = Strided { data: a, rs: 1, cs: m as isize };
    let b = Strided { data: b, rs: n as isize, cs: 1 };
    gemm(m, k, n, a, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let a = Strided { data: a, rs: k as isize, cs: 1 };
    let b = Strided { data: b, rs: 1, cs: k as isize };
    gemm(m, k, n, a, b, c);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − padding` lies
/// inside the image, as a half-open range.
fn valid_ox(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.width + g.padding > kj {
        ((g.width + g.padding - kj - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Calls `f(column_offset, image_offset)` for every in-bounds tap of one
/// column row.
fn for_each_run(g: &ConvGeom, c: usize, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
    let (lo, hi) = valid_ox(g, kj);
    for oy in 0..g.out_h {
        let y = (oy * g.stride + ki) as isize - g.padding as isize;
        if y < 0 || y >= g.height as isize {
            continue;
        }
        let row = (c * g.height + y as usize) * g.width;
        for ox in lo..hi {
            f(oy * g.out_w + ox, row + ox * g.stride + kj - g.padding);
        }
    }
}

/// Unfolds one `C×H×W` image into `[C·kh·kw, out_h·out_w]` columns.
pub fn im2col(g: &ConvGeom, image: &[f32], cols: &mut [f32]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                if g.padding > 0 {
                    dst.fill(0.0);
                }
                if g.stride == 1 && g.padding == 0 {
                    for oy in 0..g.out_h {
                        let src = (c * g.height + oy + ki) * g.width + kj;
                        dst[oy * g.out_w..(oy + 1) * g.out_w].copy_from_slice(&image[src..src + g.out_w]);
                    }
                } else {
                    for_each_run(g, c, ki, kj, |d, s| dst[d] = image[s]);
                }
            }
        }
    }
}

/// Folds column gradients back onto one image, accumulating overlaps.
pub fn col2im(g: &ConvGeom, cols: &[f32], image: &mut [f32]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                if g.stride == 1 && g.padding == 0 {
                    for oy in 0..g.out_h {
                        let d = (c * g.height + oy + ki) * g.width + kj;
                        image[d..d + g.out_w]
                            .iter_mut()
                            .zip(&src[oy * g.out_w..(oy + 1) * g.out_w])
                            .for_each(|(a, v)| *a += v);
                    }
                } else {
                    for_each_run(g, c, ki, kj, |s, d| image[d] += src[s]);
                }
            }
        }
    }
}
