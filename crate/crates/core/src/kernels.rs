//! Dense compute kernels behind the tape ops.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! (default) the large ones also have a rayon implementation that splits work
//! into fixed-size chunks writing disjoint output regions, so results do not
//! depend on the thread count. The `benches/kernels.rs` suite compares the
//! two paths.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Geometry of a 2-D convolution patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

const PAR_MATMUL_FLOPS: usize = 1 << 16;
const MATMUL_ROW_CHUNK: usize = 64;
const IM2COL_ROW_CHUNK: usize = 128;

/// `a @ b`, picking the parallel path for large products.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    #[cfg(feature = "parallel")]
    {
        let (m, k) = a.dim();
        let n = b.dim().1;
        if m * k * n >= PAR_MATMUL_FLOPS && m > MATMUL_ROW_CHUNK {
            return matmul_par(a, b);
        }
    }
    matmul_seq(a, b)
}

pub fn matmul_seq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b)
}

/// Row-chunked parallel matmul. Chunk boundaries are fixed, so each output
/// element is produced by exactly one deterministic sub-product.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, _) = a.dim();
    let n = b.dim().1;
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(MATMUL_ROW_CHUNK * n)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let r0 = ci * MATMUL_ROW_CHUNK;
            let rows = chunk.len() / n;
            let a_sub = a.slice(s![r0..r0 + rows, ..]);
            let mut o = ArrayViewMut2::from_shape((rows, n), chunk).expect("chunk shape");
            general_mat_mul(1.0, &a_sub, &b, 0.0, &mut o);
        });
    Array2::from_shape_vec((m, n), out).expect("matmul shape")
}

fn im2col_rows(
    x: &ArrayView4<f64>,
    spec: ConvSpec,
    row0: usize,
    out_rows: &mut [f64],
    cols: usize,
) {
    let (_, c, h, w) = x.dim();
    let (oh, ow) = spec.out_hw(h, w);
    let k = spec.kernel;
    for (ri, row) in out_rows.chunks_mut(cols).enumerate() {
        let r = row0 + ri;
        let n = r / (oh * ow);
        let oy = (r / ow) % oh;
        let ox = r % ow;
        let mut ci = 0;
        for cc in 0..c {
            for ky in 0..k {
                let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..k {
                    let xx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    row[ci] = if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                        x[[n, cc, y as usize, xx as usize]]
                    } else {
                        0.0
                    };
                    ci += 1;
                }
            }
        }
    }
}

/// Patch extraction: `[N,C,H,W]` -> `[N*OH*OW, C*K*K]`.
pub fn im2col(x: ArrayView4<f64>, spec: ConvSpec) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = spec.out_hw(h, w);
    let rows = n * oh * ow;
    let cols = c * spec.kernel * spec.kernel;
    #[cfg(feature = "parallel")]
    if rows > IM2COL_ROW_CHUNK {
        return im2col_par(x, spec);
    }
    let mut out = vec![0.0f64; rows * cols];
    im2col_rows(&x, spec, 0, &mut out, cols);
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

pub fn im2col_seq(x: ArrayView4<f64>, spec: ConvSpec) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = spec.out_hw(h, w);
    let rows = n * oh * ow;
    let cols = c * spec.kernel * spec.kernel;
    let mut out = vec![0.0f64; rows * cols];
    im2col_rows(&x, spec, 0, &mut out, cols);
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

#[cfg(feature = "parallel")]
pub fn im2col_par(x: ArrayView4<f64>, spec: ConvSpec) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = spec.out_hw(h, w);
    let rows = n * oh * ow;
    let cols = c * spec.kernel * spec.kernel;
    let mut out = vec![0.0f64; rows * cols];
    out.par_chunks_mut(IM2COL_ROW_CHUNK * cols)
        .enumerate()
        .for_each(|(ci, chunk)| {
            im2col_rows(&x, spec, ci * IM2COL_ROW_CHUNK, chunk, cols);
        });
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

fn col2im_plane(
    cols: &ArrayView2<f64>,
    spec: ConvSpec,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    c_total: usize,
    oh: usize,
    ow: usize,
    plane: &mut [f64],
) {
    let k = spec.kernel;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let oy_num = y as isize + spec.pad as isize - ky as isize;
                if oy_num < 0 || oy_num % spec.stride as isize != 0 {
                    continue;
                }
                let oy = (oy_num / spec.stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                for kx in 0..k {
                    let ox_num = x as isize + spec.pad as isize - kx as isize;
                    if ox_num < 0 || ox_num % spec.stride as isize != 0 {
                        continue;
                    }
                    let ox = (ox_num / spec.stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let row = (n * oh + oy) * ow + ox;
                    let col = (c * k + ky) * k + kx;
                    acc += cols[[row, col]];
                }
            }
            plane[y * w + x] = acc;
        }
    }
    let _ = c_total;
}

/// Adjoint of [`im2col`]: scatter-add patches back to `[N,C,H,W]`, written as
/// a gather over output positions so it parallelizes deterministically.
pub fn col2im(cols: ArrayView2<f64>, spec: ConvSpec, shape: [usize; 4]) -> Array4<f64> {
    let [n, c, h, w] = shape;
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = vec![0.0f64; n * c * h * w];
    let planes: Vec<(usize, usize)> = (0..n)
        .flat_map(|ni| (0..c).map(move |ci| (ni, ci)))
        .collect();
    #[cfg(feature = "parallel")]
    {
        if n * c > 1 {
            out.par_chunks_mut(h * w).zip(planes.par_iter()).for_each(
                |(plane, &(ni, ci))| {
                    col2im_plane(&cols, spec, ni, ci, h, w, c, oh, ow, plane);
                },
            );
            return Array4::from_shape_vec((n, c, h, w), out).expect("col2im shape");
        }
    }
    for (plane, &(ni, ci)) in out.chunks_mut(h * w).zip(planes.iter()) {
        col2im_plane(&cols, spec, ni, ci, h, w, c, oh, ow, plane);
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("col2im shape")
}

pub fn col2im_seq(cols: ArrayView2<f64>, spec: ConvSpec, shape: [usize; 4]) -> Array4<f64> {
    let [n, c, h, w] = shape;
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = vec![0.0f64; n * c * h * w];
    for (idx, plane) in out.chunks_mut(h * w).enumerate() {
        col2im_plane(&cols, spec, idx / c, idx % c, h, w, c, oh, ow, plane);
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("col2im shape")
}

/// 2x nearest-neighbour upsampling of `[N,C,H,W]`.
pub fn nearest_up2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ni, ci, y, xx]];
                    out[[ni, ci, 2 * y, 2 * xx]] = v;
                    out[[ni, ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out
}

/// 2x2 block sum pooling, the adjoint of [`nearest_up2`].
pub fn sum_pool2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2 needs even dims");
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[ni, ci, y, xx]] = x[[ni, ci, 2 * y, 2 * xx]]
                        + x[[ni, ci, 2 * y, 2 * xx + 1]]
                        + x[[ni, ci, 2 * y + 1, 2 * xx]]
                        + x[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn matmul_paths_agree() {
        let a = Array::from_shape_fn((130, 37), |(i, j)| (i * 37 + j) as f64 * 0.01 - 3.0);
        let b = Array::from_shape_fn((37, 29), |(i, j)| ((i + 2 * j) % 13) as f64 * 0.1);
        let seq = matmul_seq(a.view(), b.view());
        let auto = matmul(a.view(), b.view());
        assert!(seq.iter().zip(auto.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        #[cfg(feature = "parallel")]
        {
            let par = matmul_par(a.view(), b.view());
            assert!(seq.iter().zip(par.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
        let x = Array::from_shape_fn((2, 3, 9, 7), |(a, b, c, d)| {
            ((a * 31 + b * 17 + c * 7 + d * 3) % 23) as f64 * 0.37 - 2.0
        });
        let cols = im2col(x.view(), spec);
        let y = Array::from_shape_fn(cols.dim(), |(i, j)| ((i * 5 + j * 11) % 19) as f64 * 0.21 - 1.5);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), spec, [2, 3, 9, 7]);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn col2im_paths_agree() {
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
        let x = Array::from_shape_fn((2, 4, 8, 8), |(a, b, c, d)| {
            (a as f64) - (b as f64) * 0.5 + (c as f64) * 0.25 - (d as f64) * 0.125
        });
        let cols = im2col(x.view(), spec);
        let a = col2im(cols.view(), spec, [2, 4, 8, 8]);
        let b = col2im_seq(cols.view(), spec, [2, 4, 8, 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = Array::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| (b + c + d) as f64);
        let y = Array::from_shape_fn((1, 2, 8, 8), |(_, b, c, d)| (b * 2 + c + d) as f64 * 0.1);
        let lhs = (&nearest_up2(x.view()) * &y).sum();
        let rhs = (&x * &sum_pool2(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
