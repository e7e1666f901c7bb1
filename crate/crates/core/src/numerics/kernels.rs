//! Forward kernels shared by the tape and by plain grid code.
//!
//! Shapes are checked by the public wrappers in [`super`]; the kernels
//! here assume valid input.

use super::FloatGrid;

/// `row += sum_q s[q] b_q` over four rows of `b` at once, so each output
/// element is loaded and stored once per four products.
#[inline]
fn axpy4(row: &mut [f64], s: [f64; 4], b: [&[f64]; 4]) {
    let [s0, s1, s2, s3] = s;
    for ((((o, &x0), &x1), &x2), &x3) in row.iter_mut().zip(b[0]).zip(b[1]).zip(b[2]).zip(b[3]) {
        *o += s0 * x0 + s1 * x1 + s2 * x2 + s3 * x3;
    }
}

#[inline]
fn axpy(row: &mut [f64], s: f64, b: &[f64]) {
    if s != 0.0 {
        for (o, &x) in row.iter_mut().zip(b) {
            *o += s * x;
        }
    }
}

/// `out += a b` for row-major `a: [m, k]`, `b: [k, n]`. Coefficients of `a`
/// are read through `coef(i, p)`, which lets the same loop serve `a^T b`.
#[inline]
fn gemm_rows(coef: impl Fn(usize, usize) -> f64, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let brow = |p: usize| &b[p * n..(p + 1) * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let s = [coef(i, p), coef(i, p + 1), coef(i, p + 2), coef(i, p + 3)];
            if s != [0.0; 4] {
                axpy4(row, s, [brow(p), brow(p + 1), brow(p + 2), brow(p + 3)]);
            }
            p += 4;
        }
        for p in p..k {
            axpy(row, coef(i, p), brow(p));
        }
    }
}

fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_rows(|i, p| a[i * k + p], b, out, m, k, n);
}

/// `out += a^T b` for `a: [k, m]`, `b: [k, n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_rows(|i, p| a[p * m + i], b, out, m, k, n);
}

/// Dot product with four independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for q in 0..4 {
            acc[q] += x[q] * y[q];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = a b^T` for `a: [m, k]`, `b: [n, k]`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

/// Row-major transpose of an `[r, c]` buffer, in 8x8 tiles.
pub(crate) fn transposed(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    const TILE: usize = 8;
    let mut out = vec![0.0; x.len()];
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = x[i * c + j];
                }
            }
        }
    }
    out
}

/// Output rows shorter than this use the dot-product form instead.
const NARROW: usize = 16;

/// `[m, k] x [k, n] -> [m, n]`.
pub(crate) fn matmul(a: &FloatGrid, b: &FloatGrid) -> FloatGrid {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    if n < NARROW && k >= NARROW {
        gemm_nt(a.data(), &transposed(b.data(), k, n), &mut out, m, k, n);
    } else {
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    }
    FloatGrid::from_parts(vec![m, n], out)
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
pub(crate) fn matmul_tn(a: &FloatGrid, b: &FloatGrid) -> FloatGrid {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    if n < NARROW && m >= NARROW {
        // (b^T a)^T keeps the long axis innermost.
        let mut t = vec![0.0; n * m];
        gemm_tn(b.data(), a.data(), &mut t, k, n, m);
        out = transposed(&t, n, m);
    } else {
        gemm_tn(a.data(), b.data(), &mut out, k, m, n);
    }
    FloatGrid::from_parts(vec![m, n], out)
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_nt(a: &FloatGrid, b: &FloatGrid) -> FloatGrid {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = vec![0.0; m * n];
    if k < NARROW && n >= NARROW {
        gemm_nn(a.data(), &transposed(b.data(), n, k), &mut out, m, k, n);
    } else {
        gemm_nt(a.data(), b.data(), &mut out, m, k, n);
    }
    FloatGrid::from_parts(vec![m, n], out)
}

pub(crate) fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Geometry of one zero-padded 3x3 convolution.
#[derive(Clone, Copy)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Geom {
    fn new(input: &FloatGrid, stride: usize) -> Self {
        let (ci, h, w) = input.chw();
        Self {
            ci,
            h,
            w,
            ho: conv_out_extent(h, stride),
            wo: conv_out_extent(w, stride),
            stride,
        }
    }

    fn taps(&self) -> usize {
        self.ci * 9
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(column_row, out_pixel, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.stride;
        for ci in 0..self.ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = (ci * 3 + ky) * 3 + kx;
                    for oy in 0..self.ho {
                        let iy = oy * s + ky;
                        if iy == 0 || iy > self.h {
                            continue;
                        }
                        let base = (ci * self.h + iy - 1) * self.w;
                        for ox in 0..self.wo {
                            let ix = ox * s + kx;
                            if ix == 0 || ix > self.w {
                                continue;
                            }
                            f(r, oy * self.wo + ox, base + ix - 1);
                        }
                    }
                }
            }
        }
    }

    /// `[Ci*9, Ho*Wo]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.pixels();
        let mut cols = vec![0.0; self.taps() * p];
        self.for_each_tap(|r, o, i| cols[r * p + o] = x[i]);
        cols
    }
}

/// Zero-padded 3x3 convolution, `[Ci, H, W] * [Co, Ci, 3, 3] + [Co]`.
pub(crate) fn conv3x3(
    input: &FloatGrid,
    weight: &FloatGrid,
    bias: Option<&FloatGrid>,
    stride: usize,
) -> FloatGrid {
    let g = Geom::new(input, stride);
    let co_n = weight.shape()[0];
    let p = g.pixels();
    let cols = g.im2col(input.data());
    let mut out = vec![0.0; co_n * p];
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(p).zip(b.data()) {
            plane.fill(bv);
        }
    }
    gemm_nn(weight.data(), &cols, &mut out, co_n, g.taps(), p);
    FloatGrid::from_parts(vec![co_n, g.ho, g.wo], out)
}

/// Gradients of [`conv3x3`] with respect to input, weight and bias;
/// `need` selects which of the input and weight gradients are formed.
pub(crate) fn conv3x3_backward(
    input: &FloatGrid,
    weight: &FloatGrid,
    grad_out: &FloatGrid,
    stride: usize,
    need: (bool, bool),
) -> (Option<FloatGrid>, Option<FloatGrid>, FloatGrid) {
    let (need_x, need_w) = need;
    let g = Geom::new(input, stride);
    let co_n = weight.shape()[0];
    let p = g.pixels();
    let go = grad_out.data();
    let gb = go.chunks(p).map(|plane| plane.iter().sum()).collect();
    let gw = need_w.then(|| {
        let cols = g.im2col(input.data());
        let mut gw = vec![0.0; weight.len()];
        gemm_nt(go, &cols, &mut gw, co_n, p, g.taps());
        FloatGrid::from_parts(weight.shape().to_vec(), gw)
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![0.0; g.taps() * p];
        gemm_tn(weight.data(), go, &mut gcols, co_n, g.taps(), p);
        let mut gx = vec![0.0; input.len()];
        g.for_each_tap(|r, o, i| gx[i] += gcols[r * p + o]);
        FloatGrid::from_parts(input.shape().to_vec(), gx)
    });
    (gx, gw, FloatGrid::from_parts(vec![co_n], gb))
}

pub(crate) fn softmax_rows(x: &FloatGrid) -> FloatGrid {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c).take(r) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    FloatGrid::from_parts(x.shape().to_vec(), out)
}

/// Cosine similarity of two flattened grids; zero when either norm is zero.
pub(crate) fn cosine(a: &FloatGrid, b: &FloatGrid) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine of zero-norm vector, using 0");
        return 0.0;
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub(crate) fn normalize_rows(x: &FloatGrid) -> FloatGrid {
    let c = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    FloatGrid::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn upsample2(x: &FloatGrid) -> FloatGrid {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; c * 4 * h * w];
    let d = x.data();
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = d[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    FloatGrid::from_parts(vec![c, 2 * h, 2 * w], out)
}

/// Mean over the spatial axes of a `[C, H, W]` grid, giving `[C]`.
pub(crate) fn spatial_mean(x: &FloatGrid) -> FloatGrid {
    let (c, h, w) = x.chw();
    let hw = (h * w) as f64;
    FloatGrid::from_parts(
        vec![c],
        x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect(),
    )
}
