//! Raw slice kernels shared by the tape and by non-differentiable image code.

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// A column block `[.., col0..col0+width]` of a matrix with `stride` columns.
    pub fn block(data: &'a [f32], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Mat {
            data: &data[col0..],
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Writable strided matrix destination.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], cols: usize) -> Self {
        MatMut {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [f32], stride: usize, col0: usize) -> Self {
        MatMut {
            data: &mut data[col0..],
            rs: stride as isize,
            cs: 1,
        }
    }
}

/// `c = a·b + beta·c`.
pub(crate) fn gemm(a: Mat, b: Mat, c: MatMut, beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta != 1.0 {
            for i in 0..m {
                for j in 0..n {
                    let idx = i as isize * c.rs + j as isize * c.cs;
                    c.data[idx as usize] *= beta;
                }
            }
        }
        return;
    }
    // Bounds: the last touched element of each operand must be inside its slice.
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!((last(m, k, a.rs, a.cs) as usize) < a.data.len());
    assert!((last(k, n, b.rs, b.cs) as usize) < b.data.len());
    assert!((last(m, n, c.rs, c.cs) as usize) < c.data.len());
    // SAFETY: every index reachable from the given strides and extents was
    // checked against the slice lengths above; strides are non-negative.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            c.cs,
        );
    }
}

/// Output extent of a valid-padding convolution.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

/// Unfolds one `[c×h×w]` image into `[c·kh·kw × ho·wo]` columns.
pub(crate) fn im2col(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    cols: &mut [f32],
) {
    let ho = conv_out(h, kh, stride);
    let wo = conv_out(w, kw, stride);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let src = &img[ci * h * w + (oy * stride + ky) * w..];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = src[ox * stride + kx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    img: &mut [f32],
) {
    let ho = conv_out(h, kh, stride);
    let wo = conv_out(w, kw, stride);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let base = ci * h * w + (oy * stride + ky) * w;
                    for ox in 0..wo {
                        img[base + ox * stride + kx] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Bilinear corner weights for a continuous pixel position `(x, y)`.
///
/// Returns the integer top-left corner and the fractional offsets.
#[inline]
pub(crate) fn bilinear_corner(x: f32, y: f32) -> (isize, isize, f32, f32) {
    let x0 = x.floor();
    let y0 = y.floor();
    (x0 as isize, y0 as isize, x - x0, y - y0)
}

#[inline]
fn pixel(plane: &[f32], h: usize, w: usize, x: isize, y: isize) -> f32 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Samples one channel plane at `(x, y)` with zero padding.
#[inline]
pub(crate) fn bilinear(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let (x0, y0, fx, fy) = bilinear_corner(x, y);
    let v00 = pixel(plane, h, w, x0, y0);
    let v01 = pixel(plane, h, w, x0 + 1, y0);
    let v10 = pixel(plane, h, w, x0, y0 + 1);
    let v11 = pixel(plane, h, w, x0 + 1, y0 + 1);
    (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v01 + (1.0 - fx) * fy * v10 + fx * fy * v11
}

/// Backward of [`bilinear`] for one plane: accumulates the image gradient and
/// returns `(d/dx, d/dy)` scaled by `g`.
#[inline]
pub(crate) fn bilinear_backward(
    plane: &[f32],
    h: usize,
    w: usize,
    x: f32,
    y: f32,
    g: f32,
    dplane: Option<&mut [f32]>,
) -> (f32, f32) {
    let (x0, y0, fx, fy) = bilinear_corner(x, y);
    let v00 = pixel(plane, h, w, x0, y0);
    let v01 = pixel(plane, h, w, x0 + 1, y0);
    let v10 = pixel(plane, h, w, x0, y0 + 1);
    let v11 = pixel(plane, h, w, x0 + 1, y0 + 1);
    if let Some(dp) = dplane {
        let mut add = |xx: isize, yy: isize, wgt: f32| {
            if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize {
                dp[yy as usize * w + xx as usize] += g * wgt;
            }
        };
        add(x0, y0, (1.0 - fx) * (1.0 - fy));
        add(x0 + 1, y0, fx * (1.0 - fy));
        add(x0, y0 + 1, (1.0 - fx) * fy);
        add(x0 + 1, y0 + 1, fx * fy);
    }
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (g * dx, g * dy)
}

/// Pixel offsets of a `p`-point sampling grid with unit spacing centred on 0.
/// Snap radius around the half-pixel lattice, in pixels. Exceeds the f32
/// round-trip error of a normalized coordinate for extents up to ~1000 px.
const LATTICE_SNAP: f64 = 1.0 / 65536.0;

/// Pixel position of normalized coordinate `u` on an axis of `extent` pixels.
/// Positions within [`LATTICE_SNAP`] of a multiple of ½ snap onto it, so grid
/// centres, which f32 cannot represent exactly in normalized units, sample
/// integer crops bit-exactly.
#[inline]
pub(crate) fn to_pixel(u: f32, extent: usize) -> f32 {
    let p = u as f64 * (extent as f64 - 1.0);
    let q = (2.0 * p).round() / 2.0;
    (if (p - q).abs() < LATTICE_SNAP { q } else { p }) as f32
}

pub(crate) fn patch_offsets(p: usize) -> impl Iterator<Item = f32> {
    let half = (p as f32 - 1.0) / 2.0;
    (0..p).map(move |j| j as f32 - half)
}

/// Multi-head self-attention over independent sequences.
///
/// `qkv` is `[seqs·t × 3d]` laid out as `[q | k | v]` per row. Writes the
/// `[seqs·t × d]` output and returns the attention probabilities
/// `[seqs × heads × t × t]` needed by the backward pass.
pub(crate) fn attention_forward(
    qkv: &[f32],
    seqs: usize,
    t: usize,
    d: usize,
    heads: usize,
    out: &mut [f32],
) -> Vec<f32> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; seqs * heads * t * t];
    for s in 0..seqs {
        let rows = &qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
        let orows = &mut out[s * t * d..(s + 1) * t * d];
        for h in 0..heads {
            let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let q = Mat::block(rows, t, 3 * d, h * dh, dh);
            let k = Mat::block(rows, t, 3 * d, d + h * dh, dh);
            let v = Mat::block(rows, t, 3 * d, 2 * d + h * dh, dh);
            gemm(q, k.t(), MatMut::new(p, t), 0.0);
            for row in p.chunks_mut(t) {
                let mut max = f32::NEG_INFINITY;
                for x in row.iter_mut() {
                    *x *= scale;
                    max = max.max(*x);
                }
                let mut sum = 0.0f64;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x as f64;
                }
                let inv = (1.0 / sum) as f32;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            gemm(Mat::new(p, t, t), v, MatMut::block(orows, d, h * dh), 0.0);
        }
    }
    probs
}

/// Backward of [`attention_forward`]; accumulates into `dqkv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    qkv: &[f32],
    probs: &[f32],
    dout: &[f32],
    seqs: usize,
    t: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [f32],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dp = vec![0.0f32; t * t];
    for s in 0..seqs {
        let rows = &qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
        let drows = &mut dqkv[s * t * 3 * d..(s + 1) * t * 3 * d];
        let go = &dout[s * t * d..(s + 1) * t * d];
        for h in 0..heads {
            let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let q = Mat::block(rows, t, 3 * d, h * dh, dh);
            let k = Mat::block(rows, t, 3 * d, d + h * dh, dh);
            let v = Mat::block(rows, t, 3 * d, 2 * d + h * dh, dh);
            let g = Mat::block(go, t, d, h * dh, dh);
            // dV += Pᵀ·dO
            gemm(
                Mat::new(p, t, t).t(),
                g,
                MatMut::block(drows, 3 * d, 2 * d + h * dh),
                1.0,
            );
            // dP = dO·Vᵀ, then softmax backward in place.
            gemm(g, v.t(), MatMut::new(&mut dp, t), 0.0);
            for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                let dot: f64 = prow
                    .iter()
                    .zip(dprow.iter())
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum();
                let dot = dot as f32;
                for (x, pv) in dprow.iter_mut().zip(prow) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ += dS·K, dK += dSᵀ·Q
            gemm(
                Mat::new(&dp, t, t),
                k,
                MatMut::block(drows, 3 * d, h * dh),
                1.0,
            );
            gemm(
                Mat::new(&dp, t, t).t(),
                q,
                MatMut::block(drows, 3 * d, d + h * dh),
                1.0,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..20).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![0.0; 15];
        gemm(Mat::new(&a, 3, 4), Mat::new(&b, 4, 5), MatMut::new(&mut c, 5), 0.0);
        assert_eq!(c, naive(&a, &b, 3, 4, 5));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let dims = (2, 5, 6);
        let img: Vec<f32> = (0..60).map(|i| (i as f32).sin()).collect();
        let ho = conv_out(5, 3, 2);
        let wo = conv_out(6, 3, 2);
        let mut cols = vec![0.0; 2 * 9 * ho * wo];
        im2col(&img, dims, (3, 3), 2, &mut cols);
        let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let mut back = vec![0.0; 60];
        col2im(&y, dims, (3, 3), 2, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn bilinear_hand_values() {
        let img = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(bilinear(&img, 2, 2, 0.5, 0.5), 1.5);
        assert_eq!(bilinear(&img, 2, 2, 1.0, 0.0), 1.0);
        assert_eq!(bilinear(&img, 2, 2, -5.0, -5.0), 0.0);
    }
}
