//! Forward and backward kernels for the layers used by the networks.
//!
//! Batched kernels run one task per sample; per-sample partial gradients are
//! reduced in sample order, so results do not depend on thread count.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    /// "Same" padding for odd kernels at stride 1.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 1, 0, 1)
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.span()).then(|| (padded - self.span()) / self.stride + 1)
    }

    pub fn transpose_out_extent(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.span()).checked_sub(2 * self.pad)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a·b + beta·c` with `a` logically `m×k` and `b` logically `k×n`;
/// `*_t` marks operands stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfolds a `[C, H, W]` image into `[C·k·k, Ho·Wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, cols: &mut [f32]) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, x: &mut [f32]) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(dy: &[f32], plane: usize) -> Vec<f32> {
    dy.chunks(plane).map(|c| c.iter().sum()).collect()
}

fn sum_in_order(parts: impl Iterator<Item = Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// Output spatial extent of a convolution, panicking on an impossible
/// geometry (callers validate configurations up front).
fn conv_out(g: ConvGeom, h: usize, w: usize) -> (usize, usize) {
    (
        g.out_extent(h).expect("kernel larger than padded input"),
        g.out_extent(w).expect("kernel larger than padded input"),
    )
}

/// Convolution; `weight` is `[Cout, Cin, k, k]`, `bias` is `Cout` long.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&[f32]>, g: ConvGeom) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let cout = weight.batch();
    debug_assert_eq!(weight.channels(), cin);
    let (ho, wo) = conv_out(g, h, w);
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let patch = cin * g.kernel * g.kernel;
    let sample_out = cout * ho * wo;
    par::for_each_chunk_mut(out.data_mut(), sample_out, |i, dst| {
        let xs = x.sample(i);
        if g.is_pointwise() {
            gemm(cout, patch, ho * wo, weight.data(), false, xs, false, dst, 0.0);
        } else {
            let mut cols = vec![0.0f32; patch * ho * wo];
            im2col(xs, cin, h, w, g, ho, wo, &mut cols);
            gemm(cout, patch, ho * wo, weight.data(), false, &cols, false, dst, 0.0);
        }
        if let Some(b) = bias {
            add_bias(dst, b, ho * wo);
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Vec<f32>,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> ConvGrads {
    let [n, cin, h, w] = x.shape();
    let cout = weight.batch();
    let [_, _, ho, wo] = dy.shape();
    let patch = cin * g.kernel * g.kernel;
    let parts = par::map_indexed(n, |i| {
        let xs = x.sample(i);
        let dys = dy.sample(i);
        let owned;
        let cols: &[f32] = if g.is_pointwise() {
            xs
        } else {
            let mut c = vec![0.0f32; patch * ho * wo];
            im2col(xs, cin, h, w, g, ho, wo, &mut c);
            owned = c;
            &owned
        };
        let mut dw = vec![0.0f32; cout * patch];
        gemm(cout, ho * wo, patch, dys, false, cols, true, &mut dw, 0.0);
        let db = channel_sums(dys, ho * wo);
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0f32; patch * ho * wo];
            gemm(patch, cout, ho * wo, weight.data(), true, dys, false, &mut dcols, 0.0);
            if g.is_pointwise() {
                dcols
            } else {
                let mut dx = vec![0.0f32; cin * h * w];
                col2im_add(&dcols, cin, h, w, g, ho, wo, &mut dx);
                dx
            }
        });
        (dx, dw, db)
    });
    let mut dx_data = need_dx.then(|| Vec::with_capacity(n * cin * h * w));
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    for (dx, dw, db) in parts {
        if let (Some(acc), Some(d)) = (dx_data.as_mut(), dx) {
            acc.extend_from_slice(&d);
        }
        dws.push(dw);
        dbs.push(db);
    }
    ConvGrads {
        dx: dx_data.map(|d| Tensor::from_vec([n, cin, h, w], d).expect("shape")),
        dw: Tensor::from_vec(weight.shape(), sum_in_order(dws.into_iter(), cout * patch)).expect("shape"),
        db: sum_in_order(dbs.into_iter(), cout),
    }
}

/// Transposed convolution; `weight` is `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&[f32]>, g: ConvGeom) -> Tensor {
    let [n, cin, hi, wi] = x.shape();
    let cout = weight.channels();
    let ho = g.transpose_out_extent(hi).expect("invalid transposed geometry");
    let wo = g.transpose_out_extent(wi).expect("invalid transposed geometry");
    let patch = cout * g.kernel * g.kernel;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    par::for_each_chunk_mut(out.data_mut(), cout * ho * wo, |i, dst| {
        let mut cols = vec![0.0f32; patch * hi * wi];
        gemm(patch, cin, hi * wi, weight.data(), true, x.sample(i), false, &mut cols, 0.0);
        col2im_add(&cols, cout, ho, wo, g, hi, wi, dst);
        if let Some(b) = bias {
            add_bias(dst, b, ho * wo);
        }
    });
    out
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let [n, cin, hi, wi] = x.shape();
    let cout = weight.channels();
    let [_, _, ho, wo] = dy.shape();
    let patch = cout * g.kernel * g.kernel;
    let parts = par::map_indexed(n, |i| {
        let dys = dy.sample(i);
        let mut dcols = vec![0.0f32; patch * hi * wi];
        im2col(dys, cout, ho, wo, g, hi, wi, &mut dcols);
        let mut dw = vec![0.0f32; cin * patch];
        gemm(cin, hi * wi, patch, x.sample(i), false, &dcols, true, &mut dw, 0.0);
        let db = channel_sums(dys, ho * wo);
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0f32; cin * hi * wi];
            gemm(cin, patch, hi * wi, weight.data(), false, &dcols, false, &mut dx, 0.0);
            dx
        });
        (dx, dw, db)
    });
    let mut dx_data = need_dx.then(|| Vec::with_capacity(n * cin * hi * wi));
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    for (dx, dw, db) in parts {
        if let (Some(acc), Some(d)) = (dx_data.as_mut(), dx) {
            acc.extend_from_slice(&d);
        }
        dws.push(dw);
        dbs.push(db);
    }
    ConvGrads {
        dx: dx_data.map(|d| Tensor::from_vec([n, cin, hi, wi], d).expect("shape")),
        dw: Tensor::from_vec(weight.shape(), sum_in_order(dws.into_iter(), cin * patch)).expect("shape"),
        db: sum_in_order(dbs.into_iter(), cout),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("shape")
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("shape")
}

/// 2×2 max pooling with stride 2 (floor mode). Returns the output and the
/// flat in-plane index of each selected input.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    for (p, (dst, idx)) in out
        .data_mut()
        .chunks_mut(ho * wo)
        .zip(arg.chunks_mut(ho * wo))
        .enumerate()
    {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                dst[oy * wo + ox] = src[best];
                idx[oy * wo + ox] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], argmax: &[u32], dy: &Tensor) -> Tensor {
    let [_, _, h, w] = input_shape;
    let mut dx = Tensor::zeros(input_shape);
    let out_plane = dy.plane_len();
    for (p, (grads, idx)) in dy.data().chunks(out_plane).zip(argmax.chunks(out_plane)).enumerate() {
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (&g, &j) in grads.iter().zip(idx) {
            dst[j as usize] += g;
        }
    }
    dx
}

/// Per-axis bilinear sampling table: `(lower, upper, upper_weight)` for each
/// output index, half-pixel centres, no corner alignment.
fn bilinear_table(input: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    par::for_each_chunk_mut(out.data_mut(), ho * wo, |p, dst| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    });
    out
}

pub fn upsample_bilinear_backward(input_shape: [usize; 4], factor: usize, dy: &Tensor) -> Tensor {
    let [_, _, h, w] = input_shape;
    let wo = w * factor;
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let mut dx = Tensor::zeros(input_shape);
    let out_plane = dy.plane_len();
    par::for_each_chunk_mut(dx.data_mut(), h * w, |p, dst| {
        let src = &dy.data()[p * out_plane..(p + 1) * out_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    dx
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor, wt: &Tensor, b: &[f32], g: ConvGeom) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let cout = wt.batch();
        let (ho, wo) = (g.out_extent(h).unwrap(), g.out_extent(w).unwrap());
        let k = g.kernel;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let xv = x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize];
                                        let wv = wt.data()[((co * cin + ci) * k + ky) * k + kx];
                                        acc += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: [usize; 4], seed: u32) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97531));
                (v % 1000) as f32 / 500.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive_loops() {
        for g in [
            ConvGeom::new(3, 1, 1, 1),
            ConvGeom::new(3, 2, 1, 1),
            ConvGeom::new(3, 1, 2, 2),
            ConvGeom::pointwise(),
            ConvGeom::new(5, 2, 2, 1),
        ] {
            let x = pseudo([2, 3, 9, 8], 1);
            let wt = pseudo([4, 3, g.kernel, g.kernel], 2);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d(&x, &wt, Some(&b), g);
            let slow = naive_conv(&x, &wt, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(max_abs_diff(&fast, &slow) < 1e-4, "{g:?}");
        }
    }

    /// `<conv(x), y> == <x, conv_backward_data(y)>` and likewise for the
    /// transposed convolution, which must be the adjoint of the convolution.
    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let g = ConvGeom::new(4, 2, 1, 1);
        let x = pseudo([1, 3, 8, 8], 3);
        let wt = pseudo([3, 2, 4, 4], 4); // conv_transpose: Cin=3 -> Cout=2
        let y = conv_transpose2d(&x, &wt, None, g);
        assert_eq!(y.shape(), [1, 2, 16, 16]);
        let probe = pseudo([1, 2, 16, 16], 5);
        // the forward conv with the same weight maps [2,16,16] back to [3,8,8]
        let back = conv2d(&probe, &wt, None, g);
        let lhs: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::full([1, 2, 3, 4], 1.5);
        let y = upsample_bilinear(&x, 4);
        assert_eq!(y.shape(), [1, 2, 12, 16]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let x = pseudo([1, 2, 3, 5], 6);
        let y = upsample_bilinear(&x, 3);
        let probe = pseudo(y.shape(), 7);
        let back = upsample_bilinear_backward(x.shape(), 3, &probe);
        let lhs: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = max_pool2_backward(x.shape(), &arg, &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn geometry_extents() {
        assert_eq!(ConvGeom::new(3, 2, 1, 1).out_extent(64), Some(32));
        assert_eq!(ConvGeom::new(16, 8, 4, 1).transpose_out_extent(8), Some(64));
        assert_eq!(ConvGeom::new(4, 2, 1, 1).transpose_out_extent(2), Some(4));
        assert_eq!(ConvGeom::same(7, 3).out_extent(16), Some(16));
    }
}
