//! Forward and backward kernels for the operator set the network uses.
//!
//! Everything here is a pure function of its arguments. The tape in
//! [`crate::autodiff`] wires the backward kernels together.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Upper bound on the im2col scratch buffer, in elements (16 MiB of f64).
const COL_TILE_ELEMS: usize = 1 << 21;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: Shape, kernel: Shape, bias_len: Option<usize>, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input.0;
        let [cout, kcin, kh, kw] = kernel.0;
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input {input} has {cin} channels but kernel {kernel} expects {kcin}"
            )));
        }
        if let Some(len) = bias_len {
            if len != cout {
                return Err(Error::shape(format!(
                    "conv2d: bias has {len} entries for {cout} output channels"
                )));
            }
        }
        let ho = (h + 2 * pad) as isize - kh as isize + 1;
        let wo = (w + 2 * pad) as isize - kw as isize + 1;
        if ho <= 0 || wo <= 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} with padding {pad} leaves no output for {h}x{w} input"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            ho: ho as usize,
            wo: wo as usize,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn tile_rows(&self) -> usize {
        (COL_TILE_ELEMS / (self.kdim() * self.wo)).clamp(1, self.ho)
    }

    /// Output columns `ox` for which input column `ox + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }
}

/// Unrolls output rows `r0..r1` of one item into `col` (kdim x cols).
fn im2col(g: &ConvGeom, x: &[f64], r0: usize, r1: usize, col: &mut [f64]) {
    let cols = (r1 - r0) * g.wo;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_cols(kx);
                for oy in r0..r1 {
                    let seg = &mut dst[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo == hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(0.0);
                    let ix0 = lo + kx - g.pad;
                    seg[lo..hi].copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                    seg[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into the item gradient.
fn col2im_add(g: &ConvGeom, col: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
    let cols = (r1 - r0) * g.wo;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                for oy in r0..r1 {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let seg = &src[(oy - r0) * g.wo + lo..(oy - r0) * g.wo + hi];
                    let ix0 = lo + kx - g.pad;
                    let drow = &mut dst[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + (hi - lo)];
                    for (d, s) in drow.iter_mut().zip(seg) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Row-major matrix view handed to the GEMM kernel.
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatRef<'_> {
    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
    }
}

/// `c = alpha * a * b + beta * c` where `c` starts at `c_data[0]` with the given strides.
fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c_data: &mut [f64], rsc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + n <= c_data.len(), "gemm output view out of bounds");
    // SAFETY: the asserts above keep every strided access of a, b and c
    // inside the borrowed slices; c is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c_data.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// 2-D cross-correlation with zero padding and unit stride.
///
/// `kernel` is `(Cout, Cin, kH, kW)`; `bias` holds `Cout` values in any
/// 4-D arrangement.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), Some(bias.numel()), padding)?;
    let kdim = g.kdim();
    let out_item = g.cout * g.out_plane();
    let in_item = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * out_item];
    let tile = g.tile_rows();
    let mut col = vec![0.0; kdim * tile * g.wo];
    for item in 0..g.n {
        let x = &input.data()[item * in_item..(item + 1) * in_item];
        let y = &mut out[item * out_item..(item + 1) * out_item];
        for r0 in (0..g.ho).step_by(tile) {
            let r1 = (r0 + tile).min(g.ho);
            let cols = (r1 - r0) * g.wo;
            im2col(&g, x, r0, r1, &mut col[..kdim * cols]);
            gemm(
                1.0,
                MatRef { data: kernel.data(), rows: g.cout, cols: kdim, rs: kdim as isize, cs: 1 },
                MatRef { data: &col[..kdim * cols], rows: kdim, cols, rs: cols as isize, cs: 1 },
                0.0,
                &mut y[r0 * g.wo..],
                g.out_plane(),
            );
        }
        for (plane, &b) in y.chunks_exact_mut(g.out_plane()).zip(bias.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(Tensor::from_parts(Shape::new(g.n, g.cout, g.ho, g.wo), out))
}

/// Gradients of [`conv2d`] with respect to its three operands.
#[derive(Debug)]
pub struct Conv2dGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias_shape: Shape,
    padding: usize,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<Conv2dGrads> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), None, padding)?;
    let expected = Shape::new(g.n, g.cout, g.ho, g.wo);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv2d backward: gradient {} does not match output {expected}",
            grad_out.shape()
        )));
    }
    let kdim = g.kdim();
    let out_item = g.cout * g.out_plane();
    let in_item = g.cin * g.h * g.w;
    let tile = g.tile_rows();
    let mut col = vec![0.0; kdim * tile * g.wo];
    let mut dcol = if want_input { vec![0.0; kdim * tile * g.wo] } else { Vec::new() };
    let mut dk = vec![0.0; g.cout * kdim];
    let mut db = vec![0.0; g.cout];
    let mut dx = if want_input { vec![0.0; g.n * in_item] } else { Vec::new() };

    for item in 0..g.n {
        let x = &input.data()[item * in_item..(item + 1) * in_item];
        let dy = &grad_out.data()[item * out_item..(item + 1) * out_item];
        for (acc, plane) in db.iter_mut().zip(dy.chunks_exact(g.out_plane())) {
            *acc += plane.iter().sum::<f64>();
        }
        for r0 in (0..g.ho).step_by(tile) {
            let r1 = (r0 + tile).min(g.ho);
            let cols = (r1 - r0) * g.wo;
            let dy_tile = MatRef {
                data: &dy[r0 * g.wo..],
                rows: g.cout,
                cols,
                rs: g.out_plane() as isize,
                cs: 1,
            };
            im2col(&g, x, r0, r1, &mut col[..kdim * cols]);
            // dK += dY_tile * col^T
            gemm(
                1.0,
                dy_tile,
                MatRef { data: &col[..kdim * cols], rows: cols, cols: kdim, rs: 1, cs: cols as isize },
                1.0,
                &mut dk,
                kdim,
            );
            if want_input {
                // dcol = K^T * dY_tile
                gemm(
                    1.0,
                    MatRef { data: kernel.data(), rows: kdim, cols: g.cout, rs: 1, cs: kdim as isize },
                    MatRef {
                        data: &dy[r0 * g.wo..],
                        rows: g.cout,
                        cols,
                        rs: g.out_plane() as isize,
                        cs: 1,
                    },
                    0.0,
                    &mut dcol[..kdim * cols],
                    cols,
                );
                col2im_add(&g, &dcol[..kdim * cols], r0, r1, &mut dx[item * in_item..(item + 1) * in_item]);
            }
        }
    }
    Ok(Conv2dGrads {
        input: want_input.then(|| Tensor::from_parts(input.shape(), dx)),
        kernel: Tensor::from_parts(kernel.shape(), dk),
        bias: Tensor::from_parts(bias_shape, db),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Passes `grad` where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape(), data)
}

/// Smallest and largest doubles strictly inside (0, 1).
const SIGMOID_FLOOR: f64 = f64::from_bits(1);
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Backward of sigmoid from its forward output `s`.
pub fn sigmoid_backward(s: &Tensor, grad: &Tensor) -> Tensor {
    let data = s
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_parts(s.shape(), data)
}

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

/// Argmax positions recorded by [`maxpool2x2`], one per pooled element.
///
/// Each entry is the row-major offset (0..=3) of the maximum inside its
/// 2x2 window. The `id` is unique per pooling call so consumers can be
/// traced back to their producer.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    shape: Shape,
    offsets: Vec<u8>,
    id: u64,
}

impl PoolIndices {
    pub fn new(shape: Shape, offsets: Vec<u8>) -> Result<Self> {
        if offsets.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} pool offsets for shape {shape}",
                offsets.len()
            )));
        }
        if offsets.iter().any(|&o| o > 3) {
            return Err(Error::invalid("pool offsets must lie in 0..=3"));
        }
        Ok(PoolIndices {
            shape,
            offsets,
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Flat position in the unpooled tensor of pooled element `i`.
    fn source_offset(&self, i: usize) -> usize {
        let [_, _, h, w] = self.shape.0;
        let plane = h * w;
        let (nc, rem) = (i / plane, i % plane);
        let (y, x) = (rem / w, rem % w);
        let o = self.offsets[i] as usize;
        let (sy, sx) = (2 * y + o / 2, 2 * x + o % 2);
        nc * 4 * plane + sy * 2 * w + sx
    }
}

/// Non-overlapping 2x2 max pooling. Ties go to the smallest row-major offset.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = input.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even spatial dims, got {}",
            input.shape()
        )));
    }
    let out_shape = Shape::new(n, c, h / 2, w / 2);
    let mut values = Vec::with_capacity(out_shape.numel());
    let mut offsets = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    for plane in x.chunks_exact(h * w) {
        for y in 0..h / 2 {
            let top = &plane[2 * y * w..(2 * y + 1) * w];
            let bottom = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xo in 0..w / 2 {
                let window = [top[2 * xo], top[2 * xo + 1], bottom[2 * xo], bottom[2 * xo + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if window[k] > window[best] {
                        best = k;
                    }
                }
                values.push(window[best]);
                offsets.push(best as u8);
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, values), PoolIndices::new(out_shape, offsets)?))
}

/// Scatters each input element to its recorded argmax slot; every other
/// output element is exactly zero.
pub fn maxunpool2x2(input: &Tensor, indices: &PoolIndices, out_hw: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = input.shape().0;
    if indices.shape() != input.shape() {
        return Err(Error::shape(format!(
            "maxunpool2x2: indices {} do not match input {}",
            indices.shape(),
            input.shape()
        )));
    }
    if out_hw != (2 * h, 2 * w) {
        return Err(Error::shape(format!(
            "maxunpool2x2: output {out_hw:?} is not twice the input {h}x{w}"
        )));
    }
    let out_shape = Shape::new(n, c, 2 * h, 2 * w);
    let mut out = vec![0.0; out_shape.numel()];
    for (i, &v) in input.data().iter().enumerate() {
        out[indices.source_offset(i)] = v;
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Reads back the values at the recorded argmax slots. This is the
/// backward of [`maxunpool2x2`].
pub fn gather_pooled(full: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    let [n, c, h, w] = indices.shape().0;
    if full.shape() != Shape::new(n, c, 2 * h, 2 * w) {
        return Err(Error::shape(format!(
            "gather_pooled: {} is not the unpooled extent of {}",
            full.shape(),
            indices.shape()
        )));
    }
    let data = (0..indices.shape().numel())
        .map(|i| full.data()[indices.source_offset(i)])
        .collect();
    Ok(Tensor::from_parts(indices.shape(), data))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape().0;
    let [nb, cb, hb, wb] = b.shape().0;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: {} and {} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (sa + sb));
    for item in 0..n {
        data.extend_from_slice(&a.data()[item * sa..(item + 1) * sa]);
        data.extend_from_slice(&b.data()[item * sb..(item + 1) * sb]);
    }
    Ok(Tensor::from_parts(Shape::new(n, ca + cb, h, w), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Quadruple loop straight from the definition.
    fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let [n, cin, h, w] = x.shape().0;
        let [cout, _, kh, kw] = k.shape().0;
        let (ho, wo) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
        Tensor::from_fn(Shape::new(n, cout, ho, wo), |i, o, y, xo| {
            let mut acc = b.data()[o];
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (y + ky) as isize - pad as isize;
                        let ix = (xo + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.at(i, c, iy as usize, ix as usize) * k.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let k = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = random(Shape::new(2, 1, 5, 7), 3);
        let k = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(conv2d(&x, &k, &b, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn conv_matches_reference_loop() {
        let x = random(Shape::new(1, 2, 4, 4), 11);
        let k = random(Shape::new(3, 2, 3, 3), 12);
        let b = random(Shape::new(3, 1, 1, 1), 13);
        let fast = conv2d(&x, &k, &b, 1).unwrap();
        assert!(fast.max_abs_diff(&conv_reference(&x, &k, &b, 1)) < 1e-12);
    }

    #[test]
    fn conv_general_kernel_and_padding() {
        for (kh, kw, pad) in [(1, 1, 0), (2, 3, 0), (5, 3, 2), (3, 1, 1), (4, 4, 3)] {
            let x = random(Shape::new(2, 3, 6, 5), 20);
            let k = random(Shape::new(2, 3, kh, kw), 21);
            let b = random(Shape::new(2, 1, 1, 1), 22);
            let fast = conv2d(&x, &k, &b, pad).unwrap();
            assert!(fast.max_abs_diff(&conv_reference(&x, &k, &b, pad)) < 1e-12, "{kh}x{kw} pad {pad}");
        }
    }

    #[test]
    fn conv_tiles_large_inputs() {
        // Enough channels and rows that the im2col buffer is split into tiles.
        let x = random(Shape::new(1, 64, 96, 48), 30);
        let k = random(Shape::new(2, 64, 3, 3), 31);
        let b = Tensor::zeros(Shape::new(2, 1, 1, 1));
        let geom = ConvGeom::new(x.shape(), k.shape(), None, 1).unwrap();
        assert!(geom.tile_rows() < geom.ho);
        let fast = conv2d(&x, &k, &b, 1).unwrap();
        assert!(fast.max_abs_diff(&conv_reference(&x, &k, &b, 1)) < 1e-11);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let wrong_cin = Tensor::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(conv2d(&x, &wrong_cin, &b, 1), Err(Error::Shape(_))));
        let too_big = Tensor::zeros(Shape::new(1, 2, 7, 7));
        assert!(matches!(conv2d(&x, &too_big, &b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv_backward(dy).input> for zero bias.
        let x = random(Shape::new(2, 3, 5, 6), 40);
        let k = random(Shape::new(4, 3, 3, 3), 41);
        let b = Tensor::zeros(Shape::new(4, 1, 1, 1));
        let dy = random(Shape::new(2, 4, 5, 6), 42);
        let y = conv2d(&x, &k, &b, 1).unwrap();
        let grads = conv2d_backward(&x, &k, b.shape(), 1, &dy, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(grads.input.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_k: f64 = k.data().iter().zip(grads.kernel.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
        assert!((grads.bias.sum() - dy.sum()).abs() < 1e-10);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let tiny = sigmoid_scalar(-700.0);
        assert!(tiny > 0.0 && tiny <= 1e-300);
        assert!(sigmoid_scalar(-1e6) > 0.0);
        assert!(sigmoid_scalar(1e6) < 1.0);
        assert!(sigmoid_scalar(40.0) < 1.0);
    }

    #[test]
    fn sigmoid_slope_matches_finite_difference() {
        let s = sigmoid_scalar(0.3);
        let eps = 1e-5;
        let fd = (sigmoid_scalar(0.3 + eps) - sigmoid_scalar(0.3 - eps)) / (2.0 * eps);
        assert!((s * (1.0 - s) - fd).abs() < 1e-6);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(idx.offsets(), &[1]);

        let ramp = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, r, c| (r * 4 + c) as f64).unwrap();
        let (y, idx) = maxpool2x2(&ramp).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(idx.offsets(), &[3, 3, 3, 3]);

        let flat = Tensor::full(Shape::new(1, 1, 2, 2), 2.0);
        let (y, idx) = maxpool2x2(&flat).unwrap();
        assert_eq!(y.data(), &[2.0]);
        assert_eq!(idx.offsets(), &[0]);

        assert!(maxpool2x2(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn unpool_places_value_at_index() {
        let v = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let idx = PoolIndices::new(Shape::new(1, 1, 1, 1), vec![1]).unwrap();
        let y = maxunpool2x2(&v, &idx, (2, 2)).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 0.0, 0.0]);
        assert!(maxunpool2x2(&Tensor::zeros(Shape::new(1, 1, 1, 2)), &idx, (2, 4)).is_err());
        assert!(maxunpool2x2(&v, &idx, (4, 2)).is_err());
    }

    #[test]
    fn gather_inverts_unpool() {
        let x = random(Shape::new(2, 3, 6, 8), 50);
        let (pooled, idx) = maxpool2x2(&x).unwrap();
        let up = maxunpool2x2(&pooled, &idx, (6, 8)).unwrap();
        assert!(gather_pooled(&up, &idx).unwrap().bit_eq(&pooled));
    }

    #[test]
    fn concat_layout() {
        let a = Tensor::full(Shape::new(1, 2, 4, 4), 1.0);
        let b = Tensor::full(Shape::new(1, 3, 4, 4), 2.0);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), Shape::new(1, 5, 4, 4));
        assert!(ab.slice_channels(0..2).unwrap().bit_eq(&a));
        assert!(ab.slice_channels(2..5).unwrap().bit_eq(&b));
        assert!(concat_channels(&a, &Tensor::zeros(Shape::new(1, 1, 4, 2))).is_err());
        assert!(concat_channels(&a, &Tensor::zeros(Shape::new(2, 1, 4, 4))).is_err());
    }
}
