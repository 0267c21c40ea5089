//! Contour-distance weight maps and the weighted binary cross-entropy.

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Pixel};
use crate::tensor::{Shape, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

/// Default contour weight amplitude.
pub const DEFAULT_W0: f64 = 10.0;
/// Default contour weight width, in pixels.
pub const DEFAULT_SIGMA: f64 = 5.0;

/// Foreground pixels with at least one background 4-neighbour. Pixels
/// outside the image count as background, so foreground on the border is
/// always contour. Returned in row-major order.
pub fn extract_contour(mask: &BinaryMask) -> Vec<Pixel> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest seed,
/// via the separable lower-envelope transform. `None` means no seed.
fn squared_distance_to(seeds: &[bool], h: usize, w: usize) -> Vec<Option<u64>> {
    // Column pass: vertical distance to the nearest seed in the same column.
    let mut vertical: Vec<Option<u64>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if seeds[y * w + x] {
                last = Some(y);
            }
            vertical[y * w + x] = last.map(|s| (y - s) as u64);
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if seeds[y * w + x] {
                next = Some(y);
            }
            if let Some(s) = next {
                let d = (s - y) as u64;
                let slot = &mut vertical[y * w + x];
                *slot = Some(slot.map_or(d, |v| v.min(d)));
            }
        }
    }

    // Row pass: lower envelope of parabolas (x - q)^2 + f(q).
    let mut out = vec![None; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let row = &vertical[y * w..(y + 1) * w];
        let f = |q: usize| -> i128 {
            let v = row[q].expect("only seeded columns enter the envelope") as i128;
            v * v
        };
        sites.clear();
        bounds.clear();
        for q in 0..w {
            if row[q].is_none() {
                continue;
            }
            loop {
                let Some(&p) = sites.last() else {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                // Intersection abscissa of the parabolas rooted at p and q.
                let num = (f(q) + (q * q) as i128) - (f(p) + (p * p) as i128);
                let s = num as f64 / (2 * (q - p)) as f64;
                if s <= *bounds.last().unwrap() {
                    sites.pop();
                    bounds.pop();
                } else {
                    sites.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
        if sites.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..w {
            while k + 1 < sites.len() && bounds[k + 1] < x as f64 {
                k += 1;
            }
            let q = sites[k];
            let dx = x.abs_diff(q) as u64;
            let dy = row[q].unwrap();
            let mut best = dx * dx + dy * dy;
            // The float breakpoints can land exactly on a pixel; check the
            // neighbouring site so ties never depend on rounding.
            if k + 1 < sites.len() {
                let q2 = sites[k + 1];
                let d2 = x.abs_diff(q2) as u64;
                let dy2 = row[q2].unwrap();
                best = best.min(d2 * d2 + dy2 * dy2);
            }
            out[y * w + x] = Some(best);
        }
    }
    out
}

/// Euclidean distance (pixels) from each pixel to the nearest contour
/// pixel of `mask`. Contour pixels map to 0; with no contour every entry
/// is `+inf`.
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut seeds = vec![false; h * w];
    for (y, x) in extract_contour(mask) {
        seeds[y * w + x] = true;
    }
    squared_distance_to(&seeds, h, w)
        .into_iter()
        .map(|d| d.map_or(f64::INFINITY, |d| (d as f64).sqrt()))
        .collect()
}

/// Per-pixel loss weights `1 + w0 * exp(-d^2 / (2 sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    w0: f64,
    sigma: f64,
}

impl WeightMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn w0(&self) -> f64 {
        self.w0
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(Shape::new(1, 1, self.height, self.width), self.values.clone())
    }
}

pub fn contour_weight(distance: f64, w0: f64, sigma: f64) -> f64 {
    1.0 + w0 * (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

pub fn weight_map(mask: &BinaryMask, w0: f64, sigma: f64) -> Result<WeightMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(w0 >= 0.0 && w0.is_finite()) {
        return Err(Error::invalid(format!("w0 must be non-negative, got {w0}")));
    }
    let values = distance_transform(mask)
        .into_iter()
        .map(|d| contour_weight(d, w0, sigma))
        .collect();
    Ok(WeightMap { height: mask.height(), width: mask.width(), values, w0, sigma })
}

/// Weight maps for every item of a `(N,1,H,W)` binary mask tensor.
pub fn weight_map_batch(masks: &Tensor, w0: f64, sigma: f64) -> Result<Tensor> {
    let s = masks.shape();
    if s.c() != 1 {
        return Err(Error::shape(format!("expected single-channel masks, got {s}")));
    }
    let mut data = Vec::with_capacity(s.numel());
    for item in 0..s.n() {
        let mask = BinaryMask::from_tensor_plane(masks, item, 0)?;
        data.extend_from_slice(weight_map(&mask, w0, sigma)?.values());
    }
    Tensor::new(s, data)
}

fn check_loss_operands(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape() != weights.shape() {
        return Err(Error::shape(format!(
            "wce_loss: pred {}, target {}, weights {} must match",
            pred.shape(),
            target.shape(),
            weights.shape()
        )));
    }
    if pred.shape().c() != 1 {
        return Err(Error::shape(format!("wce_loss expects one channel, got {}", pred.shape())));
    }
    Ok(())
}

/// `-(1/(N*H*W)) * sum W * [y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
/// Neumaier summation. Plain accumulation over a full frame leaves rounding
/// error that swamps finite-difference checks of small gradients.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

pub fn wce_loss(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<f64> {
    check_loss_operands(pred, target, weights)?;
    let terms = pred.data().iter().zip(target.data()).zip(weights.data()).map(|((&p, &y), &wt)| {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        -wt * (y * p.ln() + (1.0 - y) * (-p).ln_1p())
    });
    Ok(compensated_sum(terms) / pred.numel() as f64)
}

/// d(wce_loss)/d(pred). Zero where the clamp is active.
pub fn wce_grad(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check_loss_operands(pred, target, weights)?;
    let scale = 1.0 / pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((&p, &y), &wt)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                0.0
            } else {
                -wt * scale * (y / p - (1.0 - y) / (1.0 - p))
            }
        })
        .collect();
    Tensor::new(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_mask() -> BinaryMask {
        BinaryMask::from_fn(5, 5, |y, x| (1..4).contains(&y) && (1..4).contains(&x))
    }

    fn brute_force_distance(mask: &BinaryMask) -> Vec<f64> {
        let contour = extract_contour(mask);
        let mut out = Vec::new();
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let best = contour
                    .iter()
                    .map(|&(cy, cx)| {
                        let (dy, dx) = (y.abs_diff(cy), x.abs_diff(cx));
                        dy * dy + dx * dx
                    })
                    .min();
                out.push(best.map_or(f64::INFINITY, |d| (d as f64).sqrt()));
            }
        }
        out
    }

    #[test]
    fn contour_of_block_is_its_perimeter() {
        let contour = extract_contour(&block_mask());
        assert_eq!(contour.len(), 8);
        assert!(!contour.contains(&(2, 2)));
        assert!(contour.contains(&(1, 1)) && contour.contains(&(3, 2)));
    }

    #[test]
    fn contour_edge_cases() {
        let single = BinaryMask::from_fn(4, 4, |y, x| (y, x) == (2, 1));
        assert_eq!(extract_contour(&single), vec![(2, 1)]);

        let full = BinaryMask::from_fn(4, 5, |_, _| true);
        let contour = extract_contour(&full);
        assert_eq!(contour.len(), 2 * 5 + 2 * 2);
        assert!(contour.iter().all(|&(y, x)| y == 0 || x == 0 || y == 3 || x == 4));

        assert!(extract_contour(&BinaryMask::empty(3, 3)).is_empty());
        assert!(BinaryMask::from_values(1, 2, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn distance_examples() {
        let m = BinaryMask::from_fn(4, 4, |y, x| (y, x) == (0, 3));
        let d = distance_transform(&m);
        assert_eq!(d[0], 3.0);
        assert_eq!(d[3], 0.0);
        let empty = distance_transform(&BinaryMask::empty(2, 3));
        assert!(empty.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn distance_matches_brute_force_on_16x16() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let density = rng.random_range(0.05..0.9);
            let m = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(density));
            assert_eq!(distance_transform(&m), brute_force_distance(&m), "seed {seed}");
        }
    }

    #[test]
    fn distance_on_non_square_sparse_masks() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let m = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.04));
            assert_eq!(distance_transform(&m), brute_force_distance(&m), "seed {seed}");
        }
    }

    #[test]
    fn weight_map_formula() {
        assert_eq!(contour_weight(0.0, 10.0, 5.0), 11.0);
        // 1 + 10 e^{-1/2}
        let expected = 1.0 + 10.0 * 0.6065306597126334;
        assert!((contour_weight(5.0, 10.0, 5.0) - expected).abs() < 1e-12);
        assert!((expected - 7.0653).abs() < 1e-4);

        let flat = weight_map(&block_mask(), 0.0, 5.0).unwrap();
        assert!(flat.values().iter().all(|&v| v == 1.0));
        let none = weight_map(&BinaryMask::empty(4, 4), 10.0, 5.0).unwrap();
        assert!(none.values().iter().all(|&v| v == 1.0));
        assert!(weight_map(&block_mask(), 10.0, 0.0).is_err());
        assert!(weight_map(&block_mask(), -1.0, 1.0).is_err());
    }

    #[test]
    fn weight_map_peaks_on_contour() {
        let m = block_mask();
        let wm = weight_map(&m, 10.0, 5.0).unwrap();
        let contour = extract_contour(&m);
        for y in 0..5 {
            for x in 0..5 {
                let v = wm.values()[y * 5 + x];
                assert!((1.0..=11.0).contains(&v));
                assert_eq!(v == 11.0, contour.contains(&(y, x)));
            }
        }
    }

    fn px(p: f64) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, 1), vec![p]).unwrap()
    }

    #[test]
    fn wce_single_pixel_closed_forms() {
        let one = px(1.0);
        let l = wce_loss(&px(0.5), &one, &one).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = wce_loss(&px(1.0), &px(0.0), &one).unwrap();
        assert!((l - 16.11809565095832).abs() < 1e-9);
        assert!(wce_loss(&px(0.5), &Tensor::zeros(Shape::new(1, 1, 1, 2)), &one).is_err());
    }

    #[test]
    fn wce_gradient_zero_in_clamp() {
        let g = wce_grad(&px(1.0), &px(0.0), &px(1.0)).unwrap();
        assert_eq!(g.data(), &[0.0]);
        let g = wce_grad(&px(0.25), &px(1.0), &px(2.0)).unwrap();
        assert!((g.data()[0] + 8.0).abs() < 1e-12);
    }
}
