//! Synthetic B-mode phantoms: piecewise-constant echogenicity times
//! Rayleigh speckle.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use super::volume::{PadInfo, VolumeRecord};
use crate::error::{Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// Vessel cross-section: dark lumen, bright wall up to the outer boundary.
    Ring,
    /// A single smooth lobe.
    Blob,
}

impl FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(PhantomKind::Ring),
            "blob" => Ok(PhantomKind::Blob),
            other => Err(Error::invalid(format!("unknown phantom kind '{other}' (ring|blob)"))),
        }
    }
}

impl PhantomKind {
    /// Mask structures written for this kind; the first is the default target.
    pub fn structures(self) -> &'static [&'static str] {
        match self {
            PhantomKind::Ring => &["lumen", "eel"],
            PhantomKind::Blob => &["thyroid"],
        }
    }
}

/// Unit-mean Rayleigh sample.
fn rayleigh(rng: &mut impl Rng) -> f64 {
    // Rayleigh(s) has mean s * sqrt(pi / 2).
    let scale = (2.0 / PI).sqrt();
    let u: f64 = 1.0 - rng.random::<f64>();
    scale * (-2.0 * u.ln()).sqrt()
}

/// Closed curve `rho(theta) < 1 + sum a_k cos(k theta + phi_k)` around an
/// elliptical frame.
#[derive(Clone, Copy, Debug)]
struct Lobe {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    harmonics: [(f64, f64); 2],
}

impl Lobe {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        let rho = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        let edge = 1.0
            + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).cos()
            + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).cos();
        rho < edge
    }

    fn scaled(&self, k: f64) -> Lobe {
        Lobe { ry: self.ry * k, rx: self.rx * k, ..*self }
    }
}

fn random_lobe(rng: &mut impl Rng, h: usize, w: usize, radius: (f64, f64), wobble: f64) -> Lobe {
    let (hf, wf) = (h as f64, w as f64);
    let r0 = rng.random_range(radius.0..radius.1) * hf.min(wf);
    let aspect: f64 = rng.random_range(0.8..1.25);
    Lobe {
        cy: rng.random_range(0.4..0.6) * hf,
        cx: rng.random_range(0.4..0.6) * wf,
        ry: r0 * aspect,
        rx: r0 / aspect,
        harmonics: [
            (rng.random_range(0.0..wobble), rng.random_range(0.0..2.0 * PI)),
            (rng.random_range(0.0..wobble), rng.random_range(0.0..2.0 * PI)),
        ],
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::invalid(format!(
            "phantom size {h}x{w} must be a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Multiplies the echogenicity map by speckle and clips to [0,1].
fn speckle(rng: &mut impl Rng, h: usize, w: usize, mean: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push((mean(y, x) * rayleigh(rng)).clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(Shape::new(1, 1, h, w), data)
}

fn mask_of(h: usize, w: usize, inside: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(if inside(y, x) { 1.0 } else { 0.0 });
        }
    }
    Tensor::from_parts(Shape::new(1, 1, h, w), data)
}

fn center(y: usize, x: usize) -> (f64, f64) {
    (y as f64 + 0.5, x as f64 + 0.5)
}

pub struct RingPhantom {
    pub image: Tensor,
    pub lumen: Tensor,
    pub eel: Tensor,
    /// Generating intensities: (lumen, wall, background).
    pub intensities: (f64, f64, f64),
}

/// Vessel-like phantom with lumen and outer-wall masks.
pub fn synth_ring(seed: u64, hw: (usize, usize)) -> Result<RingPhantom> {
    let (h, w) = hw;
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lumen = random_lobe(&mut rng, h, w, (0.12, 0.2), 0.08);
    let eel = lumen.scaled(rng.random_range(1.5..1.9));
    let levels = (
        rng.random_range(0.05..0.15),
        rng.random_range(0.5..0.7),
        rng.random_range(0.25..0.35),
    );
    let inside_lumen = |y, x| {
        let (py, px) = center(y, x);
        lumen.contains(py, px)
    };
    let inside_eel = |y, x| {
        let (py, px) = center(y, x);
        eel.contains(py, px)
    };
    let image = speckle(&mut rng, h, w, |y, x| {
        if inside_lumen(y, x) {
            levels.0
        } else if inside_eel(y, x) {
            levels.1
        } else {
            levels.2
        }
    });
    Ok(RingPhantom {
        image,
        lumen: mask_of(h, w, inside_lumen),
        eel: mask_of(h, w, |y, x| inside_eel(y, x) || inside_lumen(y, x)),
        intensities: levels,
    })
}

/// Blob phantom plus its generating (foreground, background) intensities.
pub fn synth_blob(seed: u64, hw: (usize, usize)) -> Result<(Tensor, Tensor, (f64, f64))> {
    let (h, w) = hw;
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lobe = random_lobe(&mut rng, h, w, (0.18, 0.32), 0.12);
    let levels = (rng.random_range(0.5..0.65), rng.random_range(0.15..0.3));
    let inside = |y, x| {
        let (py, px) = center(y, x);
        lobe.contains(py, px)
    };
    let image = speckle(&mut rng, h, w, |y, x| if inside(y, x) { levels.0 } else { levels.1 });
    Ok((image, mask_of(h, w, inside), levels))
}

/// `(1,1,H,W)` image and mask. For rings the mask is the lumen.
pub fn synth_phantom(seed: u64, hw: (usize, usize), kind: PhantomKind) -> Result<(Tensor, Tensor)> {
    match kind {
        PhantomKind::Ring => synth_ring(seed, hw).map(|r| (r.image, r.lumen)),
        PhantomKind::Blob => synth_blob(seed, hw).map(|(i, m, _)| (i, m)),
    }
}

/// A phantom "patient": `frames` independent phantoms with per-frame seeds
/// derived from `(seed, frame)`.
pub fn synth_volume(seed: u64, hw: (usize, usize), kind: PhantomKind, frames: usize, patient_id: &str) -> Result<VolumeRecord> {
    if frames == 0 {
        return Err(Error::invalid("a volume needs at least one frame"));
    }
    let mut images = Vec::with_capacity(frames);
    let mut masks: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for f in 0..frames {
        let frame_seed = derive_seed(seed, &[f as u64]);
        match kind {
            PhantomKind::Ring => {
                let r = synth_ring(frame_seed, hw)?;
                images.push(r.image);
                masks.entry("lumen".into()).or_default().push(r.lumen);
                masks.entry("eel".into()).or_default().push(r.eel);
            }
            PhantomKind::Blob => {
                let (image, mask, _) = synth_blob(frame_seed, hw)?;
                images.push(image);
                masks.entry("thyroid".into()).or_default().push(mask);
            }
        }
    }
    let masks = masks
        .into_iter()
        .map(|(k, v)| Tensor::stack_batch(&v).map(|t| (k, t)))
        .collect::<Result<_>>()?;
    Ok(VolumeRecord {
        patient_id: patient_id.to_string(),
        frames: Tensor::stack_batch(&images)?,
        masks,
        spacing: None,
        pad: PadInfo::identity(hw.0, hw.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region_mean(image: &Tensor, mask: &Tensor, want: bool) -> f64 {
        let (sum, n) = image
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| (m == 1.0) == want)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        sum / n as f64
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [PhantomKind::Ring, PhantomKind::Blob] {
            let (a, ma) = synth_phantom(5, (64, 96), kind).unwrap();
            let (b, mb) = synth_phantom(5, (64, 96), kind).unwrap();
            assert!(a.bit_eq(&b) && ma.bit_eq(&mb));
            let (c, _) = synth_phantom(6, (64, 96), kind).unwrap();
            assert!(!a.bit_eq(&c));
        }
        assert!(synth_phantom(0, (60, 96), PhantomKind::Blob).is_err());
    }

    #[test]
    fn blob_foreground_fraction_bounds() {
        for seed in 0..100 {
            let (_, mask) = synth_phantom(seed, (64, 96), PhantomKind::Blob).unwrap();
            let frac = mask.sum() / mask.numel() as f64;
            assert!((0.05..=0.6).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn speckle_preserves_region_means() {
        for seed in 0..100 {
            let (image, mask, (fg, bg)) = synth_blob(seed, (64, 96)).unwrap();
            let (mf, mb) = (region_mean(&image, &mask, true), region_mean(&image, &mask, false));
            assert!((mf / fg - 1.0).abs() < 0.15, "seed {seed}: fg {mf} vs {fg}");
            assert!((mb / bg - 1.0).abs() < 0.15, "seed {seed}: bg {mb} vs {bg}");
        }
    }

    #[test]
    fn ring_regions_nest() {
        for seed in 0..20 {
            let r = synth_ring(seed, (64, 96)).unwrap();
            assert!(r.lumen.sum() > 0.0 && r.eel.sum() > r.lumen.sum());
            assert!(r.lumen.data().iter().zip(r.eel.data()).all(|(&l, &e)| l <= e));
            let wall = Tensor::new(r.eel.shape(), r.eel.data().iter().zip(r.lumen.data()).map(|(e, l)| e - l).collect()).unwrap();
            let m = region_mean(&r.image, &wall, true);
            assert!((m / r.intensities.1 - 1.0).abs() < 0.15, "seed {seed}");
        }
    }

    #[test]
    fn labels_are_noise_free() {
        // The mask depends only on geometry: regenerate it from the same
        // random draws with the speckle discarded.
        let (image, mask) = synth_phantom(11, (64, 96), PhantomKind::Blob).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lobe = random_lobe(&mut rng, 64, 96, (0.18, 0.32), 0.12);
        let expected = mask_of(64, 96, |y, x| {
            let (py, px) = center(y, x);
            lobe.contains(py, px)
        });
        assert!(mask.bit_eq(&expected));
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
