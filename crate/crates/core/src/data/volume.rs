//! Headered 8-bit frame stacks.
//!
//! ```text
//! "USVL" | version u32 | F u32 | H u32 | W u32 | F*H*W bytes, frame-major, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use super::manifest::ManifestEntry;
use crate::error::{Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::tensor::{Shape, Tensor};

pub const USVL_MAGIC: &[u8; 4] = b"USVL";
pub const USVL_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawVolume {
    /// Zero-filled volume.
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        RawVolume { frames, height, width, data: vec![0; frames * height * width] }
    }

    /// Quantises a `(F,1,H,W)` tensor of values in [0,1] to bytes.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.c() != 1 {
            return Err(Error::shape(format!("expected one channel per frame, got {s}")));
        }
        let data = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(RawVolume { frames: s.n(), height: s.h(), width: s.w(), data })
    }

    /// Binary `(F,1,H,W)` tensor stored as {0, 255}.
    pub fn from_mask_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.c() != 1 {
            return Err(Error::shape(format!("expected one channel per frame, got {s}")));
        }
        let data = t.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        Ok(RawVolume { frames: s.n(), height: s.h(), width: s.w(), data })
    }

    fn shape(&self) -> Shape {
        Shape::new(self.frames, 1, self.height, self.width)
    }

    /// Intensities scaled by 1/255.
    pub fn to_intensities(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.data.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Foreground where the byte exceeds 127.
    pub fn to_mask(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.data.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect())
    }
}

pub fn write_usvl(path: &Path, volume: &RawVolume) -> Result<()> {
    if volume.data.len() != volume.frames * volume.height * volume.width {
        return Err(Error::shape("volume payload does not match its dimensions"));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::invalid("volume dimension exceeds u32"));
    let mut bytes = Vec::with_capacity(HEADER_LEN + volume.data.len());
    bytes.extend_from_slice(USVL_MAGIC);
    bytes.extend_from_slice(&USVL_VERSION.to_le_bytes());
    for d in [volume.frames, volume.height, volume.width] {
        bytes.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    bytes.extend_from_slice(&volume.data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(header: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    if header.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &header[..4] != USVL_MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) as u32 != USVL_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    Ok((word(1), word(2), word(3)))
}

/// Reads only the header: (frames, height, width).
pub fn read_usvl_dims(path: &Path) -> Result<(usize, usize, usize)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    f.by_ref().take(HEADER_LEN as u64).read_to_end(&mut header).map_err(|e| Error::io(path, e))?;
    parse_header(&header, path)
}

pub fn read_usvl(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (frames, height, width) = parse_header(&bytes, path)?;
    let expected = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(path, format!("truncated file: {} of {expected} voxels", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(RawVolume { frames, height, width, data: payload.to_vec() })
}

/// Where the original frame sits inside its padded canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub original_hw: (usize, usize),
    pub padded_hw: (usize, usize),
    pub top: usize,
    pub left: usize,
}

impl PadInfo {
    pub fn identity(h: usize, w: usize) -> Self {
        PadInfo { original_hw: (h, w), padded_hw: (h, w), top: 0, left: 0 }
    }

    pub fn for_size(h: usize, w: usize) -> Self {
        let up = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
        let (ph, pw) = (up(h), up(w));
        PadInfo { original_hw: (h, w), padded_hw: (ph, pw), top: (ph - h) / 2, left: (pw - w) / 2 }
    }
}

/// Zero-pads every plane of `t` to the next multiple of 32, centring the content.
pub fn pad_to_multiple(t: &Tensor) -> (Tensor, PadInfo) {
    let [n, c, h, w] = t.shape().0;
    let info = PadInfo::for_size(h, w);
    let (ph, pw) = info.padded_hw;
    if (ph, pw) == (h, w) {
        return (t.clone(), info);
    }
    let mut out = vec![0.0; n * c * ph * pw];
    for (plane, src) in t.data().chunks_exact(h * w).enumerate() {
        for y in 0..h {
            let dst = plane * ph * pw + (y + info.top) * pw + info.left;
            out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    (Tensor::from_parts(Shape::new(n, c, ph, pw), out), info)
}

/// Inverse of [`pad_to_multiple`].
pub fn crop_to_original(t: &Tensor, info: &PadInfo) -> Result<Tensor> {
    let [n, c, ph, pw] = t.shape().0;
    if (ph, pw) != info.padded_hw {
        return Err(Error::shape(format!("cannot crop {} with padding {info:?}", t.shape())));
    }
    let (h, w) = info.original_hw;
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in t.data().chunks_exact(ph * pw) {
        for y in 0..h {
            let src = (y + info.top) * pw + info.left;
            out.extend_from_slice(&plane[src..src + w]);
        }
    }
    Ok(Tensor::from_parts(Shape::new(n, c, h, w), out))
}

/// One patient's frame stack and its per-structure masks, padded to a
/// network-compatible size.
#[derive(Clone, Debug)]
pub struct VolumeRecord {
    pub patient_id: String,
    /// `(F,1,H,W)` intensities in [0,1].
    pub frames: Tensor,
    /// Binary `(F,1,H,W)` stacks keyed by structure name.
    pub masks: BTreeMap<String, Tensor>,
    /// (row, col) pixel size in mm.
    pub spacing: Option<(f64, f64)>,
    pub pad: PadInfo,
}

impl VolumeRecord {
    pub fn n_frames(&self) -> usize {
        self.frames.shape().n()
    }

    pub fn mask(&self, structure: &str) -> Result<&Tensor> {
        self.masks.get(structure).ok_or_else(|| {
            Error::Validation(format!("patient {} has no mask for '{structure}'", self.patient_id))
        })
    }
}

pub fn load_volume(entry: &ManifestEntry) -> Result<VolumeRecord> {
    let check = |raw: &RawVolume, path: &Path| -> Result<()> {
        let declared = (entry.n_frames, entry.height, entry.width);
        if (raw.frames, raw.height, raw.width) != declared {
            return Err(Error::Validation(format!(
                "{}: holds {}x{}x{} (frames x height x width), manifest declares {}x{}x{}",
                path.display(),
                raw.frames,
                raw.height,
                raw.width,
                declared.0,
                declared.1,
                declared.2
            )));
        }
        Ok(())
    };
    let image = read_usvl(&entry.image_path)?;
    check(&image, &entry.image_path)?;
    let (frames, pad) = pad_to_multiple(&image.to_intensities());
    let mut masks = BTreeMap::new();
    for (structure, path) in &entry.mask_paths {
        let raw = read_usvl(path)?;
        check(&raw, path)?;
        masks.insert(structure.clone(), pad_to_multiple(&raw.to_mask()).0);
    }
    Ok(VolumeRecord { patient_id: entry.patient_id.clone(), frames, masks, spacing: entry.spacing, pad })
}
