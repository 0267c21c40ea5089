//! Line-oriented dataset manifest.
//!
//! One block per patient, blocks separated by blank lines:
//!
//! ```text
//! patient=p01
//! image=p01.usvl
//! mask.lumen=p01_lumen.usvl
//! mask.eel=p01_eel.usvl
//! width=384
//! height=256
//! frames=40
//! spacing_y=0.026
//! spacing_x=0.026
//! ```
//!
//! Relative paths resolve against the manifest's directory. Lines starting
//! with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::volume::read_usvl_dims;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub image_path: PathBuf,
    pub mask_paths: BTreeMap<String, PathBuf>,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub spacing: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn patient_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.patient_id.clone()).collect()
    }
}

fn parse_block(lines: &[(usize, &str)], base: &Path, path: &Path) -> Result<ManifestEntry> {
    let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for &(lineno, line) in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {lineno}: expected key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        if fields.insert(key, (lineno, value)).is_some() {
            return Err(Error::format(path, format!("line {lineno}: duplicate key '{key}'")));
        }
    }
    let first = lines[0].0;
    let get = |key: &str| {
        fields
            .get(key)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::format(path, format!("block at line {first}: missing '{key}'")))
    };
    let number = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("block at line {first}: '{key}' is not a non-negative integer")))
    };
    let real = |key: &str| -> Result<Option<f64>> {
        fields
            .get(key)
            .map(|&(lineno, v)| match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
                _ => Err(Error::format(path, format!("line {lineno}: '{key}' must be a positive number"))),
            })
            .transpose()
    };
    let mut mask_paths = BTreeMap::new();
    for (&key, &(lineno, value)) in &fields {
        match key {
            "patient" | "image" | "width" | "height" | "frames" | "spacing_y" | "spacing_x" => {}
            _ => match key.strip_prefix("mask.") {
                Some(structure) if !structure.is_empty() => {
                    mask_paths.insert(structure.to_string(), base.join(value));
                }
                _ => return Err(Error::format(path, format!("line {lineno}: unknown key '{key}'"))),
            },
        }
    }
    let spacing = match (real("spacing_y")?, real("spacing_x")?) {
        (Some(sy), Some(sx)) => Some((sy, sx)),
        (None, None) => None,
        _ => return Err(Error::format(path, format!("block at line {first}: give both spacing_y and spacing_x"))),
    };
    Ok(ManifestEntry {
        patient_id: get("patient")?.to_string(),
        image_path: base.join(get("image")?),
        mask_paths,
        width: number("width")?,
        height: number("height")?,
        n_frames: number("frames")?,
        spacing,
    })
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut blocks: Vec<Vec<(usize, &str)>> = vec![Vec::new()];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if !blocks.last().unwrap().is_empty() {
                blocks.push(Vec::new());
            }
            continue;
        }
        blocks.last_mut().unwrap().push((i + 1, line));
    }
    let entries = blocks
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| parse_block(b, base, path))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { entries })
}

/// Every referenced file must exist with the declared dimensions, and
/// patient ids must be unique.
pub fn validate(manifest: &DatasetManifest) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.patient_id) {
            return Err(Error::Validation(format!("duplicate patient id '{}'", e.patient_id)));
        }
        let files = std::iter::once(&e.image_path).chain(e.mask_paths.values());
        for file in files {
            if !file.is_file() {
                return Err(Error::Validation(format!("missing file {}", file.display())));
            }
            let dims = read_usvl_dims(file)?;
            if dims != (e.n_frames, e.height, e.width) {
                return Err(Error::Validation(format!(
                    "{}: file holds {}x{} frames of {} but manifest declares {}x{} frames of {}",
                    file.display(),
                    dims.1,
                    dims.2,
                    dims.0,
                    e.height,
                    e.width,
                    e.n_frames
                )));
            }
        }
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text, path)?;
    validate(&manifest)?;
    Ok(manifest)
}

/// Writes entries with paths relative to `path`'s directory where possible.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let _ = writeln!(text, "patient={}", e.patient_id);
        let _ = writeln!(text, "image={}", rel(&e.image_path));
        for (s, p) in &e.mask_paths {
            let _ = writeln!(text, "mask.{s}={}", rel(p));
        }
        let _ = writeln!(text, "width={}\nheight={}\nframes={}", e.width, e.height, e.n_frames);
        if let Some((sy, sx)) = e.spacing {
            let _ = writeln!(text, "spacing_y={sy}\nspacing_x={sx}");
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
