//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SUMN" | version u32 | entry count u32
//! per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f64 * prod(dims)
//! CRC32 (IEEE) of every preceding byte
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelParams, SumNetConfig, DEPTH};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SUMN";
pub const VERSION: u32 = 1;

/// One named array in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Entry { name: name.into(), dims, data }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Entry::new(name, Vec::new(), vec![value])
    }

    fn tensor(name: String, t: &Tensor, rank: usize) -> Self {
        let dims = match rank {
            1 => vec![t.numel()],
            _ => t.shape().0.to_vec(),
        };
        Entry::new(name, dims, t.data().to_vec())
    }

    fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Reads the entry back as a tensor of `shape`.
    pub fn to_tensor(&self, shape: Shape) -> Result<Tensor> {
        let declared = match self.dims.len() {
            1 if shape.0[1..] == [1, 1, 1] => self.dims[0] == shape.n(),
            4 => self.dims[..] == shape.0[..],
            _ => false,
        };
        if !declared {
            return Err(Error::shape(format!(
                "entry {} has dims {:?}, expected {shape}",
                self.name, self.dims
            )));
        }
        Tensor::new(shape, self.data.clone())
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::invalid("too many entries"))?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len()).map_err(|_| Error::invalid("rank exceeds 255"))?;
        if e.numel() != e.data.len() {
            return Err(Error::shape(format!("entry {} dims {:?} vs {} values", e.name, e.dims, e.data.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, "truncated file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("entry {name} is too large")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::format(path, "entry too large"))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(Entry { name, dims, data });
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checksum"));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::format(path, format!("duplicate entry {}", e.name)));
        }
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Kernels as rank-4 entries `<layer>.weight`, biases as rank-1 `<layer>.bias`.
pub fn param_entries(params: &ModelParams) -> Vec<Entry> {
    params
        .layers()
        .iter()
        .flat_map(|l| {
            [
                Entry::tensor(format!("{}.weight", l.id), &l.kernel, 4),
                Entry::tensor(format!("{}.bias", l.id), &l.bias, 1),
            ]
        })
        .collect()
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    write_entries(path, &param_entries(params))
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Option<&'a Entry> {
    entries.iter().find(|e| e.name == name)
}

/// Builds parameters for `config` from checkpoint entries. Entries outside
/// the model (optimizer state) are ignored.
pub fn params_from_entries(entries: &[Entry], config: &SumNetConfig, path: &Path) -> Result<ModelParams> {
    let layers = config
        .layers()
        .into_iter()
        .map(|spec| {
            let get = |suffix: &str| {
                let name = format!("{}.{suffix}", spec.id);
                find(entries, &name).ok_or_else(|| Error::format(path, format!("missing entry {name}")))
            };
            Ok(LayerParams {
                kernel: get("weight")?.to_tensor(spec.kernel_shape())?,
                bias: get("bias")?.to_tensor(spec.bias_shape())?,
                id: spec.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_layers(config.clone(), layers)
}

pub fn load_weights(path: &Path, config: &SumNetConfig) -> Result<ModelParams> {
    params_from_entries(&read_entries(path)?, config, path)
}

/// Recovers the wiring from stored kernel shapes, for checkpoints whose
/// config is not otherwise known. `input_hw` is taken from the caller.
pub fn infer_config(entries: &[Entry], input_hw: (usize, usize), path: &Path) -> Result<SumNetConfig> {
    let out_of = |name: &str| -> Result<usize> {
        let e = find(entries, name).ok_or_else(|| Error::format(path, format!("missing entry {name}")))?;
        match e.dims.as_slice() {
            [cout, _, _, _] => Ok(*cout),
            _ => Err(Error::format(path, format!("entry {name} is not a rank-4 kernel"))),
        }
    };
    let stem = find(entries, "stem.conv.weight")
        .ok_or_else(|| Error::format(path, "missing entry stem.conv.weight"))?;
    let (stem_channels, in_channels) = match stem.dims.as_slice() {
        [cout, cin, _, _] => (*cout, *cin),
        _ => return Err(Error::format(path, "stem.conv.weight is not a rank-4 kernel")),
    };
    let mut stages = Vec::with_capacity(DEPTH);
    for d in 1..=DEPTH {
        let mut widths = Vec::new();
        while find(entries, &format!("enc{d}.conv{}.weight", widths.len() + 1)).is_some() {
            widths.push(out_of(&format!("enc{d}.conv{}.weight", widths.len() + 1))?);
        }
        stages.push(widths);
    }
    let config = SumNetConfig {
        input_hw,
        in_channels,
        stem_channels,
        encoder_stages: stages,
        out_channels: out_of("head.conv.weight")?,
    };
    config.validate()?;
    Ok(config)
}

/// Loads a checkpoint of unknown width.
pub fn load_model(path: &Path, input_hw: (usize, usize)) -> Result<ModelParams> {
    let entries = read_entries(path)?;
    let config = infer_config(&entries, input_hw, path)?;
    params_from_entries(&entries, &config, path)
}

/// Layers replaced by [`import_encoder_weights`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub replaced: Vec<String>,
}

fn is_encoder_layer(id: &str) -> bool {
    id.starts_with("enc")
}

/// Overwrites encoder kernels and biases with same-named entries from an
/// external checkpoint. Stem, decoder and head are never touched.
pub fn import_encoder_weights(params: &ModelParams, path: &Path) -> Result<(ModelParams, ImportReport)> {
    let entries = read_entries(path)?;
    let mut report = ImportReport::default();
    let layers = params
        .layers()
        .iter()
        .map(|l| {
            if !is_encoder_layer(&l.id) {
                return Ok(l.clone());
            }
            let weight = find(&entries, &format!("{}.weight", l.id));
            let bias = find(&entries, &format!("{}.bias", l.id));
            if weight.is_none() && bias.is_none() {
                return Ok(l.clone());
            }
            let mut out = l.clone();
            if let Some(w) = weight {
                out.kernel = w.to_tensor(l.kernel.shape())?;
            }
            if let Some(b) = bias {
                out.bias = b.to_tensor(l.bias.shape())?;
            }
            report.replaced.push(l.id.clone());
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    if report.replaced.is_empty() {
        return Err(Error::NoMatchingEntries(path.to_path_buf()));
    }
    Ok((ModelParams::from_layers(params.config().clone(), layers)?, report))
}
