//! `key=value` training configuration.
//!
//! ```text
//! manifest=data/manifest.txt
//! checkpoint_dir=runs/a
//! epochs=50
//! fold=all
//! ```
//!
//! Relative paths resolve against the config file's directory. Lines
//! starting with `#` are ignored; unknown keys are an error.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{DEFAULT_SIGMA, DEFAULT_W0};
use crate::optim::AdamConfig;

/// Which patients a `train` run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelect {
    /// Every patient in the manifest.
    All,
    /// The training side of one fold.
    Index(usize),
}

impl FromStr for FoldSelect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FoldSelect::All),
            _ => s
                .parse()
                .map(FoldSelect::Index)
                .map_err(|_| Error::invalid(format!("fold must be 'all' or an index, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub w0: f64,
    pub sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub manifest: PathBuf,
    pub fold: FoldSelect,
    pub checkpoint_dir: PathBuf,
    pub threshold: f64,
    /// Mask to train on; required when the manifest has several.
    pub structure: Option<String>,
    /// Fold count; defaults to one fold per patient.
    pub k: Option<usize>,
    /// Divides every encoder width.
    pub width_divisor: usize,
    /// Training checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Checkpoint whose encoder layers replace the initial encoder weights.
    pub encoder_weights: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(manifest: impl Into<PathBuf>, checkpoint_dir: impl Into<PathBuf>) -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            batch_size: 14,
            epochs: 50,
            seed: 0,
            w0: DEFAULT_W0,
            sigma: DEFAULT_SIGMA,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps_adam: adam.eps,
            manifest: manifest.into(),
            fold: FoldSelect::All,
            checkpoint_dir: checkpoint_dir.into(),
            threshold: 0.5,
            structure: None,
            k: None,
            width_divisor: 1,
            resume: None,
            encoder_weights: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps_adam }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.sigma > 0.0) || !(self.w0 >= 0.0) {
            return Err(Error::invalid(format!("need sigma > 0 and w0 >= 0, got {} and {}", self.sigma, self.w0)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.width_divisor == 0 {
            return Err(Error::invalid("width_divisor must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut manifest = None;
        let mut checkpoint_dir = None;
        let mut cfg = TrainConfig::new("", "");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {lineno}: expected key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::format(path, format!("line {lineno}: '{key}' must be {what}, got '{value}'"));
            let real = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("a number"));
            let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let u64_ = || value.parse::<u64>().map_err(|_| bad("a non-negative integer"));
            match key {
                "lr" => cfg.lr = real()?,
                "batch_size" => cfg.batch_size = count()?,
                "epochs" => cfg.epochs = u64_()?,
                "seed" => cfg.seed = u64_()?,
                "w0" => cfg.w0 = real()?,
                "sigma" => cfg.sigma = real()?,
                "beta1" => cfg.beta1 = real()?,
                "beta2" => cfg.beta2 = real()?,
                "eps_adam" => cfg.eps_adam = real()?,
                "threshold" => cfg.threshold = real()?,
                "fold" => cfg.fold = value.parse().map_err(|_| bad("'all' or an index"))?,
                "k" => cfg.k = Some(count()?),
                "width_divisor" => cfg.width_divisor = count()?,
                "structure" => cfg.structure = Some(value.to_string()),
                "manifest" => manifest = Some(base.join(value)),
                "checkpoint_dir" => checkpoint_dir = Some(base.join(value)),
                "resume" => cfg.resume = Some(base.join(value)),
                "encoder_weights" => cfg.encoder_weights = Some(base.join(value)),
                _ => return Err(Error::format(path, format!("line {lineno}: unknown key '{key}'"))),
            }
        }
        cfg.manifest = manifest.ok_or_else(|| Error::format(path, "missing 'manifest'"))?;
        cfg.checkpoint_dir = checkpoint_dir.ok_or_else(|| Error::format(path, "missing 'checkpoint_dir'"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = TrainConfig::parse(
            "# run\nmanifest=m.txt\ncheckpoint_dir=out\nlr=0.01\nfold=3\nepochs=0\nstructure=lumen\n",
            Path::new("/cfg/train.txt"),
        )
        .unwrap();
        assert_eq!(cfg.manifest, PathBuf::from("/cfg/m.txt"));
        assert_eq!(cfg.checkpoint_dir, PathBuf::from("/cfg/out"));
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.fold, FoldSelect::Index(3));
        assert_eq!(cfg.epochs, 0);
        assert_eq!(cfg.batch_size, 14);
        assert_eq!((cfg.w0, cfg.sigma, cfg.threshold), (10.0, 5.0, 0.5));
        assert_eq!((cfg.beta1, cfg.beta2, cfg.eps_adam), (0.9, 0.999, 1e-8));
        assert_eq!(cfg.structure.as_deref(), Some("lumen"));
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("c.txt");
        assert!(matches!(TrainConfig::parse("checkpoint_dir=o\n", p), Err(Error::Format { .. })));
        assert!(matches!(TrainConfig::parse("manifest=m\ncheckpoint_dir=o\nspeed=3\n", p), Err(Error::Format { .. })));
        assert!(matches!(TrainConfig::parse("manifest=m\ncheckpoint_dir=o\nlr=fast\n", p), Err(Error::Format { .. })));
        assert!(matches!(
            TrainConfig::parse("manifest=m\ncheckpoint_dir=o\nbatch_size=0\n", p),
            Err(Error::InvalidArgument(_))
        ));
        assert!("x".parse::<FoldSelect>().is_err());
    }
}
