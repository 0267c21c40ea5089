//! Training loop, checkpoints with optimizer state, and dataset setup.

mod config;

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{FoldSelect, TrainConfig};

use crate::autodiff::Tape;
use crate::checkpoint::{self, import_encoder_weights, param_entries, params_from_entries, Entry};
use crate::data::{derive_seed, load_manifest, load_volume, make_folds, Batch, FrameId, TrainingSet, VolumeRecord};
use crate::error::{Error, Result};
use crate::model::{build, forward_on_tape, ModelParams, SumNetConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// One optimizer step in the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Lowest mean epoch loss so far.
    pub best_loss: Option<f64>,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let adam = AdamState::zeros_like(&tensors(&params));
        TrainState { params, adam, epoch: 0, best_loss: None }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = param_entries(&self.params);
        out.extend(self.adam.to_entries(&names(&self.params), &tensors(&self.params)));
        out.push(Entry::scalar("train.epoch", self.epoch as f64));
        if let Some(best) = self.best_loss {
            out.push(Entry::scalar("train.best_loss", best));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_entries(path, &self.to_entries())
    }

    pub fn load(path: &Path, config: &SumNetConfig) -> Result<Self> {
        let entries = checkpoint::read_entries(path)?;
        let params = params_from_entries(&entries, config, path)?;
        let adam = AdamState::from_entries(&entries, &names(&params), &tensors(&params))?;
        let scalar = |name: &str| entries.iter().find(|e| e.name == name).map(|e| e.data[0]);
        let epoch = scalar("train.epoch")
            .filter(|e| *e >= 0.0 && e.fract() == 0.0)
            .ok_or_else(|| Error::format(path, "missing or invalid train.epoch"))?;
        Ok(TrainState { params, adam, epoch: epoch as u64, best_loss: scalar("train.best_loss") })
    }
}

fn names(params: &ModelParams) -> Vec<String> {
    params.named_tensors().into_iter().map(|(n, _)| n).collect()
}

fn tensors(params: &ModelParams) -> Vec<&Tensor> {
    params.named_tensors().into_iter().map(|(_, t)| t).collect()
}

fn batch_ids(batch: &Batch) -> String {
    batch.ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Forward, weighted cross-entropy, backward and one Adam update.
pub fn train_step(params: &ModelParams, batch: &Batch, adam: &mut AdamState, cfg: &AdamConfig) -> Result<(ModelParams, f64)> {
    let numerical = |what: &str| Error::Numerical(format!("{what} on batch [{}]", batch_ids(batch)));
    let mut tape = Tape::new();
    let fwd = forward_on_tape(params, &batch.frames, &mut tape)?;
    if tape.value(fwd.output).data().iter().any(|v| !v.is_finite()) {
        return Err(numerical("non-finite network output"));
    }
    let loss = tape
        .wce_loss(fwd.output, &batch.masks, &batch.weights)
        .map_err(|e| match e {
            Error::NonFinite(_) => numerical("non-finite loss"),
            other => other,
        })?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let g = fwd
        .params
        .iter()
        .map(|&v| grads.get(v).ok_or_else(|| Error::Autodiff("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    let updated = adam_step(&names(params), &tensors(params), &g, adam, cfg).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("{msg} on batch [{}]", batch_ids(batch))),
        other => other,
    })?;
    Ok((params.with_tensors(updated)?, value))
}

/// Result of [`train_model`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Steps run by this call (a resumed run logs only its own steps).
    pub log: Vec<LogRow>,
    /// Every frame that contributed to a gradient.
    pub seen: BTreeSet<FrameId>,
}

struct LogWriter {
    writer: Option<csv::Writer<File>>,
}

impl LogWriter {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else { return Ok(LogWriter { writer: None }) };
        let path = dir.join(LOG_FILE);
        let continuing = append && path.is_file();
        let file = if continuing {
            OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        if !continuing {
            w.write_record(["step", "epoch", "loss", "wall_time"])?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(LogWriter { writer: Some(w) })
    }

    fn push(&mut self, row: &LogRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.write_record([
                row.step.to_string(),
                row.epoch.to_string(),
                format!("{:e}", row.loss),
                format!("{:.6}", row.wall_time),
            ])?;
            w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }
}

fn save_in(dir: Option<&Path>, name: &str, state: &TrainState) -> Result<()> {
    match dir {
        Some(d) => state.save(&d.join(name)),
        None => Ok(()),
    }
}

/// Trains on the frames of `patients` only.
///
/// Initial weights come from `cfg.seed`, or from `cfg.resume` when set.
/// With an output directory the run writes the per-step log, an initial
/// checkpoint, one checkpoint per epoch, `last.ckpt` and `best.ckpt`
/// (lowest mean epoch loss).
pub fn train_model(
    cfg: &TrainConfig,
    set: &TrainingSet,
    patients: &BTreeSet<String>,
    model: &SumNetConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = match &cfg.resume {
        Some(path) => TrainState::load(path, model)?,
        None => {
            let mut params = build(model, derive_seed(cfg.seed, &[0]))?;
            if let Some(path) = &cfg.encoder_weights {
                params = import_encoder_weights(&params, path)?.0;
            }
            let state = TrainState::fresh(params);
            save_in(out_dir, INITIAL_CHECKPOINT, &state)?;
            save_in(out_dir, LAST_CHECKPOINT, &state)?;
            state
        }
    };
    let mut log = LogWriter::open(out_dir, cfg.resume.is_some())?;
    let adam = cfg.adam();
    let shuffle_seed = derive_seed(cfg.seed, &[1]);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in set.epoch_batches(patients, cfg.batch_size, shuffle_seed, epoch)? {
            let batch = batch?;
            let (params, loss) = train_step(&state.params, &batch, &mut state.adam, &adam)?;
            state.params = params;
            seen.extend(batch.ids.iter().cloned());
            total += loss;
            steps += 1;
            let row = LogRow { step: state.adam.t, epoch, loss, wall_time: start.elapsed().as_secs_f64() };
            log.push(&row)?;
            rows.push(row);
        }
        if steps == 0 {
            return Err(Error::Validation("no training frames for the selected patients".into()));
        }
        state.epoch += 1;
        let mean = total / steps as f64;
        let improved = state.best_loss.is_none_or(|b| mean < b);
        if improved {
            state.best_loss = Some(mean);
        }
        save_in(out_dir, &epoch_checkpoint(state.epoch), &state)?;
        save_in(out_dir, LAST_CHECKPOINT, &state)?;
        if improved {
            save_in(out_dir, BEST_CHECKPOINT, &state)?;
        }
    }
    Ok(TrainOutcome { state, log: rows, seen })
}

/// Volumes of a manifest, loaded and padded.
pub fn load_dataset(manifest: &Path) -> Result<Vec<VolumeRecord>> {
    let m = load_manifest(manifest)?;
    if m.entries.is_empty() {
        return Err(Error::Validation(format!("{} lists no patients", manifest.display())));
    }
    m.entries.iter().map(load_volume).collect()
}

/// The requested structure, or the only one present.
pub fn resolve_structure(records: &[VolumeRecord], requested: Option<&str>) -> Result<String> {
    let available: BTreeSet<&String> = records.iter().flat_map(|r| r.masks.keys()).collect();
    match requested {
        Some(s) => Ok(s.to_string()),
        None if available.len() == 1 => Ok(available.into_iter().next().unwrap().clone()),
        None => Err(Error::Validation(format!(
            "several mask structures present ({}); set 'structure'",
            available.into_iter().cloned().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Network wiring for the records' common padded frame size.
pub fn model_config_for(records: &[VolumeRecord], width_divisor: usize) -> Result<SumNetConfig> {
    let sizes: BTreeSet<(usize, usize)> = records.iter().map(|r| r.pad.padded_hw).collect();
    match sizes.len() {
        1 => {
            let (h, w) = *sizes.iter().next().unwrap();
            let cfg = SumNetConfig::vgg11(h, w).narrowed(width_divisor);
            cfg.validate()?;
            Ok(cfg)
        }
        0 => Err(Error::Validation("no volumes".into())),
        _ => Err(Error::Validation(format!("volumes have different padded sizes: {sizes:?}"))),
    }
}

/// Patients trained on for `select`.
pub fn training_patients(cfg: &TrainConfig, ids: &[String]) -> Result<BTreeSet<String>> {
    match cfg.fold {
        FoldSelect::All => Ok(ids.iter().cloned().collect()),
        FoldSelect::Index(i) => {
            let split = make_folds(ids, cfg.k.unwrap_or(ids.len()), cfg.seed)?;
            let fold = split.folds.get(i).ok_or_else(|| {
                Error::Validation(format!("fold {i} out of range (have {})", split.folds.len()))
            })?;
            Ok(fold.training.iter().cloned().collect())
        }
    }
}

pub fn write_provenance(path: &Path, seen: &BTreeSet<FrameId>) -> Result<()> {
    let text: String = seen.iter().map(|id| format!("{id}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Summary of a `train` command.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub patients: BTreeSet<String>,
    pub checkpoint_dir: PathBuf,
}

/// Loads the manifest, trains on the selected patients and writes all run
/// artefacts to `cfg.checkpoint_dir`.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainReport> {
    let records = load_dataset(&cfg.manifest)?;
    let structure = resolve_structure(&records, cfg.structure.as_deref())?;
    let set = TrainingSet::new(&records, &structure, cfg.w0, cfg.sigma)?;
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let patients = training_patients(cfg, &ids)?;
    let model = model_config_for(&records, cfg.width_divisor)?;
    let outcome = train_model(cfg, &set, &patients, &model, Some(&cfg.checkpoint_dir))?;
    if let Some(stray) = outcome.seen.iter().find(|id| !patients.contains(&id.patient)) {
        return Err(Error::Validation(format!("frame {stray} outside the training patients reached the optimizer")));
    }
    write_provenance(&cfg.checkpoint_dir.join(PROVENANCE_FILE), &outcome.seen)?;
    Ok(TrainReport { outcome, patients, checkpoint_dir: cfg.checkpoint_dir.clone() })
}
