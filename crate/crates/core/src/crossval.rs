//! Patient-wise k-fold cross-validation.

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::{crop_to_original, derive_seed, make_folds, TrainingSet, VolumeRecord};
use crate::error::{Error, Result};
use crate::infer::infer_frame;
use crate::mask::BinaryMask;
use crate::metrics::{aggregate, evaluate_frame, write_aggregate_csv_file, write_frame_csv_file, AggregateRow, FrameKey, FrameMetrics, GroupBy};
use crate::train::{
    load_dataset, model_config_for, resolve_structure, train_model, write_provenance, TrainConfig, PROVENANCE_FILE,
};

pub const FRAMES_CSV: &str = "crossval_frames.csv";
pub const SUMMARY_CSV: &str = "crossval_summary.csv";

#[derive(Clone, Debug)]
pub struct CrossValReport {
    pub frames: Vec<FrameMetrics>,
    /// One row per fold, then the pooled `all` row.
    pub rows: Vec<AggregateRow>,
}

/// Segments every frame of `record` with `params` and scores it against the
/// `structure` mask, both at the original frame size.
pub fn evaluate_record(
    params: &crate::model::ModelParams,
    record: &VolumeRecord,
    structure: &str,
    fold: usize,
    threshold: f64,
) -> Result<Vec<FrameMetrics>> {
    let gt = record.mask(structure)?;
    (0..record.n_frames())
        .map(|f| {
            let frame = crop_to_original(&record.frames.slice_batch(f..f + 1)?, &record.pad)?;
            let pred = infer_frame(params, &frame, threshold)?;
            let truth = BinaryMask::from_tensor_plane(&crop_to_original(&gt.slice_batch(f..f + 1)?, &record.pad)?, 0, 0)?;
            let key = FrameKey { fold, patient: record.patient_id.clone(), frame: f };
            evaluate_frame(key, &pred, &truth, record.spacing)
        })
        .collect()
}

/// Trains a fresh network per fold on the training patients and evaluates it
/// on the held-out ones. Each fold's run goes to `out_dir/fold_NN` when an
/// output directory is given.
pub fn cross_validate(cfg: &TrainConfig, records: &[VolumeRecord], structure: &str, out_dir: Option<&Path>) -> Result<CrossValReport> {
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let split = make_folds(&ids, cfg.k.unwrap_or(ids.len()), cfg.seed)?;
    let set = TrainingSet::new(records, structure, cfg.w0, cfg.sigma)?;
    let model = model_config_for(records, cfg.width_divisor)?;
    let mut frames = Vec::new();
    for (i, fold) in split.folds.iter().enumerate() {
        let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, &[2, i as u64]), resume: None, ..cfg.clone() };
        let fold_dir = out_dir.map(|d| d.join(format!("fold_{i:02}")));
        let training: BTreeSet<String> = fold.training.iter().cloned().collect();
        let outcome = train_model(&fold_cfg, &set, &training, &model, fold_dir.as_deref())?;
        if let Some(leak) = outcome.seen.iter().find(|id| fold.held_out.contains(&id.patient)) {
            return Err(Error::Validation(format!("fold {i}: held-out frame {leak} was used for training")));
        }
        if let Some(dir) = &fold_dir {
            write_provenance(&dir.join(PROVENANCE_FILE), &outcome.seen)?;
        }
        for record in records.iter().filter(|r| fold.held_out.contains(&r.patient_id)) {
            frames.extend(evaluate_record(&outcome.state.params, record, structure, i, cfg.threshold)?);
        }
    }
    let mut rows = aggregate(&frames, GroupBy::Fold)?;
    rows.extend(aggregate(&frames, GroupBy::All)?);
    Ok(CrossValReport { frames, rows })
}

/// Runs [`cross_validate`] on the manifest in `cfg` and writes the per-frame
/// and summary tables into `cfg.checkpoint_dir`.
pub fn run_crossval(cfg: &TrainConfig) -> Result<CrossValReport> {
    let records = load_dataset(&cfg.manifest)?;
    let structure = resolve_structure(&records, cfg.structure.as_deref())?;
    let dir = &cfg.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = cross_validate(cfg, &records, &structure, Some(dir))?;
    write_frame_csv_file(&dir.join(FRAMES_CSV), &report.frames)?;
    write_aggregate_csv_file(&dir.join(SUMMARY_CSV), &report.rows)?;
    Ok(report)
}
