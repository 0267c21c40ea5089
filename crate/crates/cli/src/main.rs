use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sumnet::checkpoint::load_model;
use sumnet::crossval::{run_crossval, FRAMES_CSV, SUMMARY_CSV};
use sumnet::data::{
    derive_seed, pad_to_multiple, read_usvl, synth_phantom, synth_ring, write_manifest, write_usvl, DatasetManifest,
    ManifestEntry, PhantomKind, RawVolume, VolumeRecord,
};
use sumnet::gradcheck::check_network;
use sumnet::infer::infer_volume;
use sumnet::metrics::{aggregate, evaluate_frame, write_aggregate_csv, write_frame_csv_file, FrameKey, GroupBy, METRIC_NAMES};
use sumnet::train::{run_training, FoldSelect, TrainConfig, LAST_CHECKPOINT, LOG_FILE};
use sumnet::{BinaryMask, Error, Result, SumNetConfig, Tensor};

/// Reference GPU timings for a 256x384 frame and a 384-frame volume.
const REFERENCE_SECONDS_PER_FRAME: f64 = 0.035;
const REFERENCE_SECONDS_PER_VOLUME: f64 = 13.44;

#[derive(Parser)]
#[command(name = "sumnet", version, about = "Ultrasound frame segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train on one fold's training patients instead of the config's choice.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Segment every frame of a USVL volume.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Output directory for mask.usvl and timing.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pixel size in mm (row, column).
        #[arg(long, num_args = 2, value_names = ["SY", "SX"])]
        spacing: Option<Vec<f64>>,
        /// Per-frame metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patient-wise k-fold cross-validation.
    Crossval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write synthetic phantom volumes and a manifest.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "blob")]
        kind: String,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 96])]
        hw: Vec<usize>,
        /// Number of patients.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full network's parameter gradients.
    Gradcheck {
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        min_grad: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, fold } => train(&config, fold),
        Command::Infer { weights, volume, out, threshold } => infer(&weights, &volume, &out, threshold),
        Command::Eval { pred, gt, spacing, out } => eval(&pred, &gt, spacing, out.as_deref()),
        Command::Crossval { config } => crossval(&config),
        Command::Synth { seed, kind, hw, n, frames, out } => synth(seed, &kind, (hw[0], hw[1]), n, frames, &out),
        Command::Gradcheck { size, seeds, per_tensor, width_divisor, eps, min_grad, tolerance } => {
            gradcheck((size[0], size[1]), seeds, per_tensor, width_divisor, eps, min_grad, tolerance)
        }
    }
}

fn train(config: &Path, fold: Option<usize>) -> Result<ExitCode> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(i) = fold {
        cfg.fold = FoldSelect::Index(i);
    }
    let report = run_training(&cfg)?;
    let state = &report.outcome.state;
    println!(
        "trained {} epochs ({} steps) on {} patients",
        state.epoch,
        state.adam.t,
        report.patients.len()
    );
    if let Some(last) = report.outcome.log.last() {
        println!("final loss {:.6}", last.loss);
    }
    println!("log: {}", report.checkpoint_dir.join(LOG_FILE).display());
    println!("checkpoint: {}", report.checkpoint_dir.join(LAST_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

fn infer(weights: &Path, volume: &Path, out: &Path, threshold: f64) -> Result<ExitCode> {
    let raw = read_usvl(volume)?;
    let (frames, pad) = pad_to_multiple(&raw.to_intensities());
    drop(raw);
    let params = load_model(weights, pad.padded_hw)?;
    let record = VolumeRecord {
        patient_id: volume.display().to_string(),
        frames,
        masks: BTreeMap::new(),
        spacing: None,
        pad,
    };
    let (masks, timing) = infer_volume(&params, &record, threshold)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_usvl(&out.join("mask.usvl"), &RawVolume::from_mask_tensor(&masks)?)?;

    let mut csv = String::from("frame,seconds\n");
    for (i, t) in timing.per_frame.iter().enumerate() {
        csv.push_str(&format!("{i},{t:.6}\n"));
    }
    let timing_path = out.join("timing.csv");
    fs::write(&timing_path, csv).map_err(|e| io_error(&timing_path, e))?;

    let (h, w) = record.pad.original_hw;
    println!("frames: {} of {h}x{w}, {} parameters", timing.per_frame.len(), params.param_count());
    println!("seconds per frame: mean {:.4}, median {:.4}", timing.mean, timing.median);
    println!("seconds total: {:.3}", timing.total);
    println!(
        "reference: {REFERENCE_SECONDS_PER_FRAME} s/frame, {REFERENCE_SECONDS_PER_VOLUME} s/volume (GPU)"
    );
    println!("masks: {}", out.join("mask.usvl").display());
    Ok(ExitCode::SUCCESS)
}

fn eval(pred: &Path, gt: &Path, spacing: Option<Vec<f64>>, out: Option<&Path>) -> Result<ExitCode> {
    let (p, g) = (read_usvl(pred)?, read_usvl(gt)?);
    if (p.frames, p.height, p.width) != (g.frames, g.height, g.width) {
        return Err(Error::Validation(format!(
            "prediction is {}x{}x{} but ground truth is {}x{}x{}",
            p.frames, p.height, p.width, g.frames, g.height, g.width
        )));
    }
    let spacing = spacing.map(|s| (s[0], s[1]));
    let (pm, gm) = (p.to_mask(), g.to_mask());
    let patient = gt.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned());
    let records = (0..p.frames)
        .map(|f| {
            let key = FrameKey { fold: 0, patient: patient.clone(), frame: f };
            let a = BinaryMask::from_tensor_plane(&pm, f, 0)?;
            let b = BinaryMask::from_tensor_plane(&gm, f, 0)?;
            evaluate_frame(key, &a, &b, spacing)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = out {
        write_frame_csv_file(path, &records)?;
    }
    let rows = aggregate(&records, GroupBy::All)?;
    for (name, summary) in METRIC_NAMES.iter().zip(&rows[0].metrics) {
        let note = if summary.excluded > 0 { format!(" ({} frames excluded)", summary.excluded) } else { String::new() };
        println!("{name:>13}: {}{note}", summary.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn crossval(config: &Path) -> Result<ExitCode> {
    let cfg = TrainConfig::load(config)?;
    let report = run_crossval(&cfg)?;
    write_aggregate_csv(std::io::stdout(), &report.rows)?;
    println!("per-frame: {}", cfg.checkpoint_dir.join(FRAMES_CSV).display());
    println!("summary: {}", cfg.checkpoint_dir.join(SUMMARY_CSV).display());
    Ok(ExitCode::SUCCESS)
}

fn synth(seed: u64, kind: &str, hw: (usize, usize), n: usize, frames: usize, out: &Path) -> Result<ExitCode> {
    let kind: PhantomKind = kind.parse()?;
    if n == 0 || frames == 0 {
        return Err(Error::InvalidArgument("need at least one patient and one frame".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut entries = Vec::with_capacity(n);
    for p in 0..n {
        let id = format!("p{p:02}");
        // Frame by frame so long volumes never exist as f64 stacks.
        let patient_seed = derive_seed(seed, &[p as u64]);
        let mut image = RawVolume::new(frames, hw.0, hw.1);
        let mut masks: BTreeMap<&str, RawVolume> =
            kind.structures().iter().map(|&s| (s, RawVolume::new(frames, hw.0, hw.1))).collect();
        let plane = hw.0 * hw.1;
        for f in 0..frames {
            let frame_seed = derive_seed(patient_seed, &[f as u64]);
            let (img, structures): (Tensor, Vec<(&str, Tensor)>) = match kind {
                PhantomKind::Ring => {
                    let r = synth_ring(frame_seed, hw)?;
                    (r.image, vec![("lumen", r.lumen), ("eel", r.eel)])
                }
                PhantomKind::Blob => {
                    let (img, m) = synth_phantom(frame_seed, hw, kind)?;
                    (img, vec![("thyroid", m)])
                }
            };
            let range = f * plane..(f + 1) * plane;
            image.data[range.clone()].copy_from_slice(&RawVolume::from_unit_tensor(&img)?.data);
            for (s, m) in structures {
                let target = masks.get_mut(s).expect("structure list matches generator");
                target.data[range.clone()].copy_from_slice(&RawVolume::from_mask_tensor(&m)?.data);
            }
        }
        let image_path = out.join(format!("{id}.usvl"));
        write_usvl(&image_path, &image)?;
        let mut mask_paths = BTreeMap::new();
        for (s, m) in &masks {
            let path = out.join(format!("{id}_{s}.usvl"));
            write_usvl(&path, m)?;
            mask_paths.insert(s.to_string(), path);
        }
        entries.push(ManifestEntry {
            patient_id: id,
            image_path,
            mask_paths,
            width: hw.1,
            height: hw.0,
            n_frames: frames,
            spacing: None,
        });
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &DatasetManifest { entries })?;
    println!("wrote {n} volumes of {frames} frames ({}x{}) and {}", hw.0, hw.1, manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(
    hw: (usize, usize),
    seeds: u64,
    per_tensor: usize,
    width_divisor: usize,
    eps: f64,
    min_grad: f64,
    tolerance: f64,
) -> Result<ExitCode> {
    let cfg = SumNetConfig::vgg11(hw.0, hw.1).narrowed(width_divisor);
    cfg.validate()?;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let r = check_network(&cfg, seed, per_tensor, eps, min_grad)?;
        println!(
            "seed {seed}: max relative error {:.3e} over {} elements ({} straddled a kink)",
            r.max_relative_error, r.checked, r.skipped
        );
        worst = worst.max(r.max_relative_error);
    }
    let pass = worst < tolerance;
    println!("{} (worst {worst:.3e}, tolerance {tolerance:.0e})", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}
