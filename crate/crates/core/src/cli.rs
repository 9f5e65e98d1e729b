//! Command-line front end: `train`, `eval`, `infer`, `synth` and `features`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig, RunManifest};
use crate::data::annotations::{load_annotations, Track};
use crate::data::dataset::{dataset_paths, load_dataset, read_wav, save_dataset, track_dir_name, Dataset};
use crate::data::synth::{generate_synthetic, SignalChannel, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{bucketed_map, write_predictions, Breakdown, BucketSpec, PredictionRecord, DEFAULT_THRESHOLD};
use crate::mfcc::{align_audio_to_video, compute_mfcc_resampled, MfccMatrix};
use crate::model::AsdModel;
use crate::train::{train, BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "asdnb", version, about = "Audio-visual active speaker detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a track dataset.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and report mAP / F1 and breakdowns.
    Eval(EvalArgs),
    /// Score a dataset and write the prediction CSV only.
    Infer(InferArgs),
    /// Generate a synthetic track dataset.
    Synth(SynthArgs),
    /// Dump MFCC features of a WAV file.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML config; command-line flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// Disable augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// none, visual-only or face-only.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// none, gru, lstm, bilstm or bigru.
    #[arg(long)]
    pub temporal: Option<String>,
    #[arg(long)]
    pub model_scale: Option<usize>,
    /// Initialise parameters from this checkpoint.
    #[arg(long)]
    pub finetune: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with crops and audio.
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth CSV; defaults to the dataset's annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output directory for predictions, report, plots and manifest.
    #[arg(long, default_value = "eval_out")]
    pub out: PathBuf,
    /// Prediction CSV path; defaults to `<out>/predictions.csv`.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    /// Comma-separated breakdowns: face-size, num-faces, hbp.
    #[arg(long, value_delimiter = ',')]
    pub buckets: Vec<Breakdown>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write one score-timeline PNG per track under `<out>/plots`.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub tracks: usize,
    #[arg(long, default_value_t = 25)]
    pub frames: usize,
    /// face, body or both.
    #[arg(long, default_value = "both")]
    pub signal: SignalChannel,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 112)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_run: usize,
    #[arg(long, default_value_t = 0.0)]
    pub cue_noise: f64,
    #[arg(long, default_value_t = 0.02)]
    pub pixel_noise: f64,
    #[arg(long, default_value_t = 2)]
    pub entities: usize,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub wav: PathBuf,
    /// `.csv` for text output, anything else for the binary matrix format.
    #[arg(long)]
    pub out: PathBuf,
    /// Resample to exactly four rows per video frame for this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
}

/// Process exit code for an error: 1 configuration, 2 data, 3 training
/// abort.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::BadEpoch(_) => 1,
        Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn env_seed() -> Result<Option<u64>> {
    Ok(RunConfig::default().with_env_seed()?.seed)
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        data: a.data,
        val_data: a.val_data,
        out: a.out,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: None,
        lr0: a.lr0,
        lr_decay: a.lr_decay,
        clip_len: a.clip_len,
        augment: a.no_augment.then_some(false),
        grad_clip: a.grad_clip,
        ablation: a.ablation,
        temporal: a.temporal,
        model_scale: a.model_scale,
        finetune: a.finetune,
        resume: a.resume,
    };
    let mut cfg = file.overlay(flags).with_env_seed()?;
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no training data: set `data` or pass --data".into()))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("train_out"));
    cfg.out = Some(out.clone());

    let ds = load_dataset(&data_dir)?;
    let val = cfg.val_data.as_deref().map(load_dataset).transpose()?;
    let model_cfg = cfg.model_config(ds.meta.frame_size)?;
    let train_cfg = cfg.train_config()?;
    mkdir(&out)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({ "run": &cfg, "model": &model_cfg, "train": &train_cfg }),
        cfg.seed,
    );
    if let Some(p) = &a.config {
        manifest.add_input("config", p)?;
    }
    let (ann, meta) = dataset_paths(&data_dir);
    manifest.add_input("data/annotations.csv", &ann)?;
    manifest.add_input("data/dataset.json", &meta)?;
    if let Some(v) = &cfg.val_data {
        manifest.add_input("val_data/annotations.csv", &dataset_paths(v).0)?;
    }
    for p in [&cfg.finetune, &cfg.resume].into_iter().flatten() {
        manifest.add_input("init_checkpoint", p)?;
    }

    let val_clips = val.as_ref().map(Dataset::clips);
    let outcome = train(&model_cfg, &ds.clips(), val_clips.as_deref(), &train_cfg)?;
    for m in &outcome.metrics {
        println!("{}", serde_json::to_string(m)?);
    }
    manifest.outputs = [METRICS_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT]
        .iter()
        .filter(|f| out.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    manifest.save(&out.join(MANIFEST_FILE))
}

/// Scores every track of a dataset with the checkpoint's model.
pub fn predict_dataset(model: &AsdModel, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(ds.total_frames());
    for t in &ds.tracks {
        t.clip.validate()?;
        let scores = model.predict_clip(&t.clip)?;
        for (r, s) in t.annotation.records.iter().zip(scores) {
            out.push(PredictionRecord {
                video_id: r.video_id.clone(),
                frame_timestamp: r.frame_timestamp,
                entity_id: r.entity_id.clone(),
                score: s,
                decision: None,
            });
        }
    }
    Ok(out)
}

fn write_prediction_file(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(records, std::io::BufWriter::new(f))
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let truth: Option<Vec<Track>> = a.annotations.as_deref().map(load_annotations).transpose()?;
    let ds = load_dataset(&a.data)?;
    let model = ck.build_model()?;
    mkdir(&a.out)?;
    let preds = predict_dataset(&model, &ds)?;
    let pred_path = a.predictions_out.clone().unwrap_or_else(|| a.out.join("predictions.csv"));
    write_prediction_file(&pred_path, &preds)?;

    let tracks = truth.unwrap_or_else(|| ds.annotations());
    let spec = BucketSpec {
        frame_width: ds.meta.frame_width,
        ..BucketSpec::default()
    };
    let report = bucketed_map(&preds, &tracks, &spec, &a.buckets, a.threshold)?;
    let report_path = a.out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    print!("{text}");

    let mut outputs = vec![pred_path.display().to_string(), report_path.display().to_string()];
    if a.plot {
        let dir = a.out.join("plots");
        mkdir(&dir)?;
        let mut offset = 0;
        for t in &ds.tracks {
            let n = t.clip.num_frames();
            let scores: Vec<f64> = preds[offset..offset + n].iter().map(|p| p.score).collect();
            offset += n;
            let path = dir.join(format!(
                "{}.png",
                track_dir_name(&t.annotation.video_id, &t.annotation.entity_id)
            ));
            plot_timeline(&scores, &t.clip.labels, a.threshold).save(&path)?;
            outputs.push(path.display().to_string());
        }
    }

    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "annotations": a.annotations,
            "buckets": a.buckets,
            "threshold": a.threshold,
        }),
        env_seed()?,
    );
    manifest.add_input("checkpoint", &a.checkpoint)?;
    manifest.add_input("data/annotations.csv", &dataset_paths(&a.data).0)?;
    if let Some(p) = &a.annotations {
        manifest.add_input("annotations", p)?;
    }
    manifest.outputs = outputs;
    manifest.save(&a.out.join(MANIFEST_FILE))
}

pub fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.build_model()?;
    let ds = load_dataset(&a.data)?;
    let preds = predict_dataset(&model, &ds)?;
    write_prediction_file(&a.out, &preds)?;
    let mut manifest = RunManifest::new(
        "infer",
        serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data }),
        env_seed()?,
    );
    manifest.add_input("checkpoint", &a.checkpoint)?;
    manifest.add_input("data/annotations.csv", &dataset_paths(&a.data).0)?;
    manifest.outputs = vec![a.out.display().to_string()];
    manifest.save(&sidecar(&a.out))
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SyntheticSpec {
        num_tracks: a.tracks,
        frames_per_track: a.frames,
        signal_channel: a.signal,
        seed,
        frame_size: a.size,
        min_run: a.min_run,
        cue_noise: a.cue_noise,
        pixel_noise: a.pixel_noise,
        entities_per_video: a.entities,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, &a.out)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&spec)?, Some(seed));
    // Relative output names keep the manifest identical across output roots.
    manifest.outputs = vec!["annotations.csv".into(), "dataset.json".into(), "tracks".into()];
    manifest.save(&a.out.join(MANIFEST_FILE))?;
    println!("wrote {} tracks ({} frames) to {}", ds.len(), ds.total_frames(), a.out.display());
    Ok(())
}

pub fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let (wave, sr) = read_wav(&a.wav)?;
    let mut m = compute_mfcc_resampled(&wave, sr)?;
    if let Some(frames) = a.frames {
        m = align_audio_to_video(&m, frames, 25.0)?;
    }
    if a.out.extension().is_some_and(|e| e == "csv") {
        write_mfcc_csv(&m, &a.out)?;
    } else {
        m.save(&a.out)?;
    }
    let mut manifest = RunManifest::new(
        "features",
        serde_json::json!({ "wav": a.wav, "frames": a.frames }),
        env_seed()?,
    );
    manifest.add_input("wav", &a.wav)?;
    manifest.outputs = vec![a.out.display().to_string()];
    manifest.save(&sidecar(&a.out))?;
    println!("{} x 13 MFCC rows -> {}", m.len(), a.out.display());
    Ok(())
}

fn write_mfcc_csv(m: &MfccMatrix, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
    w.write_record((0..13).map(|i| format!("c{i}")))?;
    for row in &m.frames {
        w.write_record(row.iter().map(|v| format!("{v:.6}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Score timeline: speaking frames shaded, the threshold as a grey line and
/// the score as a blue trace.
pub fn plot_timeline(scores: &[f64], labels: &[u8], threshold: f64) -> RgbImage {
    const H: u32 = 120;
    const PAD: u32 = 10;
    let step = 6u32;
    let w = (scores.len() as u32 * step).max(60) + 2 * PAD;
    let mut img = RgbImage::from_pixel(w, H, Rgb([255, 255, 255]));
    let y_of = |s: f64| PAD + ((1.0 - s.clamp(0.0, 1.0)) * (H - 2 * PAD) as f64).round() as u32;
    for (i, &l) in labels.iter().enumerate() {
        if l == 1 {
            for x in PAD + i as u32 * step..PAD + (i as u32 + 1) * step {
                for y in PAD..H - PAD {
                    img.put_pixel(x, y, Rgb([200, 235, 200]));
                }
            }
        }
    }
    let ty = y_of(threshold);
    for x in PAD..w - PAD {
        img.put_pixel(x, ty, Rgb([160, 160, 160]));
    }
    let mut prev: Option<(u32, u32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        let x = PAD + i as u32 * step + step / 2;
        let y = y_of(s);
        if let Some((px, py)) = prev {
            for xx in px..=x {
                let t = (xx - px) as f64 / (x - px).max(1) as f64;
                let yy = (py as f64 + t * (y as f64 - py as f64)).round() as u32;
                img.put_pixel(xx, yy, Rgb([30, 60, 200]));
            }
        }
        img.put_pixel(x, y, Rgb([30, 60, 200]));
        prev = Some((x, y));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::NoPositives), 2);
        assert_eq!(exit_code(&Error::EmptyDataset), 2);
        let abort = Error::NonFiniteLoss {
            epoch: 1,
            batch: 0,
            detail: String::new(),
        };
        assert_eq!(exit_code(&abort), 3);
    }

    #[test]
    fn plot_has_expected_size() {
        let img = plot_timeline(&[0.1, 0.9, 0.5], &[0, 1, 0], 0.5);
        assert_eq!(img.height(), 120);
        assert_eq!(img.width(), 80);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "asdnb", "eval", "--checkpoint", "c", "--data", "d", "--buckets", "face-size,hbp",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.buckets, vec![Breakdown::FaceSize, Breakdown::Hbp]),
            other => panic!("{other:?}"),
        }
    }
}
