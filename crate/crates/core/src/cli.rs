//! Command-line surface. Failures print `error[<category>]: <message>` on
//! stderr and exit nonzero.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::embed::{train_embedding, EmbedConfig};
use crate::error::{CuratorError, Result};
use crate::evaluation::{difficulty_report, mean_average_precision};
use crate::intersection::{IntersectionConfig, ScoreCombine};
use crate::io;
use crate::pipeline::{EmitOptions, InitOptions, Pipeline, PipelineSettings};
use crate::reweight::{build_weight_table_with, ReweightConfig};
use crate::synth::{generate, SynthConfig};
use crate::wbf::{fuse_dataset, RescaleMode, WbfConfig};

pub const THREADS_ENV: &str = "PSEUDO_CURATOR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "pseudo-curator",
    version,
    about = "Multi-phase pseudo-label curation for object detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a run: fit thresholds and open phase 1 with k = 1/N.
    Init(InitArgs),
    /// Intersect all models so far and select the current phase's easy images.
    Select(ManifestArg),
    /// Write the current phase's training set and optional weight sidecar.
    Emit(EmitArgs),
    /// Hand back a trained model's predictions, or mark the phase trained.
    Register(RegisterArgs),
    /// Fuse detection files, or finalize a run with --manifest.
    Ensemble(EnsembleArgs),
    /// Score predictions against ground truth and classify image difficulty.
    Evaluate(EvaluateArgs),
    /// Compute per-RoI loss weights from a RoI feature file.
    Reweight(ReweightArgs),
    /// Train the similarity embedding on a RoI feature file.
    Embed(EmbedArgs),
    /// Generate a synthetic dataset in the input file formats.
    Synth(SynthArgs),
    /// Print the run manifest.
    Status(ManifestArg),
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Run directory or its manifest.json.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CombineArg {
    Min,
    GeometricMean,
}

#[derive(Debug, Args)]
pub struct ReweightFlags {
    #[arg(long, default_value_t = 0.25)]
    pub a: f64,
    #[arg(long, default_value_t = 50.0)]
    pub b: f64,
    #[arg(long, default_value_t = 20.0)]
    pub c1: f64,
    #[arg(long, default_value_t = 20.0)]
    pub c2: f64,
}

impl ReweightFlags {
    fn config(&self) -> ReweightConfig {
        ReweightConfig {
            a: self.a,
            b: self.b,
            c1: self.c1,
            c2: self.c2,
        }
    }
}

#[derive(Debug, Args)]
pub struct EmbedFlags {
    #[arg(long, default_value_t = 0.7)]
    pub iof_threshold: f64,
    /// Output dimension; defaults to the feature dimension.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_pairs_per_image: usize,
}

impl EmbedFlags {
    fn config(&self, seed: u64) -> EmbedConfig {
        EmbedConfig {
            iof_threshold: self.iof_threshold,
            embed_dim: self.embed_dim,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            max_pairs_per_image: self.max_pairs_per_image,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct WbfFlags {
    #[arg(long, default_value_t = 0.55)]
    pub cluster_iou: f64,
    /// Comma-separated per-model weights.
    #[arg(long, value_delimiter = ',')]
    pub model_weights: Vec<f64>,
    /// Skip the `min(members, T) / T` score rescaling.
    #[arg(long)]
    pub no_rescale: bool,
}

impl WbfFlags {
    fn config(&self) -> WbfConfig {
        WbfConfig {
            cluster_iou_threshold: self.cluster_iou,
            model_weights: self.model_weights.clone(),
            rescale_mode: if self.no_rescale {
                RescaleMode::None
            } else {
                RescaleMode::CountOverModels
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub phases: usize,
    /// Fully-supervised model's predictions on the unlabeled images.
    #[arg(long)]
    pub fs_predictions: PathBuf,
    /// Fully-supervised model's predictions on the test images.
    #[arg(long)]
    pub fs_test_predictions: Option<PathBuf>,
    /// COCO ground truth of the labeled images.
    #[arg(long)]
    pub labeled_gt: PathBuf,
    /// Unlabeled image ids: a JSON array or a COCO file.
    #[arg(long)]
    pub unlabeled_images: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
    #[arg(long, value_enum, default_value = "min")]
    pub score_combine: CombineArg,
    #[command(flatten)]
    pub reweight: ReweightFlags,
    #[command(flatten)]
    pub embed: EmbedFlags,
    #[command(flatten)]
    pub wbf: WbfFlags,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// RoI features (JSON Lines) covering at least the selected images.
    #[arg(long)]
    pub roi_features: Option<PathBuf>,
    /// Reuse this embedding instead of training one.
    #[arg(long, requires = "roi_features")]
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub phase: usize,
    /// Predictions on the unlabeled images.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Predictions on the test images.
    #[arg(long)]
    pub test_predictions: Option<PathBuf>,
    /// Only mark the emitted phase as trained.
    #[arg(long, conflicts_with_all = ["predictions", "test_predictions"])]
    pub trained: bool,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Finalize this run instead of fusing --input files.
    #[arg(long, conflicts_with = "input")]
    pub manifest: Option<PathBuf>,
    /// Detection files, one per model.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// Output file; required with --input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test ground truth for the finalize report.
    #[arg(long, requires = "manifest")]
    pub test_gt: Option<PathBuf>,
    #[command(flatten)]
    pub wbf: WbfFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// An image is easy when recall + margin >= 1 - precision.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Write the full difficulty report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReweightArgs {
    #[arg(long)]
    pub roi_features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure similarity through this embedding.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    #[command(flatten)]
    pub reweight: ReweightFlags,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub roi_features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub embed: EmbedFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Full generator config as JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub first_image_id: Option<u64>,
    #[arg(long)]
    pub models: Option<usize>,
    #[arg(long)]
    pub easy_fraction: Option<f64>,
}

/// Applies `PSEUDO_CURATOR_THREADS` (0 or unset: one thread per core).
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CuratorError::InvalidInput(format!("{THREADS_ENV}={raw} is not a thread count")))?;
    if n > 0 {
        // A pool that already exists (tests, embedding callers) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Init(a) => {
            let settings = PipelineSettings {
                intersection: IntersectionConfig {
                    match_iou_threshold: a.match_iou,
                    score_combine: match a.score_combine {
                        CombineArg::Min => ScoreCombine::Min,
                        CombineArg::GeometricMean => ScoreCombine::GeometricMean,
                    },
                },
                reweight: a.reweight.config(),
                embed: a.embed.config(a.seed),
                wbf: a.wbf.config(),
            };
            let opts = InitOptions {
                num_phases: a.phases,
                fs_predictions: a.fs_predictions,
                labeled_gt: a.labeled_gt,
                out_dir: a.out_dir,
                unlabeled_images: a.unlabeled_images,
                fs_test_predictions: a.fs_test_predictions,
                seed: a.seed,
                settings,
            };
            let p = Pipeline::init(&opts)?;
            let m = p.manifest();
            println!(
                "initialised {} ({} phases, k = {}, {} unlabeled images)",
                p.root().display(),
                m.num_phases,
                m.fraction_k,
                m.unlabeled_image_ids.len()
            );
        }
        Command::Select(a) => {
            let mut p = Pipeline::open(&a.manifest)?;
            let rec = p.select()?;
            println!(
                "phase {}: {} easy images at k = {}",
                rec.phase,
                rec.selected_image_ids.len(),
                rec.fraction_k
            );
        }
        Command::Emit(a) => {
            let mut p = Pipeline::open(&a.manifest)?;
            let rec = p.emit(&EmitOptions {
                roi_features: a.roi_features,
                embedding: a.embedding,
            })?;
            let show = |x: &Option<PathBuf>| x.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            println!(
                "phase {}: training set {}, weights {}, embedding {}",
                rec.phase,
                show(&rec.training_set),
                show(&rec.weight_sidecar),
                show(&rec.embedding)
            );
        }
        Command::Register(a) => {
            let mut p = Pipeline::open(&a.manifest)?;
            if a.trained {
                p.mark_trained()?;
                println!("phase {} marked trained", a.phase);
            } else {
                p.register(a.phase, a.predictions.as_deref(), a.test_predictions.as_deref())?;
                let m = p.manifest();
                if m.is_complete() {
                    println!("phase {} registered; all phases complete", a.phase);
                } else {
                    println!(
                        "phase {} registered; phase {} pending at k = {}",
                        a.phase, m.current_phase, m.fraction_k
                    );
                }
            }
        }
        Command::Ensemble(a) => ensemble(a)?,
        Command::Evaluate(a) => {
            let preds = io::read_detections(&a.predictions)?;
            let coco = io::read_coco(&a.gt)?;
            let gt = coco.ground_truth();
            let map = mean_average_precision(&preds, &gt, a.iou);
            let summary = difficulty_report(&preds, &gt, coco.image_ids(), a.iou, a.margin);
            println!(
                "mAP@{} = {}, easy fraction = {:.4} over {} images",
                a.iou,
                fmt_opt(map),
                summary.easy_fraction,
                summary.reports.len()
            );
            if let Some(out) = a.out {
                io::write_json(&out, &summary)?;
            }
        }
        Command::Reweight(a) => {
            let rois = io::read_roi_features(&a.roi_features)?;
            let w = a.embedding.as_deref().map(io::read_embedding).transpose()?;
            let table = build_weight_table_with(&rois, &a.reweight.config(), w.as_ref())?;
            io::write_weight_table(&a.out, &table)?;
            println!("{} weights written to {}", table.rows.len(), a.out.display());
        }
        Command::Embed(a) => {
            let rois = io::read_roi_features(&a.roi_features)?;
            let outcome = train_embedding(&rois, &a.embed.config(a.seed))?;
            io::write_embedding(&a.out, &outcome.matrix)?;
            println!(
                "{} pairs, loss {:.6} -> {:.6}, embedding written to {}",
                outcome.num_pairs,
                outcome.initial_loss,
                outcome.final_loss,
                a.out.display()
            );
        }
        Command::Synth(a) => synth(a)?,
        Command::Status(a) => {
            let p = Pipeline::open(&a.manifest)?;
            print_json(p.manifest());
        }
    }
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let cfg = a.wbf.config();
    if let Some(manifest) = a.manifest {
        let mut p = Pipeline::open(&manifest)?;
        let out = p.finalize(Some(&cfg), a.test_gt.as_deref())?;
        let path = p.resolve(Path::new("final_detections.json"));
        if let Some(extra) = &a.out {
            io::write_detections(extra, &out.detections)?;
        }
        println!(
            "{} fused detections written to {}",
            out.detections.len(),
            path.display()
        );
        if let Some(r) = out.report {
            let per_model: Vec<String> = r.model_map.iter().map(|m| fmt_opt(*m)).collect();
            println!(
                "mAP@0.5 per model [{}], ensemble {}",
                per_model.join(", "),
                fmt_opt(r.ensemble_map)
            );
        }
        return Ok(());
    }
    if a.input.is_empty() {
        return Err(CuratorError::InvalidInput(
            "give --input files or --manifest".into(),
        ));
    }
    let out = a
        .out
        .ok_or_else(|| CuratorError::InvalidInput("--out is required with --input".into()))?;
    let per_model = a
        .input
        .iter()
        .map(|p| io::read_detections(p))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_dataset(&per_model, &cfg)?;
    io::write_detections(&out, &fused)?;
    println!("{} fused detections written to {}", fused.len(), out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = a.images {
        cfg.num_images = v;
    }
    if let Some(v) = a.first_image_id {
        cfg.first_image_id = v;
    }
    if let Some(v) = a.models {
        cfg.num_models = v;
    }
    if let Some(v) = a.easy_fraction {
        cfg.easy_fraction_true = v;
    }
    let ds = generate(&cfg)?;
    let dir = &a.out_dir;
    io::write_json(&dir.join("config.json"), &cfg)?;
    io::write_coco(
        &dir.join("ground_truth.json"),
        &io::CocoDataset::from_ground_truth(&ds.image_ids, &ds.ground_truth),
    )?;
    for (m, dets) in ds.model_detections.iter().enumerate() {
        io::write_detections(&dir.join(format!("model_{m}.json")), dets)?;
    }
    io::write_roi_features(&dir.join("rois.jsonl"), &ds.roi_features)?;
    io::write_json(&dir.join("planted_easy.json"), &ds.planted_easy)?;
    info!("synthetic split written to {}", dir.display());
    println!(
        "{} images, {} annotations, {} models, {} RoIs written to {}",
        ds.image_ids.len(),
        ds.ground_truth.len(),
        ds.model_detections.len(),
        ds.roi_features.len(),
        dir.display()
    );
    Ok(())
}

/// Parses `args`, runs, and maps errors to `error[<category>]: ...` plus the
/// category's exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
