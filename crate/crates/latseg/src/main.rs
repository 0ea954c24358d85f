//! Command-line entry point: training, recursive inference, evaluation,
//! synthetic-data generation, and the gradient/invariant self-check.
//!
//! Exit codes: 0 success, 1 user error, 2 internal invariant failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use latseg::autodiff::optim::{cosine_lr, AdamConfig, AdamState};
use latseg::cloud::{compose, invert, PointCloud};
use latseg::data::kitti::{read_labels, write_raw_labels};
use latseg::data::synth;
use latseg::data::{augment, AugmentConfig, SequenceDataset};
use latseg::eval::{moving_static_report, ConfusionMatrix};
use latseg::fusion::{aflow_direction, restrict_to_previous};
use latseg::model::{
    forward_sequence, infer_step, load_checkpoint, save_checkpoint, training_step, FusionSpec,
    InferState, Model, ModelConfig, SequenceConfig,
};
use latseg::ops::vertex_centroids;
use latseg::ply;
use latseg::selfcheck;

const IGNORE_LABEL: i64 = -1;

#[derive(Parser)]
#[command(name = "latseg", about = "Recurrent lattice segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a scan directory.
    Train(TrainArgs),
    /// Run recursive inference over a scan directory with a checkpoint.
    Infer(InferArgs),
    /// Compare predicted label files against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic labeled scan sequence.
    Synth(SynthArgs),
    /// Run the gradient-check registry and lattice invariant suite.
    Selfcheck(SelfcheckArgs),
}

/// Flags shared by train and infer; unset values fall back to the config
/// file, then to defaults.
#[derive(Args, Clone)]
struct ModelFlags {
    /// Fusion spec, four '-'-separated site tokens (GRU, LSTM, AFlow, /).
    #[arg(long)]
    fusion: Option<String>,
    /// Clouds per training sequence.
    #[arg(long)]
    n: Option<usize>,
    /// Stride between selected clouds.
    #[arg(long)]
    s: Option<usize>,
    /// Lattice scale in meters per lattice unit.
    #[arg(long)]
    sigma: Option<f64>,
    /// Channel widths of the three lattice levels, e.g. 16,32,64.
    #[arg(long)]
    channels: Option<String>,
    /// Include reflectance as a point feature.
    #[arg(long)]
    use_reflectance: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (velodyne/, labels/, optional poses.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics, and the run config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Disable random rigid augmentation.
    #[arg(long, default_value_t = false)]
    no_augment: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write colored point clouds as ASCII PLY.
    #[arg(long, default_value_t = false)]
    export_ply: bool,
    /// Also write flow direction arrows as ASCII PLY line segments.
    #[arg(long, default_value_t = false)]
    export_flow: bool,
    /// Lattice scale; must match training.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Directory of predicted .label files named like the scans.
    #[arg(long)]
    pred: PathBuf,
    /// Emit the report as JSON instead of a table.
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    points_per_object: usize,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Seeds per registered operation.
    #[arg(long, default_value_t = 5)]
    fixtures: u64,
}

/// Optional values loadable from a JSON config file.
#[derive(Default, Deserialize)]
struct FileConfig {
    fusion: Option<String>,
    n: Option<usize>,
    s: Option<usize>,
    sigma: Option<f64>,
    channels: Option<(usize, usize, usize)>,
    use_reflectance: Option<bool>,
    seed: Option<u64>,
    epochs: Option<usize>,
}

/// Fully resolved settings, serialized into the output directory.
#[derive(Serialize)]
struct RunConfig {
    subcommand: String,
    data: PathBuf,
    out: PathBuf,
    fusion: String,
    n: usize,
    s: usize,
    sigma: f64,
    channels: (usize, usize, usize),
    use_reflectance: bool,
    seed: u64,
    epochs: usize,
    checkpoint: Option<PathBuf>,
    augment: bool,
}

enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    fn user(msg: impl Into<String>) -> Self {
        Failure::User(msg.into())
    }

    fn internal(msg: impl Into<String>) -> Self {
        Failure::Internal(msg.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // help or version output
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::user(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::user(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn parse_channels(s: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::user(format!("bad --channels '{s}': {e}")))?;
    if parts.len() != 3 {
        return Err(Failure::user(format!(
            "--channels needs three values, got {}",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

struct Resolved {
    spec: FusionSpec,
    seq: SequenceConfig,
    model: ModelConfig,
    epochs: usize,
}

fn resolve(flags: &ModelFlags, epochs: Option<usize>) -> Result<Resolved, Failure> {
    let file = load_file_config(flags.config.as_deref())?;
    let seq_default = SequenceConfig::default();
    let model_default = ModelConfig::default();
    let fusion = flags
        .fusion
        .clone()
        .or(file.fusion)
        .unwrap_or_else(|| "GRU-GRU-AFlow-GRU".to_string());
    let spec: FusionSpec = fusion
        .parse()
        .map_err(|e| Failure::user(format!("bad --fusion '{fusion}': {e}")))?;
    let channels = match (&flags.channels, file.channels) {
        (Some(s), _) => parse_channels(s)?,
        (None, Some(c)) => c,
        (None, None) => model_default.channels,
    };
    let use_reflectance = flags
        .use_reflectance
        .or(file.use_reflectance)
        .unwrap_or(seq_default.use_reflectance);
    Ok(Resolved {
        spec,
        seq: SequenceConfig {
            n: flags.n.or(file.n).unwrap_or(seq_default.n),
            s: flags.s.or(file.s).unwrap_or(seq_default.s),
            sigma: flags.sigma.or(file.sigma).unwrap_or(seq_default.sigma),
            use_reflectance,
        },
        model: ModelConfig {
            channels,
            classes: synth::N_CLASSES,
            point_feature_dim: if use_reflectance { 1 } else { 0 },
            offset_hidden: model_default.offset_hidden,
            seed: flags.seed.or(file.seed).unwrap_or(model_default.seed),
        },
        epochs: epochs.or(file.epochs).unwrap_or(10),
    })
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path)
        .map_err(|e| Failure::user(format!("cannot create {}: {e}", path.display())))
}

fn write_run_config(out: &Path, config: &RunConfig) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(config).expect("run config serializes");
    std::fs::write(out.join("run_config.json"), text)
        .map_err(|e| Failure::user(format!("cannot write run config: {e}")))
}

fn open_dataset(root: &Path) -> Result<SequenceDataset, Failure> {
    SequenceDataset::open(root, synth::label_remap())
        .map_err(|e| Failure::user(format!("cannot open dataset {}: {e}", root.display())))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let r = resolve(&args.model, args.epochs)?;
    ensure_dir(&args.out)?;
    let ckpt_dir = args.out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    write_run_config(
        &args.out,
        &RunConfig {
            subcommand: "train".to_string(),
            data: args.data.clone(),
            out: args.out.clone(),
            fusion: r.spec.to_string(),
            n: r.seq.n,
            s: r.seq.s,
            sigma: r.seq.sigma,
            channels: r.model.channels,
            use_reflectance: r.seq.use_reflectance,
            seed: r.model.seed,
            epochs: r.epochs,
            checkpoint: None,
            augment: !args.no_augment,
        },
    )?;

    let dataset = open_dataset(&args.data)?;
    let anchors: Vec<usize> = (0..dataset.len())
        .filter(|&t| t >= (r.seq.n - 1) * r.seq.s)
        .collect();
    if anchors.is_empty() && r.epochs > 0 {
        return Err(Failure::user(format!(
            "dataset has {} scans; none admit an n={} s={} sequence",
            dataset.len(),
            r.seq.n,
            r.seq.s
        )));
    }

    let mut model = Model::new(r.spec, r.model.clone());
    save_checkpoint(&model, &ckpt_dir.join("initial.ckpt"))
        .map_err(|e| Failure::internal(format!("checkpoint write failed: {e}")))?;

    let mut opt = AdamState::new(model.params.arrays());
    let opt_config = AdamConfig::default();
    let aug_config = AugmentConfig {
        sigma: r.seq.sigma,
        ..AugmentConfig::default()
    };
    let mut metrics = std::fs::File::create(args.out.join("metrics.jsonl"))
        .map_err(|e| Failure::user(format!("cannot write metrics: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.model.seed ^ 0x7261696e);

    for epoch in 0..r.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut lr_last = 0.0;
        for (i, &t) in anchors.iter().enumerate() {
            let sample = dataset
                .assemble(t, r.seq.n, r.seq.s, r.seq.sigma, r.seq.use_reflectance)
                .map_err(|e| Failure::user(format!("sample {t}: {e}")))?
                .expect("anchor admits a full sequence");
            let mut sample = sample;
            if !args.no_augment {
                augment(&mut sample, &aug_config, &mut rng);
            }
            let labels = sample
                .anchor_labels()
                .ok_or_else(|| Failure::user(format!("scan {t} has no labels")))?
                .to_vec();
            let progress = epoch as f64 + i as f64 / anchors.len() as f64;
            let lr = cosine_lr(
                progress,
                opt_config.lr_max,
                opt_config.lr_min,
                opt_config.restart_period,
            );
            lr_last = lr;
            let loss = training_step(
                &mut model,
                &sample.clouds,
                &labels,
                sample.ignore_label,
                &mut opt,
                lr,
                &opt_config,
            )
            .map_err(|e| Failure::internal(format!("training step failed: {e}")))?;
            if let Some(l) = loss {
                loss_sum += l;
                loss_count += 1;
            }
        }
        let miou = validation_miou(&model, &dataset, &r.seq)
            .map_err(|e| Failure::internal(format!("validation failed: {e}")))?;
        let mean_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        let line = serde_json::json!({
            "epoch": epoch,
            "loss": mean_loss,
            "lr": lr_last,
            "miou": miou,
        });
        writeln!(metrics, "{line}").map_err(|e| Failure::user(format!("metrics write: {e}")))?;
        println!("epoch {epoch}: loss {mean_loss:.4} lr {lr_last:.6} miou {miou:.4}");
        save_checkpoint(&model, &ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")))
            .map_err(|e| Failure::internal(format!("checkpoint write failed: {e}")))?;
    }
    save_checkpoint(&model, &args.out.join("model.ckpt"))
        .map_err(|e| Failure::internal(format!("checkpoint write failed: {e}")))?;
    Ok(())
}

/// Mean IoU of anchor-cloud predictions over every full sequence in the set.
fn validation_miou(
    model: &Model,
    dataset: &SequenceDataset,
    seq: &SequenceConfig,
) -> Result<f64, String> {
    let mut cm = ConfusionMatrix::new(model.config.classes, IGNORE_LABEL);
    for t in 0..dataset.len() {
        let sample = dataset
            .assemble(t, seq.n, seq.s, seq.sigma, seq.use_reflectance)
            .map_err(|e| e.to_string())?;
        let Some(sample) = sample else { continue };
        let Some(labels) = sample.anchor_labels() else {
            continue;
        };
        let taped = forward_sequence(model, &sample.clouds).map_err(|e| e.to_string())?;
        let logits = taped.graph.value(taped.logits);
        let preds = argmax_rows(logits);
        cm.accumulate(&preds, labels).map_err(|e| e.to_string())?;
    }
    Ok(cm.iou().mean.unwrap_or(f64::NAN))
}

fn argmax_rows(logits: &ndarray::Array2<f32>) -> Vec<i64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map_or(0, |(i, _)| i as i64)
        })
        .collect()
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    let file = load_file_config(args.config.as_deref())?;
    let model = load_checkpoint(&args.checkpoint).map_err(|e| {
        Failure::user(format!(
            "cannot load checkpoint {}: {e}",
            args.checkpoint.display()
        ))
    })?;
    let sigma = args
        .sigma
        .or(file.sigma)
        .unwrap_or(SequenceConfig::default().sigma);
    let use_reflectance = model.config.point_feature_dim > 0;
    ensure_dir(&args.out)?;
    let pred_dir = args.out.join("predictions");
    ensure_dir(&pred_dir)?;
    write_run_config(
        &args.out,
        &RunConfig {
            subcommand: "infer".to_string(),
            data: args.data.clone(),
            out: args.out.clone(),
            fusion: model.spec.to_string(),
            n: 0,
            s: 1,
            sigma,
            channels: model.config.channels,
            use_reflectance,
            seed: model.config.seed,
            epochs: 0,
            checkpoint: Some(args.checkpoint.clone()),
            augment: false,
        },
    )?;

    let dataset = open_dataset(&args.data)?;
    if dataset.is_empty() {
        eprintln!("warning: no scans under {}; nothing to do", args.data.display());
        return Ok(());
    }
    if args.export_ply {
        ensure_dir(&args.out.join("ply"))?;
    }
    if args.export_flow {
        ensure_dir(&args.out.join("flow"))?;
    }

    let seq_id = 0;
    let mut state = InferState::new(seq_id);
    let base_inv = invert(
        &dataset
            .load(0)
            .map_err(|e| Failure::user(format!("scan 0: {e}")))?
            .pose,
    );
    let scale = [1.0 / sigma; 3];
    for i in 0..dataset.len() {
        let raw_cloud = dataset
            .load(i)
            .map_err(|e| Failure::user(format!("scan {i}: {e}")))?;
        // model input: first-scan frame, lattice units
        let mut cloud = raw_cloud.clone();
        let to_base = compose(&base_inv, &cloud.pose);
        cloud.transform(&to_base);
        cloud.scale_positions(&scale);
        if !use_reflectance {
            cloud.drop_features();
        }
        let out = infer_step(&model, &mut state, &cloud, seq_id)
            .map_err(|e| Failure::internal(format!("inference step {i}: {e}")))?;
        let preds = argmax_rows(&out.logits);
        let stem = dataset.scan_paths[i]
            .file_stem()
            .expect("scan paths have stems")
            .to_string_lossy()
            .to_string();
        let raw: Vec<u32> = preds
            .iter()
            .map(|&p| synth::RAW_IDS[p as usize] as u32)
            .collect();
        write_raw_labels(&pred_dir.join(format!("{stem}.label")), &raw)
            .map_err(|e| Failure::user(format!("cannot write predictions: {e}")))?;

        if args.export_ply {
            let colors: Vec<[u8; 3]> = preds.iter().map(|&p| ply::class_color(p)).collect();
            ply::write_colored_points(
                &args.out.join("ply").join(format!("{stem}.ply")),
                &raw_cloud.positions,
                &colors,
            )
            .map_err(|e| Failure::user(format!("cannot write PLY: {e}")))?;
        }
        if args.export_flow {
            write_flow_ply(
                &args.out.join("flow").join(format!("{stem}.ply")),
                &cloud,
                &state,
                &out,
                sigma,
            )?;
        }
    }
    Ok(())
}

/// Flow arrows at fine-vertex centroids, back in metric units. Steps without
/// a previous state write an empty arrow set.
fn write_flow_ply(
    path: &Path,
    cloud: &PointCloud,
    state: &InferState,
    out: &latseg::model::InferOutput,
    sigma: f64,
) -> CmdResult {
    let k = out.fine_features.nrows();
    let (origins, dirs) = match &out.prev_fine_state {
        Some((h_prev, prev_count)) => {
            let adjacency = latseg::ops::adjacency(state.fine_lattice());
            let adj = restrict_to_previous(&adjacency, *prev_count);
            let centroids = vertex_centroids(&out.distribution, cloud, k);
            let dirs_scaled = aflow_direction(&adj, h_prev, &out.fine_features, &centroids);
            let mut origins = Vec::new();
            let mut dirs = Vec::new();
            for (c, d) in centroids.iter().zip(&dirs_scaled) {
                if let Some(c) = c {
                    origins.push([c[0] * sigma, c[1] * sigma, c[2] * sigma]);
                    dirs.push([d[0] * sigma, d[1] * sigma, d[2] * sigma]);
                }
            }
            (origins, dirs)
        }
        None => (Vec::new(), Vec::new()),
    };
    ply::write_arrows(path, &origins, &dirs, [255, 64, 0])
        .map_err(|e| Failure::user(format!("cannot write flow PLY: {e}")))
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let dataset = open_dataset(&args.data)?;
    let remap = synth::label_remap();
    let mut cm = ConfusionMatrix::new(synth::N_CLASSES, IGNORE_LABEL);
    let mut matched = 0usize;
    for (i, scan) in dataset.scan_paths.iter().enumerate() {
        let stem = scan.file_stem().expect("scan paths have stems");
        let pred_path = args.pred.join(stem).with_extension("label");
        if !pred_path.exists() {
            continue;
        }
        let cloud = dataset
            .load(i)
            .map_err(|e| Failure::user(format!("scan {i}: {e}")))?;
        let labels = cloud
            .labels
            .ok_or_else(|| Failure::user(format!("scan {i} has no ground-truth labels")))?;
        let preds = read_labels(&pred_path, &remap)
            .map_err(|e| Failure::user(format!("predictions {}: {e}", pred_path.display())))?;
        cm.accumulate(&preds, &labels)
            .map_err(|e| Failure::user(format!("scan {i}: {e}")))?;
        matched += 1;
    }
    if matched == 0 {
        return Err(Failure::user(format!(
            "no prediction files under {} match the dataset",
            args.pred.display()
        )));
    }
    let names: Vec<String> = synth::class_names().iter().map(|s| s.to_string()).collect();
    let report = moving_static_report(&cm, &names, &synth::moving_flags());
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    ensure_dir(&args.out)?;
    let config = synth::SynthSceneConfig {
        frames: args.frames,
        seed: args.seed,
        points_per_object: args.points_per_object,
        ..synth::SynthSceneConfig::default()
    };
    let frames = synth::write_dataset(&config, &args.out)
        .map_err(|e| Failure::user(format!("cannot write dataset: {e}")))?;
    println!(
        "wrote {} frames, {} objects, {} points each under {}",
        frames.clouds.len(),
        frames.objects.len(),
        frames.clouds.first().map_or(0, PointCloud::len),
        args.out.display()
    );
    Ok(())
}

fn cmd_selfcheck(args: SelfcheckArgs) -> CmdResult {
    let seeds: Vec<u64> = (1..=args.fixtures).collect();
    let registry = selfcheck::registry();
    println!(
        "gradient checks: {} ops x {} fixtures",
        registry.len(),
        seeds.len()
    );
    let mut failures = 0usize;
    for op in &registry {
        let mut worst = 0.0f64;
        let mut ok = true;
        for &seed in &seeds {
            let report = (op.run)(seed);
            worst = worst.max(report.max_rel_err);
            ok &= report.passed();
        }
        let status = if ok { "PASS" } else { "FAIL" };
        println!("{status} {:<28} max rel err {worst:.3e}", op.name);
        failures += usize::from(!ok);
    }
    for (name, result) in selfcheck::run_lattice_invariants() {
        match result {
            Ok(()) => println!("PASS {name:<28}"),
            Err(msg) => {
                println!("FAIL {name:<28} {msg}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Failure::internal(format!("{failures} checks failed")));
    }
    println!("all checks passed");
    Ok(())
}
