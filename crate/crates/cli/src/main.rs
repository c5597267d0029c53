use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use stacknet::aggregate::{aggregate_probs, binarize, predict_volume, EnsembleSpec};
use stacknet::experiment::{
    prepare_subjects, run_depth_sweep, subjects_by_center, train_model, EvaluationReport,
    ExperimentConfig, SubjectReport,
};
use stacknet::io::{load_nifti, read_json, read_manifest, save_nifti, write_json, write_metrics_json};
use stacknet::metrics::{paired_z_test, MetricsReport};
use stacknet::model::{load_checkpoint, save_checkpoint};
use stacknet::preprocess::{brain_mask, normalize_record, PreparedSubject, PreprocessConfig, SubjectRecord};
use stacknet::synth::{write_phantom_set, PhantomSpec};
use stacknet::train::split_folds;
use stacknet::{StackNet, VolumeKind};

#[derive(Parser)]
#[command(name = "stacknet", version, about = "Stack-Net lesion segmentation on 2-D axial slices")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms and their manifest.
    Synth(SynthArgs),
    /// Brain-mask and normalize every subject, writing NIfTI outputs.
    Preprocess(PreprocessArgs),
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Per-subject probability and mask volumes from one model.
    Predict(PredictArgs),
    /// Mean-fuse several models and threshold.
    Ensemble(EnsembleArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Cross-validated sweep over stack depths.
    DepthSweep(DepthSweepArgs),
    /// Paired Z-test between two score lists.
    Ztest(ZtestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// PhantomSpec JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    centers: usize,
    #[arg(long, default_value_t = 4)]
    per_center: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid extents as X,Y,Z.
    #[arg(long, value_parser = parse_list::<3>)]
    dims: Option<[usize; 3]>,
}

/// `N` comma-separated integers, e.g. `96,96,16`.
fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected {N} comma-separated values, got {}", p.len()))
}

/// Flags shared by every subcommand that reads an experiment config.
#[derive(Args)]
struct ConfigArgs {
    /// ExperimentConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Slice size after crop/pad.
    #[arg(long)]
    target_size: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ModelOverrides {
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Channel widths c1,c2,c3,c4.
    #[arg(long, value_parser = parse_list::<4>)]
    widths: Option<[usize; 4]>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Train on the training part of this fold instead of all subjects.
    #[arg(long)]
    fold: Option<usize>,
    /// Write per-epoch losses as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    model: ModelOverrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<subject>_mask.nii` predictions.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct DepthSweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    depths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_folds: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    model: ModelOverrides,
}

#[derive(Args)]
struct ZtestArgs {
    /// JSON array of numbers, or an evaluation summary written by `evaluate`.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Metric to pull from evaluation summaries.
    #[arg(long, default_value = "dice")]
    metric: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Config(String),
    Data(stacknet::Error),
}

impl From<stacknet::Error> for CliError {
    fn from(e: stacknet::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e)
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<ExperimentConfig>(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = args.target_size {
        cfg.preprocess.target_size = t;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &ModelOverrides) {
    if let Some(r) = o.kernel_size {
        cfg.model.kernel_size = r;
    }
    if let Some(l) = o.depth {
        cfg.model.stack_depth = l;
    }
    if let Some(w) = o.widths {
        cfg.model.channel_widths = w;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = o.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if o.no_augment {
        cfg.train.augment = false;
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(stacknet::Error::Io { path: dir.into(), source: e }))
}

fn prepared(manifest: &Path, pre: &PreprocessConfig) -> CliResult<Vec<PreparedSubject>> {
    Ok(prepare_subjects(&read_manifest(manifest)?, pre)?)
}

/// Preprocessing settings matching a model's slice size.
fn preprocess_for(model: &StackNet<f32>, base: &PreprocessConfig) -> CliResult<PreprocessConfig> {
    let c = model.config();
    if c.height != c.width {
        return Err(config_err(format!("model slices are {}×{}, expected square", c.height, c.width)));
    }
    Ok(PreprocessConfig { target_size: c.height, ..*base })
}

fn write_predictions(dir: &Path, id: &str, prob: &stacknet::Volume, threshold: f64) -> CliResult<()> {
    save_nifti(prob, dir.join(format!("{id}_prob.nii")))?;
    save_nifti(&binarize(prob, threshold), dir.join(format!("{id}_mask.nii")))?;
    Ok(())
}

fn run_synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => read_json::<PhantomSpec>(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = a.dims {
        spec.dims = d;
    }
    if a.centers == 0 || a.per_center == 0 {
        return Err(config_err("--centers and --per-center must be at least 1"));
    }
    let entries = write_phantom_set(&a.out, &spec, a.centers, a.per_center)?;
    println!("wrote {} subjects to {}", entries.len(), a.out.display());
    Ok(())
}

fn run_preprocess(a: PreprocessArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    create_dir(&a.out)?;
    let mut geometry = BTreeMap::new();
    for entry in read_manifest(&a.manifest)? {
        let rec = SubjectRecord::load(&entry)?;
        let norm = normalize_record(&rec, &cfg.preprocess)?;
        let brain = brain_mask(&rec.flair, cfg.preprocess.brain_threshold)?;
        let id = &entry.subject_id;
        save_nifti(&norm.flair, a.out.join(format!("{id}_flair_norm.nii")))?;
        save_nifti(&norm.t1, a.out.join(format!("{id}_t1_norm.nii")))?;
        save_nifti(&brain, a.out.join(format!("{id}_brain.nii")))?;
        let prepared = PreparedSubject::from_record(&rec, &cfg.preprocess)?;
        geometry.insert(id.clone(), prepared.geometry);
    }
    write_json(&geometry, a.out.join("geometry.json"))?;
    println!("preprocessed {} subjects", geometry.len());
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    apply_overrides(&mut cfg, &a.model);
    cfg.validate()?;
    let subjects = prepared(&a.manifest, &cfg.preprocess)?;
    let selected: Vec<&PreparedSubject> = match a.fold {
        None => subjects.iter().collect(),
        Some(k) => {
            let folds = split_folds(&subjects_by_center(&subjects), cfg.folds, cfg.fold_seed)?;
            let fold = folds
                .get(k)
                .ok_or_else(|| config_err(format!("fold {k} does not exist ({} folds)", folds.len())))?;
            subjects.iter().filter(|s| fold.train.contains(&s.subject_id)).collect()
        }
    };
    let model_cfg = cfg.model_config();
    println!(
        "training r={} L={} ({} layers) on {} subjects",
        model_cfg.kernel_size,
        model_cfg.stack_depth,
        model_cfg.layer_count(),
        selected.len()
    );
    let (net, history) = train_model(&model_cfg, &selected, &cfg.train)?;
    save_checkpoint(&net, &a.out)?;
    if let Some(h) = &a.history {
        let lines = history.to_json_lines()?;
        std::fs::write(h, lines).map_err(|e| CliError::Data(stacknet::Error::Io { path: h.clone(), source: e }))?;
    }
    if let Some(last) = history.epochs.last() {
        println!("final epoch loss {:.6}", last.mean_loss);
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    EnsembleSpec { models: vec![a.model.clone()], threshold }.validate()?;
    let net = load_checkpoint::<f32>(&a.model)?;
    let pre = preprocess_for(&net, &cfg.preprocess)?;
    create_dir(&a.out)?;
    for s in prepared(&a.manifest, &pre)? {
        let prob = predict_volume(&net, &s)?;
        write_predictions(&a.out, &s.subject_id, &prob, threshold)?;
    }
    Ok(())
}

fn run_ensemble(a: EnsembleArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    let spec = EnsembleSpec { models: a.models.clone(), threshold: a.threshold };
    spec.validate()?;
    let nets = spec
        .models
        .iter()
        .map(load_checkpoint::<f32>)
        .collect::<stacknet::Result<Vec<_>>>()?;
    let pre = preprocess_for(&nets[0], &cfg.preprocess)?;
    create_dir(&a.out)?;
    for s in prepared(&a.manifest, &pre)? {
        let members = nets.iter().map(|n| predict_volume(n, &s)).collect::<stacknet::Result<Vec<_>>>()?;
        let prob = aggregate_probs(&members)?;
        write_predictions(&a.out, &s.subject_id, &prob, spec.threshold)?;
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for entry in read_manifest(&a.manifest)? {
        let gt = entry
            .mask_path
            .as_ref()
            .ok_or_else(|| config_err(format!("subject {} has no mask_path", entry.subject_id)))?;
        let gt = load_nifti(gt)?.with_kind(VolumeKind::BinaryMask)?;
        let pred = load_nifti(a.predictions.join(format!("{}_mask.nii", entry.subject_id)))?
            .with_kind(VolumeKind::BinaryMask)?;
        let report = MetricsReport::compute(&gt, &pred, cfg.eval)?;
        write_metrics_json(&report, a.out.join(format!("{}_metrics.json", entry.subject_id)))?;
        rows.push(SubjectReport { subject_id: entry.subject_id, report });
    }
    let eval = EvaluationReport::from_subjects(rows)?;
    write_json(&eval, a.out.join("summary.json"))?;
    let s = &eval.summary;
    println!(
        "{} subjects: dice {:.4}, lesion recall {:.4}, lesion F1 {:.4}",
        s.subjects, s.dice, s.lesion_recall, s.lesion_f1
    );
    Ok(())
}

fn run_depth_sweep_cmd(a: DepthSweepArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    apply_overrides(&mut cfg, &a.model);
    if a.max_folds.is_some() {
        cfg.max_folds = a.max_folds;
    }
    cfg.validate()?;
    let subjects = prepared(&a.manifest, &cfg.preprocess)?;
    let report = run_depth_sweep(&subjects, &a.depths, &cfg)?;
    for r in &report.rows {
        println!(
            "L={} layers={} dice={:.4} recall={:.4} f1={:.4}",
            r.depth, r.layer_count, r.dice, r.lesion_recall, r.lesion_f1
        );
    }
    write_json(&report, &a.out)?;
    Ok(())
}

/// Reads either a bare array of numbers or the per-subject `metric` of an
/// evaluation summary.
fn read_scores(path: &Path, metric: &str) -> CliResult<Vec<f64>> {
    let value: Value = read_json(path)?;
    let bad = || config_err(format!("{}: expected a number array or an evaluation summary", path.display()));
    let field = |v: &Value| v.as_f64().ok_or_else(bad);
    match &value {
        Value::Array(items) => items.iter().map(field).collect(),
        Value::Object(obj) => {
            let subjects = obj.get("subjects").and_then(Value::as_array).ok_or_else(bad)?;
            subjects
                .iter()
                .map(|s| {
                    s.pointer(&format!("/report/{metric}"))
                        .and_then(Value::as_f64)
                        .ok_or_else(|| config_err(format!("{}: no metric `{metric}`", path.display())))
                })
                .collect()
        }
        _ => Err(bad()),
    }
}

fn run_ztest(a: ZtestArgs) -> CliResult<()> {
    let xs = read_scores(&a.a, &a.metric)?;
    let ys = read_scores(&a.b, &a.metric)?;
    let t = paired_z_test(&xs, &ys)?;
    println!("n={} z={:.6} p={:.6e}", t.n, t.z, t.p_two_sided);
    if let Some(out) = &a.out {
        write_json(&t, out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_err(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Preprocess(a) => run_preprocess(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Ensemble(a) => run_ensemble(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::DepthSweep(a) => run_depth_sweep_cmd(a),
        Command::Ztest(a) => run_ztest(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
