//! `evil`: dataset generation, training, evaluation and prediction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};

use evil_core::checkpoint::Checkpoint;
use evil_core::config::{Preset, RunConfig, TrainMode};
use evil_core::data::{
    self, generate_synthetic, load_slices, partition_patients, split_by_patients, split_file_name, write_id_list,
    Dataset, LabeledAmount, Sample, SplitSpec, SyntheticSpec,
};
use evil_core::eval::{evaluate_case, export_uncertainty_figure, mc_dropout_uncertainty, predict_with_uncertainty, MetricReport};
use evil_core::npy;
use evil_core::run::{run_root, RunManifest};
use evil_core::trainer::{segment, train, RunOutputs, TrainData, TrainState};
use evil_core::EvilError;

#[derive(Parser)]
#[command(name = "evil", version, about = "Evidential semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the per-slice container layout.
    MakeSynthetic(MakeSynthetic),
    /// Print a preset config file.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Write class and uncertainty maps, optionally with figure panels.
    Predict(PredictArgs),
}

#[derive(Args)]
struct MakeSynthetic {
    #[arg(long, default_value = "data/synthetic")]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    patients: usize,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults to the `--preset` values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides `data.labeled_ratio`.
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// Overrides `train.mode`.
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Overrides `train.total_iters`.
    #[arg(long)]
    iters: Option<u64>,
    /// Overrides `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Any other override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Evil,
    SupervisedOnly,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; defaults to `$EVIL_RUN_DIR` (or `runs/`) plus a config-derived name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum HeadArg {
    Enet,
    Snet,
}

#[derive(Args)]
struct CheckpointArgs {
    /// `best`, `last`, or a checkpoint path.
    #[arg(long, default_value = "best")]
    checkpoint: String,
    /// Run directory holding `best.ckpt` / `last.ckpt`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Config whose architecture must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset root stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Network to evaluate; defaults to E-Net, or S-Net for supervised-only runs.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Report path; defaults to `eval_<split>_<head>.csv` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Slice container files to predict; if absent, `--split` is used.
    #[arg(long)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Predict at most this many slices of the split.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write figure panels of the evidential uncertainty.
    #[arg(long)]
    uncertainty: bool,
    /// Add an MC-dropout panel from this many stochastic forwards.
    #[arg(long, value_name = "S")]
    mc_baseline: Option<usize>,
    /// Output directory; defaults to `predictions/` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit code 1: bad usage or configuration. Exit code 2: runtime failure.
enum Failure {
    Usage(String),
    Runtime(EvilError),
}

impl From<EvilError> for Failure {
    fn from(e: EvilError) -> Self {
        match e {
            EvilError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::InitConfig { preset } => init_config(&preset),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn init_config(preset: &str) -> CliResult {
    print!("{}", RunConfig::preset(Preset::parse(preset)?).to_toml());
    Ok(())
}

const SPLIT_RATIOS: [f64; 3] = [0.10, 0.20, 0.30];

fn make_synthetic(a: MakeSynthetic) -> CliResult {
    if a.patients == 0 {
        return usage("--patients must be at least 1");
    }
    if a.patients < 3 {
        return usage("--patients must be at least 3 to form train/val/test sets");
    }
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            a.out.display()
        ));
    }
    if non_empty {
        fs::remove_dir_all(&a.out).map_err(|e| EvilError::io(&a.out, e))?;
    }
    let spec = SyntheticSpec {
        n_patients: a.patients,
        slices_per_patient: a.slices,
        size: a.size,
        noise_std: a.noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).map_err(|e| match e {
        EvilError::Validation(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    let part = partition_patients(&ds.patients(), a.seed)?;
    for (list, ids) in [("train.list", &part.train), ("val.list", &part.val), ("test.list", &part.test)] {
        let subset = ds.subset(&ids.iter().cloned().collect());
        data::write_slices(&a.out, &subset, list)?;
    }
    let splits = a.out.join("splits");
    fs::create_dir_all(&splits).map_err(|e| EvilError::io(&splits, e))?;
    for r in SPLIT_RATIOS {
        let amount = LabeledAmount::Ratio(r);
        let chosen = data::labeled_patients(&part.train, &SplitSpec { labeled: amount, seed: a.seed })?;
        write_id_list(&splits.join(split_file_name(&amount, a.seed)), &chosen)?;
    }
    println!(
        "wrote {} slices from {} patients (train {} / val {} / test {} patients) to {}",
        ds.len(),
        a.patients,
        part.train.len(),
        part.val.len(),
        part.test.len(),
        a.out.display()
    );
    Ok(())
}

fn build_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            if !path.is_file() {
                return usage(format!("config file {} does not exist", path.display()));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::preset(Preset::parse(&a.preset)?),
    };
    if let Some(r) = a.labeled_ratio {
        cfg.set(&format!("data.labeled_ratio={r}"))?;
        cfg.data.labeled_patients = 0;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Evil => TrainMode::Evil,
            ModeArg::SupervisedOnly => TrainMode::SupervisedOnly,
        };
    }
    if let Some(n) = a.iters {
        cfg.set(&format!("train.total_iters={n}"))?;
    }
    if let Some(d) = &a.data {
        cfg.data.root = d.clone();
    }
    for s in &a.sets {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn list_name(cfg: &RunConfig, split: SplitArg) -> &str {
    match split {
        SplitArg::Train => &cfg.data.train_list,
        SplitArg::Val => &cfg.data.val_list,
        SplitArg::Test => &cfg.data.test_list,
    }
}

fn load_split(cfg: &RunConfig, split: SplitArg) -> CliResult<Dataset> {
    Ok(load_slices(
        &cfg.data.root,
        Path::new(list_name(cfg, split)),
        cfg.data.size,
        cfg.model.num_classes,
    )?)
}

fn load_train_data(cfg: &RunConfig) -> CliResult<TrainData> {
    let train_set = load_split(cfg, SplitArg::Train)?;
    let val = load_split(cfg, SplitArg::Val)?;
    let spec = cfg.split_spec();
    let split_path = cfg
        .data
        .root
        .join("splits")
        .join(split_file_name(&spec.labeled, spec.seed));
    let labeled: BTreeSet<String> = if split_path.is_file() {
        log::info!("labeled patients from {}", split_path.display());
        data::read_id_list(&split_path)?.into_iter().collect()
    } else {
        data::labeled_patients(&train_set.patients(), &spec)?.into_iter().collect()
    };
    let (labeled, unlabeled) = split_by_patients(&train_set, &labeled)?;
    log::info!(
        "{} labeled / {} unlabeled training slices, {} validation slices",
        labeled.len(),
        unlabeled.len(),
        val.len()
    );
    Ok(TrainData { labeled, unlabeled, val })
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = build_config(&a.config)?;
    let mut manifest = RunManifest::start("train", &cfg);
    let dir = a.run_dir.clone().unwrap_or_else(|| run_root().join(manifest.default_dir_name()));
    let data = load_train_data(&cfg)?;
    let out = RunOutputs { dir: dir.clone() };

    let (state, best) = if a.resume {
        let last = Checkpoint::load(&out.last_path())?;
        if last.config != cfg {
            return usage(format!(
                "config differs from the one stored in {}; resume needs the same config",
                out.last_path().display()
            ));
        }
        let best = Checkpoint::load(&out.best_path())?;
        log::info!("resuming at iteration {}", last.state.iter);
        (last.state, Some((best.state, best.best)))
    } else {
        (TrainState::new(&cfg)?, None)
    };
    manifest.write(&dir)?;
    let outcome = train(&cfg, &data, state, best, Some(&out))?;
    manifest.finish(vec![
        "config.toml".into(),
        "metrics.csv".into(),
        "best.ckpt".into(),
        "last.ckpt".into(),
    ]);
    manifest.write(&dir)?;
    println!("run directory: {}", dir.display());
    println!(
        "best validation DSC {:.4} at iteration {}",
        outcome.best_score, outcome.best_iter
    );
    Ok(())
}

fn resolve_checkpoint(a: &CheckpointArgs) -> CliResult<(Checkpoint, Option<PathBuf>)> {
    let path = match a.checkpoint.as_str() {
        name @ ("best" | "last") => {
            let Some(dir) = &a.run_dir else {
                return usage(format!("--checkpoint {name} needs --run-dir"));
            };
            dir.join(format!("{name}.ckpt"))
        }
        p => PathBuf::from(p),
    };
    if !path.is_file() {
        return usage(format!("checkpoint {} does not exist", path.display()));
    }
    let mut ckpt = Checkpoint::load(&path)?;
    if let Some(cfg_path) = &a.config {
        let cfg = RunConfig::load(cfg_path)?;
        ckpt.check_model(&cfg.model)?;
    }
    if let Some(d) = &a.data {
        ckpt.config.data.root = d.clone();
    }
    let dir = a.run_dir.clone().or_else(|| path.parent().map(Path::to_path_buf));
    Ok((ckpt, dir))
}

fn split_label(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn record_artifacts(dir: &Path, paths: &[PathBuf]) -> CliResult {
    let Ok(mut manifest) = RunManifest::read(dir) else {
        return Ok(());
    };
    let mut artifacts = manifest.artifacts.clone();
    for p in paths {
        let rel = p.strip_prefix(dir).unwrap_or(p);
        artifacts.push(rel.display().to_string());
    }
    manifest.finish(artifacts);
    manifest.write(dir)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (ckpt, dir) = resolve_checkpoint(&a.ckpt)?;
    let cfg = &ckpt.config;
    let head = a.head.unwrap_or(match cfg.train.mode {
        TrainMode::Evil => HeadArg::Enet,
        TrainMode::SupervisedOnly => HeadArg::Snet,
    });
    let (net, evidential, head_name) = match head {
        HeadArg::Enet => (&ckpt.state.nets.enet, true, "enet"),
        HeadArg::Snet => (&ckpt.state.nets.snet, false, "snet"),
    };
    let ds = load_split(cfg, a.split)?;
    let mut report = MetricReport::default();
    for chunk in ds.samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = segment(net, evidential, &data::stack_images(&refs))?;
        for (i, s) in chunk.iter().enumerate() {
            let gt = s.label.as_ref().expect("loaded slices carry labels");
            report.push(
                s.stem(),
                evaluate_case(pred.index_axis(Axis(0), i), gt.view(), cfg.model.num_classes, cfg.eval.empty_mask)?,
            );
        }
    }
    let out = match (&a.out, &dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(format!("eval_{}_{head_name}.csv", split_label(a.split))),
        (None, None) => PathBuf::from(format!("eval_{}_{head_name}.csv", split_label(a.split))),
    };
    report.write_csv(&out)?;
    let agg = report.aggregate();
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} {} slices, {head_name}: DSC {:.4}  HD95 {}  ASD {}  -> {}",
        split_label(a.split),
        ds.len(),
        agg.dsc,
        fmt(agg.hd95),
        fmt(agg.asd),
        out.display()
    );
    if let Some(d) = &dir {
        record_artifacts(d, &[out])?;
    }
    Ok(())
}

fn load_inputs(a: &PredictArgs, cfg: &RunConfig) -> CliResult<Vec<Sample>> {
    if a.input.is_empty() {
        let mut ds = load_split(cfg, a.split)?;
        if let Some(n) = a.limit {
            ds.samples.truncate(n);
        }
        return Ok(ds.samples);
    }
    a.input
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let image = npy::read_npz_array(path, "image")?;
            let image = data::resize_bilinear(&image, cfg.data.size, cfg.data.size);
            let label = npy::read_npz_array(path, "label")
                .ok()
                .map(|l| data::resize_nearest(&l.mapv(|v| v as u8), cfg.data.size, cfg.data.size));
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("input{i}"));
            Ok(Sample {
                image: data::normalize_min_max(&image).insert_axis(Axis(0)),
                label,
                patient_id: stem,
                slice_index: i,
            })
        })
        .collect()
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    if a.mc_baseline == Some(0) {
        return usage("--mc-baseline needs at least one sample");
    }
    let (ckpt, dir) = resolve_checkpoint(&a.ckpt)?;
    let cfg = &ckpt.config;
    let out = match (&a.out, &dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("predictions"),
        (None, None) => PathBuf::from("predictions"),
    };
    fs::create_dir_all(&out).map_err(|e| EvilError::io(&out, e))?;
    let samples = load_inputs(&a, cfg)?;
    let net = &ckpt.state.nets.enet;
    let mut written = Vec::new();
    for s in &samples {
        let x = s.image.clone().insert_axis(Axis(0));
        let pred = predict_with_uncertainty(net, &x)?;
        let classes = pred.classes.index_axis(Axis(0), 0).to_owned();
        let u = pred.uncertainty.index_axis(Axis(0), 0).to_owned();
        let path = out.join(format!("{}.npz", s.stem()));
        npy::write_npz(
            &path,
            &[("classes", npy::encode_u8(&classes)), ("uncertainty", npy::encode_f32(&u.mapv(|v| v as f32)))],
        )?;
        written.push(path);
        if a.uncertainty || a.mc_baseline.is_some() {
            let mut maps = Vec::new();
            if let Some(n) = a.mc_baseline {
                let mc = mc_dropout_uncertainty(net, &x, n, cfg.eval.mc_rate, cfg.eval.mc_seed)?;
                maps.push((format!("{n}"), mc.index_axis(Axis(0), 0).to_owned()));
            }
            let label = s.label.clone().unwrap_or_else(|| Array2::zeros(classes.raw_dim()));
            let files = export_uncertainty_figure(
                &out,
                &s.stem(),
                s.image.index_axis(Axis(0), 0),
                label.view(),
                u.view(),
                &maps,
            )?;
            written.extend(files.panels);
            written.push(files.montage);
        }
    }
    println!("wrote predictions for {} slices to {}", samples.len(), out.display());
    if let Some(d) = &dir {
        record_artifacts(d, &written)?;
    }
    Ok(())
}
