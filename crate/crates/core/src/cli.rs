//! `congeo train | eval | sweep | ablate`.
//!
//! Exit codes: 0 success, 1 configuration error (bad or missing config,
//! grid or checkpoint/config mismatch), 2 runtime failure. Everything is
//! written below the output directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::data::LocationRecord;
use crate::encoders::EncoderConfig;
use crate::error::Error;
use crate::evaluation::{EvalSet, EvalSetting, Evaluator, SweepResult};
use crate::plot::plot_sweeps;
use crate::retrieval::{write_json, write_rank_records_json, MetricsReport};
use crate::training::{fit, AblationFlags, TrainConfig, TrainEvent, TrainState};
use crate::transforms::PerturbationKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "congeo", version, about = "Contrastive cross-view geo-localization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train per config, write checkpoints, a JSON-lines log and metrics.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on every configured setting plus the orientation sweep.
    Eval(CheckpointArgs),
    /// Orientation sweep only.
    Sweep(CheckpointArgs),
    /// Train and evaluate each row of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root that relative output directories resolve against.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of every evaluation setting.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// CSV with columns name,q_shift,q_fov,r_rotate,c_shift,c_fov.
    #[arg(long)]
    pub grid: PathBuf,
    /// Train rows concurrently; each row keeps the configured seed.
    #[arg(long)]
    pub parallel: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { EXIT_CONFIG } else { EXIT_RUNTIME };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, true),
        Command::Sweep(a) => cmd_eval(a, false),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(Failure::config)
}

fn prepare_out(cfg: &mut ExperimentConfig, out: Option<&Path>, root: Option<&Path>) -> CliResult<PathBuf> {
    let dir = cfg.resolve_output_dir(out, root);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.output_dir = dir.clone();
    write_json(dir.join("resolved-config.json"), cfg)?;
    Ok(dir)
}

#[derive(Serialize)]
struct SettingReport {
    name: String,
    setting: EvalSetting,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct UnseenReport {
    perturbation: PerturbationKind,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct MetricsFile {
    settings: Vec<SettingReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    unseen: Vec<UnseenReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepResult>,
}

fn evaluate_settings(ev: &Evaluator<'_, crate::encoders::DualEncoder>, settings: &[EvalSetting], rank_dir: Option<&Path>) -> CliResult<Vec<SettingReport>> {
    let mut out = Vec::with_capacity(settings.len());
    for s in settings {
        let (metrics, results) = ev.run_detailed(s)?;
        if let Some(dir) = rank_dir {
            write_rank_records_json(&results, ev.gallery(), dir.join(format!("ranks-{}.json", s.label())))?;
        }
        eprintln!("{:<22} R@1 {:.4}  R@5 {:.4}  R@10 {:.4}", s.label(), metrics.r1(), metrics.r_at[&5], metrics.r_at[&10]);
        out.push(SettingReport { name: s.label(), setting: s.clone(), metrics });
    }
    Ok(out)
}

fn cmd_train(args: &RunArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let out = prepare_out(&mut cfg, args.out.as_deref(), args.output_root.as_deref())?;
    let records = cfg.dataset.load()?;
    let state = train_into(&cfg, &records, &out)?;
    let set = EvalSet::from_records(&records)?;
    let ev = Evaluator::new(&state.encoder, &set)?;
    let settings = evaluate_settings(&ev, &cfg.eval, None)?;
    write_json(out.join("metrics.json"), &MetricsFile { settings, unseen: Vec::new(), sweep: None })?;
    Ok(())
}

fn train_into(cfg: &ExperimentConfig, records: &[LocationRecord], out: &Path) -> CliResult<TrainState> {
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let log_path = out.join("train-log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut state = TrainState::new(cfg.encoder.clone(), &cfg.loss, cfg.train.seed)?;
    let epochs = cfg.train.epochs;
    fit(&mut state, records, &cfg.loss, &cfg.train, &mut |event| match event {
        TrainEvent::Step(rec) => {
            serde_json::to_writer(&mut log, rec)?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))
        }
        TrainEvent::EpochEnd(st) => {
            let last = st.history.last().map(|r| r.total).unwrap_or(f64::NAN);
            eprintln!("epoch {}/{epochs}  loss {last:.4}", st.epoch);
            save_checkpoint(ck_dir.join(format!("epoch-{:04}.safetensors", st.epoch)), st, &cfg.loss, Some(&cfg.train))
        }
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(out.join("checkpoint.safetensors"), &state, &cfg.loss, Some(&cfg.train))?;
    Ok(state)
}

/// First differing encoder field as `encoder.<key>: checkpoint has X, config has Y`.
pub fn encoder_mismatch(checkpoint: &EncoderConfig, config: &EncoderConfig) -> Option<String> {
    let a = serde_json::to_value(checkpoint).ok()?;
    let b = serde_json::to_value(config).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(*v)).map(|(k, v)| {
        format!("encoder.{k}: checkpoint has {v}, config has {}", b.get(k).cloned().unwrap_or_default())
    })
}

fn cmd_eval(args: &CheckpointArgs, full: bool) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.eval.iter_mut().for_each(|s| s.seed = seed);
    }
    let Checkpoint { state, .. } = load_checkpoint(&args.checkpoint)?;
    if let Some(diff) = encoder_mismatch(state.encoder.config(), &cfg.encoder) {
        return Err(Failure::config(format!("checkpoint and config disagree: {diff}")));
    }
    let out = prepare_out(&mut cfg, args.out.as_deref(), args.output_root.as_deref())?;
    let records = cfg.dataset.load()?;
    let set = EvalSet::from_records(&records)?;
    let ev = Evaluator::new(&state.encoder, &set)?;
    let sweep = ev.sweep(&cfg.sweep_angles)?;
    sweep.write_csv(out.join("sweep.csv"))?;
    plot_sweeps(&[("model", &sweep)], out.join("sweep.png"))?;
    eprintln!("sweep invariance gap {:.4}", sweep.invariance_gap);
    if !full {
        write_json(out.join("sweep.json"), &sweep)?;
        return Ok(());
    }
    let settings = evaluate_settings(&ev, &cfg.eval, Some(&out))?;
    let unseen_seed = cfg.eval.first().map(|s| s.seed).unwrap_or(0);
    let unseen = if cfg.unseen.is_empty() { Vec::new() } else { ev.unseen_suite(&cfg.unseen, unseen_seed)?.into_iter().map(|(perturbation, metrics)| UnseenReport { perturbation, metrics }).collect() };
    write_json(out.join("metrics.json"), &MetricsFile { settings, unseen, sweep: Some(sweep) })?;
    Ok(())
}

/// One ablation row: which objectives and transform components are active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GridRow {
    pub name: String,
    pub q_shift: bool,
    pub q_fov: bool,
    pub r_rotate: bool,
    pub c_shift: bool,
    pub c_fov: bool,
}

impl GridRow {
    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_single_q: self.q_shift || self.q_fov,
            use_single_r: self.r_rotate,
            use_cross: self.c_shift || self.c_fov,
            single_q_shift: self.q_shift,
            single_q_fov: self.q_fov,
            cross_shift: self.c_shift,
            cross_fov: self.c_fov,
        }
    }
}

const GRID_FLAGS: [&str; 5] = ["q_shift", "q_fov", "r_rotate", "c_shift", "c_fov"];

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "x" | "✓" => Some(true),
        "0" | "false" | "no" | "n" | "" | "-" => Some(false),
        _ => None,
    }
}

/// Reads an ablation grid; errors name the 1-based data row.
pub fn parse_grid(path: &Path) -> std::result::Result<Vec<GridRow>, Error> {
    let bad = |key: String, message: String| Error::Config { key, message };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |n: &str| headers.iter().position(|h| h.trim() == n);
    let name_col = col("name");
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(GRID_FLAGS) {
        *slot = col(name).ok_or_else(|| bad("grid".into(), format!("{}: missing column `{name}`", path.display())))?;
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.map_err(|e| bad(format!("grid row {row_no}"), e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(bad(format!("grid row {row_no}"), format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let mut v = [false; 5];
        for (k, (&c, name)) in cols.iter().zip(GRID_FLAGS).enumerate() {
            let raw = rec.get(c).unwrap_or("");
            v[k] = parse_flag(raw)
                .ok_or_else(|| bad(format!("grid row {row_no}"), format!("column `{name}` has non-boolean value `{raw}`")))?;
        }
        let name = name_col.and_then(|c| rec.get(c)).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
        rows.push(GridRow {
            name: name.unwrap_or_else(|| format!("row{row_no}")),
            q_shift: v[0],
            q_fov: v[1],
            r_rotate: v[2],
            c_shift: v[3],
            c_fov: v[4],
        });
    }
    if rows.is_empty() {
        return Err(bad("grid".into(), format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct AblationResult {
    row: usize,
    grid: GridRow,
    reports: Vec<(String, MetricsReport)>,
}

fn ablation_settings(cfg: &ExperimentConfig) -> Vec<EvalSetting> {
    let seed = cfg.eval.first().map(|s| s.seed).unwrap_or(0);
    vec![
        EvalSetting::limited_fov(70.0, seed),
        EvalSetting::limited_fov(90.0, seed),
        EvalSetting::north_aligned(),
        EvalSetting::unknown_orientation(seed),
    ]
}

fn run_row(cfg: &ExperimentConfig, records: &[LocationRecord], row: usize, grid: &GridRow) -> crate::error::Result<AblationResult> {
    let train = TrainConfig { ablation: grid.flags(), ..cfg.train.clone() };
    let mut state = TrainState::new(cfg.encoder.clone(), &cfg.loss, train.seed)?;
    fit(&mut state, records, &cfg.loss, &train, &mut |_| Ok(()))?;
    let set = EvalSet::from_records(records)?;
    let ev = Evaluator::new(&state.encoder, &set)?;
    let reports = ablation_settings(cfg).iter().map(|s| Ok((s.label(), ev.run(s)?))).collect::<crate::error::Result<_>>()?;
    Ok(AblationResult { row, grid: grid.clone(), reports })
}

fn write_ablation(out: &Path, results: &[AblationResult], total: usize) -> crate::error::Result<()> {
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = ["row", "name"].iter().map(|s| s.to_string()).collect();
    header.extend(GRID_FLAGS.iter().map(|s| s.to_string()));
    for label in ["fov_70", "fov_90"] {
        for k in [1, 5, 10] {
            header.push(format!("{label}_r@{k}"));
        }
    }
    header.extend(["north_aligned_r@1".to_string(), "unknown_orientation_r@1".to_string()]);
    w.write_record(&header)?;
    let mark = |b: bool| if b { "1" } else { "0" }.to_string();
    for r in results {
        let g = &r.grid;
        let mut rec = vec![r.row.to_string(), g.name.clone()];
        rec.extend([g.q_shift, g.q_fov, g.r_rotate, g.c_shift, g.c_fov].map(mark));
        for (_, rep) in r.reports.iter().take(2) {
            for k in [1, 5, 10] {
                rec.push(format!("{:.4}", rep.r_at[&k]));
            }
        }
        for (_, rep) in r.reports.iter().skip(2) {
            rec.push(format!("{:.4}", rep.r1()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(out.join("ablation-rows.json"), results)?;
    #[derive(Serialize)]
    struct Progress {
        completed_rows: Vec<usize>,
        total_rows: usize,
        complete: bool,
    }
    let completed_rows: Vec<usize> = results.iter().map(|r| r.row).collect();
    let progress = Progress { complete: completed_rows.len() == total, completed_rows, total_rows: total };
    write_json(out.join("ablation.progress.json"), &progress)
}

fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.run.config)?;
    if let Some(seed) = args.run.seed {
        cfg.train.seed = seed;
    }
    let grid = parse_grid(&args.grid).map_err(Failure::config)?;
    let out = prepare_out(&mut cfg, args.run.out.as_deref(), args.run.output_root.as_deref())?;
    let records = cfg.dataset.load()?;
    let total = grid.len();
    let mut done: Vec<AblationResult> = Vec::with_capacity(total);
    if args.parallel {
        let results: Vec<crate::error::Result<AblationResult>> = std::thread::scope(|s| {
            let handles: Vec<_> =
                grid.iter().enumerate().map(|(i, g)| s.spawn({
                    let (cfg, records) = (&cfg, &records);
                    move || run_row(cfg, records, i + 1, g)
                })).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for r in results {
            match r {
                Ok(r) => done.push(r),
                Err(e) => {
                    write_ablation(&out, &done, total)?;
                    return Err(e.into());
                }
            }
        }
        write_ablation(&out, &done, total)?;
    } else {
        for (i, g) in grid.iter().enumerate() {
            let r = run_row(&cfg, &records, i + 1, g)?;
            eprintln!("ablation row {}/{total} ({}) done", i + 1, g.name);
            done.push(r);
            write_ablation(&out, &done, total)?;
        }
    }
    Ok(())
}
