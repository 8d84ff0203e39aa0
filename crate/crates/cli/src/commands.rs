//! The five subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gaitadapt_core::data::{export_stream, fingerprint, generate_domain_stream, FrameShape};
use gaitadapt_core::eval::{backtest as backtest_model, EvalReport};
use gaitadapt_core::report::{accuracy_curves, heat_grid, load_csv, save_csv, save_png, summary};
use gaitadapt_core::rng::seeded;
use gaitadapt_core::trainer::{load_checkpoint, run_step, save_checkpoint, TrainState};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{clear, contents, manifest_path, version, CheckpointEntry, DirLock, ExperimentManifest, MANIFEST};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TRAIN_LOG: &str = "train.log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY: &str = "summary.txt";
pub const HEAT_GRID: &str = "heatgrid.png";
pub const CURVES: &str = "curves.png";
pub const COMPARE_MD: &str = "compare.md";
pub const COMPARE_CSV: &str = "compare.csv";

#[derive(Debug, Parser)]
#[command(name = "gaitadapt", version, about = "Continual gait recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain stream on disk.
    Synth(SynthArgs),
    /// Train through every step of a stream, checkpointing after each.
    Train(TrainArgs),
    /// Evaluate every step checkpoint of a run on all test sets seen so far.
    Backtest(RunArg),
    /// Compare the final-step accuracies of runs over the same stream.
    Compare(CompareArgs),
    /// Re-render the summary and plots of a backtested run.
    Report(RunArg),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub domains: usize,
    #[arg(long, default_value_t = 10)]
    pub ids: usize,
    #[arg(long, default_value_t = 6)]
    pub seqs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 44)]
    pub width: usize,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file of training and stream keys.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory. An existing run with the same configuration resumes.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the configuration and stream, print the resolved config, and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Discard an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArg {
    /// Run directory or its manifest.json.
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories or manifests; the first is the reference.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Backtest(a) => backtest(&a.run),
        Command::Compare(a) => compare(&a),
        Command::Report(a) => report(&a.run),
    }
}

/// Claims `dir`, emptying it under `force` and refusing otherwise.
fn claim_empty(dir: &Path, force: bool) -> anyhow::Result<DirLock> {
    let lock = DirLock::acquire(dir)?;
    if !contents(dir)?.is_empty() {
        if !force {
            return Err(CliError::NotEmpty(dir.to_path_buf()).into());
        }
        clear(dir)?;
    }
    Ok(lock)
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let _lock = claim_empty(&a.out, a.force)?;
    let shape = FrameShape { frames: a.frames, height: a.height, width: a.width };
    let stream = generate_domain_stream(a.domains, a.ids, a.seqs, shape, &mut seeded(a.seed, "stream"))?;
    let written = export_stream(&a.out, &stream)?;
    let n: usize = stream.iter().map(|s| s.train.len() + s.gallery.len() + s.probe.len()).sum();
    log::info!("wrote {n} sequences ({} files) to {}", written.len(), a.out.display());
    println!("{}", a.out.join(gaitadapt_core::data::io::MANIFEST).display());
    Ok(())
}

fn iteration_line<T: Serialize>(record: &T) -> anyhow::Result<String> {
    let mut v = serde_json::to_value(record)?;
    let obj = v.as_object_mut().expect("records serialize to objects");
    if let Some(Value::Object(c)) = obj.remove("components") {
        obj.extend(c);
    }
    let mut line = json!({ "event": "iteration" });
    line.as_object_mut().unwrap().extend(obj.clone());
    Ok(serde_json::to_string(&line)?)
}

fn step_line<T: Serialize>(summary: &T) -> anyhow::Result<String> {
    let mut line = json!({ "event": "step" });
    if let Value::Object(o) = serde_json::to_value(summary)? {
        line.as_object_mut().unwrap().extend(o);
    }
    Ok(serde_json::to_string(&line)?)
}

/// Drops log lines of steps after `keep`, left by an interrupted step.
fn truncate_log(path: &Path, keep: usize) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).with_context(|| format!("corrupt line in {}", path.display()))?;
        if v["step"].as_u64().is_some_and(|s| s as usize <= keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let stream = cfg.stream.load(&cfg.train)?;
    let trainable = stream.iter().filter(|s| s.is_trainable()).count();
    if a.dry_run {
        print!("{}", cfg.to_toml());
        log::info!("configuration valid; stream has {} entries, {trainable} trainable", stream.len());
        return Ok(());
    }
    let out = a.out.as_deref().ok_or_else(|| CliError::Config("--out is required unless --dry-run is given".into()))?;
    let fp = fingerprint(&stream);
    let _lock = DirLock::acquire(out)?;
    let existing = contents(out)?;
    let mut manifest = if existing.is_empty() || a.force {
        clear(out)?;
        let mut m = ExperimentManifest {
            version: version(),
            seed: cfg.train.seed,
            method: cfg.train.method_config().label().to_string(),
            config: cfg.train.clone(),
            stream: cfg.stream.clone(),
            stream_fingerprint: fp.clone(),
            checkpoints: Vec::new(),
            log: Some(TRAIN_LOG.into()),
            reports: Vec::new(),
            backtest_seconds: None,
            files: Vec::new(),
        };
        fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
        fs::write(out.join(TRAIN_LOG), "")?;
        for f in [CONFIG_SNAPSHOT, TRAIN_LOG, MANIFEST] {
            m.register(f);
        }
        m.write(out)?;
        m
    } else {
        let m = ExperimentManifest::read(&out.join(MANIFEST)).map_err(|_| CliError::NotEmpty(out.to_path_buf()))?;
        if m.config != cfg.train || m.stream != cfg.stream || m.stream_fingerprint != fp {
            return Err(CliError::Config(format!(
                "{} holds a run with a different configuration or stream; pass --force to replace it",
                out.display()
            ))
            .into());
        }
        m
    };

    let mut state = match manifest.checkpoints.last() {
        Some(c) => {
            let (state, saved) = load_checkpoint(&out.join(&c.path))?;
            if saved != cfg.train {
                return Err(CliError::Data(format!("checkpoint {} was written with another configuration", c.path)).into());
            }
            log::info!("resuming after step {}", state.step);
            state
        }
        None => TrainState::new(&cfg.train)?,
    };
    truncate_log(&out.join(TRAIN_LOG), state.step)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    for step in stream.iter().filter(|s| s.is_trainable()).skip(state.step) {
        log::info!("step {}/{trainable}: `{}` ({} training sequences)", state.step + 1, step.name, step.train.len());
        let t0 = Instant::now();
        let logged = state.telemetry.iterations.len();
        state = run_step(state, step, &cfg.train)?;
        let seconds = t0.elapsed().as_secs_f64();
        let path = save_checkpoint(&ckpt_dir, &state, &cfg.train)?;
        let mut log = fs::OpenOptions::new().append(true).open(out.join(TRAIN_LOG))?;
        for r in &state.telemetry.iterations[logged..] {
            writeln!(log, "{}", iteration_line(r)?)?;
        }
        if let Some(s) = state.telemetry.steps.last() {
            writeln!(log, "{}", step_line(s)?)?;
        }
        let p = rel(&path, out);
        manifest.checkpoints.push(CheckpointEntry { step: state.step, path: p.clone(), seconds });
        manifest.register(p);
        manifest.write(out)?;
        log::info!("step {} done in {seconds:.1}s", state.step);
    }
    println!("{}", out.join(MANIFEST).display());
    Ok(())
}

fn write_report_files(dir: &Path, report: &EvalReport, manifest: &mut ExperimentManifest) -> anyhow::Result<String> {
    save_csv(report, &dir.join(REPORT_CSV))?;
    let text = summary(report);
    fs::write(dir.join(SUMMARY), &text)?;
    save_png(&heat_grid(report), &dir.join(HEAT_GRID))?;
    save_png(&accuracy_curves(report), &dir.join(CURVES))?;
    manifest.reports = [REPORT_CSV, SUMMARY, HEAT_GRID, CURVES].map(String::from).to_vec();
    for f in [REPORT_CSV, SUMMARY, HEAT_GRID, CURVES] {
        manifest.register(f);
    }
    manifest.write(dir)?;
    Ok(text)
}

fn open_run(arg: &Path) -> anyhow::Result<(PathBuf, ExperimentManifest)> {
    let path = manifest_path(arg);
    let manifest = ExperimentManifest::read(&path)?;
    let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((dir, manifest))
}

pub fn backtest(run: &Path) -> anyhow::Result<()> {
    let (dir, mut m) = open_run(run)?;
    let _lock = DirLock::acquire(&dir)?;
    if m.checkpoints.is_empty() {
        return Err(CliError::Data(format!("{} has no completed steps", dir.display())).into());
    }
    let stream = m.stream.load(&m.config)?;
    if fingerprint(&stream) != m.stream_fingerprint {
        return Err(CliError::Data("the stream no longer matches the one the run was trained on".into()).into());
    }
    let t0 = Instant::now();
    let mut report = EvalReport::default();
    let mut entries = m.checkpoints.clone();
    entries.sort_by_key(|c| c.step);
    for (i, c) in entries.iter().enumerate() {
        if c.step != i + 1 {
            return Err(CliError::Data(format!("checkpoint for step {} is missing from the manifest", i + 1)).into());
        }
        let path = dir.join(&c.path);
        if !path.exists() {
            return Err(CliError::Data(format!("checkpoint for step {} is missing: {}", c.step, path.display())).into());
        }
        let (state, _) = load_checkpoint(&path)?;
        report.extend(backtest_model(&state.model, &stream, c.step)?);
    }
    m.backtest_seconds = Some(t0.elapsed().as_secs_f64());
    print!("{}", write_report_files(&dir, &report, &mut m)?);
    Ok(())
}

pub fn report(run: &Path) -> anyhow::Result<()> {
    let (dir, mut m) = open_run(run)?;
    let _lock = DirLock::acquire(&dir)?;
    let csv = dir.join(REPORT_CSV);
    if !csv.exists() {
        return Err(CliError::Data(format!("{} has no {REPORT_CSV}; run `backtest` first", dir.display())).into());
    }
    let report = load_csv(&csv)?;
    print!("{}", write_report_files(&dir, &report, &mut m)?);
    Ok(())
}

/// Final-step aggregates of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub steps: usize,
    pub source: f64,
    pub target: f64,
    pub average: f64,
    pub delta_source: f64,
    pub delta_target: f64,
    pub delta_average: f64,
}

#[derive(Debug, Serialize)]
struct CompareManifest {
    version: String,
    seed: u64,
    stream_fingerprint: String,
    runs: Vec<String>,
    files: Vec<String>,
}

pub fn compare_rows(runs: &[(String, ExperimentManifest, EvalReport)]) -> anyhow::Result<Vec<CompareRow>> {
    let (_, first, _) = runs.first().ok_or_else(|| CliError::Config("nothing to compare".into()))?;
    for (name, m, _) in runs {
        if m.seed != first.seed {
            return Err(CliError::Config(format!("`{name}` uses seed {} but the reference uses {}", m.seed, first.seed)).into());
        }
        if m.stream_fingerprint != first.stream_fingerprint {
            return Err(CliError::Config(format!("`{name}` was trained on a different stream than the reference")).into());
        }
    }
    let mut rows = Vec::new();
    for (name, m, r) in runs {
        let step = r.last_step().ok_or_else(|| CliError::Data(format!("`{name}` has an empty report")))?;
        let get = |v: Option<f64>, what: &str| v.ok_or_else(|| CliError::Data(format!("`{name}` has no {what} accuracy")));
        rows.push(CompareRow {
            run: name.clone(),
            method: m.method.clone(),
            steps: step,
            source: get(r.source(step), "source")?,
            target: get(r.target(step), "target")?,
            average: get(r.average(step), "average")?,
            delta_source: 0.0,
            delta_target: 0.0,
            delta_average: 0.0,
        });
    }
    let (s0, t0, a0) = (rows[0].source, rows[0].target, rows[0].average);
    for r in &mut rows {
        (r.delta_source, r.delta_target, r.delta_average) = (r.source - s0, r.target - t0, r.average - a0);
    }
    Ok(rows)
}

pub fn markdown(rows: &[CompareRow]) -> String {
    let mut s = String::from("| run | method | steps | source | target | average | Δ source | Δ target | Δ average |\n");
    s.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:+.2} | {:+.2} | {:+.2} |",
            r.run, r.method, r.steps, r.source, r.target, r.average, r.delta_source, r.delta_target, r.delta_average
        );
    }
    s
}

pub fn compare(a: &CompareArgs) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for arg in &a.runs {
        let (dir, m) = open_run(arg)?;
        let csv = dir.join(REPORT_CSV);
        if !csv.exists() {
            return Err(CliError::Data(format!("{} has no {REPORT_CSV}; run `backtest` first", dir.display())).into());
        }
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push((name, m, load_csv(&csv)?));
    }
    let rows = compare_rows(&runs)?;
    let _lock = claim_empty(&a.out, a.force)?;
    let md = markdown(&rows);
    fs::write(a.out.join(COMPARE_MD), &md)?;
    let mut w = csv::Writer::from_path(a.out.join(COMPARE_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let cm = CompareManifest {
        version: version(),
        seed: runs[0].1.seed,
        stream_fingerprint: runs[0].1.stream_fingerprint.clone(),
        runs: a.runs.iter().map(|p| manifest_path(p).display().to_string()).collect(),
        files: [COMPARE_CSV, COMPARE_MD, MANIFEST].map(String::from).to_vec(),
    };
    fs::write(a.out.join(MANIFEST), serde_json::to_string_pretty(&cm)? + "\n")?;
    print!("{md}");
    Ok(())
}
