use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaitadapt_cli::manifest::{ExperimentManifest, LOCK, MANIFEST};
use gaitadapt_core::eval::{backtest, EvalReport};
use gaitadapt_core::report::load_csv;
use gaitadapt_core::trainer::load_checkpoint;
use serde_json::Value;

fn gaitadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitadapt")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
preset = "desk"
sequence_length = 4
frame_height = 16
frame_width = 12
channels = [3, 4]
parts = 4
repository_size = 4
identities_per_batch = 2
samples_per_identity = 2
iterations_per_step = 3
domains = 2
ids_per_domain = 3
seqs_per_id = 3
"#;

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(config: &Path, out: &Path) -> Output {
    gaitadapt(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn log_lines(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("train.log.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn files_under(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

#[test]
fn synth_writes_every_sequence_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("data");
    let args = ["synth", "--out", out.to_str().unwrap(), "--seed", "7", "--frames", "2", "--height", "16", "--width", "12"];
    ok(gaitadapt(&args));
    // subject/condition/view directories holding frames
    let seq_dirs: BTreeSet<PathBuf> = files_under(&out)
        .into_iter()
        .filter(|f| f.ends_with(".png"))
        .map(|f| Path::new(&f).parent().unwrap().to_path_buf())
        .collect();
    assert_eq!(seq_dirs.len(), 180);
    let first = fs::read(out.join("stream.json")).unwrap();

    let refused = gaitadapt(&args);
    assert_eq!(code(&refused), 2, "{}", stderr(&refused));
    assert!(stderr(&refused).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    ok(gaitadapt(&forced));
    assert_eq!(fs::read(out.join("stream.json")).unwrap(), first);
}

#[test]
fn dry_run_validates_without_writing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "");
    let o = ok(gaitadapt(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("iterations_per_step = 3"));
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1);
}

#[test]
fn config_errors_name_the_key() {
    let d = tempfile::tempdir().unwrap();
    for (extra, key) in [("learning_rat = 0.1\n", "learning_rat"), ("lr_decay = -1.0\n", "lr_decay"), ("parts = 3\n", "parts")] {
        let cfg = write_config(d.path(), "bad.toml", extra);
        let o = gaitadapt(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
        assert_eq!(code(&o), 2, "{extra}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{extra}: {}", stderr(&o));
    }
}

#[test]
fn missing_data_directory_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "preset = \"desk\"\ndata_dir = \"nowhere\"\n").unwrap();
    let o = gaitadapt(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_with_numerical_failure() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "learning_rate = 1e300\n");
    let o = train(&cfg, &d.path().join("run"));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn train_backtest_report_cycle() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "method = \"GaitAdapter\"\n");
    let run = d.path().join("run");
    ok(train(&cfg, &run));

    let m = ExperimentManifest::read(&run.join(MANIFEST)).unwrap();
    assert_eq!(m.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(m.method, "GaitAdapter");

    let lines = log_lines(&run);
    let iterations: Vec<&Value> = lines.iter().filter(|v| v["event"] == "iteration").collect();
    assert_eq!(iterations.len(), 6);
    for v in &iterations {
        for key in ["id", "triplet", "distill", "repository", "edsn", "total", "lr"] {
            assert!(v[key].is_number(), "{key} missing in {v}");
        }
    }
    assert_eq!(lines.iter().filter(|v| v["event"] == "step").count(), 2);

    let o = ok(gaitadapt(&["backtest", run.to_str().unwrap()]));
    assert!(String::from_utf8(o.stdout).unwrap().contains("source"));
    let m = ExperimentManifest::read(&run.join(MANIFEST)).unwrap();
    let listed: BTreeSet<String> = m.files.iter().cloned().collect();
    let mut on_disk = files_under(&run);
    on_disk.remove(LOCK);
    assert_eq!(listed, on_disk, "manifest and directory disagree");

    // the CSV reproduces an independent in-process backtest exactly
    let stream = m.stream.load(&m.config).unwrap();
    let mut expected = EvalReport::default();
    for c in &m.checkpoints {
        let (state, _) = load_checkpoint(&run.join(&c.path)).unwrap();
        expected.extend(backtest(&state.model, &stream, c.step).unwrap());
    }
    let parsed = load_csv(&run.join("report.csv")).unwrap();
    assert_eq!(parsed.entries, expected.entries);
    let (steps, sets, matrix) = parsed.accuracy_matrix();
    assert_eq!((steps.len(), sets.len()), (2, 2));
    assert!(matrix[0][0].is_some() && matrix[0][1].is_none());
    assert!(matrix[1].iter().all(Option::is_some));

    fs::remove_file(run.join("heatgrid.png")).unwrap();
    ok(gaitadapt(&["report", run.join(MANIFEST).to_str().unwrap()]));
    assert!(run.join("heatgrid.png").exists());
}

#[test]
fn sft_and_gait_adapter_logs_share_columns_at_step_one() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("sft");
    let b = d.path().join("ga");
    ok(train(&write_config(d.path(), "a.toml", "method = \"SFT\"\n"), &a));
    ok(train(&write_config(d.path(), "b.toml", "method = \"GaitAdapter\"\n"), &b));
    let first = |run: &Path| log_lines(run).into_iter().find(|v| v["event"] == "iteration").unwrap();
    let (sa, sb) = (first(&a), first(&b));
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&sa), keys(&sb));
    for key in ["distill", "repository", "edsn"] {
        assert!(sa[key].is_null());
        assert_eq!(sb[key].as_f64(), Some(0.0));
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "");
    let full = d.path().join("full");
    let cut = d.path().join("cut");
    ok(train(&cfg, &full));
    ok(train(&cfg, &cut));

    // roll `cut` back to its state after step 1, as if killed during step 2
    let mut m = ExperimentManifest::read(&cut.join(MANIFEST)).unwrap();
    let last = m.checkpoints.pop().unwrap();
    fs::remove_file(cut.join(&last.path)).unwrap();
    m.files.retain(|f| *f != last.path);
    m.write(&cut).unwrap();
    ok(train(&cfg, &cut));

    for run in [&full, &cut] {
        ok(gaitadapt(&["backtest", run.to_str().unwrap()]));
    }
    assert_eq!(fs::read(full.join("report.csv")).unwrap(), fs::read(cut.join("report.csv")).unwrap());
    assert_eq!(
        fs::read(full.join("checkpoints/step-002.ckpt")).unwrap(),
        fs::read(cut.join("checkpoints/step-002.ckpt")).unwrap()
    );
    assert_eq!(log_lines(&full), log_lines(&cut));
}

#[test]
fn changed_config_refuses_without_force() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    ok(train(&write_config(d.path(), "a.toml", ""), &run));
    let other = write_config(d.path(), "b.toml", "seed = 5\n");
    assert_eq!(code(&train(&other, &run)), 2);
    ok(gaitadapt(&["train", "--config", other.to_str().unwrap(), "--out", run.to_str().unwrap(), "--force"]));
    assert_eq!(ExperimentManifest::read(&run.join(MANIFEST)).unwrap().seed, 5);
}

#[test]
fn missing_checkpoint_names_the_step() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    ok(train(&write_config(d.path(), "c.toml", ""), &run));
    fs::remove_file(run.join("checkpoints/step-002.ckpt")).unwrap();
    let o = gaitadapt(&["backtest", run.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("step 2"), "{}", stderr(&o));
}

#[test]
fn locked_run_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    fs::create_dir(&run).unwrap();
    fs::write(run.join(LOCK), "1").unwrap();
    let o = train(&write_config(d.path(), "c.toml", ""), &run);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn compare_guards_fairness_and_reports_deltas() {
    let d = tempfile::tempdir().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    ok(train(&write_config(d.path(), "a.toml", "method = \"SFT\"\n"), &a));
    ok(train(&write_config(d.path(), "b.toml", "method = \"GaitAdapter\"\n"), &b));
    ok(train(&write_config(d.path(), "c.toml", "seed = 9\n"), &c));
    for run in [&a, &b, &c] {
        ok(gaitadapt(&["backtest", run.to_str().unwrap()]));
    }

    let out = d.path().join("cmp");
    let o = ok(gaitadapt(&["compare", a.to_str().unwrap(), a.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let md = String::from_utf8(o.stdout).unwrap();
    assert_eq!(md.lines().count(), 4);
    assert!(md.lines().skip(2).all(|l| l.ends_with("| +0.00 | +0.00 | +0.00 |")), "{md}");

    let out2 = d.path().join("cmp2");
    ok(gaitadapt(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out2.to_str().unwrap()]));
    let csv = fs::read_to_string(out2.join("compare.csv")).unwrap();
    assert!(csv.starts_with("run,method,steps,source,target,average,delta_source,delta_target,delta_average\n"));
    assert!(csv.contains(",SFT,") && csv.contains(",GaitAdapter,"));
    let listed: Value = serde_json::from_str(&fs::read_to_string(out2.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(listed["files"].as_array().unwrap().len(), files_under(&out2).len());

    let o = gaitadapt(&["compare", a.to_str().unwrap(), c.to_str().unwrap(), "--out", d.path().join("cmp3").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"));
}
