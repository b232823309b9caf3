use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use simpleformer::blocks::BlockKind;
use simpleformer::model::{param_count_analytic, ModelConfig};
use simpleformer::Model64;
use simpleformer_cli::commands::{self, BenchArgs, ProbeKind, SigpropArgs};
use simpleformer_cli::config::RunConfig;
use simpleformer_cli::{run, CliError, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK};

fn tiny(dir: &Path, kind: &str, extra: &str) -> PathBuf {
    let text = format!(
        "[model]\nkind = {kind}\nlayers = 2\nd = 16\nheads = 2\nvocab = 12\n\
         [train]\nsteps = 12\nbatch_size = 4\nmicrobatch_size = 2\nlog_interval = 4\neval_batches = 1\nmax_lr = 3e-3\n\
         [data]\nseq_len = 8\n[output]\ndir = {}\n{extra}",
        dir.join("run").display()
    );
    let path = dir.join(format!("{kind}.cfg"));
    fs::write(&path, text).unwrap();
    path
}

fn cfg(path: &Path) -> RunConfig {
    commands::load_config(path).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn train_writes_all_outputs_with_increasing_steps() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "sas", "");
    assert_eq!(run(["simpleformer", "train", &s(&path)]), EXIT_OK);
    let out = dir.path().join("run");
    for f in ["log.csv", "timed_log.csv", "model.ckpt", "resolved_config"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 4, 8, 12]);
    assert!(fs::read_to_string(out.join("timed_log.csv")).unwrap().starts_with("step,wall_seconds,train_loss"));
    let resolved = RunConfig::parse(&fs::read_to_string(out.join("resolved_config")).unwrap()).unwrap();
    assert_eq!(resolved, cfg(&path));
    let model: Model64 = simpleformer::checkpoint::load(&resolved.model, &out.join("model.ckpt")).unwrap();
    assert_eq!(model.config(), &resolved.model);
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "preln", "");
    let log = dir.path().join("run/log.csv");
    assert_eq!(run(["simpleformer", "train", &s(&path)]), EXIT_OK);
    let first = fs::read(&log).unwrap();
    assert_eq!(run(["simpleformer", "train", &s(&path)]), EXIT_OK);
    assert_eq!(first, fs::read(&log).unwrap());
}

#[test]
fn corpus_source_trains() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "let x = 1;\n".repeat(300)).unwrap();
    let text = format!(
        "[model]\nlayers = 1\nd = 8\nheads = 2\n[train]\nsteps = 3\nbatch_size = 2\nlog_interval = 1\neval_batches = 1\nprecision = f32\n\
         [data]\nsource = corpus\npath = {}\nseq_len = 8\n[output]\ndir = {}\ncheckpoint = false\n",
        corpus.display(),
        dir.path().join("run").display()
    );
    let path = dir.path().join("c.cfg");
    fs::write(&path, text).unwrap();
    let summary = commands::train(&cfg(&path)).unwrap();
    assert_eq!(summary.log.rows.len(), 3);
    assert!(summary.final_eval_loss.unwrap() < 6.0);
    assert!(!dir.path().join("run/model.ckpt").exists());
}

#[test]
fn divergence_exits_numerically_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "preln", "");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("max_lr = 3e-3", "max_lr = 1e300\nwarmup_frac = 0\nclip = none")
        .replace("eval_batches = 1", "eval_batches = 0")
        .replace("log_interval = 4", "log_interval = 1");
    fs::write(&path, text).unwrap();
    let err = commands::train(&cfg(&path)).unwrap_err();
    assert!(matches!(err, CliError::Core(simpleformer::Error::NonFiniteLoss { step: 2, .. })), "{err}");
    assert_eq!(err.exit_code(), EXIT_NUMERIC);
    let log = fs::read_to_string(dir.path().join("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().starts_with("1,"));
    assert_eq!(run(["simpleformer", "train", &s(&path)]), EXIT_NUMERIC);
}

#[test]
fn invalid_config_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "[model]\nlayers = many\n").unwrap();
    assert_eq!(run(["simpleformer", "train", &s(&path)]), EXIT_CONFIG);
    assert_eq!(run(["simpleformer", "train", "/nonexistent.cfg"]), EXIT_CONFIG);
    assert_eq!(run(["simpleformer", "frobnicate"]), EXIT_CONFIG);
    assert_eq!(run(["simpleformer", "--help"]), EXIT_OK);
    match commands::load_config(&path) {
        Err(CliError::Config(e)) => assert_eq!(e.to_string(), "line 2: [model] layers: expected a non-negative integer, got `many`"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sigprop_row_count_contract() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "sas", "");
    let out = dir.path().join("sig.csv");
    let args = SigpropArgs { depths: vec![1, 3], seeds: vec![0, 1], probe: ProbeKind::Gaussian, batch: 2, out: Some(out.clone()) };
    let reports = commands::sigprop(&cfg(&path), &args).unwrap();
    assert_eq!(reports.len(), 4);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * (1 + 3));
    assert_eq!(csv.lines().next().unwrap(), "depth,seed,layer,rms,mean_cosine,rank_collapse");
    let tokens = SigpropArgs { probe: ProbeKind::Tokens, depths: vec![1], ..args };
    let r = commands::sigprop(&cfg(&path), &tokens).unwrap();
    assert_eq!(r[0].layers.len(), 1);
    assert!(r[0].layers[0].finite);
    assert_eq!(run(["simpleformer", "sigprop", &s(&path), "--depths", "2", "--seeds", "0"]), EXIT_OK);
    assert!(dir.path().join("run/sigprop.csv").exists());
}

#[test]
fn params_match_instantiated_models_and_compare_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "sas", "");
    let c = cfg(&path);
    let report = commands::params(&c, Some(BlockKind::PreLn)).unwrap();
    assert_eq!(report.total as usize, Model64::new(c.model.clone()).unwrap().num_parameters());
    let (kind, other, reduction) = report.against.unwrap();
    assert_eq!(kind, BlockKind::PreLn);
    assert_eq!(other, param_count_analytic(&commands::with_kind(&c.model, BlockKind::PreLn)).unwrap().total);
    assert!((reduction - (1.0 - report.total as f64 / other as f64)).abs() < 1e-15);
    let csv = fs::read_to_string(dir.path().join("run/params.csv")).unwrap();
    assert!(csv.ends_with(&format!("total,,{}\n", report.total)));
}

#[test]
fn params_on_a_hand_countable_config() {
    // L=1, d=2, H=1, d_ff=2, V=3, preln, tied:
    // embed 6, ln1 2, W_Q/W_K/W_V/W_O 4 each, ln2 2, W_in 4 + b_in 2, W_out 4 + b_out 2, final norm 2
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.cfg");
    fs::write(&path, format!("[model]\nlayers = 1\nd = 2\nheads = 1\nd_ff = 2\nvocab = 3\n[output]\ndir = {}\n", dir.path().display()))
        .unwrap();
    let report = commands::params(&cfg(&path), None).unwrap();
    assert_eq!(report.total, 6 + 2 + 16 + 2 + 6 + 6 + 2);
    assert_eq!(report.total as usize, Model64::new(ModelConfig::new(BlockKind::PreLn, 1, 2, 1, 2, 3, 64)).unwrap().num_parameters());
}

#[test]
fn bench_reports_each_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny(dir.path(), "preln", "");
    let args = BenchArgs { kinds: vec![BlockKind::PreLn, BlockKind::SasP], steps: 2, warmup: 1 };
    let rows = commands::bench(&cfg(&path), &args).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.mean_step_seconds > 0.0);
        assert!((r.tokens_per_second * r.mean_step_seconds - 32.0).abs() < 1e-6);
    }
    assert_eq!(commands::bench_checks(&rows).len(), 1);
    let csv = fs::read_to_string(dir.path().join("run/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(commands::bench(&cfg(&path), &BenchArgs { steps: 0, ..args }).is_err());
}

#[test]
fn duality_command_exit_codes() {
    assert_eq!(run(["simpleformer", "duality", "--beta", "0.5", "--optimizer", "sgd"]), EXIT_OK);
    assert_eq!(run(["simpleformer", "duality", "--beta", "1", "--steps", "10"]), EXIT_OK);
    assert_eq!(run(["simpleformer", "duality", "--beta", "0.5", "--optimizer", "adamw"]), EXIT_OK);
    assert_eq!(run(["simpleformer", "duality", "--tolerance=-1"]), EXIT_CHECK);
    assert_eq!(run(["simpleformer", "duality", "--optimizer", "lion"]), EXIT_CONFIG);
}

#[test]
fn plot_draws_one_polyline_per_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "step,wall_seconds,train_loss\n1,0.1,3.0\n2,0.2,2.5\n3,0.4,2.0\n").unwrap();
    fs::write(&b, "step,wall_seconds,train_loss\n1,0.3,3.1\n3,0.9,2.2\n").unwrap();
    let out = dir.path().join("p.svg");
    let code = run(["simpleformer", "plot", &s(&a), &s(&b), "--x", "wall-seconds", "--y", "train_loss", "--out", &s(&out)]);
    assert_eq!(code, EXIT_OK);
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
    assert!(svg.contains(">wall_seconds</text>"));
}

#[test]
fn plot_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "step,train_loss\n").unwrap();
    let out = dir.path().join("p.svg");
    assert!(matches!(simpleformer_cli::plot::plot(std::slice::from_ref(&empty), "step", "train_loss", &out), Err(CliError::Plot(_))));
    assert!(!out.exists());
    let a = dir.path().join("a.csv");
    fs::write(&a, "step,train_loss\n1,2\n").unwrap();
    match simpleformer_cli::plot::plot(&[a], "step", "eval_loss", &out) {
        Err(CliError::Plot(m)) => assert!(m.contains("no column named `eval_loss`")),
        other => panic!("{other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_simpleformer");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let out = Command::new(bin).args(["params", &s(&bad)]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2: unknown key `width` in [model]"));
    let out = Command::new(bin).arg("keys").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    for k in simpleformer_cli::config::KEYS {
        assert!(text.contains(k.key), "{}", k.key);
    }
}
