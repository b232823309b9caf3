use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use simpleformer::blocks::{BlockConfig, BlockKind};
use simpleformer::data::{load_corpus, synthetic_copy_task, BatchSource, Corpus, CorpusSource};
use simpleformer::model::{matmul_flops_analytic, param_count_analytic, ModelConfig, TransformerLM};
use simpleformer::optim::{
    duality_check, snapshot_columns, train_loop_logged, DualityConfig, DualityOptimizer, DualityReport, TrainLog, TrainOptions, Trainer,
};
use simpleformer::sigprop::{depth_scan_at_init, reports_to_csv, Probe, SigpropReport};
use simpleformer::{configured_threads, DType, Scalar};

use crate::config::{DataSource, RunConfig};
use crate::CliError;

pub const LOG_FILE: &str = "log.csv";
pub const TIMED_LOG_FILE: &str = "timed_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_FILE: &str = "resolved_config";

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text).map_err(CliError::Config)
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

enum Source {
    Corpus(Corpus),
    Copy,
}

impl Source {
    fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(match &cfg.data.source {
            DataSource::Corpus(path) => Source::Corpus(load_corpus(path)?),
            DataSource::Copy => Source::Copy,
        })
    }

    fn with<R>(&self, cfg: &RunConfig, f: impl FnOnce(&dyn BatchSource) -> R) -> Result<R, CliError> {
        let (b, t, seed) = (cfg.train.batch_size, cfg.data.seq_len, cfg.train.seed);
        Ok(match self {
            Source::Corpus(corpus) => f(&CorpusSource { corpus, batch: b, seq_len: t, seed }),
            Source::Copy => f(&synthetic_copy_task(b, t, cfg.model.vocab, seed)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
}

/// Trains per `cfg`, writing the resolved config, the logs and the
/// checkpoint under `cfg.output.dir`. The logs are written even when
/// training stops on a non-finite loss.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let dir = &cfg.output.dir;
    write(&dir.join(RESOLVED_FILE), &cfg.resolved())?;
    let source = Source::open(cfg)?;
    match cfg.precision {
        DType::F32 => train_as::<f32>(cfg, &source),
        DType::F64 => train_as::<f64>(cfg, &source),
    }
}

fn train_as<S: Scalar>(cfg: &RunConfig, source: &Source) -> Result<TrainSummary, CliError> {
    let dir = &cfg.output.dir;
    let mut model = TransformerLM::<S>::new(cfg.model.clone())?;
    let opts = TrainOptions {
        threads: configured_threads(),
        checkpoint: cfg.output.checkpoint.then(|| dir.join(CHECKPOINT_FILE)),
        progress: cfg.output.progress,
    };
    let mut log = TrainLog::new(snapshot_columns(cfg.model.layers));
    let result = source.with(cfg, |src| train_loop_logged(&mut model, src, &cfg.train, &opts, &mut log))?;
    write(&dir.join(LOG_FILE), &log.to_csv(false))?;
    write(&dir.join(TIMED_LOG_FILE), &log.to_csv(true))?;
    let (final_train_loss, final_eval_loss) = result?;
    Ok(TrainSummary { log, final_train_loss, final_eval_loss })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// I.i.d. Gaussian rows fed straight to the blocks.
    Gaussian,
    /// Uniform random token windows through the embedding.
    Tokens,
}

#[derive(Clone, Debug)]
pub struct SigpropArgs {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub probe: ProbeKind,
    pub batch: usize,
    pub out: Option<PathBuf>,
}

/// Depth scan at init; writes `{out}/sigprop.csv` unless `args.out` is set.
pub fn sigprop(cfg: &RunConfig, args: &SigpropArgs) -> Result<Vec<SigpropReport>, CliError> {
    let t = cfg.data.seq_len;
    let probe = match args.probe {
        ProbeKind::Gaussian => Probe::gaussian(args.batch, t, cfg.model.d, cfg.train.seed),
        ProbeKind::Tokens => {
            let task = synthetic_copy_task(args.batch, t + t % 2, cfg.model.vocab, cfg.train.seed)?;
            let tokens: Vec<usize> = task.batch_at(0).inputs.chunks(t + t % 2).flat_map(|row| row[..t].to_vec()).collect();
            Probe::Tokens { tokens, batch: args.batch, seq_len: t }
        }
    };
    let reports = match cfg.precision {
        DType::F32 => depth_scan_at_init::<f32>(&cfg.model, &args.depths, &args.seeds, &probe)?,
        DType::F64 => depth_scan_at_init::<f64>(&cfg.model, &args.depths, &args.seeds, &probe)?,
    };
    let path = args.out.clone().unwrap_or_else(|| cfg.output.dir.join("sigprop.csv"));
    write(&path, &reports_to_csv(&reports))?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsReport {
    pub total: u64,
    pub table: String,
    pub csv: String,
    /// `(kind, total, reduction relative to it)` when compared.
    pub against: Option<(BlockKind, u64, f64)>,
}

/// `cfg` with the block defaults of `kind`.
pub fn with_kind(cfg: &ModelConfig, kind: BlockKind) -> ModelConfig {
    let mut out = cfg.clone();
    out.block = BlockConfig::new(kind, cfg.d, cfg.d_ff, cfg.heads, cfg.layers);
    out
}

pub fn params(cfg: &RunConfig, against: Option<BlockKind>) -> Result<ParamsReport, CliError> {
    let m = &cfg.model;
    let count = param_count_analytic(m)?;
    let flops = matmul_flops_analytic(m, cfg.data.seq_len)?;
    let mut csv = String::from("name,shape,count\n");
    let mut table = String::new();
    let width = count.breakdown.iter().map(|(n, _, _)| n.len()).max().unwrap_or(4).max(4);
    for (name, shape, n) in &count.breakdown {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(csv, "{name},{},{n}", dims.join("x")).expect("string write");
        writeln!(table, "{name:<width$}  {:>12}  {n:>12}", dims.join("x")).expect("string write");
    }
    writeln!(csv, "total,,{}", count.total).expect("string write");
    writeln!(table, "{:<width$}  {:>12}  {:>12}", "total", "", count.total).expect("string write");
    writeln!(
        table,
        "kind {}  forward matmul FLOPs per sequence (T={}): {}  attention share {:.3}",
        m.block.kind,
        flops.seq_len,
        flops.total,
        flops.attention_share()
    )
    .expect("string write");
    let against = match against {
        Some(kind) => {
            let other = param_count_analytic(&with_kind(m, kind))?.total;
            let reduction = 1.0 - count.total as f64 / other as f64;
            writeln!(table, "{kind} total {other}  reduction {:.2}%", 100.0 * reduction).expect("string write");
            Some((kind, other, reduction))
        }
        None => None,
    };
    write(&cfg.output.dir.join("params.csv"), &csv)?;
    Ok(ParamsReport { total: count.total, table, csv, against })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: BlockKind,
    pub mean_step_seconds: f64,
    pub tokens_per_second: f64,
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub kinds: Vec<BlockKind>,
    pub steps: usize,
    pub warmup: usize,
}

/// Times optimizer steps of each kind on copy-task batches at the
/// dimensions of `cfg`; writes `{out}/bench.csv`.
pub fn bench(cfg: &RunConfig, args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    if args.steps == 0 {
        return Err(CliError::Usage("bench needs at least one timed step".into()));
    }
    let mut rows = Vec::new();
    for &kind in &args.kinds {
        let model_cfg = with_kind(&cfg.model, kind);
        let secs = match cfg.precision {
            DType::F32 => time_steps::<f32>(cfg, model_cfg, args)?,
            DType::F64 => time_steps::<f64>(cfg, model_cfg, args)?,
        };
        let mean = secs / args.steps as f64;
        let tokens = (cfg.train.batch_size * cfg.data.seq_len) as f64;
        rows.push(BenchRow { kind, mean_step_seconds: mean, tokens_per_second: tokens / mean });
    }
    let mut csv = String::from("kind,mean_step_seconds,tokens_per_second\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.kind, r.mean_step_seconds, r.tokens_per_second).expect("string write");
    }
    write(&cfg.output.dir.join("bench.csv"), &csv)?;
    Ok(rows)
}

fn time_steps<S: Scalar>(cfg: &RunConfig, model_cfg: ModelConfig, args: &BenchArgs) -> Result<f64, CliError> {
    let t = cfg.data.seq_len + cfg.data.seq_len % 2;
    let task = synthetic_copy_task(cfg.train.batch_size, t, model_cfg.vocab, cfg.train.seed)?;
    let mut model = TransformerLM::<S>::new(model_cfg)?;
    let mut train = cfg.train.clone();
    train.total_steps = (args.warmup + args.steps) as u64;
    let mut trainer = Trainer::new(&mut model, &train, configured_threads())?;
    let mut elapsed = 0.0;
    for k in 1..=train.total_steps {
        let mut batch = task.batch_at(k);
        if t != cfg.data.seq_len {
            batch = truncate(&batch, cfg.data.seq_len);
        }
        let start = Instant::now();
        trainer.step(k, &batch)?;
        if k as usize > args.warmup {
            elapsed += start.elapsed().as_secs_f64();
        }
    }
    Ok(elapsed)
}

fn truncate(b: &simpleformer::data::Batch, t: usize) -> simpleformer::data::Batch {
    let rows = |v: &[usize]| -> Vec<usize> { v.chunks(b.seq_len).flat_map(|r| r[..t].to_vec()).collect() };
    simpleformer::data::Batch { batch: b.batch, seq_len: t, inputs: rows(&b.inputs), targets: rows(&b.targets) }
}

/// Direction checks on a bench run: SAS-P steps faster than Pre-LN and SAS
/// processes at least as many tokens per second. Kinds that were not run
/// are skipped.
pub fn bench_checks(rows: &[BenchRow]) -> Vec<(String, bool)> {
    let find = |k: BlockKind| rows.iter().find(|r| r.kind == k);
    let mut out = Vec::new();
    if let (Some(p), Some(s)) = (find(BlockKind::PreLn), find(BlockKind::SasP)) {
        out.push((
            format!("sasp step {:.4}s < preln step {:.4}s", s.mean_step_seconds, p.mean_step_seconds),
            s.mean_step_seconds < p.mean_step_seconds,
        ));
    }
    if let (Some(p), Some(s)) = (find(BlockKind::PreLn), find(BlockKind::Sas)) {
        out.push((
            format!("sas {:.1} tok/s >= preln {:.1} tok/s", s.tokens_per_second, p.tokens_per_second),
            s.tokens_per_second >= p.tokens_per_second,
        ));
    }
    out
}

pub fn duality(cfg: &DualityConfig) -> Result<DualityReport, CliError> {
    Ok(duality_check(cfg)?)
}

pub fn parse_optimizer(s: &str) -> Result<DualityOptimizer, String> {
    DualityOptimizer::parse(s).ok_or_else(|| format!("unknown optimizer `{s}` (sgd or adamw)"))
}

pub fn parse_kind(s: &str) -> Result<BlockKind, String> {
    BlockKind::parse(s).ok_or_else(|| format!("unknown block kind `{s}`"))
}
