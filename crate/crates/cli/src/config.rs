//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! kind = sas
//! layers = 4
//!
//! [train]
//! steps = 500   # trailing comments start with " #"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use simpleformer::attention::AttentionVariant;
use simpleformer::blocks::{BlockKind, GainSpec, LinearMode, WeightInit, INIT_STD};
use simpleformer::model::ModelConfig;
use simpleformer::numerics::{ActivationKind, MaskMode, NormKind};
use simpleformer::optim::{Schedule, TrainConfig};
use simpleformer::DType;

pub const SECTIONS: [&str; 5] = ["model", "block", "train", "data", "output"];

pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { section, key, doc }
}

/// Every accepted key, in echo order.
pub const KEYS: &[KeyDoc] = &[
    k("model", "kind", "block kind: preln, parallel, vskipinit, sas, sasp, sasp_nonorm"),
    k("model", "layers", "number of blocks"),
    k("model", "d", "model width, even and divisible by heads"),
    k("model", "heads", "attention heads"),
    k("model", "d_ff", "MLP hidden width (default 4*d)"),
    k("model", "vocab", "vocabulary size; must be 256 for byte corpora"),
    k("model", "max_seq_len", "longest supported sequence (default data.seq_len)"),
    k("model", "tie_embeddings", "share the embedding with the output layer"),
    k("model", "seed", "parameter initialisation seed"),
    k("block", "activation", "relu, gelu or leaky_relu:<slope>"),
    k("block", "norm", "rms, layer or none"),
    k("block", "norm_eps", "normalisation epsilon"),
    k("block", "mask", "causal or none"),
    k("block", "attention", "standard, vskipinit or shaped"),
    k("block", "query_init", "W_Q init: zeros, identity, orthogonal or gaussian:<std>"),
    k("block", "head_alpha", "initial per-head identity weight"),
    k("block", "head_beta", "initial per-head softmax weight"),
    k("block", "head_gamma", "initial per-head centering weight"),
    k("block", "alpha_sa", "attention skip gain, fixed:<v> or trainable:<v>"),
    k("block", "beta_sa", "attention branch gain"),
    k("block", "alpha_ff", "MLP skip gain"),
    k("block", "beta_ff", "MLP branch gain"),
    k("block", "alpha_comb", "outer skip gain of parallel blocks"),
    k("block", "value", "value weight: identity, dense or reparam"),
    k("block", "value_init", "value init for dense/reparam"),
    k("block", "value_alpha", "reparam gain on the fixed value init"),
    k("block", "value_beta", "reparam gain on the trainable value delta"),
    k("block", "projection", "projection weight: identity, dense or reparam"),
    k("block", "projection_init", "projection init for dense/reparam"),
    k("block", "projection_alpha", "reparam gain on the fixed projection init"),
    k("block", "projection_beta", "reparam gain on the trainable projection delta"),
    k("block", "first_value", "first-block value weight: same, identity, dense or reparam"),
    k("block", "first_value_init", "first-block value init for dense/reparam"),
    k("block", "first_value_alpha", "first-block reparam gain on the fixed init"),
    k("block", "first_value_beta", "first-block reparam gain on the delta"),
    k("train", "precision", "f32 or f64"),
    k("train", "steps", "optimizer steps"),
    k("train", "batch_size", "sequences per step"),
    k("train", "microbatch_size", "sequences per gradient pass; divides batch_size"),
    k("train", "max_lr", "peak learning rate"),
    k("train", "schedule", "linear_decay or cosine_decay"),
    k("train", "warmup_frac", "fraction of steps spent warming up, in [0, 0.5]"),
    k("train", "beta1", "AdamW first-moment decay"),
    k("train", "beta2", "AdamW second-moment decay"),
    k("train", "eps", "AdamW epsilon"),
    k("train", "weight_decay", "decoupled weight decay on matrices"),
    k("train", "clip", "global gradient-norm clip, or none"),
    k("train", "seed", "batch sampling seed"),
    k("train", "log_interval", "steps between log rows"),
    k("train", "eval_batches", "eval batches scored per log row (0 disables)"),
    k("data", "source", "corpus or copy"),
    k("data", "path", "corpus file (source = corpus)"),
    k("data", "seq_len", "tokens per training sequence"),
    k("output", "dir", "output directory"),
    k("output", "checkpoint", "write model.ckpt at every log row"),
    k("output", "progress", "print log rows to stderr"),
];

pub fn doc(section: &str, key: &str) -> Option<&'static str> {
    KEYS.iter().find(|d| d.section == section && d.key == key).map(|d| d.doc)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Corpus(PathBuf),
    Copy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint: bool,
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: DType,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

struct Entry {
    value: String,
    line: usize,
}

struct Reader {
    entries: BTreeMap<(&'static str, &'static str), Entry>,
    errors: Vec<ConfigError>,
}

impl Reader {
    fn scan(text: &str) -> Self {
        let mut r = Reader { entries: BTreeMap::new(), errors: Vec::new() };
        let mut section: Option<&'static str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = match raw.find(" #") {
                Some(p) => &raw[..p],
                None => raw,
            };
            let body = body.trim();
            if body.is_empty() || body.starts_with('#') || body.starts_with(';') {
                continue;
            }
            if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                match SECTIONS.iter().find(|s| **s == name.trim()) {
                    Some(s) => section = Some(s),
                    None => {
                        r.error(line, format!("unknown section [{}]", name.trim()));
                        section = None;
                    }
                }
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                r.error(line, format!("expected `key = value`, got `{body}`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section else {
                r.error(line, format!("key `{key}` outside a known section"));
                continue;
            };
            let Some(known) = KEYS.iter().find(|d| d.section == sec && d.key == key) else {
                r.error(line, format!("unknown key `{key}` in [{sec}]"));
                continue;
            };
            if let Some(prev) = r.entries.get(&(sec, known.key)) {
                let msg = format!("duplicate key `{key}` in [{sec}] (first set on line {})", prev.line);
                r.error(line, msg);
                continue;
            }
            r.entries.insert((sec, known.key), Entry { value: value.to_string(), line });
        }
        r
    }

    fn error(&mut self, line: usize, message: String) {
        self.errors.push(ConfigError { line: Some(line), message });
    }

    fn line(&self, sec: &'static str, key: &'static str) -> Option<usize> {
        self.entries.get(&(sec, key)).map(|e| e.line)
    }

    fn opt<T>(&mut self, sec: &'static str, key: &'static str, expect: &str, parse: impl Fn(&str) -> Option<T>) -> Option<T> {
        let e = self.entries.get(&(sec, key))?;
        match parse(&e.value) {
            Some(v) => Some(v),
            None => {
                let msg = format!("[{sec}] {key}: expected {expect}, got `{}`", e.value);
                let line = e.line;
                self.error(line, msg);
                None
            }
        }
    }

    fn get<T>(&mut self, sec: &'static str, key: &'static str, default: T, expect: &str, parse: impl Fn(&str) -> Option<T>) -> T {
        self.opt(sec, key, expect, parse).unwrap_or(default)
    }

    fn usize(&mut self, sec: &'static str, key: &'static str, default: usize) -> usize {
        self.get(sec, key, default, "a non-negative integer", |s| s.parse().ok())
    }

    fn u64(&mut self, sec: &'static str, key: &'static str, default: u64) -> u64 {
        self.get(sec, key, default, "a non-negative integer", |s| s.parse().ok())
    }

    fn f64(&mut self, sec: &'static str, key: &'static str, default: f64) -> f64 {
        self.get(sec, key, default, "a finite number", parse_f64)
    }

    fn bool(&mut self, sec: &'static str, key: &'static str, default: bool) -> bool {
        self.get(sec, key, default, "true or false", |s| s.parse().ok())
    }

    fn gain(&mut self, sec: &'static str, key: &'static str, default: GainSpec) -> GainSpec {
        self.get(sec, key, default, "fixed:<v> or trainable:<v>", |s| GainSpec::parse(s).filter(|g| g.init.is_finite()))
    }

    fn weight_init(&mut self, sec: &'static str, key: &'static str, default: WeightInit) -> WeightInit {
        self.get(sec, key, default, "zeros, identity, orthogonal or gaussian:<std>", WeightInit::parse)
    }

    /// Applies `<prefix>`, `<prefix>_init`, `_alpha`, `_beta` to `current`.
    /// `None` stands for "same as the other blocks".
    fn linear(&mut self, keys: [&'static str; 4], current: Option<LinearMode>, allow_same: bool) -> Option<LinearMode> {
        let [mode_key, init_key, alpha_key, beta_key] = keys;
        let expect = if allow_same { "same, identity, dense or reparam" } else { "identity, dense or reparam" };
        let mut mode = current;
        let known = |s: &str| matches!(s, "identity" | "dense" | "reparam") || (allow_same && s == "same");
        if let Some(name) = self.opt("block", mode_key, expect, |s| known(s).then(|| s.to_string())) {
            mode = match name.as_str() {
                "same" => None,
                "identity" => Some(LinearMode::Identity),
                "dense" => Some(match current {
                    Some(LinearMode::Dense { init }) => LinearMode::Dense { init },
                    _ => LinearMode::DENSE,
                }),
                _ => Some(match current {
                    Some(m @ LinearMode::Reparam { .. }) => m,
                    _ => LinearMode::FIRST_VALUE,
                }),
            };
        }
        let fallback = WeightInit::Gaussian { std: INIT_STD };
        if let Some(line) = self.line("block", init_key) {
            let w = self.weight_init("block", init_key, fallback);
            match &mut mode {
                Some(LinearMode::Dense { init }) | Some(LinearMode::Reparam { init, .. }) => *init = w,
                _ => self.error(line, format!("[block] {init_key} applies only when {mode_key} is dense or reparam")),
            }
        }
        for (key, is_alpha) in [(alpha_key, true), (beta_key, false)] {
            if let Some(line) = self.line("block", key) {
                let g = self.gain("block", key, GainSpec::fixed(1.0));
                match &mut mode {
                    Some(LinearMode::Reparam { alpha, beta, .. }) => *(if is_alpha { alpha } else { beta }) = g,
                    _ => self.error(line, format!("[block] {key} applies only when {mode_key} is reparam")),
                }
            }
        }
        mode
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_activation(s: &str) -> Option<ActivationKind> {
    match s {
        "relu" => Some(ActivationKind::Relu),
        "gelu" => Some(ActivationKind::Gelu),
        _ => {
            let slope = parse_f64(s.strip_prefix("leaky_relu:")?.trim())?;
            Some(ActivationKind::LeakyRelu { slope })
        }
    }
}

pub fn activation_name(a: ActivationKind) -> String {
    match a {
        ActivationKind::Relu => "relu".into(),
        ActivationKind::Gelu => "gelu".into(),
        ActivationKind::LeakyRelu { slope } => format!("leaky_relu:{slope}"),
    }
}

pub fn parse_norm(s: &str) -> Option<NormKind> {
    match s {
        "rms" => Some(NormKind::Rms),
        "layer" => Some(NormKind::Layer),
        "none" => Some(NormKind::None),
        _ => None,
    }
}

pub fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::Rms => "rms",
        NormKind::Layer => "layer",
        NormKind::None => "none",
    }
}

fn parse_mask(s: &str) -> Option<MaskMode> {
    match s {
        "causal" => Some(MaskMode::Causal),
        "none" => Some(MaskMode::None),
        _ => None,
    }
}

fn mask_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Causal => "causal",
        MaskMode::None => "none",
    }
}

fn parse_precision(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

fn precision_name(p: DType) -> &'static str {
    match p {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn linear_fields(m: Option<LinearMode>, allow_same: bool) -> Vec<String> {
    match m {
        None => vec![if allow_same { "same".into() } else { "identity".into() }],
        Some(LinearMode::Identity) => vec!["identity".into()],
        Some(LinearMode::Dense { init }) => vec!["dense".into(), init.to_string()],
        Some(LinearMode::Reparam { init, alpha, beta }) => {
            vec!["reparam".into(), init.to_string(), alpha.to_string(), beta.to_string()]
        }
    }
}

const VALUE_KEYS: [&str; 4] = ["value", "value_init", "value_alpha", "value_beta"];
const PROJECTION_KEYS: [&str; 4] = ["projection", "projection_init", "projection_alpha", "projection_beta"];
const FIRST_VALUE_KEYS: [&str; 4] = ["first_value", "first_value_init", "first_value_alpha", "first_value_beta"];

impl RunConfig {
    /// Either a fully validated config or every error found, in line order.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
        let mut r = Reader::scan(text);

        let kind = r.get("model", "kind", BlockKind::PreLn, "a block kind", BlockKind::parse);
        let layers = r.usize("model", "layers", 2);
        let d = r.usize("model", "d", 64);
        let heads = r.usize("model", "heads", 4);
        let d_ff = r.usize("model", "d_ff", 4 * d);
        let vocab = r.usize("model", "vocab", 256);
        let seq_len = r.usize("data", "seq_len", 64);
        let max_seq_len = r.usize("model", "max_seq_len", seq_len);
        let mut model = ModelConfig::new(kind, layers, d, heads, d_ff, vocab, max_seq_len);
        model.tie_embeddings = r.bool("model", "tie_embeddings", true);
        model.seed = r.u64("model", "seed", 0);

        let b = &mut model.block;
        b.activation = r.get("block", "activation", b.activation, "relu, gelu or leaky_relu:<slope>", parse_activation);
        b.norm = r.get("block", "norm", b.norm, "rms, layer or none", parse_norm);
        b.norm_eps = r.f64("block", "norm_eps", b.norm_eps);
        b.mask = r.get("block", "mask", b.mask, "causal or none", parse_mask);
        b.variant = r.get("block", "attention", b.variant, "standard, vskipinit or shaped", AttentionVariant::parse);
        b.query_init = r.weight_init("block", "query_init", b.query_init);
        b.head_scalars = (
            r.f64("block", "head_alpha", b.head_scalars.0),
            r.f64("block", "head_beta", b.head_scalars.1),
            r.f64("block", "head_gamma", b.head_scalars.2),
        );
        b.gains.alpha_sa = r.gain("block", "alpha_sa", b.gains.alpha_sa);
        b.gains.beta_sa = r.gain("block", "beta_sa", b.gains.beta_sa);
        b.gains.alpha_ff = r.gain("block", "alpha_ff", b.gains.alpha_ff);
        b.gains.beta_ff = r.gain("block", "beta_ff", b.gains.beta_ff);
        b.gains.alpha_comb = r.gain("block", "alpha_comb", b.gains.alpha_comb);
        b.value = r.linear(VALUE_KEYS, Some(b.value), false).unwrap_or(LinearMode::Identity);
        b.projection = r.linear(PROJECTION_KEYS, Some(b.projection), false).unwrap_or(LinearMode::Identity);
        b.first_value = r.linear(FIRST_VALUE_KEYS, b.first_value, true);

        let defaults = TrainConfig::default();
        let precision = r.get("train", "precision", DType::F64, "f32 or f64", parse_precision);
        let batch_size = r.usize("train", "batch_size", defaults.batch_size);
        let train = TrainConfig {
            max_lr: r.f64("train", "max_lr", defaults.max_lr),
            schedule: r.get("train", "schedule", defaults.schedule, "linear_decay or cosine_decay", Schedule::parse),
            warmup_frac: r.f64("train", "warmup_frac", defaults.warmup_frac),
            total_steps: r.u64("train", "steps", defaults.total_steps),
            batch_size,
            microbatch_size: r.usize("train", "microbatch_size", batch_size),
            adamw: simpleformer::optim::AdamWConfig {
                beta1: r.f64("train", "beta1", defaults.adamw.beta1),
                beta2: r.f64("train", "beta2", defaults.adamw.beta2),
                eps: r.f64("train", "eps", defaults.adamw.eps),
                weight_decay: r.f64("train", "weight_decay", defaults.adamw.weight_decay),
            },
            clip: r.get("train", "clip", defaults.clip, "a positive number or none", |s| {
                if s == "none" {
                    Some(None)
                } else {
                    parse_f64(s).map(Some)
                }
            }),
            seed: r.u64("train", "seed", defaults.seed),
            log_interval: r.u64("train", "log_interval", defaults.log_interval),
            eval_batches: r.usize("train", "eval_batches", defaults.eval_batches),
        };

        let source = match r
            .get("data", "source", "copy".to_string(), "corpus or copy", |s| matches!(s, "corpus" | "copy").then(|| s.to_string()))
        {
            s if s == "corpus" => match r.entries.get(&("data", "path")) {
                Some(e) => DataSource::Corpus(PathBuf::from(&e.value)),
                None => {
                    let line = r.line("data", "source").unwrap_or(0);
                    r.error(line, "[data] source = corpus needs a path".into());
                    DataSource::Copy
                }
            },
            _ => {
                if let Some(line) = r.line("data", "path") {
                    r.error(line, "[data] path applies only when source = corpus".into());
                }
                DataSource::Copy
            }
        };
        let data = DataConfig { source, seq_len };
        let output = OutputConfig {
            dir: r.entries.get(&("output", "dir")).map(|e| PathBuf::from(&e.value)).unwrap_or_else(|| PathBuf::from("out")),
            checkpoint: r.bool("output", "checkpoint", true),
            progress: r.bool("output", "progress", false),
        };

        let mut errors = r.errors;
        let mut global = |m: String| errors.push(ConfigError { line: None, message: m });
        if let Err(e) = model.validate() {
            global(format!("[model]/[block]: {e}"));
        }
        if let Err(e) = train.validate() {
            global(format!("[train]: {e}"));
        }
        if seq_len == 0 {
            global("[data] seq_len must be at least 1".into());
        } else if seq_len > model.max_seq_len {
            global(format!("[data] seq_len {seq_len} exceeds [model] max_seq_len {}", model.max_seq_len));
        }
        match data.source {
            DataSource::Corpus(_) if model.vocab != simpleformer::data::BYTE_VOCAB => {
                global(format!("[model] vocab must be {} for a byte corpus, got {}", simpleformer::data::BYTE_VOCAB, model.vocab))
            }
            DataSource::Copy if !seq_len.is_multiple_of(2) => global(format!("[data] copy task needs an even seq_len, got {seq_len}")),
            _ => {}
        }
        if errors.is_empty() {
            Ok(RunConfig { model, train, precision, data, output })
        } else {
            errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
            Err(ConfigErrors(errors))
        }
    }

    fn values(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let b = &m.block;
        let t = &self.train;
        let mut out: Vec<(&'static str, &'static str, String)> = vec![
            ("model", "kind", b.kind.name().into()),
            ("model", "layers", m.layers.to_string()),
            ("model", "d", m.d.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "d_ff", m.d_ff.to_string()),
            ("model", "vocab", m.vocab.to_string()),
            ("model", "max_seq_len", m.max_seq_len.to_string()),
            ("model", "tie_embeddings", m.tie_embeddings.to_string()),
            ("model", "seed", m.seed.to_string()),
            ("block", "activation", activation_name(b.activation)),
            ("block", "norm", norm_name(b.norm).into()),
            ("block", "norm_eps", b.norm_eps.to_string()),
            ("block", "mask", mask_name(b.mask).into()),
            ("block", "attention", b.variant.name().into()),
            ("block", "query_init", b.query_init.to_string()),
            ("block", "head_alpha", b.head_scalars.0.to_string()),
            ("block", "head_beta", b.head_scalars.1.to_string()),
            ("block", "head_gamma", b.head_scalars.2.to_string()),
            ("block", "alpha_sa", b.gains.alpha_sa.to_string()),
            ("block", "beta_sa", b.gains.beta_sa.to_string()),
            ("block", "alpha_ff", b.gains.alpha_ff.to_string()),
            ("block", "beta_ff", b.gains.beta_ff.to_string()),
            ("block", "alpha_comb", b.gains.alpha_comb.to_string()),
        ];
        for (keys, mode, same) in
            [(VALUE_KEYS, Some(b.value), false), (PROJECTION_KEYS, Some(b.projection), false), (FIRST_VALUE_KEYS, b.first_value, true)]
        {
            for (key, v) in keys.iter().zip(linear_fields(mode, same)) {
                out.push(("block", key, v));
            }
        }
        out.extend([
            ("train", "precision", precision_name(self.precision).into()),
            ("train", "steps", t.total_steps.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "microbatch_size", t.microbatch_size.to_string()),
            ("train", "max_lr", t.max_lr.to_string()),
            ("train", "schedule", t.schedule.name().into()),
            ("train", "warmup_frac", t.warmup_frac.to_string()),
            ("train", "beta1", t.adamw.beta1.to_string()),
            ("train", "beta2", t.adamw.beta2.to_string()),
            ("train", "eps", t.adamw.eps.to_string()),
            ("train", "weight_decay", t.adamw.weight_decay.to_string()),
            ("train", "clip", t.clip.map_or("none".into(), |c| c.to_string())),
            ("train", "seed", t.seed.to_string()),
            ("train", "log_interval", t.log_interval.to_string()),
            ("train", "eval_batches", t.eval_batches.to_string()),
        ]);
        match &self.data.source {
            DataSource::Corpus(p) => {
                out.push(("data", "source", "corpus".into()));
                out.push(("data", "path", p.display().to_string()));
            }
            DataSource::Copy => out.push(("data", "source", "copy".into())),
        }
        out.extend([
            ("data", "seq_len", self.data.seq_len.to_string()),
            ("output", "dir", self.output.dir.display().to_string()),
            ("output", "checkpoint", self.output.checkpoint.to_string()),
            ("output", "progress", self.output.progress.to_string()),
        ]);
        out
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn resolved(&self) -> String {
        let values = self.values();
        let mut out = String::new();
        for sec in SECTIONS {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{sec}]\n"));
            for (s, key, v) in values.iter().filter(|(s, _, _)| *s == sec) {
                out.push_str(&format!("# {}\n{key} = {v}\n", doc(s, key).unwrap_or("")));
            }
        }
        out
    }
}

/// The documented key list as text.
pub fn reference() -> String {
    let mut out = String::new();
    for sec in SECTIONS {
        out.push_str(&format!("[{sec}]\n"));
        for d in KEYS.iter().filter(|d| d.section == sec) {
            out.push_str(&format!("  {:<18} {}\n", d.key, d.doc));
        }
    }
    out
}
