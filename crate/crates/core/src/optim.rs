//! Optimisers, learning-rate schedules, clipping, the training loop and the
//! reparameterisation/learning-rate duality check.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use crate::blocks::{reparam_apply, Gain, Linear};
use crate::checkpoint;
use crate::data::{Batch, BatchSource};
use crate::error::{shape_err, Error, Result};
use crate::model::TransformerLM;
use crate::numerics::{ActivationKind, Graph, Tensor, Var};
use crate::params::{gaussian, tensor_rng};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    LinearDecay,
    CosineDecay,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::LinearDecay => "linear_decay",
            Schedule::CosineDecay => "cosine_decay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear_decay" => Some(Schedule::LinearDecay),
            "cosine_decay" => Some(Schedule::CosineDecay),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub schedule: Schedule,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub microbatch_size: usize,
    pub adamw: AdamWConfig,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    pub log_interval: u64,
    /// Number of fixed eval batches scored at each log row (0 disables).
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            schedule: Schedule::LinearDecay,
            warmup_frac: 0.05,
            total_steps: 1000,
            batch_size: 32,
            microbatch_size: 32,
            adamw: AdamWConfig::default(),
            clip: Some(1.0),
            seed: 0,
            log_interval: 50,
            eval_batches: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.microbatch_size == 0 || !self.batch_size.is_multiple_of(self.microbatch_size) {
            return err(format!("microbatch {} must divide batch {}", self.microbatch_size, self.batch_size));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return err(format!("warmup fraction {} outside [0, 0.5]", self.warmup_frac));
        }
        if self.total_steps == 0 || self.log_interval == 0 {
            return err("total steps and log interval must be positive".into());
        }
        if !(self.max_lr >= 0.0) {
            return err(format!("max_lr {} must be non-negative", self.max_lr));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return err("clip threshold must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `max_lr`, then linear or half-cosine decay to 0
/// at `total_steps`.
pub fn lr_at_step(cfg: &TrainConfig, step: u64) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::OutOfRange { what: "schedule step", index: step as usize, bound: total as usize + 1 });
    }
    let warmup = cfg.warmup_steps().min(total);
    if step < warmup {
        return Ok(cfg.max_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(cfg.max_lr);
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(match cfg.schedule {
        Schedule::LinearDecay => cfg.max_lr * (1.0 - p),
        Schedule::CosineDecay => cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
    })
}

fn check_shapes<S: Scalar>(op: &'static str, params: &[Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
    if params.len() != grads.len() {
        return shape_err(op, format!("{} parameters vs {} gradients", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return shape_err(op, format!("slot {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
    check_shapes("sgd_step", params, grads)?;
    let lr = S::of(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamWState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One AdamW update. Decoupled decay `p ← p·(1 − lr·wd)` is applied first
/// and only to slots with `decay[i]`; then the bias-corrected moment step.
pub fn adamw_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    decay: &[bool],
    state: &mut AdamWState<S>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_shapes("adamw_step", params, grads)?;
    if decay.len() != params.len() || state.m.len() != params.len() {
        return shape_err("adamw_step", "decay mask or optimiser state does not match the parameters");
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() - S::of(cfg.beta1.powi(t));
    let c2 = S::one() - S::of(cfg.beta2.powi(t));
    let (lr_s, eps) = (S::of(lr), S::of(cfg.eps));
    let shrink = S::one() - S::of(lr * cfg.weight_decay);
    for i in 0..params.len() {
        let (p, g) = (params[i].data_mut(), grads[i].data());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for j in 0..p.len() {
            if decay[i] && cfg.weight_decay != 0.0 {
                p[j] *= shrink;
            }
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / norm` when the global norm exceeds
/// `threshold`; returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let factor = S::of(threshold / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

// ── scalar trajectories ─────────────────────────────────────────────

/// Per-layer snapshot columns, in order.
pub const SNAPSHOT_FIELDS: [&str; 7] = ["value_ratio", "proj_ratio", "alpha_h", "beta_h", "gamma_h", "beta_ff", "beta_sa"];

pub fn snapshot_columns(layers: usize) -> Vec<String> {
    (1..=layers).flat_map(|l| SNAPSHOT_FIELDS.iter().map(move |f| format!("layer{l}.{f}"))).collect()
}

/// Current scalar parameters: `β/α` of reparameterised values and
/// projections, head means of the shaped scalars, and `β_FF`, `β_SA`.
/// Absent quantities are `None`.
pub fn scalar_trajectory_log<S: Scalar>(model: &TransformerLM<S>) -> Vec<Option<f64>> {
    let store = model.store();
    let scalar = |slot: usize| store.value(slot).data()[0].as_f64();
    let gain = |g: &Gain<usize>| match g {
        Gain::Fixed(v) => *v,
        Gain::Param(s) => scalar(*s),
    };
    let ratio = |l: &Linear<usize>| match l {
        Linear::Reparam { alpha, beta, .. } => Some(gain(beta) / gain(alpha)),
        _ => None,
    };
    let head_mean = |slot: Option<usize>| {
        slot.map(|s| {
            let t = store.value(s);
            t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.numel() as f64
        })
    };
    let mut row = Vec::new();
    for b in &model.layout().blocks {
        row.push(ratio(&b.attn.value));
        row.push(ratio(&b.attn.projection));
        row.push(head_mean(b.attn.alpha));
        row.push(head_mean(b.attn.beta));
        row.push(head_mean(b.attn.gamma));
        row.push(Some(gain(&b.beta_ff)));
        row.push(Some(gain(&b.beta_sa)));
    }
    row
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lr: f64,
    pub scalars: Vec<Option<f64>>,
}

/// Append-only training record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub scalar_columns: Vec<String>,
    pub rows: Vec<LogRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLog {
    pub fn new(scalar_columns: Vec<String>) -> Self {
        TrainLog { scalar_columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step || row.wall_seconds < last.wall_seconds {
                return Err(Error::Config(format!("log row for step {} is out of order", row.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV text. With `timed` the `wall_seconds` column is included; without
    /// it the output depends only on the computation and is reproducible
    /// byte for byte.
    pub fn to_csv(&self, timed: bool) -> String {
        let mut out = String::from("step");
        if timed {
            out.push_str(",wall_seconds");
        }
        out.push_str(",train_loss,eval_loss,lr");
        for c in &self.scalar_columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{}", r.step).expect("writing to a String");
            if timed {
                write!(out, ",{:.6}", r.wall_seconds).expect("writing to a String");
            }
            write!(out, ",{},{},{}", r.train_loss, cell(r.eval_loss), r.lr).expect("writing to a String");
            for s in &r.scalars {
                out.push(',');
                out.push_str(&cell(*s));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Worker threads for per-sequence gradients (1 = current thread).
    pub threads: usize,
    /// Written at every log row while the loss is finite.
    pub checkpoint: Option<PathBuf>,
    /// Print a line per log row to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
}

/// Mean loss over the source's first `count` eval batches.
pub fn eval_loss<S: Scalar>(model: &TransformerLM<S>, source: &dyn BatchSource, count: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    for i in 0..count {
        let Some(batch) = source.eval_batch(i) else { return Ok(None) };
        let batch = batch?;
        total += model.loss(&batch.inputs, &batch.targets, batch.batch, batch.seq_len)?;
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn non_finite(step: u64, last_good: &Option<PathBuf>) -> Error {
    Error::NonFiniteLoss { step, last_good: last_good.clone() }
}

/// Optimizer state bound to one model: AdamW moments, the decay mask and
/// an optional worker pool.
pub struct Trainer<'m, S: Scalar> {
    model: &'m mut TransformerLM<S>,
    cfg: TrainConfig,
    decay: Vec<bool>,
    state: AdamWState<S>,
    pool: Option<rayon::ThreadPool>,
}

impl<'m, S: Scalar> Trainer<'m, S> {
    pub fn new(model: &'m mut TransformerLM<S>, cfg: &TrainConfig, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let pool = if threads > 1 {
            let pool =
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Some(pool)
        } else {
            None
        };
        let decay = model.store().specs().iter().map(|s| s.role.decays()).collect();
        let state = AdamWState::new(model.store().values());
        Ok(Trainer { model, cfg: cfg.clone(), decay, state, pool })
    }

    pub fn model(&self) -> &TransformerLM<S> {
        self.model
    }

    /// Update `k` (1-based) on `batch`: microbatched gradients of the mean
    /// loss, clipping, then AdamW at `lr_at_step(k)`. Returns the batch loss
    /// and the rate used.
    pub fn step(&mut self, k: u64, batch: &Batch) -> Result<(f64, f64)> {
        let cfg = &self.cfg;
        if batch.batch != cfg.batch_size {
            return shape_err("train step", format!("source gave {} sequences, config expects {}", batch.batch, cfg.batch_size));
        }
        let denom = (batch.batch * batch.seq_len) as f64;
        let mut acc = self.model.zero_grads();
        for start_row in (0..batch.batch).step_by(cfg.microbatch_size) {
            let mb = batch.slice(start_row, cfg.microbatch_size);
            self.model.accumulate_grads(&mb.inputs, &mb.targets, mb.seq_len, denom, &mut acc, self.pool.as_ref())?;
        }
        if !acc.loss.is_finite() || acc.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "train step" });
        }
        if let Some(c) = cfg.clip {
            clip_global_norm(&mut acc.grads, c);
        }
        let lr = lr_at_step(cfg, k)?;
        adamw_step(self.model.store_mut().values_mut(), &acc.grads, &self.decay, &mut self.state, lr, &cfg.adamw)?;
        Ok((acc.loss, lr))
    }
}

/// Runs `cfg.total_steps` AdamW steps. Each step accumulates the mean-loss
/// gradient over microbatches, clips, and applies the scheduled rate; update
/// `k` (1-based) uses `lr_at_step(k)`.
pub fn train_loop<S: Scalar>(
    model: &mut TransformerLM<S>,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut log = TrainLog::new(snapshot_columns(model.config().layers));
    let (final_train_loss, final_eval_loss) = train_loop_logged(model, source, cfg, opts, &mut log)?;
    Ok(TrainOutcome { log, final_train_loss, final_eval_loss })
}

/// [`train_loop`] appending rows to a caller-owned log, which keeps the rows
/// written before a failure. Returns the final train and eval losses.
pub fn train_loop_logged<S: Scalar>(
    model: &mut TransformerLM<S>,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    log: &mut TrainLog,
) -> Result<(f64, Option<f64>)> {
    let mut trainer = Trainer::new(model, cfg, opts.threads)?;
    let mut last_good: Option<PathBuf> = None;
    let start = Instant::now();
    let mut final_eval = None;
    let mut loss = f64::NAN;
    for k in 1..=cfg.total_steps {
        let batch = source.train_batch(k - 1)?;
        let lr;
        (loss, lr) = match trainer.step(k, &batch) {
            Err(Error::NonFinite { .. }) => return Err(non_finite(k, &last_good)),
            other => other?,
        };

        if k == 1 || k % cfg.log_interval == 0 || k == cfg.total_steps {
            let model = trainer.model();
            let eval = match eval_loss(model, source, cfg.eval_batches) {
                Err(Error::NonFinite { .. }) => return Err(non_finite(k, &last_good)),
                other => other?,
            };
            final_eval = eval;
            let row = LogRow {
                step: k,
                wall_seconds: start.elapsed().as_secs_f64(),
                train_loss: loss,
                eval_loss: eval,
                lr,
                scalars: scalar_trajectory_log(model),
            };
            if opts.progress {
                eprintln!("step {k:>6}  loss {loss:.4}  eval {}  lr {lr:.3e}", cell(eval));
            }
            log.push(row)?;
            if let Some(path) = &opts.checkpoint {
                checkpoint::save(model, path)?;
                last_good = Some(path.clone());
            }
        }
    }
    Ok((loss, final_eval))
}

// ── duality oracle ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualityOptimizer {
    Sgd,
    AdamW,
}

impl DualityOptimizer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(DualityOptimizer::Sgd),
            "adamw" => Some(DualityOptimizer::AdamW),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DualityOptimizer::Sgd => "sgd",
            DualityOptimizer::AdamW => "adamw",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            DualityOptimizer::Sgd => 1e-10,
            DualityOptimizer::AdamW => 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityConfig {
    pub beta: f64,
    pub steps: usize,
    pub optimizer: DualityOptimizer,
    /// Rate of the reparameterised run.
    pub lr: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub samples: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl DualityConfig {
    pub fn new(optimizer: DualityOptimizer, beta: f64, steps: usize) -> Self {
        DualityConfig {
            beta,
            steps,
            optimizer,
            lr: match optimizer {
                DualityOptimizer::Sgd => 0.1,
                DualityOptimizer::AdamW => 1e-2,
            },
            tolerance: optimizer.default_tolerance(),
            seed: 0,
            samples: 16,
            d_in: 6,
            d_out: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualityReport {
    pub max_divergence: f64,
    /// Max-abs effective-weight difference after each step.
    pub per_step: Vec<f64>,
}

/// Toy regression loss `mean((gelu(h) − Y)²)` where `h = X·W` is already
/// on the graph.
fn toy_loss(g: &mut Graph<'_, f64>, h: Var, y: &Tensor<f64>) -> Result<Var> {
    let yv = g.input(y.clone());
    let a = g.activation(h, ActivationKind::Gelu)?;
    let r = g.sub(a, yv)?;
    let sq = g.mul(r, r)?;
    g.mean(sq)
}

/// Trains (a) `W` directly at rate `η·β²` (SGD) or `η·β` (AdamW) and (b)
/// `W = W₀ + β·V` with `V₀ = 0` at rate `η`, comparing effective weights
/// after every step.
pub fn duality_check(cfg: &DualityConfig) -> Result<DualityReport> {
    let mut rng = tensor_rng(cfg.seed, "duality.data");
    let x: Tensor<f64> = gaussian(&[cfg.samples, cfg.d_in], 1.0, &mut rng);
    let y: Tensor<f64> = gaussian(&[cfg.samples, cfg.d_out], 1.0, &mut rng);
    let w0: Tensor<f64> = gaussian(&[cfg.d_in, cfg.d_out], 0.5, &mut tensor_rng(cfg.seed, "duality.w0"));
    let init = w0.clone();

    let direct_lr = match cfg.optimizer {
        DualityOptimizer::Sgd => cfg.lr * cfg.beta * cfg.beta,
        DualityOptimizer::AdamW => cfg.lr * cfg.beta,
    };
    let adam = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: 0.0 };
    let mut direct = vec![w0.clone()];
    let mut delta = vec![Tensor::<f64>::zeros(w0.shape())];
    let mut state_a = AdamWState::new(&direct);
    let mut state_b = AdamWState::new(&delta);
    let no_decay = [false];
    let mut per_step = Vec::with_capacity(cfg.steps);
    let mut worst = 0.0f64;

    for step in 1..=cfg.steps {
        let ga = {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let w = g.param(&direct[0]);
            let h = g.matmul(xv, w)?;
            let loss = toy_loss(&mut g, h, &y)?;
            g.backward(loss)?.take(w).expect("parameter gradient")
        };
        let gb = {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let wi = g.constant(&init);
            let dv = g.param(&delta[0]);
            let h = reparam_apply(&mut g, xv, wi, dv, &Gain::Fixed(1.0), &Gain::Fixed(cfg.beta))?;
            let loss = toy_loss(&mut g, h, &y)?;
            g.backward(loss)?.take(dv).expect("parameter gradient")
        };
        match cfg.optimizer {
            DualityOptimizer::Sgd => {
                sgd_step(&mut direct, &[ga], direct_lr)?;
                sgd_step(&mut delta, &[gb], cfg.lr)?;
            }
            DualityOptimizer::AdamW => {
                adamw_step(&mut direct, &[ga], &no_decay, &mut state_a, direct_lr, &adam)?;
                adamw_step(&mut delta, &[gb], &no_decay, &mut state_b, cfg.lr, &adam)?;
            }
        }
        let mut eff = init.clone();
        for (e, &dv) in eff.data_mut().iter_mut().zip(delta[0].data()) {
            *e += cfg.beta * dv;
        }
        let div = eff.max_abs_diff(&direct[0]);
        per_step.push(div);
        worst = worst.max(div);
        if !(div <= cfg.tolerance) {
            return Err(Error::DualityDivergence { step, divergence: div, tolerance: cfg.tolerance });
        }
    }
    Ok(DualityReport { max_divergence: worst, per_step })
}
