//! Signal-propagation diagnostics at a fixed parameter state.

use std::fmt::Write as _;

use crate::blocks::{default_beta_ff, BlockKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerLM};
use crate::numerics::{SeqLayout, Tensor};
use crate::params::{gaussian, tensor_rng};
use crate::scalar::Scalar;

/// `‖X − 1·x̄ᵀ‖_F / ‖X‖_F` with `x̄` the mean token; 0 when every token is
/// identical.
pub fn rank_collapse_metric<S: Scalar>(x: &Tensor<S>) -> Result<f64> {
    let (t, d) = (x.rows(), x.cols());
    let total: f64 = x.data().iter().map(|v| v.as_f64().powi(2)).sum();
    if total == 0.0 {
        return Err(Error::Config("rank collapse of a zero matrix is undefined".into()));
    }
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.as_f64() / t as f64;
        }
    }
    let mut resid = 0.0;
    for r in 0..t {
        for (m, v) in mean.iter().zip(x.row(r)) {
            resid += (v.as_f64() - m).powi(2);
        }
    }
    Ok((resid / total).sqrt().min(1.0))
}

/// Mean over tokens of each token's root-mean-square.
pub fn mean_token_rms<S: Scalar>(x: &Tensor<S>) -> f64 {
    let d = x.cols() as f64;
    let t = x.rows();
    (0..t).map(|r| (x.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d).sqrt()).sum::<f64>() / t as f64
}

/// `[T × T]` cosine similarities between token rows; zero rows give 0.
pub fn cosine_map<S: Scalar>(x: &Tensor<S>) -> Tensor<f64> {
    let t = x.rows();
    let rows: Vec<Vec<f64>> = (0..t).map(|r| x.row(r).iter().map(|v| v.as_f64()).collect()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
            out.set(i, j, c);
        }
    }
    out
}

/// Mean cosine over token pairs `i < j`; 1 for a single token.
pub fn mean_pairwise_cosine<S: Scalar>(x: &Tensor<S>) -> f64 {
    let t = x.rows();
    if t < 2 {
        return 1.0;
    }
    let map = cosine_map(x);
    let mut total = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            total += map.get(i, j);
        }
    }
    total / (t * (t - 1) / 2) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    /// 1-based block index.
    pub layer: usize,
    pub rms: f64,
    pub mean_cosine: f64,
    pub rank_collapse: f64,
    /// False when the block output was non-finite or could not be computed.
    pub finite: bool,
}

impl LayerStats {
    fn flagged(layer: usize) -> Self {
        LayerStats { layer, rms: f64::NAN, mean_cosine: f64::NAN, rank_collapse: f64::NAN, finite: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigpropReport {
    pub depth: usize,
    pub seed: u64,
    /// Hex SHA-256 of the model architecture.
    pub config_digest: String,
    pub layers: Vec<LayerStats>,
}

pub const CSV_HEADER: &str = "depth,seed,layer,rms,mean_cosine,rank_collapse";

impl SigpropReport {
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            writeln!(out, "{},{},{},{},{},{}", self.depth, self.seed, l.layer, l.rms, l.mean_cosine, l.rank_collapse)
                .expect("writing to a String");
        }
        out
    }

    pub fn last(&self) -> Option<&LayerStats> {
        self.layers.last()
    }
}

pub fn reports_to_csv(reports: &[SigpropReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

/// Inputs fed to the block stack.
#[derive(Clone, Debug)]
pub enum Probe {
    /// Token windows, embedded with positions by the model.
    Tokens { tokens: Vec<usize>, batch: usize, seq_len: usize },
    /// I.i.d. standard Gaussian rows `[batch·seq_len × d]` used directly as
    /// block-stack input (no embedding, no positions).
    Embeddings { x: Tensor<f64>, batch: usize, seq_len: usize },
}

impl Probe {
    pub fn gaussian(batch: usize, seq_len: usize, d: usize, seed: u64) -> Self {
        let x = gaussian(&[batch * seq_len, d], 1.0, &mut tensor_rng(seed, "sigprop.probe"));
        Probe::Embeddings { x, batch, seq_len }
    }

    pub fn layout(&self) -> SeqLayout {
        match self {
            Probe::Tokens { batch, seq_len, .. } | Probe::Embeddings { batch, seq_len, .. } => SeqLayout::new(*batch, *seq_len),
        }
    }
}

/// Per-layer statistics of the block outputs, averaged over the probe's
/// sequences.
pub fn activation_stats<S: Scalar>(model: &TransformerLM<S>, probe: &Probe) -> Result<SigpropReport> {
    let layout = probe.layout();
    let x = match probe {
        Probe::Tokens { tokens, .. } => model.embed_tokens(tokens, layout)?,
        Probe::Embeddings { x, .. } => {
            if x.cols() != model.config().d {
                return Err(Error::Shape { op: "activation_stats", detail: format!("probe width {} vs d={}", x.cols(), model.config().d) });
            }
            x.cast()
        }
    };
    let (states, _) = model.hidden_states(&x, layout);
    let depth = model.config().layers;
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let stats = match states.get(l) {
            Some(h) if h.is_finite() => layer_stats(l + 1, h, layout),
            _ => LayerStats::flagged(l + 1),
        };
        layers.push(stats);
    }
    Ok(SigpropReport { depth, seed: model.config().seed, config_digest: hex::encode(model.config().digest()), layers })
}

fn layer_stats<S: Scalar>(layer: usize, h: &Tensor<S>, layout: SeqLayout) -> LayerStats {
    let d = h.cols();
    let (mut rms, mut cos, mut rc) = (0.0, 0.0, 0.0);
    let mut finite = true;
    for b in 0..layout.batch {
        let rows = h.data()[b * layout.seq_len * d..(b + 1) * layout.seq_len * d].to_vec();
        let seq = Tensor::new(vec![layout.seq_len, d], rows).expect("slice of a matrix");
        rms += mean_token_rms(&seq);
        cos += mean_pairwise_cosine(&seq);
        match rank_collapse_metric(&seq) {
            Ok(v) => rc += v,
            Err(_) => finite = false,
        }
    }
    let n = layout.batch as f64;
    if !finite {
        return LayerStats::flagged(layer);
    }
    LayerStats { layer, rms: rms / n, mean_cosine: cos / n, rank_collapse: rc / n, finite }
}

/// Whether `kind`'s defaults use the depth-dependent `β_FF` rule.
pub fn uses_beta_ff_rule(kind: BlockKind) -> bool {
    !matches!(kind, BlockKind::PreLn | BlockKind::Parallel)
}

/// `template` at `depth` with `β_FF` re-derived for kinds that follow the
/// depth rule.
pub fn config_at_depth(template: &ModelConfig, depth: usize, seed: u64) -> ModelConfig {
    let mut cfg = template.clone();
    cfg.layers = depth;
    cfg.seed = seed;
    if uses_beta_ff_rule(cfg.block.kind) {
        cfg.block.gains.beta_ff.init = default_beta_ff(depth);
    }
    cfg
}

/// One report per `(depth, seed)`, depths outermost.
pub fn depth_scan_at_init<S: Scalar>(template: &ModelConfig, depths: &[usize], seeds: &[u64], probe: &Probe) -> Result<Vec<SigpropReport>> {
    let mut out = Vec::with_capacity(depths.len() * seeds.len());
    for &depth in depths {
        if depth == 0 {
            return Err(Error::Config("depths must be at least 1".into()));
        }
        for &seed in seeds {
            let model = TransformerLM::<S>::new(config_at_depth(template, depth, seed))?;
            out.push(activation_stats(&model, probe)?);
        }
    }
    Ok(out)
}
