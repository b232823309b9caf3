//! Decoder-only language model: embedding plus sinusoidal positions, a
//! stack of blocks, a final norm and a (tied) unembedding. Also parameter
//! and FLOP accounting.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attention::CenteringCache;
use crate::blocks::{block_forward, push_block, push_spec, BlockConfig, BlockHandles, BlockKind, Linear};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{grad_check, GradCheckReport, Graph, NormKind, SeqLayout, Tensor, Var};
use crate::params::{InitRule, ParamRole, ParamSpec, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub block: BlockConfig,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for `kind`, tied embeddings, seed 0.
    pub fn new(kind: BlockKind, layers: usize, d: usize, heads: usize, d_ff: usize, vocab: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            layers,
            d,
            heads,
            d_ff,
            vocab,
            max_seq_len,
            block: BlockConfig::new(kind, d, d_ff, heads, layers),
            tie_embeddings: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return err(format!("d={} is not divisible by H={}", self.d, self.heads));
        }
        if !self.d.is_multiple_of(2) {
            return err(format!("positional encoding needs an even width, got d={}", self.d));
        }
        if self.max_seq_len == 0 {
            return err("max sequence length must be at least 1".into());
        }
        if self.vocab < 2 {
            return err(format!("vocabulary size must be at least 2, got {}", self.vocab));
        }
        let b = &self.block;
        if (b.d, b.d_ff, b.heads) != (self.d, self.d_ff, self.heads) {
            return err(format!(
                "block dimensions (d={}, d_ff={}, H={}) disagree with the model (d={}, d_ff={}, H={})",
                b.d, b.d_ff, b.heads, self.d, self.d_ff, self.heads
            ));
        }
        b.validate()
    }

    /// Norm used after the last block; `Rms` when blocks have none.
    pub fn final_norm(&self) -> NormKind {
        match self.block.norm {
            NormKind::None => NormKind::Rms,
            k => k,
        }
    }

    /// Canonical text of every architecture-determining field (seed excluded).
    pub fn architecture(&self) -> String {
        format!(
            "layers={} d={} heads={} d_ff={} vocab={} max_seq_len={} tie={} block={:?}",
            self.layers, self.d, self.heads, self.d_ff, self.vocab, self.max_seq_len, self.tie_embeddings, self.block
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.architecture().as_bytes()).into()
    }
}

/// Slot indices of every tensor in a model.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub embed: usize,
    pub unembed: Option<usize>,
    pub final_norm: usize,
    pub blocks: Vec<BlockHandles<usize>>,
}

/// The ordered tensor inventory of `cfg`; a pure function of the config.
pub fn inventory(cfg: &ModelConfig) -> Result<(Vec<ParamSpec>, ModelLayout)> {
    cfg.validate()?;
    let mut specs = Vec::new();
    let gaussian = InitRule::Gaussian { std: crate::blocks::INIT_STD };
    let embed = push_spec(&mut specs, ParamSpec::new("embed", &[cfg.vocab, cfg.d], ParamRole::Embedding, gaussian));
    let blocks = (0..cfg.layers).map(|l| push_block(&mut specs, &cfg.block, l)).collect::<Result<Vec<_>>>()?;
    let final_norm = push_spec(&mut specs, ParamSpec::new("final_norm.gain", &[cfg.d], ParamRole::NormGain, InitRule::Const(1.0)));
    let unembed = (!cfg.tie_embeddings)
        .then(|| push_spec(&mut specs, ParamSpec::new("unembed", &[cfg.vocab, cfg.d], ParamRole::Embedding, gaussian)));
    Ok((specs, ModelLayout { embed, unembed, final_norm, blocks }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: u64,
    /// `(name, shape, count)` for every trainable tensor.
    pub breakdown: Vec<(String, Vec<usize>, u64)>,
}

impl ParamCount {
    /// Summed count of tensors whose name satisfies `pred`.
    pub fn sum_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.breakdown.iter().filter(|(n, _, _)| pred(n)).map(|(_, _, c)| c).sum()
    }
}

/// Trainable parameter count from the inventory, without allocating tensors.
pub fn param_count_analytic(cfg: &ModelConfig) -> Result<ParamCount> {
    let (specs, _) = inventory(cfg)?;
    let breakdown: Vec<_> =
        specs.iter().filter(|s| s.role.is_trainable()).map(|s| (s.name.clone(), s.shape.clone(), s.numel() as u64)).collect();
    let total = breakdown.iter().map(|(_, _, c)| c).sum();
    Ok(ParamCount { total, breakdown })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockFlops {
    /// Number of `[T×d]·[d×d]` weight applications in attention.
    pub attention_weight_matmuls: u64,
    pub attention_weights: u64,
    /// Logit and mixing products (`Q Kᵀ` and `A V`).
    pub attention_mixing: u64,
    pub mlp: u64,
}

impl BlockFlops {
    pub fn attention(&self) -> u64 {
        self.attention_weights + self.attention_mixing
    }

    pub fn total(&self) -> u64 {
        self.attention() + self.mlp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub seq_len: usize,
    pub blocks: Vec<BlockFlops>,
    pub unembedding: u64,
    pub total: u64,
}

impl FlopReport {
    pub fn attention_share(&self) -> f64 {
        let att: u64 = self.blocks.iter().map(BlockFlops::attention).sum();
        att as f64 / self.total.max(1) as f64
    }
}

/// Forward-pass matmul FLOPs (`2·m·k·n` per product) for one sequence of
/// length `seq_len`.
pub fn matmul_flops_analytic(cfg: &ModelConfig, seq_len: usize) -> Result<FlopReport> {
    let (_, layout) = inventory(cfg)?;
    let (t, d, f, v) = (seq_len as u64, cfg.d as u64, cfg.d_ff as u64, cfg.vocab as u64);
    let blocks: Vec<BlockFlops> = layout
        .blocks
        .iter()
        .map(|b| {
            let applied = |l: &Linear<usize>| u64::from(!matches!(l, Linear::Identity));
            let n = 2 + applied(&b.attn.value) + applied(&b.attn.projection);
            BlockFlops {
                attention_weight_matmuls: n,
                attention_weights: n * 2 * t * d * d,
                attention_mixing: 2 * (2 * t * t * d),
                mlp: 2 * (2 * t * d * f),
            }
        })
        .collect();
    let unembedding = 2 * t * d * v;
    let total = blocks.iter().map(BlockFlops::total).sum::<u64>() + unembedding;
    Ok(FlopReport { seq_len, blocks, unembedding, total })
}

/// Interleaved sinusoidal encoding: channel `2i` holds `sin(pos·ω_i)` and
/// `2i+1` holds `cos(pos·ω_i)` with `ω_i = 10000^(−2i/d)`.
pub fn sinusoidal_pe<S: Scalar>(seq_len: usize, d: usize) -> Result<Tensor<S>> {
    if !d.is_multiple_of(2) {
        return shape_err("sinusoidal_pe", format!("width must be even, got {d}"));
    }
    let mut pe = Tensor::zeros(&[seq_len, d]);
    for pos in 0..seq_len {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let angle = pos as f64 * 10000f64.powf(-((2 * i) as f64) / d as f64);
            row[2 * i] = S::of(angle.sin());
            row[2 * i + 1] = S::of(angle.cos());
        }
    }
    Ok(pe)
}

/// Per-step loss and gradient for one batch.
#[derive(Clone, Debug)]
pub struct BatchGrads<S> {
    pub loss: f64,
    /// One tensor per store slot (zeros for buffers).
    pub grads: Vec<Tensor<S>>,
}

#[derive(Debug)]
pub struct TransformerLM<S: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<S>,
    layout: ModelLayout,
    pe: Tensor<S>,
    cache: CenteringCache<S>,
}

impl<S: Scalar> Clone for TransformerLM<S> {
    fn clone(&self) -> Self {
        TransformerLM {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            layout: self.layout.clone(),
            pe: self.pe.clone(),
            cache: CenteringCache::new(),
        }
    }
}

impl<S: Scalar> TransformerLM<S> {
    /// Builds and initialises the model from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let (specs, layout) = inventory(&cfg)?;
        let store = ParamStore::from_specs(specs, cfg.seed)?;
        let pe = sinusoidal_pe(cfg.max_seq_len, cfg.d)?;
        Ok(TransformerLM { cfg, store, layout, pe, cache: CenteringCache::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    fn check_tokens(&self, tokens: &[usize], layout: SeqLayout) -> Result<()> {
        if tokens.len() != layout.rows() {
            return shape_err("forward", format!("{} tokens for layout {:?}", tokens.len(), layout));
        }
        if layout.seq_len == 0 || layout.seq_len > self.cfg.max_seq_len {
            return shape_err("forward", format!("sequence length {} outside 1..={}", layout.seq_len, self.cfg.max_seq_len));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::OutOfRange { what: "token id", index: bad, bound: self.cfg.vocab });
        }
        Ok(())
    }

    /// Positional encodings tiled over `layout.batch` sequences.
    fn positions(&self, layout: SeqLayout) -> Tensor<S> {
        let d = self.cfg.d;
        let mut out = Tensor::zeros(&[layout.rows(), d]);
        for r in 0..layout.rows() {
            out.row_mut(r).copy_from_slice(self.pe.row(r % layout.seq_len));
        }
        out
    }

    /// Embedding lookup plus positional encoding.
    pub fn embed(&self, g: &mut Graph<'_, S>, leaves: &[Var], tokens: &[usize], layout: SeqLayout) -> Result<Var> {
        self.check_tokens(tokens, layout)?;
        let e = g.gather_rows(leaves[self.layout.embed], tokens)?;
        let pe = g.input(self.positions(layout));
        g.add(e, pe)
    }

    /// Runs the block stack on `x`, calling `on_layer(i, out)` after block
    /// `i` (0-based).
    pub fn run_blocks<'a>(
        &self,
        g: &mut Graph<'a, S>,
        leaves: &[Var],
        mut x: Var,
        layout: SeqLayout,
        mut on_layer: impl FnMut(&Graph<'a, S>, usize, Var),
    ) -> Result<Var> {
        for (i, handles) in self.layout.blocks.iter().enumerate() {
            let h = handles.map(&|slot| leaves[slot]);
            x = block_forward(g, x, &self.cfg.block, &h, layout, &self.cache)?;
            on_layer(g, i, x);
        }
        Ok(x)
    }

    /// Final norm followed by the unembedding product.
    pub fn head(&self, g: &mut Graph<'_, S>, leaves: &[Var], x: Var) -> Result<Var> {
        let eps = S::of(self.cfg.block.norm_eps);
        let h = g.normalise(x, self.cfg.final_norm(), Some(leaves[self.layout.final_norm]), eps)?;
        let table = leaves[self.layout.unembed.unwrap_or(self.layout.embed)];
        g.matmul_nt(h, table)
    }

    /// Builds the full forward pass; returns logits `[B·T × V]` and leaves.
    pub fn build<'a>(&'a self, g: &mut Graph<'a, S>, tokens: &[usize], layout: SeqLayout) -> Result<(Var, Vec<Var>)> {
        let leaves = self.store.bind(g);
        let logits = self.logits_from(g, &leaves, tokens, layout)?;
        Ok((logits, leaves))
    }

    /// Logits `[B·T × V]` computed from caller-supplied leaves, one per slot.
    pub fn logits_from(&self, g: &mut Graph<'_, S>, leaves: &[Var], tokens: &[usize], layout: SeqLayout) -> Result<Var> {
        if leaves.len() != self.store.len() {
            return shape_err("logits_from", format!("{} leaves for {} slots", leaves.len(), self.store.len()));
        }
        let x = self.embed(g, leaves, tokens, layout)?;
        let x = self.run_blocks(g, leaves, x, layout, |_, _, _| {})?;
        self.head(g, leaves, x)
    }

    /// Logits `[B × T × V]` for `batch` sequences of `seq_len` tokens.
    pub fn forward_logits(&self, tokens: &[usize], batch: usize, seq_len: usize) -> Result<Tensor<S>> {
        let layout = SeqLayout::new(batch, seq_len);
        let mut g = Graph::new();
        let (logits, _) = self.build(&mut g, tokens, layout)?;
        g.value(logits).clone().reshape(&[batch, seq_len, self.cfg.vocab])
    }

    /// Mean next-token loss over all positions, without gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, seq_len: usize) -> Result<f64> {
        let layout = SeqLayout::new(batch, seq_len);
        let mut g = Graph::new();
        let (logits, _) = self.build(&mut g, inputs, layout)?;
        let loss = g.cross_entropy(logits, targets)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Mean next-token loss at each position `0..seq_len`, averaged over
    /// the batch.
    pub fn position_losses(&self, inputs: &[usize], targets: &[usize], batch: usize, seq_len: usize) -> Result<Vec<f64>> {
        if targets.len() != batch * seq_len {
            return shape_err("position_losses", format!("{} targets for {batch}×{seq_len}", targets.len()));
        }
        let logits = self.forward_logits(inputs, batch, seq_len)?;
        let v = self.cfg.vocab;
        let mut out = vec![0.0; seq_len];
        for (r, row) in logits.data().chunks(v).enumerate() {
            let target = targets[r];
            if target >= v {
                return Err(Error::OutOfRange { what: "target id", index: target, bound: v });
            }
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            out[r % seq_len] += (lse - row[target].as_f64()) / batch as f64;
        }
        Ok(out)
    }

    /// Loss `Σ nll / denom` of one sequence and its gradient for every slot.
    pub fn sequence_grads(&self, inputs: &[usize], targets: &[usize], denom: f64) -> Result<(S, Vec<Tensor<S>>)> {
        let layout = SeqLayout::single(inputs.len());
        let mut g = Graph::new();
        let (logits, leaves) = self.build(&mut g, inputs, layout)?;
        let loss = g.cross_entropy_sum_over(logits, targets, S::of(denom))?;
        let mut grads = g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let out = leaves.iter().zip(self.store.values()).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        Ok((value, out))
    }

    /// Adds the gradients of sequences `range` of a `[B×T]` batch into
    /// `acc`, normalised by `denom`, in sequence order. The summation order
    /// is fixed, so splitting a batch into consecutive microbatches yields
    /// bitwise-identical totals.
    pub fn accumulate_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        seq_len: usize,
        denom: f64,
        acc: &mut BatchGrads<S>,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<()> {
        if inputs.len() != targets.len() || seq_len == 0 || !inputs.len().is_multiple_of(seq_len) {
            return shape_err("accumulate_grads", format!("{} inputs, {} targets, T={seq_len}", inputs.len(), targets.len()));
        }
        let seqs: Vec<(&[usize], &[usize])> = inputs.chunks(seq_len).zip(targets.chunks(seq_len)).collect();
        let results: Vec<Result<(S, Vec<Tensor<S>>)>> = match pool {
            Some(pool) => pool.install(|| seqs.par_iter().map(|(i, t)| self.sequence_grads(i, t, denom)).collect()),
            None => seqs.iter().map(|(i, t)| self.sequence_grads(i, t, denom)).collect(),
        };
        for r in results {
            let (loss, grads) = r?;
            acc.loss += loss.as_f64();
            for (a, g) in acc.grads.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> BatchGrads<S> {
        BatchGrads { loss: 0.0, grads: self.store.zero_grads() }
    }

    /// Block outputs (before the final norm) for `x` already embedded, one
    /// `[B·T × d]` tensor per layer. Stops at the first failing block and
    /// returns the outputs so far together with the error.
    pub fn hidden_states(&self, x: &Tensor<S>, layout: SeqLayout) -> (Vec<Tensor<S>>, Option<Error>) {
        if x.rows() != layout.rows() || x.cols() != self.cfg.d {
            let detail = format!("{:?} for layout {:?}", x.shape(), layout);
            return (Vec::new(), Some(Error::Shape { op: "hidden_states", detail }));
        }
        let mut g = Graph::new();
        let leaves: Vec<Var> = self.store.values().iter().map(|v| g.constant(v)).collect();
        let xv = g.constant(x);
        let mut outs = Vec::new();
        let result = self.run_blocks(&mut g, &leaves, xv, layout, |g, _, v| outs.push(g.value(v).clone()));
        (outs, result.err())
    }

    /// Embedded inputs (token lookup plus positions) as a plain tensor.
    pub fn embed_tokens(&self, tokens: &[usize], layout: SeqLayout) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = self.store.values().iter().map(|v| g.constant(v)).collect();
        let x = self.embed(&mut g, &leaves, tokens, layout)?;
        Ok(g.value(x).clone())
    }
}

impl TransformerLM<f64> {
    /// Checks the gradient of the mean next-token loss with respect to every
    /// trainable slot against central differences.
    pub fn grad_check_loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        layout: SeqLayout,
        step: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        let specs = self.store.specs();
        let trainable: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].role.is_trainable()).collect();
        let params: Vec<Tensor<f64>> = trainable.iter().map(|&i| self.store.value(i).clone()).collect();
        let f = |g: &mut Graph<'_, f64>, vars: &[Var]| -> Result<Var> {
            let mut leaves = Vec::with_capacity(specs.len());
            let mut next = vars.iter();
            for (spec, value) in specs.iter().zip(self.store.values()) {
                if spec.role.is_trainable() {
                    leaves.push(*next.next().expect("one var per trainable slot"));
                } else {
                    leaves.push(g.input(value.clone()));
                }
            }
            let logits = self.logits_from(g, &leaves, inputs, layout)?;
            g.cross_entropy(logits, targets)
        };
        grad_check(f, &params, step, tolerance)
    }
}
