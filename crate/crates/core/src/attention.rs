//! Attention-matrix constructions: softmax attention, Value-SkipInit,
//! shaped attention with its centering matrix, multi-head assembly, and the
//! simplified attention sub-block (identity values and projections).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::blocks::{apply_linear, Gain, Linear};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{kernels, Graph, SeqLayout, Tensor, Var};
use crate::scalar::Scalar;

pub use crate::numerics::MaskMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Plain softmax attention `A`.
    Standard,
    /// `α·I + β·A`.
    VSkipInit,
    /// `α·I + β·A − γ·C`.
    Shaped,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Standard => "standard",
            AttentionVariant::VSkipInit => "vskipinit",
            AttentionVariant::Shaped => "shaped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(AttentionVariant::Standard),
            "vskipinit" => Some(AttentionVariant::VSkipInit),
            "shaped" => Some(AttentionVariant::Shaped),
            _ => None,
        }
    }

    /// Which per-head scalars the variant trains: (α, β, γ).
    pub fn scalars(self) -> (bool, bool, bool) {
        match self {
            AttentionVariant::Standard => (false, false, false),
            AttentionVariant::VSkipInit => (true, true, false),
            AttentionVariant::Shaped => (true, true, true),
        }
    }
}

/// Structural settings of an attention sub-block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSettings {
    pub variant: AttentionVariant,
    pub mask: MaskMode,
    pub heads: usize,
}

/// Softmax of all-zero logits under `mask`: uniform rows without a mask,
/// uniform over the visible prefix under the causal mask.
pub fn centering_matrix<S: Scalar>(seq_len: usize, mask: MaskMode) -> Tensor<S> {
    let zeros = vec![S::zero(); seq_len];
    let mut out = Tensor::zeros(&[seq_len, seq_len]);
    for i in 0..seq_len {
        let visible = kernels::visible_cols(i, seq_len, mask.is_causal());
        kernels::softmax_row(&zeros, visible, out.row_mut(i));
    }
    out
}

/// Centering matrices keyed by exact `(seq_len, mask)`.
#[derive(Debug, Default)]
pub struct CenteringCache<S> {
    map: Mutex<HashMap<(usize, MaskMode), Arc<Tensor<S>>>>,
}

impl<S: Scalar> CenteringCache<S> {
    pub fn new() -> Self {
        CenteringCache { map: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, seq_len: usize, mask: MaskMode) -> Arc<Tensor<S>> {
        let mut map = self.map.lock().expect("centering cache poisoned");
        map.entry((seq_len, mask)).or_insert_with(|| Arc::new(centering_matrix(seq_len, mask))).clone()
    }
}

/// Graph handles of one attention sub-block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionHandles<H> {
    pub wq: H,
    pub wk: H,
    pub value: Linear<H>,
    pub projection: Linear<H>,
    pub alpha: Option<H>,
    pub beta: Option<H>,
    pub gamma: Option<H>,
}

impl<H: Copy> AttentionHandles<H> {
    pub fn map<K: Copy>(&self, f: &impl Fn(H) -> K) -> AttentionHandles<K> {
        AttentionHandles {
            wq: f(self.wq),
            wk: f(self.wk),
            value: self.value.map(f),
            projection: self.projection.map(f),
            alpha: self.alpha.map(f),
            beta: self.beta.map(f),
            gamma: self.gamma.map(f),
        }
    }
}

/// Row-stochastic attention matrices `softmax(X W^Q (X W^K)ᵀ / √d_k + M)`
/// for every (sequence, head) block, stacked `[batch·H·T × T]`.
pub fn attention_matrix<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    wq: Var,
    wk: Var,
    settings: AttentionSettings,
    layout: SeqLayout,
) -> Result<Var> {
    let d = g.value(x).cols();
    if settings.heads == 0 || !d.is_multiple_of(settings.heads) {
        return shape_err("attention_matrix", format!("width {d} not divisible by {} heads", settings.heads));
    }
    let dk = d / settings.heads;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let scale = S::one() / S::of(dk as f64).sqrt();
    let scores = g.head_scores(q, k, layout, settings.heads, scale)?;
    g.masked_softmax_rows(scores, layout.seq_len, settings.mask)
}

/// Turns stacked attention matrices into mixing matrices for `variant`.
pub fn shape_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    a: Var,
    centering: Arc<Tensor<S>>,
    alpha: Option<Var>,
    beta: Option<Var>,
    gamma: Option<Var>,
    variant: AttentionVariant,
    heads: usize,
) -> Result<Var> {
    let missing = || Error::Config(format!("{} attention needs its per-head scalars", variant.name()));
    match variant {
        AttentionVariant::Standard => Ok(a),
        AttentionVariant::VSkipInit => g.shape_mix(a, alpha.ok_or_else(missing)?, beta.ok_or_else(missing)?, None, centering, heads),
        AttentionVariant::Shaped => {
            g.shape_mix(a, alpha.ok_or_else(missing)?, beta.ok_or_else(missing)?, Some(gamma.ok_or_else(missing)?), centering, heads)
        }
    }
}

/// Multi-head attention: per head the mixing matrix acts on that head's
/// column block of the values, heads are concatenated, then projected.
/// Identity value/projection modes skip the corresponding multiply.
pub fn mha_forward<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    params: &AttentionHandles<Var>,
    settings: AttentionSettings,
    layout: SeqLayout,
    cache: &CenteringCache<S>,
) -> Result<Var> {
    let a = attention_matrix(g, x, params.wq, params.wk, settings, layout)?;
    let c = cache.get(layout.seq_len, settings.mask);
    let mixing = shape_attention(g, a, c, params.alpha, params.beta, params.gamma, settings.variant, settings.heads)?;
    let values = apply_linear(g, x, &params.value)?;
    let mixed = g.head_mix(mixing, values, layout, settings.heads)?;
    apply_linear(g, mixed, &params.projection)
}

/// Simplified attention sub-block: shaped attention applied directly to the
/// head column blocks of the (normalised) input, with no projection.
pub fn sas_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    xn: Var,
    params: &AttentionHandles<Var>,
    settings: AttentionSettings,
    layout: SeqLayout,
    cache: &CenteringCache<S>,
) -> Result<Var> {
    if settings.variant != AttentionVariant::Shaped {
        return Err(Error::Config("simplified attention requires the shaped variant".into()));
    }
    if !matches!(params.projection, Linear::Identity) {
        return Err(Error::Config("simplified attention has no projection; projection mode must be identity".into()));
    }
    if matches!(params.value, Linear::Dense(_)) {
        return Err(Error::Config("simplified attention values must be identity or reparameterised".into()));
    }
    mha_forward(g, xn, params, settings, layout, cache)
}

/// Per-head shaped-attention scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedScalars<S> {
    pub alpha: Tensor<S>,
    pub beta: Tensor<S>,
    pub gamma: Tensor<S>,
}

impl<S: Scalar> ShapedScalars<S> {
    pub fn new(heads: usize, alpha: f64, beta: f64, gamma: f64) -> Self {
        ShapedScalars {
            alpha: Tensor::full(&[heads], S::of(alpha)),
            beta: Tensor::full(&[heads], S::of(beta)),
            gamma: Tensor::full(&[heads], S::of(gamma)),
        }
    }

    pub fn heads(&self) -> usize {
        self.alpha.numel()
    }
}

/// Self-contained attention parameters for evaluating one sub-block outside
/// a model. Query/key weights are packed `[d × d]` and sliced per head.
#[derive(Clone, Debug)]
pub struct AttentionParams<S> {
    pub settings: AttentionSettings,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub value: Linear<Tensor<S>>,
    pub projection: Linear<Tensor<S>>,
    pub scalars: ShapedScalars<S>,
}

impl<S: Scalar> AttentionParams<S> {
    fn bind<'a>(&'a self, g: &mut Graph<'a, S>) -> AttentionHandles<Var> {
        let (a, b, c) = self.settings.variant.scalars();
        AttentionHandles {
            wq: g.param(&self.wq),
            wk: g.param(&self.wk),
            value: bind_linear(g, &self.value),
            projection: bind_linear(g, &self.projection),
            alpha: a.then(|| g.param(&self.scalars.alpha)),
            beta: b.then(|| g.param(&self.scalars.beta)),
            gamma: c.then(|| g.param(&self.scalars.gamma)),
        }
    }

    /// `A_h(X)` for one head of a single sequence `x: [T × d]`.
    pub fn attention_matrix(&self, x: &Tensor<S>, head: usize) -> Result<Tensor<S>> {
        if head >= self.settings.heads {
            return Err(Error::OutOfRange { what: "head", index: head, bound: self.settings.heads });
        }
        let t = x.rows();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wq = g.constant(&self.wq);
        let wk = g.constant(&self.wk);
        let a = attention_matrix(&mut g, xv, wq, wk, self.settings, SeqLayout::single(t))?;
        let all = g.value(a);
        let block = all.data()[head * t * t..(head + 1) * t * t].to_vec();
        Tensor::new(vec![t, t], block)
    }

    /// Multi-head attention output for a single sequence `x: [T × d]`.
    pub fn forward(&self, x: &Tensor<S>, cache: &CenteringCache<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let handles = self.bind(&mut g);
        let xv = g.constant(x);
        let out = mha_forward(&mut g, xv, &handles, self.settings, SeqLayout::single(x.rows()), cache)?;
        Ok(g.value(out).clone())
    }

    /// Simplified attention sub-block output for a single sequence.
    pub fn sas_forward(&self, xn: &Tensor<S>, cache: &CenteringCache<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let handles = self.bind(&mut g);
        let xv = g.constant(xn);
        let out = sas_attention(&mut g, xv, &handles, self.settings, SeqLayout::single(xn.rows()), cache)?;
        Ok(g.value(out).clone())
    }
}

fn bind_linear<'a, S: Scalar>(g: &mut Graph<'a, S>, lin: &'a Linear<Tensor<S>>) -> Linear<Var> {
    let gain = |g: &mut Graph<'a, S>, gain: &'a Gain<Tensor<S>>| match gain {
        Gain::Fixed(v) => Gain::Fixed(*v),
        Gain::Param(t) => Gain::Param(g.param(t)),
    };
    match lin {
        Linear::Identity => Linear::Identity,
        Linear::Dense(w) => Linear::Dense(g.param(w)),
        Linear::Reparam { init, delta, alpha, beta } => {
            Linear::Reparam { init: g.constant(init), delta: g.param(delta), alpha: gain(g, alpha), beta: gain(g, beta) }
        }
    }
}

/// Host-side `shape_attention` for a single `[T × T]` matrix and one head.
pub fn shape_attention_matrix<S: Scalar>(
    a: &Tensor<S>,
    c: &Tensor<S>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    variant: AttentionVariant,
) -> Result<Tensor<S>> {
    if a.shape() != c.shape() || !a.is_matrix() || a.rows() != a.cols() {
        return shape_err("shape_attention", format!("A {:?} vs C {:?}", a.shape(), c.shape()));
    }
    let mut g = Graph::new();
    let av = g.constant(a);
    let al = g.input(Tensor::scalar(S::of(alpha)));
    let be = g.input(Tensor::scalar(S::of(beta)));
    let ga = g.input(Tensor::scalar(S::of(gamma)));
    let out = shape_attention(&mut g, av, Arc::new(c.clone()), Some(al), Some(be), Some(ga), variant, 1)?;
    Ok(g.value(out).clone())
}
