//! Transformer block variants, the value/projection reparameterisation and
//! the MLP sub-block.

use crate::attention::{mha_forward, AttentionHandles, AttentionSettings, AttentionVariant, CenteringCache};
use crate::error::{Error, Result};
use crate::numerics::{ActivationKind, Graph, MaskMode, NormKind, SeqLayout, Tensor, Var};
use crate::params::{InitRule, ParamRole, ParamSpec, ParamStore};
use crate::scalar::Scalar;

/// Standard deviation of every Gaussian-initialised matrix.
pub const INIT_STD: f64 = 0.02;

/// `β_FF` initial value for skipless blocks at depth `layers`.
pub fn default_beta_ff(layers: usize) -> f64 {
    0.1 * (18.0 / layers.max(1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainSpec {
    pub init: f64,
    pub trainable: bool,
}

impl GainSpec {
    pub const fn fixed(init: f64) -> Self {
        GainSpec { init, trainable: false }
    }

    pub const fn trainable(init: f64) -> Self {
        GainSpec { init, trainable: true }
    }

    /// `fixed:<v>` or `trainable:<v>`.
    pub fn parse(s: &str) -> Option<Self> {
        let (mode, value) = s.split_once(':')?;
        let init: f64 = value.trim().parse().ok()?;
        match mode.trim() {
            "fixed" => Some(GainSpec::fixed(init)),
            "trainable" => Some(GainSpec::trainable(init)),
            _ => None,
        }
    }
}

impl std::fmt::Display for GainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mode = if self.trainable { "trainable" } else { "fixed" };
        write!(f, "{mode}:{}", self.init)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockGains {
    pub alpha_ff: GainSpec,
    pub beta_ff: GainSpec,
    pub alpha_sa: GainSpec,
    pub beta_sa: GainSpec,
    pub alpha_comb: GainSpec,
}

impl BlockGains {
    pub const UNIT: BlockGains = BlockGains {
        alpha_ff: GainSpec::fixed(1.0),
        beta_ff: GainSpec::fixed(1.0),
        alpha_sa: GainSpec::fixed(1.0),
        beta_sa: GainSpec::fixed(1.0),
        alpha_comb: GainSpec::fixed(1.0),
    };

    /// Attention skip removed, `β_SA` and `β_FF` trainable.
    pub fn skipless(layers: usize) -> Self {
        BlockGains {
            alpha_ff: GainSpec::fixed(1.0),
            beta_ff: GainSpec::trainable(default_beta_ff(layers)),
            alpha_sa: GainSpec::fixed(0.0),
            beta_sa: GainSpec::trainable(1.0),
            alpha_comb: GainSpec::fixed(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    PreLn,
    Parallel,
    VSkipInit,
    Sas,
    SasP,
    SasPNoNorm,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] =
        [BlockKind::PreLn, BlockKind::Parallel, BlockKind::VSkipInit, BlockKind::Sas, BlockKind::SasP, BlockKind::SasPNoNorm];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::PreLn => "preln",
            BlockKind::Parallel => "parallel",
            BlockKind::VSkipInit => "vskipinit",
            BlockKind::Sas => "sas",
            BlockKind::SasP => "sasp",
            BlockKind::SasPNoNorm => "sasp_nonorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Shared-norm parallel topology.
    pub fn is_parallel(self) -> bool {
        matches!(self, BlockKind::Parallel | BlockKind::SasP | BlockKind::SasPNoNorm)
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    Zeros,
    Identity,
    Orthogonal,
    Gaussian { std: f64 },
}

impl WeightInit {
    pub fn rule(self) -> InitRule {
        match self {
            WeightInit::Zeros => InitRule::Zeros,
            WeightInit::Identity => InitRule::Identity,
            WeightInit::Orthogonal => InitRule::Orthogonal,
            WeightInit::Gaussian { std } => InitRule::Gaussian { std },
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zeros" => Some(WeightInit::Zeros),
            "identity" => Some(WeightInit::Identity),
            "orthogonal" => Some(WeightInit::Orthogonal),
            _ => {
                let std = s.strip_prefix("gaussian:")?.trim().parse().ok()?;
                Some(WeightInit::Gaussian { std })
            }
        }
    }
}

impl std::fmt::Display for WeightInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightInit::Zeros => f.write_str("zeros"),
            WeightInit::Identity => f.write_str("identity"),
            WeightInit::Orthogonal => f.write_str("orthogonal"),
            WeightInit::Gaussian { std } => write!(f, "gaussian:{std}"),
        }
    }
}

/// How a value or projection weight is realised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearMode {
    Identity,
    Dense {
        init: WeightInit,
    },
    /// `α·W_init + β·ΔW` with fixed `W_init` and zero-initialised `ΔW`.
    Reparam {
        init: WeightInit,
        alpha: GainSpec,
        beta: GainSpec,
    },
}

impl LinearMode {
    pub const DENSE: LinearMode = LinearMode::Dense { init: WeightInit::Gaussian { std: INIT_STD } };

    /// The kept first-layer value of the simplified blocks.
    pub const FIRST_VALUE: LinearMode =
        LinearMode::Reparam { init: WeightInit::Identity, alpha: GainSpec::trainable(1.0), beta: GainSpec::trainable(1.0) };
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub activation: ActivationKind,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub mask: MaskMode,
    pub gains: BlockGains,
    pub variant: AttentionVariant,
    pub query_init: WeightInit,
    /// Initial `(α_h, β_h, γ_h)` for every head.
    pub head_scalars: (f64, f64, f64),
    pub value: LinearMode,
    pub projection: LinearMode,
    /// Replaces `value` in the first block when set.
    pub first_value: Option<LinearMode>,
}

impl BlockConfig {
    /// Defaults for `kind` in a stack of `layers` blocks.
    pub fn new(kind: BlockKind, d: usize, d_ff: usize, heads: usize, layers: usize) -> Self {
        let base = BlockConfig {
            kind,
            d,
            d_ff,
            heads,
            activation: ActivationKind::Relu,
            norm: NormKind::Rms,
            norm_eps: 1e-8,
            mask: MaskMode::Causal,
            gains: BlockGains::UNIT,
            variant: AttentionVariant::Standard,
            query_init: WeightInit::Gaussian { std: INIT_STD },
            head_scalars: (1.0, 1.0, 1.0),
            value: LinearMode::DENSE,
            projection: LinearMode::DENSE,
            first_value: None,
        };
        match kind {
            BlockKind::PreLn | BlockKind::Parallel => base,
            BlockKind::VSkipInit => BlockConfig {
                gains: BlockGains::skipless(layers),
                variant: AttentionVariant::VSkipInit,
                query_init: WeightInit::Zeros,
                head_scalars: (1.0, 0.0, 0.0),
                value: LinearMode::Dense { init: WeightInit::Orthogonal },
                projection: LinearMode::Dense { init: WeightInit::Orthogonal },
                ..base
            },
            BlockKind::Sas | BlockKind::SasP | BlockKind::SasPNoNorm => BlockConfig {
                gains: BlockGains::skipless(layers),
                variant: AttentionVariant::Shaped,
                query_init: WeightInit::Zeros,
                value: LinearMode::Identity,
                projection: LinearMode::Identity,
                first_value: Some(LinearMode::FIRST_VALUE),
                norm: if kind == BlockKind::SasPNoNorm { NormKind::None } else { NormKind::Rms },
                ..base
            },
        }
    }

    /// Value mode of block `layer` (0-based).
    pub fn value_mode(&self, layer: usize) -> LinearMode {
        match (layer, self.first_value) {
            (0, Some(mode)) => mode,
            _ => self.value,
        }
    }

    pub fn attention_settings(&self) -> AttentionSettings {
        AttentionSettings { variant: self.variant, mask: self.mask, heads: self.heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} must be a positive multiple of {} heads", self.d, self.heads)));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("MLP width must be positive".into()));
        }
        if let ActivationKind::LeakyRelu { slope } = self.activation {
            if !(0.0..=1.0).contains(&slope) {
                return Err(Error::Config(format!("leaky relu slope {slope} outside [0, 1]")));
            }
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config(format!("norm epsilon {} must be non-negative", self.norm_eps)));
        }
        Ok(())
    }
}

// ── handles ─────────────────────────────────────────────────────────

/// A gain that is either a constant or a `[1]` parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gain<H> {
    Fixed(f64),
    Param(H),
}

impl<H: Copy> Gain<H> {
    pub fn map<K>(&self, f: &impl Fn(H) -> K) -> Gain<K> {
        match *self {
            Gain::Fixed(v) => Gain::Fixed(v),
            Gain::Param(h) => Gain::Param(f(h)),
        }
    }

    pub fn param(&self) -> Option<H> {
        match *self {
            Gain::Param(h) => Some(h),
            Gain::Fixed(_) => None,
        }
    }
}

/// A realised value/projection weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Linear<H> {
    Identity,
    Dense(H),
    Reparam { init: H, delta: H, alpha: Gain<H>, beta: Gain<H> },
}

impl<H: Copy> Linear<H> {
    pub fn map<K>(&self, f: &impl Fn(H) -> K) -> Linear<K> {
        match self {
            Linear::Identity => Linear::Identity,
            Linear::Dense(w) => Linear::Dense(f(*w)),
            Linear::Reparam { init, delta, alpha, beta } => {
                Linear::Reparam { init: f(*init), delta: f(*delta), alpha: alpha.map(f), beta: beta.map(f) }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpHandles<H> {
    pub w_in: H,
    pub b_in: H,
    pub w_out: H,
    pub b_out: H,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockHandles<H> {
    /// Pre-attention norm gain, or the shared one in parallel blocks.
    pub norm1: Option<H>,
    pub norm2: Option<H>,
    pub attn: AttentionHandles<H>,
    pub mlp: MlpHandles<H>,
    pub alpha_sa: Gain<H>,
    pub beta_sa: Gain<H>,
    pub alpha_ff: Gain<H>,
    pub beta_ff: Gain<H>,
    pub alpha_comb: Gain<H>,
}

impl<H: Copy> BlockHandles<H> {
    pub fn map<K: Copy>(&self, f: &impl Fn(H) -> K) -> BlockHandles<K> {
        BlockHandles {
            norm1: self.norm1.map(f),
            norm2: self.norm2.map(f),
            attn: self.attn.map(f),
            mlp: MlpHandles { w_in: f(self.mlp.w_in), b_in: f(self.mlp.b_in), w_out: f(self.mlp.w_out), b_out: f(self.mlp.b_out) },
            alpha_sa: self.alpha_sa.map(f),
            beta_sa: self.beta_sa.map(f),
            alpha_ff: self.alpha_ff.map(f),
            beta_ff: self.beta_ff.map(f),
            alpha_comb: self.alpha_comb.map(f),
        }
    }
}

// ── inventory ───────────────────────────────────────────────────────

/// Appends `spec` and returns its slot.
pub fn push_spec(specs: &mut Vec<ParamSpec>, spec: ParamSpec) -> usize {
    specs.push(spec);
    specs.len() - 1
}

fn push_gain(specs: &mut Vec<ParamSpec>, name: String, spec: GainSpec) -> Gain<usize> {
    if spec.trainable {
        Gain::Param(push_spec(specs, ParamSpec::new(name, &[1], ParamRole::ScalarGain, InitRule::Const(spec.init))))
    } else {
        Gain::Fixed(spec.init)
    }
}

fn push_linear(specs: &mut Vec<ParamSpec>, name: &str, d: usize, mode: LinearMode) -> Linear<usize> {
    match mode {
        LinearMode::Identity => Linear::Identity,
        LinearMode::Dense { init } => Linear::Dense(push_spec(specs, ParamSpec::new(name, &[d, d], ParamRole::Weight, init.rule()))),
        LinearMode::Reparam { init, alpha, beta } => Linear::Reparam {
            init: push_spec(specs, ParamSpec::new(format!("{name}.init"), &[d, d], ParamRole::Buffer, init.rule())),
            delta: push_spec(specs, ParamSpec::new(format!("{name}.delta"), &[d, d], ParamRole::Weight, InitRule::Zeros)),
            alpha: push_gain(specs, format!("{name}.alpha"), alpha),
            beta: push_gain(specs, format!("{name}.beta"), beta),
        },
    }
}

/// Appends block `layer`'s (0-based) tensor specs under the prefix
/// `layer{layer+1}`.
pub fn push_block(specs: &mut Vec<ParamSpec>, cfg: &BlockConfig, layer: usize) -> Result<BlockHandles<usize>> {
    cfg.validate()?;
    let p = format!("layer{}", layer + 1);
    let (d, f) = (cfg.d, cfg.d_ff);
    let gaussian = InitRule::Gaussian { std: INIT_STD };
    let norm = |specs: &mut Vec<ParamSpec>, name: &str| -> Option<usize> {
        (cfg.norm != NormKind::None)
            .then(|| push_spec(specs, ParamSpec::new(format!("{p}.{name}.gain"), &[d], ParamRole::NormGain, InitRule::Const(1.0))))
    };
    let (norm1, norm2) = if cfg.kind.is_parallel() { (norm(specs, "norm"), None) } else { (norm(specs, "norm1"), norm(specs, "norm2")) };

    let wq = push_spec(specs, ParamSpec::new(format!("{p}.attn.wq"), &[d, d], ParamRole::Weight, cfg.query_init.rule()));
    let wk = push_spec(specs, ParamSpec::new(format!("{p}.attn.wk"), &[d, d], ParamRole::Weight, gaussian));
    let value = push_linear(specs, &format!("{p}.attn.wv"), d, cfg.value_mode(layer));
    let projection = push_linear(specs, &format!("{p}.attn.wp"), d, cfg.projection);
    let (ua, ub, uc) = cfg.variant.scalars();
    let (ia, ib, ic) = cfg.head_scalars;
    let head = |specs: &mut Vec<ParamSpec>, used: bool, name: &str, init: f64| -> Option<usize> {
        used.then(|| {
            let spec = ParamSpec::new(format!("{p}.attn.{name}"), &[cfg.heads], ParamRole::ScalarGain, InitRule::Const(init));
            push_spec(specs, spec)
        })
    };
    let alpha = head(specs, ua, "alpha", ia);
    let beta = head(specs, ub, "beta", ib);
    let gamma = head(specs, uc, "gamma", ic);
    let attn = AttentionHandles { wq, wk, value, projection, alpha, beta, gamma };

    let mlp = MlpHandles {
        w_in: push_spec(specs, ParamSpec::new(format!("{p}.mlp.w_in"), &[d, f], ParamRole::Weight, gaussian)),
        b_in: push_spec(specs, ParamSpec::new(format!("{p}.mlp.b_in"), &[f], ParamRole::Bias, InitRule::Zeros)),
        w_out: push_spec(specs, ParamSpec::new(format!("{p}.mlp.w_out"), &[f, d], ParamRole::Weight, gaussian)),
        b_out: push_spec(specs, ParamSpec::new(format!("{p}.mlp.b_out"), &[d], ParamRole::Bias, InitRule::Zeros)),
    };

    let g = cfg.gains;
    let parallel = cfg.kind.is_parallel();
    let unused = Gain::Fixed(1.0);
    let alpha_sa = if parallel { unused } else { push_gain(specs, format!("{p}.alpha_sa"), g.alpha_sa) };
    let beta_sa = push_gain(specs, format!("{p}.beta_sa"), g.beta_sa);
    let alpha_ff = if parallel { unused } else { push_gain(specs, format!("{p}.alpha_ff"), g.alpha_ff) };
    let beta_ff = push_gain(specs, format!("{p}.beta_ff"), g.beta_ff);
    let alpha_comb = if parallel { push_gain(specs, format!("{p}.alpha_comb"), g.alpha_comb) } else { unused };

    Ok(BlockHandles { norm1, norm2, attn, mlp, alpha_sa, beta_sa, alpha_ff, beta_ff, alpha_comb })
}

// ── forward ─────────────────────────────────────────────────────────

/// `gain · x`; `None` when the gain is fixed at zero.
fn gained<S: Scalar>(g: &mut Graph<'_, S>, x: Var, gain: &Gain<Var>) -> Result<Option<Var>> {
    match *gain {
        Gain::Fixed(v) if v == 0.0 => Ok(None),
        Gain::Fixed(v) if v == 1.0 => Ok(Some(x)),
        Gain::Fixed(v) => g.scale(x, S::of(v)).map(Some),
        Gain::Param(s) => g.scale_by(x, s).map(Some),
    }
}

/// `Σ gain_i · x_i`, skipping terms with a fixed zero gain.
fn combine<S: Scalar>(g: &mut Graph<'_, S>, terms: &[(Var, Gain<Var>)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (x, gain) in terms {
        if let Some(t) = gained(g, *x, gain)? {
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let shape = g.shape(terms[0].0).to_vec();
            Ok(g.input(Tensor::zeros(&shape)))
        }
    }
}

/// `x · (α·W_init + β·ΔW)`.
pub fn reparam_apply<S: Scalar>(g: &mut Graph<'_, S>, x: Var, init: Var, delta: Var, alpha: &Gain<Var>, beta: &Gain<Var>) -> Result<Var> {
    let a = gained(g, init, alpha)?;
    let b = gained(g, delta, beta)?;
    let w = match (a, b) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(w), None) | (None, Some(w)) => w,
        (None, None) => {
            let shape = g.shape(init).to_vec();
            g.input(Tensor::zeros(&shape))
        }
    };
    g.matmul(x, w)
}

pub fn apply_linear<S: Scalar>(g: &mut Graph<'_, S>, x: Var, lin: &Linear<Var>) -> Result<Var> {
    match lin {
        Linear::Identity => Ok(x),
        Linear::Dense(w) => g.matmul(x, *w),
        Linear::Reparam { init, delta, alpha, beta } => reparam_apply(g, x, *init, *delta, alpha, beta),
    }
}

/// `act(x·W_in + b_in)·W_out + b_out`.
pub fn mlp_forward<S: Scalar>(g: &mut Graph<'_, S>, x: Var, p: &MlpHandles<Var>, act: ActivationKind) -> Result<Var> {
    let h = g.matmul(x, p.w_in)?;
    let h = g.add_row(h, p.b_in)?;
    let h = g.activation(h, act)?;
    let o = g.matmul(h, p.w_out)?;
    g.add_row(o, p.b_out)
}

fn norm<S: Scalar>(g: &mut Graph<'_, S>, x: Var, cfg: &BlockConfig, gain: Option<Var>) -> Result<Var> {
    g.normalise(x, cfg.norm, gain, S::of(cfg.norm_eps))
}

/// One block on rows laid out as `layout`.
pub fn block_forward<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    cfg: &BlockConfig,
    p: &BlockHandles<Var>,
    layout: SeqLayout,
    cache: &CenteringCache<S>,
) -> Result<Var> {
    let settings = cfg.attention_settings();
    if cfg.kind.is_parallel() {
        let xn = norm(g, x, cfg, p.norm1)?;
        let att = mha_forward(g, xn, &p.attn, settings, layout, cache)?;
        let ff = mlp_forward(g, xn, &p.mlp, cfg.activation)?;
        combine(g, &[(x, p.alpha_comb), (ff, p.beta_ff), (att, p.beta_sa)])
    } else {
        let xn = norm(g, x, cfg, p.norm1)?;
        let att = mha_forward(g, xn, &p.attn, settings, layout, cache)?;
        let mid = combine(g, &[(x, p.alpha_sa), (att, p.beta_sa)])?;
        let mn = norm(g, mid, cfg, p.norm2)?;
        let ff = mlp_forward(g, mn, &p.mlp, cfg.activation)?;
        combine(g, &[(mid, p.alpha_ff), (ff, p.beta_ff)])
    }
}

/// A single block with its own parameters, for evaluating blocks in
/// isolation.
#[derive(Clone, Debug)]
pub struct BlockParams<S> {
    pub cfg: BlockConfig,
    pub layer: usize,
    pub store: ParamStore<S>,
    pub handles: BlockHandles<usize>,
}

impl<S: Scalar> BlockParams<S> {
    pub fn new(cfg: BlockConfig, layer: usize, seed: u64) -> Result<Self> {
        let mut specs = Vec::new();
        let handles = push_block(&mut specs, &cfg, layer)?;
        let store = ParamStore::from_specs(specs, seed)?;
        Ok(BlockParams { cfg, layer, store, handles })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.store.get_mut(name).ok_or_else(|| Error::Config(format!("block has no tensor {name}")))
    }

    /// Builds the block on `g` over the input leaf `x`; returns the output
    /// and the per-slot leaves.
    pub fn build<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, layout: SeqLayout, cache: &CenteringCache<S>) -> Result<(Var, Vec<Var>)> {
        let leaves = self.store.bind(g);
        let handles = self.handles.map(&|i| leaves[i]);
        let out = block_forward(g, x, &self.cfg, &handles, layout, cache)?;
        Ok((out, leaves))
    }

    /// Output for `x` holding `x.rows() / seq_len` stacked sequences.
    pub fn forward(&self, x: &Tensor<S>, seq_len: usize, cache: &CenteringCache<S>) -> Result<Tensor<S>> {
        if x.cols() != self.cfg.d || seq_len == 0 || !x.rows().is_multiple_of(seq_len) {
            return Err(Error::Shape { op: "block_forward", detail: format!("{:?} vs width {} and T={seq_len}", x.shape(), self.cfg.d) });
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let layout = SeqLayout::new(x.rows() / seq_len, seq_len);
        let (out, _) = self.build(&mut g, xv, layout, cache)?;
        Ok(g.value(out).clone())
    }
}
