//! Classifier-guided latent degradation and cross-attention restoration.
//!
//! For a batch of latents `Z = f(x)` with one-hot labels `Y`:
//!
//! * the degrader mixes every latent with the rest of the batch (self
//!   attention or subset pooling inside one transformer layer, 50% dropout)
//!   to get `Z_d`, whose target is the batch-average label `ỹ`;
//! * the restorer cross-attends from `Z_d` (queries) to `Z` (keys/values)
//!   to get `Z_r`, whose target is the original `Y`;
//! * the same classifier scores all three, and the training loss is
//!   `CE(g(Z), Y) + CE(g(Z_d), ỹ) + CE(g(Z_r), Y)`.
//!
//! Both operators exist only at training time; inference is `argmax g(f(x))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    cross_attention, pool_mix, self_attention, AttentionWeights, NormPlacement, PoolSelection,
    TransformerBlock,
};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::rng::{RngStreams, StreamRng};
use crate::tensor::{Graph, ParamId, ParameterRegistry, SgdConfig, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    /// Self-attention over the batch.
    SelfAttention,
    /// Average of a random batch subset per query.
    Pool,
    /// Additive i.i.d. Gaussian noise; no parameters.
    Gaussian,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::SelfAttention => "sa",
            DegradationKind::Pool => "pool",
            DegradationKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" | "self_attention" => Ok(DegradationKind::SelfAttention),
            "pool" => Ok(DegradationKind::Pool),
            "gaussian" | "noise" => Ok(DegradationKind::Gaussian),
            other => Err(Error::Config(format!("unknown degradation kind {other:?}"))),
        }
    }
}

/// Shape and stochasticity settings shared by the degrader and restorer.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorConfig {
    pub kind: DegradationKind,
    pub norm: NormPlacement,
    pub heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub subset_fraction: f64,
    pub noise_scale: f64,
    /// Pre-norm only: the mixer reads `Z` rather than `LN(Z)`.
    pub mixer_on_raw_input: bool,
}

impl OperatorConfig {
    /// Self-attention operators use `dim/4` for head and feed-forward widths;
    /// pooling operators use `dim/32` heads and a `dim/8` feed-forward.
    /// Gaussian degradation keeps the self-attention sizes for its restorer.
    pub fn defaults_for(kind: DegradationKind, dim: usize) -> Self {
        let (d_head, d_ff) = match kind {
            DegradationKind::Pool => ((dim / 32).max(1), (dim / 8).max(1)),
            DegradationKind::SelfAttention | DegradationKind::Gaussian => {
                ((dim / 4).max(1), (dim / 4).max(1))
            }
        };
        Self {
            kind,
            norm: NormPlacement::PostLn,
            heads: 4,
            d_head,
            d_ff,
            dropout: 0.5,
            subset_fraction: 0.5,
            noise_scale: 1.0,
            mixer_on_raw_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction {} must lie in (0, 1]",
                self.subset_fraction
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be ≥ 0", self.noise_scale)));
        }
        if self.heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return Err(Error::Config("operator widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DegraderBody {
    SelfAttention {
        attention: AttentionWeights,
        block: TransformerBlock,
    },
    Pool {
        block: TransformerBlock,
        subset_fraction: f64,
    },
    Gaussian {
        noise_scale: f64,
    },
}

/// `D_μ(·; ξ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOperator {
    pub body: DegraderBody,
    pub dropout_rate: f64,
}

impl DegradationOperator {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        cfg: &OperatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.kind {
            DegradationKind::SelfAttention => {
                let attention = AttentionWeights::init(
                    registry,
                    &format!("{prefix}.attn"),
                    dim,
                    cfg.heads,
                    cfg.d_head,
                    rng,
                )?;
                let mut block = TransformerBlock::init(registry, prefix, dim, cfg.d_ff, cfg.norm, rng)?;
                block.mixer_on_raw_input = cfg.mixer_on_raw_input;
                DegraderBody::SelfAttention { attention, block }
            }
            DegradationKind::Pool => {
                let mut block = TransformerBlock::init(registry, prefix, dim, cfg.d_ff, cfg.norm, rng)?;
                block.mixer_on_raw_input = cfg.mixer_on_raw_input;
                DegraderBody::Pool {
                    block,
                    subset_fraction: cfg.subset_fraction,
                }
            }
            DegradationKind::Gaussian => DegraderBody::Gaussian {
                noise_scale: cfg.noise_scale,
            },
        };
        Ok(Self {
            body,
            dropout_rate: cfg.dropout,
        })
    }

    pub fn kind(&self) -> DegradationKind {
        match self.body {
            DegraderBody::SelfAttention { .. } => DegradationKind::SelfAttention,
            DegraderBody::Pool { .. } => DegradationKind::Pool,
            DegraderBody::Gaussian { .. } => DegradationKind::Gaussian,
        }
    }

    pub fn min_batch(&self) -> usize {
        match self.body {
            DegraderBody::Gaussian { .. } => 1,
            _ => 2,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.body {
            DegraderBody::SelfAttention { attention, block } => {
                let mut p = attention.params().to_vec();
                p.extend(block.params());
                p
            }
            DegraderBody::Pool { block, .. } => block.params(),
            DegraderBody::Gaussian { .. } => Vec::new(),
        }
    }
}

/// `R_θ`: cross-attention from degraded queries to original keys/values.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationOperator {
    pub attention: AttentionWeights,
    pub block: TransformerBlock,
    pub dropout_rate: f64,
}

impl RestorationOperator {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        cfg: &OperatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let attention =
            AttentionWeights::init(registry, &format!("{prefix}.attn"), dim, cfg.heads, cfg.d_head, rng)?;
        let mut block = TransformerBlock::init(registry, prefix, dim, cfg.d_ff, cfg.norm, rng)?;
        block.mixer_on_raw_input = cfg.mixer_on_raw_input;
        Ok(Self {
            attention,
            block,
            dropout_rate: cfg.dropout,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params().to_vec();
        p.extend(self.block.params());
        p
    }
}

/// Random streams consumed by the two operators, one per stochastic site.
#[derive(Clone, Debug)]
pub struct AugmentRngs {
    pub degrade_dropout: StreamRng,
    pub degrade_subset: StreamRng,
    pub degrade_noise: StreamRng,
    pub restore_dropout: StreamRng,
}

impl AugmentRngs {
    pub fn from_streams(streams: &RngStreams) -> Self {
        Self {
            degrade_dropout: streams.stream("degrade/dropout"),
            degrade_subset: streams.stream("degrade/subset"),
            degrade_noise: streams.stream("degrade/noise"),
            restore_dropout: streams.stream("restore/dropout"),
        }
    }
}

/// Batch-average label `ỹ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub distribution: Vec<f64>,
}

impl SoftLabel {
    /// `ỹ` repeated on every row of a `[rows, C]` target matrix.
    pub fn broadcast(&self, rows: usize) -> Tensor {
        let data = self.distribution.repeat(rows);
        Tensor::new(vec![rows, self.distribution.len()], data).expect("consistent shape")
    }
}

/// `ỹ[c] = (count of class c) / B` from a one-hot label matrix.
pub fn build_soft_label(one_hot: &Tensor) -> Result<SoftLabel> {
    let (b, c) = (one_hot.rows(), one_hot.cols());
    let mut counts = vec![0usize; c];
    for r in 0..b {
        let row = one_hot.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Validation(format!("label row {r} is not one-hot")));
        }
        counts[row.iter().position(|&v| v == 1.0).expect("one entry")] += 1;
    }
    Ok(SoftLabel {
        distribution: counts.iter().map(|&n| n as f64 / b as f64).collect(),
    })
}

/// Handles produced by one degradation pass.
#[derive(Clone, Debug)]
pub struct DegradeTrace {
    pub output: Var,
    /// First residual sum of the transformer layer (absent for Gaussian).
    pub residual: Option<Var>,
    /// Subsets drawn by the pooling mixer.
    pub selection: Option<PoolSelection>,
}

/// `Z_d = D(Z)`.
pub fn degrade(
    g: &mut Graph,
    reg: &ParameterRegistry,
    z: Var,
    op: &DegradationOperator,
    training: bool,
    rngs: &mut AugmentRngs,
) -> Result<DegradeTrace> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "degrade",
            lhs: shape,
            rhs: vec![],
        });
    }
    if shape[0] < op.min_batch() {
        return Err(Error::BatchSize {
            op: "degrade",
            got: shape[0],
            min: op.min_batch(),
        });
    }
    match &op.body {
        DegraderBody::SelfAttention { attention, block } => {
            let rng = &mut rngs.degrade_dropout;
            let trace = block.forward_traced(g, reg, z, |g, x| {
                self_attention(g, reg, x, attention, op.dropout_rate, training, rng)
            })?;
            Ok(DegradeTrace {
                output: trace.output,
                residual: Some(trace.residual),
                selection: None,
            })
        }
        DegraderBody::Pool {
            block,
            subset_fraction,
        } => {
            let mut selection = None;
            let (subset_rng, dropout_rng) = (&mut rngs.degrade_subset, &mut rngs.degrade_dropout);
            let trace = block.forward_traced(g, reg, z, |g, x| {
                let (pooled, sel) = pool_mix(g, x, *subset_fraction, subset_rng)?;
                selection = Some(sel);
                g.dropout(pooled, op.dropout_rate, training, dropout_rng)
            })?;
            Ok(DegradeTrace {
                output: trace.output,
                residual: Some(trace.residual),
                selection,
            })
        }
        DegraderBody::Gaussian { noise_scale } => {
            if *noise_scale == 0.0 {
                return Ok(DegradeTrace {
                    output: z,
                    residual: None,
                    selection: None,
                });
            }
            let n: usize = shape.iter().product();
            let noise: Vec<f64> = (0..n)
                .map(|_| noise_scale * rngs.degrade_noise.sample::<f64, _>(StandardNormal))
                .collect();
            let eps = g.constant(Tensor::new(shape, noise)?);
            Ok(DegradeTrace {
                output: g.add(z, eps)?,
                residual: None,
                selection: None,
            })
        }
    }
}

/// `Z_r = R(Z_d; Z)`. Row order follows `z_d`; the order of `z` is irrelevant.
pub fn restore<R: Rng + ?Sized>(
    g: &mut Graph,
    reg: &ParameterRegistry,
    z_d: Var,
    z: Var,
    op: &RestorationOperator,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if g.shape(z_d).len() != 2 || g.shape(z).len() != 2 || g.shape(z_d)[1] != g.shape(z)[1] {
        return Err(Error::Dimension {
            op: "restore",
            lhs: g.shape(z_d).to_vec(),
            rhs: g.shape(z).to_vec(),
        });
    }
    op.block.forward(g, reg, z_d, |g, q| {
        cross_attention(g, reg, q, z, &op.attention, op.dropout_rate, training, rng)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    /// Plain cross-entropy on clean latents.
    Erm,
    /// Clean + degraded terms.
    DOnly,
    /// Clean + restored terms; the degrader still produces the queries.
    ROnly,
    /// All three terms.
    DPlusR,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Erm,
        AblationVariant::DOnly,
        AblationVariant::ROnly,
        AblationVariant::DPlusR,
    ];

    pub fn terms(self) -> TermSet {
        match self {
            AblationVariant::Erm => TermSet { original: true, degraded: false, restored: false },
            AblationVariant::DOnly => TermSet { original: true, degraded: true, restored: false },
            AblationVariant::ROnly => TermSet { original: true, degraded: false, restored: true },
            AblationVariant::DPlusR => TermSet { original: true, degraded: true, restored: true },
        }
    }

    fn needs_degrader(self) -> bool {
        self != AblationVariant::Erm
    }

    fn needs_restorer(self) -> bool {
        matches!(self, AblationVariant::ROnly | AblationVariant::DPlusR)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationVariant::Erm => "erm",
            AblationVariant::DOnly => "d_only",
            AblationVariant::ROnly => "r_only",
            AblationVariant::DPlusR => "d_plus_r",
        })
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "erm" => Ok(AblationVariant::Erm),
            "d_only" | "d" => Ok(AblationVariant::DOnly),
            "r_only" | "r" => Ok(AblationVariant::ROnly),
            "d_plus_r" | "d+r" | "dr" => Ok(AblationVariant::DPlusR),
            other => Err(Error::Config(format!("unknown ablation variant {other:?}"))),
        }
    }
}

/// Which loss terms contribute to the optimised total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub original: bool,
    pub degraded: bool,
    pub restored: bool,
}

/// Per-term loss values. Terms outside `used` may still carry a value when
/// they were computed on the way to a used term; they add nothing to `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_original: f64,
    pub l_degraded: f64,
    pub l_restored: f64,
    pub total: f64,
    pub used: TermSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Feed the degrader a detached copy of `Z`, so degradation terms do not
    /// train the encoder through the degrader input.
    pub stop_grad_into_encoder_for_l2: bool,
}

/// A recorded forward pass of the training objective.
#[derive(Debug)]
pub struct LossPass {
    pub graph: Graph,
    pub z: Var,
    pub z_d: Option<Var>,
    pub z_r: Option<Var>,
    pub l_original: Var,
    pub l_degraded: Option<Var>,
    pub l_restored: Option<Var>,
    pub total: Var,
    pub soft_label: SoftLabel,
    pub selection: Option<PoolSelection>,
    pub breakdown: LossBreakdown,
}

/// Builds the loss graph for `variant` on one batch in training mode.
pub fn forward_losses(
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    variant: AblationVariant,
    opts: &LossOptions,
    rngs: &mut AugmentRngs,
) -> Result<LossPass> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    forward_losses_on(&mut g, xv, bundle, labels, variant, opts, rngs, true).map(|parts| {
        let breakdown = parts.breakdown(&g);
        LossPass {
            graph: g,
            z: parts.z,
            z_d: parts.z_d,
            z_r: parts.z_r,
            l_original: parts.l_original,
            l_degraded: parts.l_degraded,
            l_restored: parts.l_restored,
            total: parts.total,
            soft_label: parts.soft_label,
            selection: parts.selection,
            breakdown,
        }
    })
}

/// Handles of the loss graph, built onto a caller-owned graph.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub z: Var,
    pub z_d: Option<Var>,
    pub z_r: Option<Var>,
    pub l_original: Var,
    pub l_degraded: Option<Var>,
    pub l_restored: Option<Var>,
    pub total: Var,
    pub soft_label: SoftLabel,
    pub selection: Option<PoolSelection>,
    pub used: TermSet,
}

impl LossParts {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
        LossBreakdown {
            l_original: g.value(self.l_original).item(),
            l_degraded: val(self.l_degraded),
            l_restored: val(self.l_restored),
            total: g.value(self.total).item(),
            used: self.used,
        }
    }
}

/// Same as [`forward_losses`] but on an existing graph with `x` already
/// bound, so gradient checks can treat `x` or parameters as inputs.
#[allow(clippy::too_many_arguments)]
pub fn forward_losses_on(
    g: &mut Graph,
    x: Var,
    bundle: &ModelBundle,
    labels: &[usize],
    variant: AblationVariant,
    opts: &LossOptions,
    rngs: &mut AugmentRngs,
    training: bool,
) -> Result<LossParts> {
    let batch = g.shape(x)[0];
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "latentdr_loss",
            lhs: g.shape(x).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let reg = &bundle.registry;
    let y = Tensor::one_hot(labels, bundle.classes())?;
    let soft_label = build_soft_label(&y)?;

    let z = bundle.encode(g, x)?;
    let logits = bundle.classify(g, z)?;
    let l_original = g.cross_entropy_soft(logits, &y)?;

    let used = variant.terms();
    let mut terms = vec![l_original];
    let (mut z_d, mut z_r, mut l_degraded, mut l_restored, mut selection) = (None, None, None, None, None);

    if variant.needs_degrader() {
        let degrader = bundle
            .degrader
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {variant} needs a degrader")))?;
        let d_in = if opts.stop_grad_into_encoder_for_l2 { g.detach(z) } else { z };
        let trace = degrade(g, reg, d_in, degrader, training, rngs)?;
        selection = trace.selection;
        z_d = Some(trace.output);

        let logits_d = bundle.classify_augmented(g, trace.output)?;
        let l2 = g.cross_entropy_soft(logits_d, &soft_label.broadcast(batch))?;
        l_degraded = Some(l2);
        if used.degraded {
            terms.push(l2);
        }

        if variant.needs_restorer() {
            let restorer = bundle
                .restorer
                .as_ref()
                .ok_or_else(|| Error::Config(format!("variant {variant} needs a restorer")))?;
            let zr = restore(g, reg, trace.output, z, restorer, training, &mut rngs.restore_dropout)?;
            z_r = Some(zr);
            let logits_r = bundle.classify_augmented(g, zr)?;
            let l3 = g.cross_entropy_soft(logits_r, &y)?;
            l_restored = Some(l3);
            terms.push(l3);
        }
    }

    let total = g.add_scalars(&terms)?;
    Ok(LossParts {
        z,
        z_d,
        z_r,
        l_original,
        l_degraded,
        l_restored,
        total,
        soft_label,
        selection,
        used,
    })
}

/// The full three-term objective.
pub fn latentdr_loss(
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    opts: &LossOptions,
    rngs: &mut AugmentRngs,
) -> Result<LossPass> {
    forward_losses(bundle, x, labels, AblationVariant::DPlusR, opts, rngs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Learning-rate multiplier applied when all three terms are optimised.
    pub lr_adjust: f64,
    pub loss: LossOptions,
}

impl TrainConfig {
    pub fn effective_lr(&self, variant: AblationVariant) -> f64 {
        if variant == AblationVariant::DPlusR {
            self.sgd.lr * self.lr_adjust
        } else {
            self.sgd.lr
        }
    }
}

/// One optimisation step: forward, backward over the selected total, SGD.
pub fn training_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    labels: &[usize],
    variant: AblationVariant,
    cfg: &TrainConfig,
    rngs: &mut AugmentRngs,
) -> Result<LossBreakdown> {
    let pass = forward_losses(bundle, x, labels, variant, &cfg.loss, rngs)?;
    if !pass.breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("{variant} loss")));
    }
    let grads = pass.graph.backward(pass.total)?;
    bundle.registry.accumulate(&grads);
    let sgd = SgdConfig {
        lr: cfg.effective_lr(variant),
        ..cfg.sgd
    };
    bundle.registry.sgd_step(&sgd)?;
    if !bundle.registry.all_finite() {
        return Err(Error::NonFinite(format!("{variant} parameter update")));
    }
    Ok(pass.breakdown)
}

/// Text dumps of latent batches.
///
/// ```text
/// B d C seed step
/// <B lines of Z>
/// <B lines of Z_d>
/// <B lines of Z_r>
/// <B lines, one class label each>
/// ```
///
/// Floats use 17 significant digits, so parse-then-write is byte-exact.
pub mod dump {
    use std::fmt::Write as _;
    use std::path::Path;

    use super::*;
    use crate::textio::{fmt_f64, parse_f64};

    #[derive(Clone, Debug, PartialEq)]
    pub struct LatentDump {
        pub classes: usize,
        pub seed: u64,
        pub step: u64,
        pub z: Tensor,
        pub z_d: Tensor,
        pub z_r: Tensor,
        pub labels: Vec<usize>,
    }

    impl LatentDump {
        pub fn batch(&self) -> usize {
            self.z.rows()
        }

        pub fn dim(&self) -> usize {
            self.z.cols()
        }

        pub fn to_text(&self) -> String {
            let (b, d) = (self.batch(), self.dim());
            let mut out = format!("{b} {d} {} {} {}\n", self.classes, self.seed, self.step);
            for t in [&self.z, &self.z_d, &self.z_r] {
                for r in 0..b {
                    let line: Vec<String> = t.row(r).iter().map(|&v| fmt_f64(v)).collect();
                    out.push_str(&line.join(" "));
                    out.push('\n');
                }
            }
            for l in &self.labels {
                writeln!(out, "{l}").unwrap();
            }
            out
        }

        pub fn parse(text: &str) -> Result<Self> {
            let mut lines = text.lines();
            let header: Vec<&str> = lines
                .next()
                .ok_or_else(|| Error::Parse("empty latent dump".into()))?
                .split_whitespace()
                .collect();
            if header.len() != 5 {
                return Err(Error::Parse(format!("latent dump header {header:?}")));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| Error::Parse(format!("header {s:?}: {e}")));
            let (b, d, classes) = (num(header[0])? as usize, num(header[1])? as usize, num(header[2])? as usize);
            let (seed, step) = (num(header[3])?, num(header[4])?);
            let mut read_group = || -> Result<Tensor> {
                let mut data = Vec::with_capacity(b * d);
                for _ in 0..b {
                    let line = lines.next().ok_or_else(|| Error::Parse("latent dump truncated".into()))?;
                    let row = line.split(' ').map(parse_f64).collect::<Result<Vec<_>>>()?;
                    if row.len() != d {
                        return Err(Error::Parse(format!("expected {d} values, got {}", row.len())));
                    }
                    data.extend(row);
                }
                Tensor::new(vec![b, d], data)
            };
            let z = read_group()?;
            let z_d = read_group()?;
            let z_r = read_group()?;
            let labels = (0..b)
                .map(|_| {
                    let line = lines.next().ok_or_else(|| Error::Parse("labels truncated".into()))?;
                    line.trim().parse::<usize>().map_err(|e| Error::Parse(format!("label {line:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if lines.next().is_some() {
                return Err(Error::Parse("trailing lines in latent dump".into()));
            }
            Ok(Self {
                classes,
                seed,
                step,
                z,
                z_d,
                z_r,
                labels,
            })
        }

        pub fn write(&self, path: &Path) -> Result<()> {
            std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
        }

        pub fn read(path: &Path) -> Result<Self> {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Self::parse(&text)
        }
    }

    /// Evaluation-mode latents `(Z, Z_d, Z_r)` for a split.
    pub fn capture(
        bundle: &ModelBundle,
        x: &Tensor,
        labels: &[usize],
        rngs: &mut AugmentRngs,
        seed: u64,
        step: u64,
    ) -> Result<LatentDump> {
        let (degrader, restorer) = match (&bundle.degrader, &bundle.restorer) {
            (Some(d), Some(r)) => (d, r),
            _ => return Err(Error::Config("latent dump needs both operators".into())),
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = bundle.encode(&mut g, xv)?;
        let z_d = degrade(&mut g, &bundle.registry, z, degrader, false, rngs)?.output;
        let z_r = restore(&mut g, &bundle.registry, z_d, z, restorer, false, &mut rngs.restore_dropout)?;
        Ok(LatentDump {
            classes: bundle.classes(),
            seed,
            step,
            z: g.value(z).clone(),
            z_d: g.value(z_d).clone(),
            z_r: g.value(z_r).clone(),
            labels: labels.to_vec(),
        })
    }
}
