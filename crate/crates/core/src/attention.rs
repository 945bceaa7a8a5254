//! Single-layer attention blocks: multi-head self/cross attention, the
//! zero-parameter subset pooling mixer, and a one-layer transformer wrapper
//! in post-norm and pre-norm placement.
//!
//! Rows of a `[B, d]` latent batch are the tokens. There is no positional
//! embedding, so self-attention is permutation equivariant over the batch and
//! cross-attention is invariant to the order of its key/value rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::init::scaled_uniform;
use crate::tensor::{Graph, ParamId, ParameterRegistry, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormPlacement {
    /// `Z' = LN(Z + Mix(Z))`, `out = LN(Z' + FF(Z'))`.
    PostLn,
    /// `Z' = LN(Z) + Mix(·)`, `out = LN(Z') + FF(Z')`.
    PreLn,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::PostLn => "post_ln",
            NormPlacement::PreLn => "pre_ln",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "post_ln" | "postln" | "post" => Ok(NormPlacement::PostLn),
            "pre_ln" | "preln" | "pre" => Ok(NormPlacement::PreLn),
            other => Err(Error::Config(format!("unknown norm placement {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MixerKind {
    SelfAttention,
    PoolSubset { subset_fraction: f64 },
}

impl MixerKind {
    pub fn validate(&self) -> Result<()> {
        if let MixerKind::PoolSubset { subset_fraction } = *self {
            if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "subset fraction {subset_fraction} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Number of rows a pooling query averages over.
pub fn subset_size(batch: usize, fraction: f64) -> usize {
    ((fraction * batch as f64).ceil() as usize).clamp(1, batch.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub d_head: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
}

impl AttentionWeights {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        d_head: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_head == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "attention needs positive dims (dim {dim}, heads {heads}, d_head {d_head})"
            )));
        }
        let width = heads * d_head;
        let w_q = registry.register(format!("{prefix}.w_q"), scaled_uniform(&[dim, width], dim, rng))?;
        let w_k = registry.register(format!("{prefix}.w_k"), scaled_uniform(&[dim, width], dim, rng))?;
        let w_v = registry.register(format!("{prefix}.w_v"), scaled_uniform(&[dim, width], dim, rng))?;
        let w_out =
            registry.register(format!("{prefix}.w_out"), scaled_uniform(&[width, dim], width, rng))?;
        Ok(Self {
            heads,
            d_head,
            w_q,
            w_k,
            w_v,
            w_out,
        })
    }

    pub fn dim(&self, registry: &ParameterRegistry) -> usize {
        registry.get(self.w_q).value().rows()
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_out]
    }
}

/// Two-layer GELU MLP, `d → d_ff → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(Self {
            w1: registry.register(format!("{prefix}.w1"), scaled_uniform(&[dim, d_ff], dim, rng))?,
            b1: registry.register(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: registry.register(format!("{prefix}.w2"), scaled_uniform(&[d_ff, dim], d_ff, rng))?,
            b2: registry.register(format!("{prefix}.b2"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParameterRegistry, x: Var) -> Result<Var> {
        let w1 = g.param(reg, self.w1);
        let b1 = g.param(reg, self.b1);
        let w2 = g.param(reg, self.w2);
        let b2 = g.param(reg, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, w2)?;
        g.add_row(out, b2)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(registry: &mut ParameterRegistry, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: registry.register(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: registry.register(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParameterRegistry, x: Var) -> Result<Var> {
        let gain = g.param(reg, self.gain);
        let bias = g.param(reg, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Attention output together with the per-head probability matrices.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention with queries from `zq` and
/// keys/values from `zkv`, projected back to `d` and passed through dropout.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_traced<R: Rng + ?Sized>(
    g: &mut Graph,
    reg: &ParameterRegistry,
    zq: Var,
    zkv: Var,
    w: &AttentionWeights,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<AttentionTrace> {
    let dim = w.dim(reg);
    for &z in &[zq, zkv] {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != dim {
            return Err(Error::Dimension {
                op: "attention",
                lhs: shape.to_vec(),
                rhs: reg.get(w.w_q).value().shape().to_vec(),
            });
        }
    }
    let wq = g.param(reg, w.w_q);
    let wk = g.param(reg, w.w_k);
    let wv = g.param(reg, w.w_v);
    let wo = g.param(reg, w.w_out);
    let q = g.matmul(zq, wq)?;
    let k = g.matmul(zkv, wk)?;
    let v = g.matmul(zkv, wv)?;
    let scale = 1.0 / (w.d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(w.heads);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let start = h * w.d_head;
        let qh = g.slice_cols(q, start, w.d_head)?;
        let kh = g.slice_cols(k, start, w.d_head)?;
        let vh = g.slice_cols(v, start, w.d_head)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores)?;
        probs.push(p);
        heads.push(g.matmul(p, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.matmul(merged, wo)?;
    let output = g.dropout(out, dropout_rate, training, rng)?;
    Ok(AttentionTrace { output, probs })
}

#[allow(clippy::too_many_arguments)]
pub fn cross_attention<R: Rng + ?Sized>(
    g: &mut Graph,
    reg: &ParameterRegistry,
    zq: Var,
    zkv: Var,
    w: &AttentionWeights,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    Ok(cross_attention_traced(g, reg, zq, zkv, w, dropout_rate, training, rng)?.output)
}

pub fn self_attention<R: Rng + ?Sized>(
    g: &mut Graph,
    reg: &ParameterRegistry,
    z: Var,
    w: &AttentionWeights,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    cross_attention(g, reg, z, z, w, dropout_rate, training, rng)
}

/// Row indices averaged for each query row of a pooling mix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSelection {
    pub subsets: Vec<Vec<usize>>,
}

impl PoolSelection {
    /// Row-stochastic `[B, B]` averaging matrix.
    pub fn averaging_matrix(&self, batch: usize) -> Tensor {
        let mut m = Tensor::zeros(&[self.subsets.len(), batch]);
        for (i, subset) in self.subsets.iter().enumerate() {
            let w = 1.0 / subset.len() as f64;
            for &j in subset {
                m.data_mut()[i * batch + j] = w;
            }
        }
        m
    }
}

/// For every query row, averages a fresh uniform subset of
/// `⌈fraction·B⌉` batch rows. No residual is added here.
pub fn pool_mix<R: Rng + ?Sized>(
    g: &mut Graph,
    z: Var,
    subset_fraction: f64,
    rng: &mut R,
) -> Result<(Var, PoolSelection)> {
    MixerKind::PoolSubset { subset_fraction }.validate()?;
    let shape = g.shape(z);
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "pool_mix",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let batch = shape[0];
    let k = subset_size(batch, subset_fraction);
    let subsets = (0..batch)
        .map(|_| {
            let mut s = index::sample(rng, batch, k).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let selection = PoolSelection { subsets };
    let m = g.constant(selection.averaging_matrix(batch));
    Ok((g.matmul(m, z)?, selection))
}

/// LayerNorms and feed-forward of one transformer layer; the token mixer is
/// supplied per call.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ff: FeedForward,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub norm: NormPlacement,
    /// Pre-norm only: feed the mixer the raw input instead of `LN(Z)`.
    pub mixer_on_raw_input: bool,
}

impl TransformerBlock {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        d_ff: usize,
        norm: NormPlacement,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ff: FeedForward::init(registry, &format!("{prefix}.ff"), dim, d_ff, rng)?,
            ln1: LayerNormParams::init(registry, &format!("{prefix}.ln1"), dim)?,
            ln2: LayerNormParams::init(registry, &format!("{prefix}.ln2"), dim)?,
            norm,
            mixer_on_raw_input: false,
        })
    }

    pub fn forward<F>(&self, g: &mut Graph, reg: &ParameterRegistry, z_in: Var, mixer: F) -> Result<Var>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        Ok(self.forward_traced(g, reg, z_in, mixer)?.output)
    }

    pub fn forward_traced<F>(
        &self,
        g: &mut Graph,
        reg: &ParameterRegistry,
        z_in: Var,
        mixer: F,
    ) -> Result<BlockTrace>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        match self.norm {
            NormPlacement::PostLn => {
                let mixed = mixer(g, z_in)?;
                let residual = g.add(z_in, mixed)?;
                let z1 = self.ln1.forward(g, reg, residual)?;
                let f = self.ff.forward(g, reg, z1)?;
                let h2 = g.add(z1, f)?;
                let output = self.ln2.forward(g, reg, h2)?;
                Ok(BlockTrace { mixed, residual, output })
            }
            NormPlacement::PreLn => {
                let normed = self.ln1.forward(g, reg, z_in)?;
                let mixer_input = if self.mixer_on_raw_input { z_in } else { normed };
                let mixed = mixer(g, mixer_input)?;
                let residual = g.add(normed, mixed)?;
                let n2 = self.ln2.forward(g, reg, residual)?;
                let f = self.ff.forward(g, reg, residual)?;
                let output = g.add(n2, f)?;
                Ok(BlockTrace { mixed, residual, output })
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ff.params().to_vec();
        p.extend([self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias]);
        p
    }
}

/// Intermediate handles of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Mixer output (after its own dropout, if any).
    pub mixed: Var,
    /// First residual sum, `Z + Mix` (post-norm) or `LN(Z) + Mix` (pre-norm).
    pub residual: Var,
    pub output: Var,
}

/// One transformer layer around a precomputed-or-lazy mixer.
pub fn transformer_layer<F>(
    g: &mut Graph,
    reg: &ParameterRegistry,
    z_in: Var,
    block: &TransformerBlock,
    mixer: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    block.forward(g, reg, z_in, mixer)
}
