//! The dilated transformer block pair.
//!
//! A pair is one neighborhood-attention sub-block followed by one dilated
//! sub-block, each pre-normalized with a residual around attention and
//! around the MLP:
//!
//! ```text
//! zhat_l   = NA(LN(z_{l-1}))    + z_{l-1}
//! z_l      = MLP(LN(zhat_l))    + zhat_l
//! zhat_l+1 = DiNA(LN(z_l))      + z_l
//! z_l+1    = MLP(LN(zhat_l+1))  + zhat_l+1
//! ```

use crate::attention::{attention_layer, init_matrix, AttentionSpec, QkvParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, param_tree};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}

param_tree!(LayerNormParams { gamma, beta });

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones([dim]),
            beta: Tensor::zeros([dim]),
        }
    }
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta)
}

/// Two-layer perceptron `dim -> ratio * dim -> dim` with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<P = Tensor> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

param_tree!(MlpParams { w1, b1, w2, b2 });

impl MlpParams {
    pub fn init(dim: usize, ratio: usize, rng: &mut Rng) -> Self {
        let hidden = dim * ratio;
        Self {
            w1: init_matrix(dim, hidden, rng),
            b1: Tensor::zeros([hidden]),
            w2: init_matrix(hidden, dim, rng),
            b2: Tensor::zeros([dim]),
        }
    }

    pub fn param_count(dim: usize, ratio: usize) -> usize {
        let hidden = dim * ratio;
        dim * hidden + hidden + hidden * dim + dim
    }
}

pub fn mlp_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &MlpParams<Var>) -> Result<Var> {
    let h = g.linear(x, p.w1, Some(p.b1))?;
    let h = g.gelu(h);
    g.linear(h, p.w2, Some(p.b2))
}

/// Attention half-block plus MLP half-block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBlockParams<P = Tensor> {
    pub norm1: LayerNormParams<P>,
    pub attn: QkvParams<P>,
    pub norm2: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
}

param_tree!(SubBlockParams { ; tree norm1; tree attn; tree norm2; tree mlp });

impl SubBlockParams {
    pub fn init(dim: usize, ratio: usize, spec: &AttentionSpec, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(dim),
            attn: QkvParams::init(dim, spec, rng)?,
            norm2: LayerNormParams::new(dim),
            mlp: MlpParams::init(dim, ratio, rng),
        })
    }

    pub fn param_count(dim: usize, ratio: usize, spec: &AttentionSpec) -> usize {
        4 * dim + QkvParams::param_count(dim, spec) + MlpParams::param_count(dim, ratio)
    }
}

/// Returns `(zhat, z)`: the post-attention residual and the block output.
pub fn sub_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &SubBlockParams<Var>,
    spec: &AttentionSpec,
) -> Result<(Var, Var)> {
    let n = layer_norm(g, z, &p.norm1)?;
    let a = attention_layer(g, n, &p.attn, spec)?;
    let zhat = g.add(a, z)?;
    let n = layer_norm(g, zhat, &p.norm2)?;
    let m = mlp_forward(g, n, &p.mlp)?;
    let out = g.add(m, zhat)?;
    Ok((zhat, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P = Tensor> {
    pub na: SubBlockParams<P>,
    pub dina: SubBlockParams<P>,
}

param_tree!(BlockParams { ; tree na; tree dina });

impl BlockParams {
    pub fn init(
        dim: usize,
        ratio: usize,
        spec_na: &AttentionSpec,
        spec_dina: &AttentionSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            na: SubBlockParams::init(dim, ratio, spec_na, rng)?,
            dina: SubBlockParams::init(dim, ratio, spec_dina, rng)?,
        })
    }

    pub fn param_count(
        dim: usize,
        ratio: usize,
        spec_na: &AttentionSpec,
        spec_dina: &AttentionSpec,
    ) -> usize {
        SubBlockParams::param_count(dim, ratio, spec_na)
            + SubBlockParams::param_count(dim, ratio, spec_dina)
    }
}

/// Intermediates of one block pair, in order of computation.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub zhat_na: Var,
    pub z_na: Var,
    pub zhat_dina: Var,
    pub z_dina: Var,
}

pub fn block_pair_forward<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &BlockParams<Var>,
    spec_na: &AttentionSpec,
    spec_dina: &AttentionSpec,
) -> Result<Var> {
    Ok(block_pair_traced(g, z, p, spec_na, spec_dina)?.z_dina)
}

pub fn block_pair_traced<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &BlockParams<Var>,
    spec_na: &AttentionSpec,
    spec_dina: &AttentionSpec,
) -> Result<BlockTrace> {
    if spec_na.dilation != 1 {
        return Err(Error::invalid(format!(
            "the local half of a block pair needs dilation 1, got {}",
            spec_na.dilation
        )));
    }
    let (zhat_na, z_na) = sub_block_forward(g, z, &p.na, spec_na)?;
    let (zhat_dina, z_dina) = sub_block_forward(g, z_na, &p.dina, spec_dina)?;
    Ok(BlockTrace {
        zhat_na,
        z_na,
        zhat_dina,
        z_dina,
    })
}

/// Evaluate a block pair on a stored `[H, W, dim]` map.
pub fn block_pair_apply(
    x: &Tensor,
    p: &BlockParams,
    spec_na: &AttentionSpec,
    spec_dina: &AttentionSpec,
) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let pv = params::bind_frozen(&mut g, p);
    let out = block_pair_forward(&mut g, xv, &pv, spec_na, spec_dina)?;
    Ok(g.value(out).clone())
}
