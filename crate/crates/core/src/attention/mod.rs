//! Neighborhood attention (NA) and dilated neighborhood attention (DiNA) on
//! 2-D token maps.
//!
//! NA is DiNA with dilation 1; both run through the same gather kernel.

pub(crate) mod kernel;
mod neighborhood;
mod oracle;

use serde::{Deserialize, Serialize};

pub use neighborhood::{
    bias_table_side, build_neighborhood_mask, cached_plan, neighborhood_indices_1d,
    NeighborhoodMask, NeighborhoodPlan,
};
pub use oracle::oracle_masked_attention;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, param_tree};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub use_positional_bias: bool,
}

impl AttentionSpec {
    pub fn new(kernel_size: usize, dilation: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            kernel_size,
            dilation,
            heads,
            head_dim,
            use_positional_bias: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub fn with_bias(self, use_positional_bias: bool) -> Self {
        Self {
            use_positional_bias,
            ..self
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        neighborhood::check_window(self.kernel_size, self.dilation)?;
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid("heads and head_dim must be positive"));
        }
        if self.dim() != dim {
            return Err(Error::invalid(format!(
                "{} heads x {} head_dim does not match channel dim {dim}",
                self.heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Entries per head in the relative positional bias table.
    pub fn bias_table_len(&self) -> usize {
        let side = bias_table_side(self.kernel_size, self.dilation);
        side * side
    }
}

/// Projections of one attention layer. Query, key and value projections are
/// bias-free; the output projection carries a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvParams<P = Tensor> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
    /// `[heads, (2 dilation (kernel - 1) + 1)^2]`, indexed by 2-D offset.
    pub rel_bias: Option<P>,
}

param_tree!(QkvParams { wq, wk, wv, wo, bo; opt rel_bias });

impl QkvParams<Tensor> {
    /// Truncated-normal projections, zero output bias and zero positional
    /// bias.
    pub fn init(dim: usize, spec: &AttentionSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate(dim)?;
        let mut proj = || init_matrix(dim, dim, rng);
        Ok(Self {
            wq: proj(),
            wk: proj(),
            wv: proj(),
            wo: proj(),
            bo: Tensor::zeros([dim]),
            rel_bias: spec
                .use_positional_bias
                .then(|| Tensor::zeros([spec.heads, spec.bias_table_len()])),
        })
    }

    pub fn param_count(dim: usize, spec: &AttentionSpec) -> usize {
        4 * dim * dim
            + dim
            + if spec.use_positional_bias {
                spec.heads * spec.bias_table_len()
            } else {
                0
            }
    }
}

/// `[rows, cols]` weights from a truncated normal with std `1/sqrt(rows)`.
pub(crate) fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.truncated_normal(std) as f32)
        .collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

/// Attention layer on a `[height, width, dim]` token map inside a graph.
pub fn attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &QkvParams<Var>,
    spec: &AttentionSpec,
) -> Result<Var> {
    Ok(attention_layer_traced(g, x, p, spec)?.0)
}

/// As [`attention_layer`], also returning the attention node so its saved
/// weights can be inspected.
pub fn attention_layer_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &QkvParams<Var>,
    spec: &AttentionSpec,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let [h, w, dim] = shape[..] else {
        return Err(Error::invalid(format!(
            "attention expects a [H, W, dim] map, got {shape:?}"
        )));
    };
    spec.validate(dim)?;
    if spec.use_positional_bias != p.rel_bias.is_some() {
        return Err(Error::invalid(
            "positional bias flag disagrees with parameters",
        ));
    }
    let plan = cached_plan(h, w, spec.kernel_size, spec.dilation)?;
    let tokens = g.reshape(x, &[h * w, dim])?;
    let q = g.matmul(tokens, p.wq)?;
    let k = g.matmul(tokens, p.wk)?;
    let v = g.matmul(tokens, p.wv)?;
    let attended = g.neighborhood_attention(q, k, v, p.rel_bias, plan, spec.heads)?;
    let out = g.linear(attended, p.wo, Some(p.bo))?;
    Ok((g.reshape(out, &[h, w, dim])?, attended))
}

/// Dilated neighborhood attention on a stored token map.
pub fn dina_forward(x: &Tensor, p: &QkvParams, spec: &AttentionSpec) -> Result<Tensor> {
    Ok(run_forward(x, p, spec)?.0)
}

/// Neighborhood attention: DiNA restricted to dilation 1.
pub fn na_forward(x: &Tensor, p: &QkvParams, spec: &AttentionSpec) -> Result<Tensor> {
    if spec.dilation != 1 {
        return Err(Error::invalid(format!(
            "neighborhood attention requires dilation 1, got {}",
            spec.dilation
        )));
    }
    dina_forward(x, p, spec)
}

/// Per-query attention weights, `out[token][head]` holding one weight per
/// neighbor in plan order.
pub fn attention_weights(
    x: &Tensor,
    p: &QkvParams,
    spec: &AttentionSpec,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let (_, weights, plan) = run_forward(x, p, spec)?;
    Ok((0..plan.tokens())
        .map(|t| {
            (0..spec.heads)
                .map(|h| {
                    plan.slot_range(t)
                        .map(|s| weights[s * spec.heads + h])
                        .collect()
                })
                .collect()
        })
        .collect())
}

fn run_forward(
    x: &Tensor,
    p: &QkvParams,
    spec: &AttentionSpec,
) -> Result<(Tensor, Vec<f32>, std::sync::Arc<NeighborhoodPlan>)> {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let pv = params::bind_frozen(&mut g, p);
    let (out, attn) = attention_layer_traced(&mut g, xv, &pv, spec)?;
    let weights = g
        .attention_weights(attn)
        .expect("attention node precedes output projection")
        .to_vec();
    let shape = x.shape();
    let plan = cached_plan(shape[0], shape[1], spec.kernel_size, spec.dilation)?;
    Ok((g.value(out).clone(), weights, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTree;

    fn random_case(h: usize, w: usize, spec: &AttentionSpec, seed: u64) -> (Tensor, QkvParams) {
        let mut rng = Rng::new(seed);
        let dim = spec.dim();
        let x = rng.normal_tensor([h, w, dim].as_ref(), 1.0);
        let mut p = QkvParams::init(dim, spec, &mut rng).unwrap();
        for t in p.leaves_mut() {
            *t = rng.normal_tensor(t.shape(), 0.5);
        }
        (x, p)
    }

    #[test]
    fn singleton_map_is_value_then_output_projection() {
        let spec = AttentionSpec::new(3, 1, 2, 2);
        let (x, p) = random_case(1, 1, &spec, 1);
        let out = na_forward(&x, &p, &spec).unwrap();
        let xv = x.data();
        let v: Vec<f32> = (0..4)
            .map(|j| (0..4).map(|i| xv[i] * p.wv.data()[i * 4 + j]).sum())
            .collect();
        let y: Vec<f32> = (0..4)
            .map(|j| (0..4).map(|i| v[i] * p.wo.data()[i * 4 + j]).sum::<f32>() + p.bo.data()[j])
            .collect();
        for (a, b) in out.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn na_rejects_dilation() {
        let spec = AttentionSpec::new(3, 2, 1, 4);
        let (x, p) = random_case(4, 4, &spec, 2);
        assert!(na_forward(&x, &p, &spec).is_err());
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let spec = AttentionSpec::new(3, 1, 1, 4);
        let (_, p) = random_case(4, 4, &spec, 3);
        let x = Tensor::zeros([4, 4, 6]);
        assert!(dina_forward(&x, &p, &spec).is_err());
    }

    #[test]
    fn constant_tokens_give_constant_output() {
        let spec = AttentionSpec::new(3, 2, 2, 3).with_bias(false);
        let (_, p) = random_case(1, 1, &spec, 4);
        let token = [0.3f32, -1.0, 2.0, 0.5, 0.1, -0.7];
        let x = Tensor::new([5, 6, 6], token.repeat(30)).unwrap();
        let out = dina_forward(&x, &p, &spec).unwrap();
        let first = &out.data()[..6];
        for row in out.data().chunks(6) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let spec = AttentionSpec::new(5, 2, 2, 2);
        let (x, p) = random_case(7, 6, &spec, 5);
        for per_head in attention_weights(&x, &p, &spec).unwrap() {
            for row in per_head {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
            }
        }
    }
}
