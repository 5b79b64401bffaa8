//! Ready-made gradient checks on a block pair and on a micro end-to-end
//! model, with randomized weights.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionSpec;
use crate::block::{block_pair_forward, BlockParams};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Precision, ScalarFn};
use crate::graph::{Graph, Var};
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::training::{combined_loss, LossWeights};
use crate::unet::{model_forward, ModelConfig, ModelParams};

/// Weight scale for the re-drawn parameters. Initial weights are tiny and
/// leave many gradients near the relative-error floor.
pub const PARAM_STD: f64 = 0.4;
/// Coordinates sampled in the end-to-end check.
pub const MODEL_COORDS: usize = 20;

pub fn threshold(p: Precision) -> f64 {
    match p {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-6,
    }
}

fn redraw<X: ParamTree<Tensor>>(tree: &mut X, rng: &mut Rng) {
    for t in tree.leaves_mut() {
        *t = rng.normal_tensor(t.shape(), PARAM_STD);
    }
}

fn rebind<X: ParamTree<Tensor>>(tree: &X, vars: &[Var]) -> X::Mapped<Var> {
    let mut it = vars.iter().copied();
    tree.map_leaves(&mut |_| it.next().expect("one var per leaf"))
}

fn flatten<X: ParamTree<Tensor>>(tree: &X) -> Vec<Tensor> {
    tree.leaves().into_iter().cloned().collect()
}

/// NA then DiNA on a 4x4 map of width 4, reduced by a fixed weighted sum.
pub struct BlockPairProbe {
    pub params: BlockParams,
    pub x: Tensor,
    pub na: AttentionSpec,
    pub dina: AttentionSpec,
}

impl BlockPairProbe {
    pub const DIM: usize = 4;
    pub const SIDE: usize = 4;

    pub fn new(seed: u64) -> Result<Self> {
        let na = AttentionSpec::new(3, 1, 1, Self::DIM);
        let dina = na.with_dilation(2);
        let mut rng = Rng::new(seed);
        let mut params = BlockParams::init(Self::DIM, 2, &na, &dina, &mut rng)?;
        redraw(&mut params, &mut rng);
        let x = rng.normal_tensor(&[Self::SIDE, Self::SIDE, Self::DIM], 1.0);
        Ok(Self { params, x, na, dina })
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        flatten(&self.params)
    }
}

/// Fixed weights in [-1, 1] so the loss is not invariant to the residual
/// path.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()
}

impl ScalarFn for BlockPairProbe {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let p = rebind(&self.params, vars);
        let x = g.constant(self.x.cast());
        let y = block_pair_forward(g, x, &p, &self.na, &self.dina)?;
        let w = g.constant(Tensor::from_f64_slice(self.x.shape(), &probe_weights(self.x.numel()))?);
        let yw = g.mul(y, w)?;
        Ok(g.sum(yw))
    }
}

/// The smallest full model: 32x32 input, C = 4, one head per stage, trained
/// loss on a random mask.
pub struct MicroModelProbe {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl MicroModelProbe {
    pub fn config() -> ModelConfig {
        ModelConfig {
            heads: Some([1; 4]),
            ..ModelConfig::micro(32, 4)
        }
    }

    pub fn new(seed: u64) -> Result<Self> {
        let cfg = Self::config();
        let mut rng = Rng::new(seed);
        let mut params = ModelParams::init(&cfg, rng.next_u64())?;
        redraw(&mut params, &mut rng);
        let side = cfg.input_size;
        let image = rng.uniform_tensor(&[side, side, 1], 0.0, 1.0);
        let mask = (0..side * side).map(|_| rng.below(cfg.num_classes) as u8).collect();
        Ok(Self {
            cfg,
            params,
            image,
            mask,
        })
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        flatten(&self.params)
    }
}

impl ScalarFn for MicroModelProbe {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let p = rebind(&self.params, vars);
        let x = g.constant(self.image.cast());
        let logits = model_forward(g, x, &p, &self.cfg)?;
        combined_loss(g, logits, &self.mask, LossWeights::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub precision: Precision,
    pub threshold: f64,
    pub passed: bool,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub probes: Vec<ProbeResult>,
}

fn result(name: &str, precision: Precision, report: GradCheckReport) -> ProbeResult {
    let threshold = threshold(precision);
    ProbeResult {
        name: name.into(),
        precision,
        threshold,
        passed: report.max_rel_error < threshold,
        report,
    }
}

pub fn check_block_pair(seed: u64, precision: Precision) -> Result<ProbeResult> {
    let probe = BlockPairProbe::new(seed)?;
    let cfg = GradCheckConfig {
        precision,
        ..GradCheckConfig::default()
    };
    Ok(result("block_pair", precision, grad_check(&probe, &probe.flat_params(), cfg)?))
}

pub fn check_micro_model(seed: u64, precision: Precision) -> Result<ProbeResult> {
    let probe = MicroModelProbe::new(seed)?;
    let cfg = GradCheckConfig {
        precision,
        ..GradCheckConfig::default()
    }
    .with_sample(MODEL_COORDS, seed);
    Ok(result("micro_model", precision, grad_check(&probe, &probe.flat_params(), cfg)?))
}

pub fn run_all(seed: u64, precision: Precision) -> Result<ProbeSummary> {
    let probes = vec![check_block_pair(seed, precision)?, check_micro_model(seed, precision)?];
    Ok(ProbeSummary {
        seed,
        max_rel_error: probes.iter().map(|p| p.report.max_rel_error).fold(0.0, f64::max),
        passed: probes.iter().all(|p| p.passed),
        probes,
    })
}
