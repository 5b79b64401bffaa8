//! The U-shaped encoder/decoder.
//!
//! ```text
//! image [H, W, ch]
//!   embed            -> [H/4,  W/4,  C ]  stage 0 -> merge
//!                       [H/8,  W/8,  2C]  stage 1 -> merge
//!                       [H/16, W/16, 4C]  stage 2 -> merge
//!                       [H/32, W/32, 8C]  bottleneck
//!   expand (+ fuse)  -> [H/16, W/16, 4C]  decoder 0
//!   expand (+ fuse)  -> [H/8,  W/8,  2C]  decoder 1
//!   expand (+ fuse)  -> [H/4,  W/4,  C ]  decoder 2
//!   final expand     -> [H, W, C] -> classifier -> [H, W, classes]
//! ```
//!
//! Skip taps sit on the encoder stage outputs before merging. With `n`
//! skips, the `n` shallowest levels are connected: one skip is the 1/4
//! level, two add 1/8, three add 1/16.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{init_matrix, AttentionSpec};
use crate::block::{block_pair_forward, layer_norm, BlockParams, LayerNormParams, DEFAULT_MLP_RATIO};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, param_tree, Leaf};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const PATCH: usize = 4;
pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Large,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub input_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Block pairs per encoder stage, the last entry being the bottleneck.
    pub stage_depths: [usize; STAGES],
    /// Block pairs per decoder stage, deepest first.
    pub decoder_depths: [usize; 3],
    pub kernel_size: usize,
    /// Per-stage dilation for the DiNA half of each pair, shallowest first.
    /// Decoder stages reuse the encoder value at the same resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<[usize; STAGES]>,
    pub head_dim: usize,
    /// Per-stage head counts; when absent, `dim / head_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<[usize; STAGES]>,
    pub num_skips: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    #[serde(default = "yes")]
    pub use_positional_bias: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Full-size presets: 224 input, k = 7, eight channels per head.
    pub fn preset(preset: Preset) -> Self {
        let (embed_dim, stage_depths) = match preset {
            Preset::Tiny => (96, [1, 1, 1, 1]),
            Preset::Small => (96, [1, 1, 2, 1]),
            Preset::Large => (128, [1, 1, 3, 1]),
        };
        Self {
            preset: Some(preset),
            input_size: 224,
            in_channels: 1,
            embed_dim,
            stage_depths,
            decoder_depths: [stage_depths[2], stage_depths[1], stage_depths[0]],
            kernel_size: 7,
            dilations: None,
            head_dim: 8,
            heads: None,
            num_skips: 3,
            num_classes: 9,
            mlp_ratio: DEFAULT_MLP_RATIO,
            use_positional_bias: true,
        }
    }

    /// Desk-scale configuration: one pair per stage, k = 3, four channels
    /// per head, binary output.
    pub fn micro(input_size: usize, embed_dim: usize) -> Self {
        Self {
            preset: None,
            input_size,
            in_channels: 1,
            embed_dim,
            stage_depths: [1; STAGES],
            decoder_depths: [1; 3],
            kernel_size: 3,
            dilations: None,
            head_dim: 4,
            heads: None,
            num_skips: 3,
            num_classes: 2,
            mlp_ratio: DEFAULT_MLP_RATIO,
            use_positional_bias: true,
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Side of the token map at a stage (stage 0 is H/4).
    pub fn stage_side(&self, stage: usize) -> usize {
        (self.input_size / PATCH) >> stage
    }

    pub fn stage_dilation(&self, stage: usize) -> usize {
        match self.dilations {
            Some(d) => d[stage],
            None => (self.stage_side(stage) / self.kernel_size).max(1),
        }
    }

    pub fn stage_heads(&self, stage: usize) -> usize {
        match self.heads {
            Some(h) => h[stage],
            None => self.stage_dim(stage) / self.head_dim.max(1),
        }
    }

    /// `(NA spec, DiNA spec)` for a stage.
    pub fn stage_specs(&self, stage: usize) -> (AttentionSpec, AttentionSpec) {
        let heads = self.stage_heads(stage);
        let na = AttentionSpec::new(self.kernel_size, 1, heads, self.stage_dim(stage) / heads.max(1))
            .with_bias(self.use_positional_bias);
        (na, na.with_dilation(self.stage_dilation(stage)))
    }

    /// Whether the skip at resolution level `level` (0 = 1/4) is connected.
    pub fn has_skip(&self, level: usize) -> bool {
        level < self.num_skips
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input size {} is not a positive multiple of 32", self.input_size));
        }
        if self.in_channels == 0 || self.embed_dim == 0 {
            return bad("in_channels and embed_dim must be positive".into());
        }
        if self.num_skips > 3 {
            return bad(format!("num_skips {} exceeds 3", self.num_skips));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.heads.is_none() && self.head_dim == 0 {
            return bad("head_dim must be positive".into());
        }
        for stage in 0..STAGES {
            let dim = self.stage_dim(stage);
            let heads = self.stage_heads(stage);
            if self.heads.is_none() && !dim.is_multiple_of(self.head_dim) {
                return bad(format!("head_dim {} does not divide stage {stage} dim {dim}", self.head_dim));
            }
            if heads == 0 || !dim.is_multiple_of(heads) {
                return bad(format!("{heads} heads do not divide stage {stage} dim {dim}"));
            }
            let (na, dina) = self.stage_specs(stage);
            na.validate(dim)?;
            dina.validate(dim)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        closed_form_param_count(self)
    }
}

/// Linear layer with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<P = Tensor> {
    pub w: P,
    pub b: Option<P>,
}

param_tree!(LinearParams { w; opt b });

impl LinearParams {
    pub fn init(inputs: usize, outputs: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            w: init_matrix(inputs, outputs, rng),
            b: bias.then(|| Tensor::zeros([outputs])),
        }
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    g.linear(x, p.w, p.b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub embed: LinearParams<P>,
    pub embed_norm: LayerNormParams<P>,
    /// Three encoder stages, each a list of block pairs.
    pub encoder: Vec<Vec<BlockParams<P>>>,
    /// `4 dim -> 2 dim`, one per encoder stage.
    pub merge: Vec<Leaf<P>>,
    pub bottleneck: Vec<BlockParams<P>>,
    /// `dim -> 2 dim` before rearranging, deepest first.
    pub expand: Vec<Leaf<P>>,
    /// `2 dim -> dim` fusion, indexed by resolution level (0 = 1/4).
    pub fuse: Vec<LinearParams<P>>,
    /// Three decoder stages, deepest first.
    pub decoder: Vec<Vec<BlockParams<P>>>,
    /// `C -> 16 C` before the 4x4 rearrangement.
    pub final_expand: Leaf<P>,
    pub head: LinearParams<P>,
}

param_tree!(ModelParams { ; tree embed; tree embed_norm; tree encoder; tree merge; tree bottleneck; tree expand; tree fuse; tree decoder; tree final_expand; tree head });

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let c = cfg.embed_dim;
        let stage = |s: usize, depth: usize, rng: &mut Rng| -> Result<Vec<BlockParams>> {
            let (na, dina) = cfg.stage_specs(s);
            (0..depth)
                .map(|_| BlockParams::init(cfg.stage_dim(s), cfg.mlp_ratio, &na, &dina, rng))
                .collect()
        };
        let embed = LinearParams::init(PATCH * PATCH * cfg.in_channels, c, true, &mut rng);
        let mut encoder = Vec::new();
        let mut merge = Vec::new();
        for s in 0..3 {
            encoder.push(stage(s, cfg.stage_depths[s], &mut rng)?);
            let dim = cfg.stage_dim(s);
            merge.push(Leaf(init_matrix(4 * dim, 2 * dim, &mut rng)));
        }
        let bottleneck = stage(3, cfg.stage_depths[3], &mut rng)?;
        let mut expand = Vec::new();
        let mut decoder = Vec::new();
        for j in 0..3 {
            let dim = cfg.stage_dim(3 - j);
            expand.push(Leaf(init_matrix(dim, 2 * dim, &mut rng)));
            decoder.push(stage(2 - j, cfg.decoder_depths[j], &mut rng)?);
        }
        let fuse = (0..cfg.num_skips)
            .map(|level| {
                let dim = cfg.stage_dim(level);
                LinearParams::init(2 * dim, dim, true, &mut rng)
            })
            .collect();
        Ok(Self {
            embed,
            embed_norm: LayerNormParams::new(c),
            encoder,
            merge,
            bottleneck,
            expand,
            fuse,
            decoder,
            final_expand: Leaf(init_matrix(c, PATCH * PATCH * c, &mut rng)),
            head: LinearParams::init(c, cfg.num_classes, true, &mut rng),
        })
    }

    /// Check every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(cfg, 0)?;
        let mine = params::ParamTree::named(self);
        let theirs = params::ParamTree::named(&expected);
        if mine.len() != theirs.len() {
            return Err(Error::invalid(format!(
                "parameters hold {} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ename, e)) in mine.iter().zip(&theirs) {
            if name != ename || t.shape() != e.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name} {:?} does not match {ename} {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }
}

fn closed_form_param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.embed_dim;
    let attn = |dim: usize, spec: &AttentionSpec| {
        4 * dim * dim
            + dim
            + if spec.use_positional_bias {
                let side = 2 * spec.dilation * (spec.kernel_size - 1) + 1;
                spec.heads * side * side
            } else {
                0
            }
    };
    let pair = |s: usize| {
        let dim = cfg.stage_dim(s);
        let hidden = cfg.mlp_ratio * dim;
        let mlp = 2 * dim * hidden + hidden + dim;
        let (na, dina) = cfg.stage_specs(s);
        2 * (2 * 2 * dim + mlp) + attn(dim, &na) + attn(dim, &dina)
    };
    let mut total = 16 * cfg.in_channels * c + c + 2 * c;
    for s in 0..3 {
        let dim = cfg.stage_dim(s);
        total += cfg.stage_depths[s] * pair(s) + 4 * dim * 2 * dim;
        total += cfg.decoder_depths[2 - s] * pair(s);
        total += cfg.stage_dim(s + 1) * 2 * cfg.stage_dim(s + 1);
        if cfg.has_skip(s) {
            total += 2 * dim * dim + dim;
        }
    }
    total += cfg.stage_depths[3] * pair(3);
    total + c * 16 * c + c * cfg.num_classes + cfg.num_classes
}

// Rearrangement index tables. Each maps an output element to the flat
// input element it copies.

fn patch_index(h: usize, w: usize, ch: usize) -> Vec<usize> {
    let (ph, pw) = (h / PATCH, w / PATCH);
    let mut idx = Vec::with_capacity(h * w * ch);
    for pr in 0..ph {
        for pc in 0..pw {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let base = ((pr * PATCH + dy) * w + pc * PATCH + dx) * ch;
                    idx.extend(base..base + ch);
                }
            }
        }
    }
    idx
}

/// 2x2 groups concatenated top-left, top-right, bottom-left, bottom-right.
fn merge_index(h: usize, w: usize, dim: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * dim);
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * r + dy) * w + 2 * c + dx) * dim;
                idx.extend(base..base + dim);
            }
        }
    }
    idx
}

/// Inverse of a `factor x factor` grouping: output pixel
/// `(factor r + q / factor, factor c + q % factor)` channel `t` reads input
/// token `(r, c)` channel `q * out_dim + t`.
fn spread_index(h: usize, w: usize, out_dim: usize, factor: usize) -> Vec<usize> {
    let (oh, ow) = (h * factor, w * factor);
    let in_dim = out_dim * factor * factor;
    let mut idx = Vec::with_capacity(oh * ow * out_dim);
    for y in 0..oh {
        for x in 0..ow {
            let (r, c) = (y / factor, x / factor);
            let q = (y % factor) * factor + x % factor;
            let base = (r * w + c) * in_dim + q * out_dim;
            idx.extend(base..base + out_dim);
        }
    }
    idx
}

fn map_shape<T: Scalar>(g: &Graph<T>, x: Var, op: &str) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[h, w, d] => Ok((h, w, d)),
        other => Err(Error::invalid(format!("{op} expects [H, W, C], got {other:?}"))),
    }
}

pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    proj: &LinearParams<Var>,
    norm: &LayerNormParams<Var>,
) -> Result<Var> {
    let (h, w, ch) = map_shape(g, image, "patch_embed")?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::invalid(format!(
            "patch_embed needs sides divisible by {PATCH}, got {h}x{w}"
        )));
    }
    let patches = g.gather(
        image,
        Arc::from(patch_index(h, w, ch)),
        &[h / PATCH, w / PATCH, PATCH * PATCH * ch],
    )?;
    let tokens = linear(g, patches, proj)?;
    layer_norm(g, tokens, norm)
}

pub fn patch_merge<T: Scalar>(g: &mut Graph<T>, x: Var, proj: Var) -> Result<Var> {
    let (h, w, dim) = map_shape(g, x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("patch_merge needs even sides, got {h}x{w}")));
    }
    let grouped = g.gather(x, Arc::from(merge_index(h, w, dim)), &[h / 2, w / 2, 4 * dim])?;
    g.matmul(grouped, proj)
}

pub fn patch_expand<T: Scalar>(g: &mut Graph<T>, x: Var, proj: Var) -> Result<Var> {
    let (h, w, dim) = map_shape(g, x, "patch_expand")?;
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("patch_expand needs an even dim, got {dim}")));
    }
    let wide = g.matmul(x, proj)?;
    g.gather(wide, Arc::from(spread_index(h, w, dim / 2, 2)), &[2 * h, 2 * w, dim / 2])
}

pub fn final_expand<T: Scalar>(g: &mut Graph<T>, x: Var, proj: Var) -> Result<Var> {
    let (h, w, dim) = map_shape(g, x, "final_expand")?;
    let wide = g.matmul(x, proj)?;
    g.gather(
        wide,
        Arc::from(spread_index(h, w, dim, PATCH)),
        &[PATCH * h, PATCH * w, dim],
    )
}

pub fn skip_fuse<T: Scalar>(g: &mut Graph<T>, dec: Var, enc: Var, p: &LinearParams<Var>) -> Result<Var> {
    if g.shape(dec) != g.shape(enc) {
        return Err(Error::Shape {
            op: "skip_fuse",
            lhs: g.shape(dec).to_vec(),
            rhs: g.shape(enc).to_vec(),
        });
    }
    let both = g.concat(dec, enc)?;
    linear(g, both, p)
}

/// Named intermediate shapes from one forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    model_forward_traced(g, image, p, cfg, None)
}

pub fn model_forward_traced<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let expected = [cfg.input_size, cfg.input_size, cfg.in_channels];
    if g.shape(image) != expected {
        return Err(Error::Shape {
            op: "model_forward",
            lhs: g.shape(image).to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let mut record = |name: &str, g: &Graph<T>, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((name.to_string(), g.shape(v).to_vec()));
        }
    };
    let run_stage = |g: &mut Graph<T>, mut x: Var, blocks: &[BlockParams<Var>], s: usize| {
        let (na, dina) = cfg.stage_specs(s);
        for b in blocks {
            x = block_pair_forward(g, x, b, &na, &dina)?;
        }
        Ok::<Var, Error>(x)
    };

    let mut x = patch_embed(g, image, &p.embed, &p.embed_norm)?;
    record("embed", g, x);
    let mut taps = Vec::with_capacity(3);
    for s in 0..3 {
        x = run_stage(g, x, &p.encoder[s], s)?;
        record(&format!("encoder.{s}"), g, x);
        taps.push(x);
        x = patch_merge(g, x, p.merge[s].0)?;
        record(&format!("merge.{s}"), g, x);
    }
    x = run_stage(g, x, &p.bottleneck, 3)?;
    record("bottleneck", g, x);
    for j in 0..3 {
        let level = 2 - j;
        x = patch_expand(g, x, p.expand[j].0)?;
        record(&format!("expand.{j}"), g, x);
        if cfg.has_skip(level) {
            x = skip_fuse(g, x, taps[level], &p.fuse[level])?;
            record(&format!("fuse.{level}"), g, x);
        }
        x = run_stage(g, x, &p.decoder[j], level)?;
        record(&format!("decoder.{j}"), g, x);
    }
    x = final_expand(g, x, p.final_expand.0)?;
    record("final_expand", g, x);
    let logits = linear(g, x, &p.head)?;
    record("logits", g, logits);
    Ok(logits)
}

/// Inference on one stored image, returning `[H, W, classes]` logits.
pub fn predict_logits(image: &Tensor, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(image.clone());
    let pv = params::bind_frozen(&mut g, p);
    let out = model_forward(&mut g, x, &pv, cfg)?;
    Ok(g.value(out).clone())
}

/// Argmax over classes, one label per pixel. Ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    logits
        .data()
        .chunks(logits.last_dim())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// The shapes every stage must produce, derived from the config alone.
pub fn expected_shape_trace(cfg: &ModelConfig) -> ShapeTrace {
    let side = |s: usize| cfg.stage_side(s);
    let mut t = vec![("embed".to_string(), vec![side(0), side(0), cfg.stage_dim(0)])];
    for s in 0..3 {
        t.push((format!("encoder.{s}"), vec![side(s), side(s), cfg.stage_dim(s)]));
        t.push((format!("merge.{s}"), vec![side(s + 1), side(s + 1), cfg.stage_dim(s + 1)]));
    }
    t.push(("bottleneck".into(), vec![side(3), side(3), cfg.stage_dim(3)]));
    for j in 0..3 {
        let level = 2 - j;
        let shape = vec![side(level), side(level), cfg.stage_dim(level)];
        t.push((format!("expand.{j}"), shape.clone()));
        if cfg.has_skip(level) {
            t.push((format!("fuse.{level}"), shape.clone()));
        }
        t.push((format!("decoder.{j}"), shape));
    }
    let hw = cfg.input_size;
    t.push(("final_expand".into(), vec![hw, hw, cfg.embed_dim]));
    t.push(("logits".into(), vec![hw, hw, cfg.num_classes]));
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTree;

    fn run<F>(inputs: Vec<Tensor>, f: F) -> Result<Tensor>
    where
        F: FnOnce(&mut Graph<f32>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    }

    fn eye(n: usize, m: usize, offset: usize) -> Tensor {
        let mut t = Tensor::zeros([n, m]);
        for i in 0..m.min(n.saturating_sub(offset)) {
            t.data_mut()[(i + offset) * m + i] = 1.0;
        }
        t
    }

    fn identity_norm(g: &mut Graph<f32>, c: usize) -> LayerNormParams<Var> {
        LayerNormParams {
            gamma: g.constant(Tensor::ones([c])),
            beta: g.constant(Tensor::zeros([c])),
        }
    }

    #[test]
    fn embed_shape_and_constant_image() {
        let mut rng = Rng::new(1);
        let proj = LinearParams::init(16, 16, true, &mut rng);
        let y = run(vec![Tensor::full([64, 64, 1], 0.7)], |g, v| {
            let p = params::bind_frozen(g, &proj);
            let n = identity_norm(g, 16);
            patch_embed(g, v[0], &p, &n)
        })
        .unwrap();
        assert_eq!(y.shape(), [16, 16, 16]);
        let first = y.data()[..16].to_vec();
        assert!(y.data().chunks(16).all(|t| t == first));
    }

    #[test]
    fn embed_locality() {
        // One 4x4 patch differs; only its token differs.
        let mut img = Tensor::zeros([8, 8, 1]);
        for dy in 0..4 {
            for dx in 0..4 {
                img.data_mut()[(4 + dy) * 8 + dx] = (dy * 4 + dx) as f32 + 1.0;
            }
        }
        let mut rng = Rng::new(2);
        let proj = LinearParams::init(16, 4, true, &mut rng);
        let y = run(vec![img], |g, v| {
            let p = params::bind_frozen(g, &proj);
            let n = identity_norm(g, 4);
            patch_embed(g, v[0], &p, &n)
        })
        .unwrap();
        let tokens: Vec<&[f32]> = y.data().chunks(4).collect();
        assert_eq!(tokens[1], tokens[0]);
        assert_eq!(tokens[3], tokens[0]);
        assert_ne!(tokens[2], tokens[0], "token (1, 0) holds the odd patch");
    }

    #[test]
    fn embed_flatten_order() {
        // Identity projection exposes the patch flattening directly.
        let mut img = Tensor::zeros([4, 4, 2]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let g_out = run(vec![img.clone(), eye(32, 32, 0)], |g, v| {
            let p = LinearParams { w: v[1], b: None };
            let patches = g.gather(v[0], Arc::from(patch_index(4, 4, 2)), &[1, 1, 32])?;
            linear(g, patches, &p)
        })
        .unwrap();
        // Row-major pixels with channels innermost is already the flat
        // image order for a single patch.
        assert_eq!(g_out.data(), img.data());
    }

    #[test]
    fn embed_rejects_bad_sides() {
        let mut rng = Rng::new(3);
        let proj = LinearParams::init(16, 4, true, &mut rng);
        let r = run(vec![Tensor::zeros([6, 8, 1])], |g, v| {
            let p = params::bind_frozen(g, &proj);
            let n = identity_norm(g, 4);
            patch_embed(g, v[0], &p, &n)
        });
        assert!(r.is_err());
    }

    #[test]
    fn merge_shapes_and_top_left_selector() {
        let x = Rng::new(4).normal_tensor(&[8, 8, 3], 1.0);
        // Output channel t copies input channel t of the top-left token.
        let y = run(vec![x.clone(), eye(12, 6, 0)], |g, v| patch_merge(g, v[0], v[1])).unwrap();
        assert_eq!(y.shape(), [4, 4, 6]);
        for r in 0..4 {
            for c in 0..4 {
                for t in 0..3 {
                    let got = y.data()[(r * 4 + c) * 6 + t];
                    let want = x.data()[((2 * r) * 8 + 2 * c) * 3 + t];
                    assert_eq!(got, want);
                }
                // Channels 3..6 pick the top-right token.
                for t in 0..3 {
                    let got = y.data()[(r * 4 + c) * 6 + 3 + t];
                    let want = x.data()[((2 * r) * 8 + 2 * c + 1) * 3 + t];
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn merge_rejects_odd_sides() {
        let r = run(vec![Tensor::zeros([3, 4, 2]), Tensor::zeros([8, 4])], |g, v| {
            patch_merge(g, v[0], v[1])
        });
        assert!(r.is_err());
    }

    #[test]
    fn expand_shapes_and_rejects_odd_dim() {
        let y = run(vec![Tensor::ones([4, 4, 8]), Tensor::ones([8, 16])], |g, v| {
            patch_expand(g, v[0], v[1])
        })
        .unwrap();
        assert_eq!(y.shape(), [8, 8, 4]);
        let r = run(vec![Tensor::ones([4, 4, 3]), Tensor::ones([3, 6])], |g, v| {
            patch_expand(g, v[0], v[1])
        });
        assert!(r.is_err());
    }

    #[test]
    fn expand_after_merge_restores_shape() {
        let y = run(
            vec![Tensor::ones([8, 8, 4]), Tensor::ones([16, 8]), Tensor::ones([8, 16])],
            |g, v| {
                let m = patch_merge(g, v[0], v[1])?;
                patch_expand(g, m, v[2])
            },
        )
        .unwrap();
        assert_eq!(y.shape(), [8, 8, 4]);
    }

    #[test]
    fn expand_inverts_merge_with_permutation_projections() {
        // On a 2x2 map with dim 2 where only channel 0 is populated, merge
        // can keep the four channel-0 values (4 dim -> 2 dim = 4 slots) and
        // expand can route each back to its quadrant.
        let mut x = Tensor::zeros([2, 2, 2]);
        for (q, v) in [1.5f32, -2.0, 3.25, 0.5].into_iter().enumerate() {
            x.data_mut()[q * 2] = v;
        }
        let mut merge_w = Tensor::zeros([8, 4]);
        for q in 0..4 {
            merge_w.data_mut()[(q * 2) * 4 + q] = 1.0;
        }
        // Expand: dim 4 -> 8, quadrant q takes channels 2q..2q+2 and its
        // channel 0 must carry slot q.
        let mut expand_w = Tensor::zeros([4, 8]);
        for q in 0..4 {
            expand_w.data_mut()[q * 8 + 2 * q] = 1.0;
        }
        let y = run(vec![x.clone(), merge_w, expand_w], |g, v| {
            let m = patch_merge(g, v[0], v[1])?;
            patch_expand(g, m, v[2])
        })
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn final_expand_shape_and_constants() {
        let c = 3;
        // Every output group copies the token: a constant-preserving map.
        let mut w = Tensor::zeros([c, 16 * c]);
        for q in 0..16 {
            for t in 0..c {
                w.data_mut()[t * 16 * c + q * c + t] = 1.0;
            }
        }
        let token = [0.25f32, -1.0, 2.0];
        let x = Tensor::new([16, 16, c], token.repeat(256)).unwrap();
        let y = run(vec![x, w], |g, v| final_expand(g, v[0], v[1])).unwrap();
        assert_eq!(y.shape(), [64, 64, c]);
        assert!(y.data().chunks(c).all(|p| p == token));
    }

    #[test]
    fn final_expand_quadrant_layout() {
        // Identity projection: pixel (y, x) reads channel slot (y%4)*4 + x%4.
        let mut x = Tensor::zeros([1, 1, 16]);
        x.data_mut().copy_from_slice(&(0..16).map(|v| v as f32).collect::<Vec<_>>());
        let mut w = Tensor::zeros([16, 256]);
        for i in 0..16 {
            w.data_mut()[i * 256 + i * 16 + i] = 1.0;
        }
        let y = run(vec![x, w], |g, v| final_expand(g, v[0], v[1])).unwrap();
        assert_eq!(y.shape(), [4, 4, 16]);
        for py in 0..4 {
            for px in 0..4 {
                let q = py * 4 + px;
                assert_eq!(y.data()[q * 16 + q], q as f32);
            }
        }
    }

    #[test]
    fn skip_fuse_selectors_and_recomposition() {
        let mut rng = Rng::new(5);
        let dec = rng.normal_tensor::<f32>(&[2, 3, 4], 1.0);
        let enc = rng.normal_tensor::<f32>(&[2, 3, 4], 1.0);
        let fuse = |w: Tensor, b: Tensor| {
            run(vec![dec.clone(), enc.clone(), w, b], |g, v| {
                let p = LinearParams { w: v[2], b: Some(v[3]) };
                skip_fuse(g, v[0], v[1], &p)
            })
            .unwrap()
        };
        assert_eq!(fuse(eye(8, 4, 0), Tensor::zeros([4])), dec);
        assert_eq!(fuse(eye(8, 4, 4), Tensor::zeros([4])), enc);

        let w = rng.normal_tensor::<f32>(&[8, 4], 1.0);
        let b = rng.normal_tensor::<f32>(&[4], 1.0);
        let y = fuse(w.clone(), b.clone());
        for tok in 0..6 {
            let cat: Vec<f64> = dec.data()[tok * 4..tok * 4 + 4]
                .iter()
                .chain(&enc.data()[tok * 4..tok * 4 + 4])
                .map(|&v| v as f64)
                .collect();
            for j in 0..4 {
                let want: f64 = (0..8).map(|i| cat[i] * w.data()[i * 4 + j] as f64).sum::<f64>()
                    + b.data()[j] as f64;
                assert!((y.data()[tok * 4 + j] as f64 - want).abs() < 1e-5);
            }
        }
        let bad = run(
            vec![dec.clone(), Tensor::zeros([3, 2, 4]), eye(8, 4, 0)],
            |g, v| skip_fuse(g, v[0], v[1], &LinearParams { w: v[2], b: None }),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn micro_model_shape_chain() {
        let cfg = ModelConfig::micro(64, 16);
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Rng::new(2).normal_tensor(&[64, 64, 1], 1.0));
        let pv = params::bind_frozen(&mut g, &p);
        let mut trace = ShapeTrace::new();
        let y = model_forward_traced(&mut g, x, &pv, &cfg, Some(&mut trace)).unwrap();
        assert_eq!(g.shape(y), [64, 64, 2]);
        assert_eq!(trace, expected_shape_trace(&cfg));
    }

    #[test]
    fn zero_skips_runs() {
        let cfg = ModelConfig {
            num_skips: 0,
            ..ModelConfig::micro(32, 8)
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert!(p.fuse.is_empty());
        let y = predict_logits(&Tensor::zeros([32, 32, 1]), &p, &cfg).unwrap();
        assert_eq!(y.shape(), [32, 32, 2]);
    }

    #[test]
    fn single_skip_is_the_shallowest_level() {
        let cfg = ModelConfig {
            num_skips: 1,
            ..ModelConfig::micro(32, 8)
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert_eq!(p.fuse.len(), 1);
        assert_eq!(p.fuse[0].w.shape(), [16, 8]);
        let names: Vec<String> = expected_shape_trace(&cfg).into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"fuse.0".to_string()));
        assert!(!names.contains(&"fuse.2".to_string()));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::micro(48, 8).validate().is_err());
        assert!(ModelConfig::micro(224, 8).validate().is_ok());
        let mut cfg = ModelConfig::micro(32, 6);
        assert!(cfg.validate().is_err(), "head_dim 4 does not divide 6");
        cfg.heads = Some([1, 1, 1, 1]);
        assert!(cfg.validate().is_ok());
        cfg.num_skips = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::micro(32, 8);
        cfg.kernel_size = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_image_shape_is_an_error() {
        let cfg = ModelConfig::micro(32, 8);
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert!(predict_logits(&Tensor::zeros([64, 64, 1]), &p, &cfg).is_err());
    }

    #[test]
    fn dilation_schedule() {
        let cfg = ModelConfig::preset(Preset::Tiny);
        let d: Vec<usize> = (0..4).map(|s| cfg.stage_dilation(s)).collect();
        assert_eq!(d, [8, 4, 2, 1]);
        let micro = ModelConfig::micro(64, 16);
        let d: Vec<usize> = (0..4).map(|s| micro.stage_dilation(s)).collect();
        assert_eq!(d, [5, 2, 1, 1]);
    }

    #[test]
    fn classifier_alone_counts_ten() {
        let mut rng = Rng::new(0);
        let head = LinearParams::init(4, 2, true, &mut rng);
        assert_eq!(params::count(&head), 10);
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for cfg in [
            ModelConfig::micro(32, 4),
            ModelConfig {
                num_skips: 1,
                use_positional_bias: false,
                ..ModelConfig::micro(64, 16)
            },
            ModelConfig {
                stage_depths: [2, 1, 3, 2],
                decoder_depths: [1, 0, 2],
                ..ModelConfig::micro(64, 8)
            },
        ] {
            let p = ModelParams::init(&cfg, 3).unwrap();
            assert_eq!(cfg.param_count(), params::count(&p));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::micro(32, 8);
        assert_eq!(ModelParams::init(&cfg, 9).unwrap(), ModelParams::init(&cfg, 9).unwrap());
        assert_ne!(ModelParams::init(&cfg, 9).unwrap(), ModelParams::init(&cfg, 10).unwrap());
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let cfg = ModelConfig::micro(32, 8);
        let p = ModelParams::init(&cfg, 1).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed.w");
        assert_eq!(names.last().unwrap(), "head.b");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(p.check_shapes(&cfg).is_ok());
        assert!(p.check_shapes(&ModelConfig::micro(32, 4)).is_err());
    }
}
