//! Losses, Adam, augmentation and the training loop.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics;
use crate::params::{self, ParamTree};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{model_forward, ModelConfig, ModelParams};

pub const DICE_SMOOTH: f64 = 1e-5;

/// One image with its label mask, `image` shaped `[H, W, channels]` and
/// `mask` holding `H * W` labels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor, mask: Vec<u8>) -> Result<Self> {
        let [h, w, _] = image.shape()[..] else {
            return Err(Error::invalid(format!(
                "sample image must be [H, W, C], got {:?}",
                image.shape()
            )));
        };
        if mask.len() != h * w {
            return Err(Error::invalid(format!(
                "mask holds {} labels for a {h}x{w} image",
                mask.len()
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

fn targets(mask: &[u8], classes: usize) -> Result<Arc<[usize]>> {
    if let Some(&label) = mask.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: label as usize,
            classes,
        });
    }
    Ok(mask.iter().map(|&l| l as usize).collect())
}

fn flat_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &[u8]) -> Result<(Var, usize)> {
    let classes = *g.shape(logits).last().unwrap();
    let pixels = g.value(logits).numel() / classes;
    if pixels != mask.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok((g.reshape(logits, &[pixels, classes])?, classes))
}

/// Mean over pixels of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &[u8]) -> Result<Var> {
    let (flat, classes) = flat_logits(g, logits, mask)?;
    let t = targets(mask, classes)?;
    g.cross_entropy(flat, t)
}

/// Soft Dice loss over all classes, `1 - mean_c (2 Σ p g + s) / (Σ p + Σ g + s)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &[u8]) -> Result<Var> {
    let (flat, classes) = flat_logits(g, logits, mask)?;
    targets(mask, classes)?;
    let probs = g.softmax(flat);
    let mut onehot = vec![T::zero(); mask.len() * classes];
    let mut counts = vec![0.0; classes];
    for (i, &l) in mask.iter().enumerate() {
        onehot[i * classes + l as usize] = T::one();
        counts[l as usize] += 1.0;
    }
    let onehot = g.constant(Tensor::new([mask.len(), classes], onehot)?);
    let inter = g.mul(probs, onehot)?;
    let inter = g.sum_rows(inter);
    let num = g.scale(inter, T::from_f64(2.0));
    let smooth = g.constant(Tensor::full([classes], T::from_f64(DICE_SMOOTH)));
    let num = g.add(num, smooth)?;
    let psum = g.sum_rows(probs);
    let gsum = g.constant(Tensor::from_f64_slice(
        [classes],
        &counts.iter().map(|c| c + DICE_SMOOTH).collect::<Vec<_>>(),
    )?);
    let den = g.add(psum, gsum)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio);
    let neg = g.scale(mean, -T::one());
    let one = g.constant(Tensor::scalar(T::one()));
    g.add(neg, one)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 0.5, dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce >= 0.0 && self.dice >= 0.0) || self.ce + self.dice == 0.0 {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative and not both zero, got ce={} dice={}",
                self.ce, self.dice
            )));
        }
        Ok(())
    }
}

/// `λ_ce · CE + λ_dice · Dice`. A zero weight drops its term entirely.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    mask: &[u8],
    w: LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut terms = Vec::with_capacity(2);
    if w.ce > 0.0 {
        let ce = cross_entropy(g, logits, mask)?;
        terms.push(if w.ce == 1.0 { ce } else { g.scale(ce, T::from_f64(w.ce)) });
    }
    if w.dice > 0.0 {
        let d = dice_loss(g, logits, mask)?;
        terms.push(if w.dice == 1.0 { d } else { g.scale(d, T::from_f64(w.dice)) });
    }
    match terms[..] {
        [a] => Ok(a),
        [a, b] => g.add(a, b),
        _ => unreachable!("validated weights leave one or two terms"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// AdamW-style decay applied to the parameter instead of the gradient.
    #[serde(default)]
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: false,
        }
    }
}

/// Adam moments and step counter. Moments are kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<X: ParamTree<Tensor>>(params: &X, cfg: AdamConfig) -> Self {
        let zeros = |p: &X| p.leaves().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// Scalar Adam update at step `t` (1-based); returns the new parameter.
pub fn adam_update(theta: f64, grad: f64, m: &mut f64, v: &mut f64, t: u64, cfg: &AdamConfig) -> f64 {
    let g = if cfg.decoupled {
        grad
    } else {
        grad + cfg.weight_decay * theta
    };
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let mhat = *m / (1.0 - cfg.beta1.powi(t as i32));
    let vhat = *v / (1.0 - cfg.beta2.powi(t as i32));
    let mut next = theta - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    if cfg.decoupled {
        next -= cfg.lr * cfg.weight_decay * theta;
    }
    next
}

/// One Adam step over every leaf; `grads` follow the tree's leaf order.
pub fn adam_step<X: ParamTree<Tensor>>(params: &mut X, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    let mut leaves = params.leaves_mut();
    if leaves.len() != grads.len() || leaves.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment buffers",
            leaves.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let cfg = state.cfg;
    for (((p, g), m), v) in leaves.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *x = adam_update(*x as f64, gr as f64, mi, vi, state.t, &cfg) as f32;
        }
    }
    Ok(())
}

/// A paired flip/rotation. Flips apply first, then `rot` clockwise
/// quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot: u8,
}

impl Transform {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            flip_h: rng.coin(),
            flip_v: rng.coin(),
            rot: rng.below(4) as u8,
        }
    }

    /// Index into the 16 combinations.
    pub fn index(&self) -> usize {
        (self.flip_h as usize) << 3 | (self.flip_v as usize) << 2 | self.rot as usize
    }

    /// Where source pixel `(r, c)` lands in an `h x w` map.
    pub fn map(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut r, mut c, mut h, mut w) = (r, c, h, w);
        if self.flip_h {
            c = w - 1 - c;
        }
        if self.flip_v {
            r = h - 1 - r;
        }
        for _ in 0..self.rot % 4 {
            (r, c) = (c, h - 1 - r);
            (h, w) = (w, h);
        }
        (r, c)
    }

    fn apply_grid<E: Copy + Default>(&self, src: &[E], h: usize, w: usize, ch: usize) -> Vec<E> {
        let ow = if self.rot % 2 == 1 { h } else { w };
        let mut out = vec![E::default(); src.len()];
        for r in 0..h {
            for c in 0..w {
                let (nr, nc) = self.map(r, c, h, w);
                let (s, d) = ((r * w + c) * ch, (nr * ow + nc) * ch);
                out[d..d + ch].copy_from_slice(&src[s..s + ch]);
            }
        }
        out
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let [h, w, ch] = sample.image.shape()[..] else {
            unreachable!("Sample::new checks the rank")
        };
        if self.rot % 2 == 1 && h != w {
            return Err(Error::invalid(format!(
                "quarter-turn rotation needs a square image, got {h}x{w}"
            )));
        }
        let image = Tensor::new([h, w, ch], self.apply_grid(sample.image.data(), h, w, ch))?;
        let mask = self.apply_grid(&sample.mask, h, w, 1);
        Ok(Sample { image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, rotate: true }
    }
}

pub fn augment(sample: &Sample, cfg: AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    let mut t = Transform::sample(rng);
    if !cfg.flip {
        t.flip_h = false;
        t.flip_v = false;
    }
    if !cfg.rotate {
        t.rot = 0;
    }
    t.apply(sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many iterations even if epochs remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Evaluate DSC every this many iterations; 0 disables it.
    #[serde(default)]
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            max_iterations: None,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overrides: toy learning rate and a fixed iteration budget.
    pub fn toy(iterations: usize, seed: u64) -> Self {
        Self {
            epochs: usize::MAX,
            max_iterations: Some(iterations),
            seed,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.weight_decay >= 0.0) {
            return Err(Error::invalid("lr and weight_decay must be non-negative"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dsc: Option<f64>,
}

/// Mean combined loss over a batch, its gradients in leaf order.
pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
    weights: LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::<f32>::new();
    let pv = params::bind(&mut g, params);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(s.image.clone());
        let logits = model_forward(&mut g, x, &pv, cfg)?;
        losses.push(combined_loss(&mut g, logits, &s.mask, weights)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, 1.0 / batch.len() as f32);
    g.backward(loss)?;
    let grads = pv
        .leaves()
        .into_iter()
        .zip(params.leaves())
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((g.value(loss).data()[0] as f64, grads))
}

/// Train from `params`, calling `on_log` after every iteration.
pub fn train_loop(
    cfg: &ModelConfig,
    mut params: ModelParams,
    train: &[Sample],
    eval: Option<&[Sample]>,
    tcfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(ModelParams, Vec<LogRecord>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    tcfg.validate()?;
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let mut rng = Rng::new(tcfg.seed);
    let mut state = OptimState::new(&params, tcfg.adam);
    let mut log = Vec::new();
    let limit = tcfg.max_iterations.unwrap_or(usize::MAX);
    let mut iter = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for _ in 0..tcfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(tcfg.batch_size) {
            if iter >= limit {
                break 'epochs;
            }
            iter += 1;
            let batch = chunk
                .iter()
                .map(|&i| augment(&train[i], tcfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradients(&params, cfg, &batch, tcfg.loss)?;
            adam_step(&mut params, &grads, &mut state)?;
            let eval_dsc = if tcfg.eval_interval > 0 && iter % tcfg.eval_interval == 0 {
                Some(metrics::mean_foreground_dsc(&params, cfg, eval.unwrap_or(train))?)
            } else {
                None
            };
            let record = LogRecord {
                iter,
                loss,
                lr: tcfg.adam.lr,
                eval_dsc,
            };
            on_log(&record)?;
            log.push(record);
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: &[f64], shape: [usize; 3], mask: &[u8], which: &str) -> f64 {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64_slice(shape, logits).unwrap());
        let out = match which {
            "ce" => cross_entropy(&mut g, l, mask),
            "dice" => dice_loss(&mut g, l, mask),
            _ => combined_loss(&mut g, l, mask, LossWeights::default()),
        }
        .unwrap();
        g.value(out).data()[0]
    }

    #[test]
    fn uniform_binary_losses() {
        let logits = [0.0; 8];
        let mask = [0, 1, 0, 1];
        let ce = loss_of(&logits, [2, 2, 2], &mask, "ce");
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        // Each class: (2 * 0.5 * 2 + s) / (0.5 * 4 + 2 + s).
        let s = DICE_SMOOTH;
        let per_class = (2.0 + s) / (4.0 + s);
        let dice = loss_of(&logits, [2, 2, 2], &mask, "dice");
        assert!((dice - (1.0 - per_class)).abs() < 1e-12);
        assert!((dice - 0.5).abs() < 1e-5);
        let both = loss_of(&logits, [2, 2, 2], &mask, "both");
        assert!((both - (0.5 * ce + 0.5 * dice)).abs() < 1e-12);
    }

    #[test]
    fn saturated_and_wrong_predictions() {
        let mask = [1u8, 0, 0, 1];
        let good: Vec<f64> = mask.iter().flat_map(|&l| if l == 1 { [0.0, 20.0] } else { [20.0, 0.0] }).collect();
        assert!(loss_of(&good, [2, 2, 2], &mask, "ce") < 1e-6 * 3.0);
        assert!(loss_of(&good, [2, 2, 2], &mask, "dice") < 1e-3);
        let bad: Vec<f64> = mask.iter().flat_map(|&l| if l == 1 { [40.0, 0.0] } else { [0.0, 40.0] }).collect();
        assert!((loss_of(&bad, [2, 2, 2], &mask, "dice") - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ce_is_permutation_invariant() {
        let mut rng = Rng::new(3);
        let logits: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let mask = [0u8, 2, 1, 1, 0, 2];
        let perm = [3, 0, 5, 1, 4, 2];
        let plogits: Vec<f64> = perm.iter().flat_map(|&i| logits[i * 3..i * 3 + 3].to_vec()).collect();
        let pmask: Vec<u8> = perm.iter().map(|&i| mask[i]).collect();
        let a = loss_of(&logits, [2, 3, 3], &mask, "ce");
        let b = loss_of(&plogits, [2, 3, 3], &pmask, "ce");
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn weights_select_terms() {
        let mut rng = Rng::new(4);
        let logits: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mask = [0u8, 1, 1, 0];
        let with = |ce, dice| {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::from_f64_slice([2, 2, 2], &logits).unwrap());
            let out = combined_loss(&mut g, l, &mask, LossWeights { ce, dice }).unwrap();
            g.value(out).data()[0]
        };
        assert_eq!(with(1.0, 0.0), loss_of(&logits, [2, 2, 2], &mask, "ce"));
        assert_eq!(with(0.0, 1.0), loss_of(&logits, [2, 2, 2], &mask, "dice"));
        assert!(LossWeights { ce: 0.0, dice: 0.0 }.validate().is_err());
        assert!(LossWeights { ce: -1.0, dice: 1.0 }.validate().is_err());
    }

    #[test]
    fn out_of_range_label() {
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::zeros([1, 2, 2]));
        assert!(matches!(
            cross_entropy(&mut g, l, &[0, 2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(dice_loss(&mut g, l, &[0, 2]).is_err());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![crate::params::Leaf(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap())];
        let before = p.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimState::new(&p, cfg);
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros([3])], &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for g in [0.3, -2.0, 1e-4] {
            let (mut m, mut v) = (0.0, 0.0);
            let next = adam_update(1.0, g, &mut m, &mut v, 1, &cfg);
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((next - 1.0 - want).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_matches_hand_trace() {
        // Hand-rolled: coupled decay, constant raw gradient.
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let (mut theta, mut m, mut v) = (0.5f64, 0.0, 0.0);
        let (mut ot, mut om, mut ov) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3u64 {
            theta = adam_update(theta, 0.2, &mut m, &mut v, t, &cfg);
            let g = 0.2 + 0.1 * ot;
            om = 0.9 * om + 0.1 * g;
            ov = 0.999 * ov + 0.001 * g * g;
            let mh = om / (1.0 - 0.9f64.powi(t as i32));
            let vh = ov / (1.0 - 0.999f64.powi(t as i32));
            ot -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((theta - ot).abs() < 1e-7, "t={t}: {theta} vs {ot}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            decoupled: true,
            ..AdamConfig::default()
        };
        let (mut m, mut v) = (0.0, 0.0);
        let next = adam_update(2.0, 0.0, &mut m, &mut v, 1, &cfg);
        assert!((next - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    fn coded_sample(h: usize, w: usize) -> Sample {
        let image = Tensor::new([h, w, 1], (0..h * w).map(|i| i as f32).collect()).unwrap();
        let mask = (0..h * w).map(|i| (i % 251) as u8).collect();
        Sample::new(image, mask).unwrap()
    }

    #[test]
    fn flips_are_involutions_and_rotation_has_order_four() {
        let s = coded_sample(5, 5);
        for t in [
            Transform { flip_h: true, ..Default::default() },
            Transform { flip_v: true, ..Default::default() },
        ] {
            assert_eq!(t.apply(&t.apply(&s).unwrap()).unwrap(), s);
        }
        let r = Transform { rot: 1, ..Default::default() };
        let mut x = s.clone();
        for _ in 0..4 {
            x = r.apply(&x).unwrap();
        }
        assert_eq!(x, s);
        assert_ne!(r.apply(&s).unwrap(), s);
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        let s = coded_sample(2, 2);
        let r = Transform { rot: 1, ..Default::default() }.apply(&s).unwrap();
        // [[0, 1], [2, 3]] -> [[2, 0], [3, 1]]
        assert_eq!(r.image.data(), [2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn mask_follows_image_under_every_transform() {
        let s = coded_sample(6, 6);
        for idx in 0..16 {
            let t = Transform {
                flip_h: idx & 8 != 0,
                flip_v: idx & 4 != 0,
                rot: (idx & 3) as u8,
            };
            let out = t.apply(&s).unwrap();
            for (px, &m) in out.image.data().iter().zip(&out.mask) {
                assert_eq!((*px as usize % 251) as u8, m);
            }
        }
    }

    #[test]
    fn non_square_rotation_is_rejected() {
        let s = coded_sample(2, 3);
        assert!(Transform { rot: 1, ..Default::default() }.apply(&s).is_err());
        assert!(Transform { rot: 2, flip_h: true, ..Default::default() }.apply(&s).is_ok());
    }

    #[test]
    fn transform_distribution_is_uniform() {
        let mut rng = Rng::new(17);
        let mut counts = [0usize; 16];
        for _ in 0..10_000 {
            counts[Transform::sample(&mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 16.0).abs() < 0.02, "{counts:?}");
        }
    }
}
