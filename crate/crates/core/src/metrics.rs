//! Segmentation metrics: confusion counts, Dice, sensitivity, specificity,
//! accuracy and Hausdorff distance.
//!
//! A ratio whose denominator is zero reports 1.0 (vacuous agreement). For
//! Dice that is exactly the case where prediction and ground truth are
//! both empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Sample;
use crate::unet::{argmax_labels, predict_logits, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One-vs-rest counts for `class`.
pub fn confusion(pred: &[u8], gt: &[u8], class: u8) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// An unreduced fraction; a zero denominator reads as 1.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.den == 0 {
            1.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Exact equality as rationals, with `x/0` equal to `1/1`.
    pub fn same(&self, other: &Ratio) -> bool {
        let norm = |r: &Ratio| if r.den == 0 { (1u128, 1u128) } else { (r.num as u128, r.den as u128) };
        let (a, b) = (norm(self), norm(other));
        a.0 * b.1 == b.0 * a.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceVariant {
    /// `2TP / (2TP + FP + FN)`.
    #[default]
    Standard,
    /// `2TP / (2TP + TN + FP + FN)`, the form with TN in the denominator.
    Printed,
}

#[derive(Debug, Clone, Copy)]
pub struct BasicMetrics {
    pub se: Ratio,
    pub sp: Ratio,
    pub acc: Ratio,
    pub dsc: Ratio,
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    basic_metrics_with(c, DiceVariant::Standard)
}

pub fn basic_metrics_with(c: &ConfusionCounts, variant: DiceVariant) -> BasicMetrics {
    let dsc_den = match variant {
        DiceVariant::Standard => 2 * c.tp + c.fp + c.fn_,
        DiceVariant::Printed => 2 * c.tp + c.tn + c.fp + c.fn_,
    };
    BasicMetrics {
        se: Ratio { num: c.tp, den: c.tp + c.fn_ },
        sp: Ratio { num: c.tn, den: c.tn + c.fp },
        acc: Ratio { num: c.tp + c.tn, den: c.total() },
        dsc: Ratio { num: 2 * c.tp, den: dsc_den },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffMode {
    #[default]
    Max,
    /// 95th percentile of the pooled directed distances.
    P95,
}

fn foreground(mask: &[u8], width: usize, class: u8) -> Vec<(i64, i64)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| ((i / width) as i64, (i % width) as i64))
        .collect()
}

/// For each point of `a`, the squared distance to the nearest point of `b`.
fn directed_sq(a: &[(i64, i64)], b: &[(i64, i64)]) -> Vec<i64> {
    a.iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(br, bc)| (r - br).pow(2) + (c - bc).pow(2))
                .min()
                .expect("non-empty")
        })
        .collect()
}

/// Symmetric Hausdorff distance between the `class` pixels of two masks, in
/// pixels. `None` when either set is empty.
pub fn hausdorff(pred: &[u8], gt: &[u8], width: usize, class: u8, mode: HausdorffMode) -> Result<Option<f64>> {
    if pred.len() != gt.len() || width == 0 || !pred.len().is_multiple_of(width) {
        return Err(Error::Shape {
            op: "hausdorff",
            lhs: vec![pred.len()],
            rhs: vec![gt.len(), width],
        });
    }
    let (a, b) = (foreground(pred, width, class), foreground(gt, width, class));
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut ab = directed_sq(&a, &b);
    let ba = directed_sq(&b, &a);
    Ok(Some(match mode {
        HausdorffMode::Max => (*ab.iter().chain(&ba).max().unwrap() as f64).sqrt(),
        HausdorffMode::P95 => {
            ab.extend(ba);
            let mut d: Vec<f64> = ab.into_iter().map(|s| (s as f64).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            percentile_linear(&d, 95.0)
        }
    }))
}

/// Linear-interpolation percentile of sorted data.
fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

mod undefined {
    //! `Option<f64>` as a number or the string "undefined".

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "undefined" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    #[serde(with = "undefined")]
    pub hd: Option<f64>,
    #[serde(with = "undefined")]
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    #[serde(with = "undefined")]
    pub hd: Option<f64>,
    #[serde(with = "undefined")]
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub dice_variant: DiceVariant,
    /// Means over foreground classes; background is reported but excluded.
    pub mean: MeanMetrics,
    pub classes: Vec<ClassMetrics>,
    pub notes: String,
}

pub const REPORT_NOTES: &str = "per-image metrics averaged over images, then over foreground classes; \
a zero denominator reports 1.0; hd/hd95 average only images where both sets are non-empty, \
\"undefined\" when there are none";

pub fn class_name(class: usize, classes: usize) -> String {
    match (class, classes) {
        (0, _) => "background".into(),
        (1, 2) => "foreground".into(),
        (c, _) => format!("class_{c}"),
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Metrics for predicted label maps against their ground truth.
pub fn evaluate_predictions(
    preds: &[Vec<u8>],
    truth: &[(&[u8], usize)],
    classes: usize,
    variant: DiceVariant,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            truth.len()
        )));
    }
    let n = preds.len() as f64;
    let mut per_class = Vec::with_capacity(classes);
    for class in 0..classes {
        let (mut dsc, mut se, mut sp, mut acc) = (0.0, 0.0, 0.0, 0.0);
        let mut hd = Vec::with_capacity(preds.len());
        let mut hd95 = Vec::with_capacity(preds.len());
        for (pred, &(gt, width)) in preds.iter().zip(truth) {
            let m = basic_metrics_with(&confusion(pred, gt, class as u8)?, variant);
            dsc += m.dsc.value();
            se += m.se.value();
            sp += m.sp.value();
            acc += m.acc.value();
            hd.push(hausdorff(pred, gt, width, class as u8, HausdorffMode::Max)?);
            hd95.push(hausdorff(pred, gt, width, class as u8, HausdorffMode::P95)?);
        }
        per_class.push(ClassMetrics {
            class,
            name: class_name(class, classes),
            dsc: dsc / n,
            se: se / n,
            sp: sp / n,
            acc: acc / n,
            hd: mean_defined(hd.into_iter()),
            hd95: mean_defined(hd95.into_iter()),
        });
    }
    let fg = &per_class[1..];
    let avg = |f: fn(&ClassMetrics) -> f64| fg.iter().map(f).sum::<f64>() / fg.len() as f64;
    let mean = MeanMetrics {
        dsc: avg(|c| c.dsc),
        se: avg(|c| c.se),
        sp: avg(|c| c.sp),
        acc: avg(|c| c.acc),
        hd: mean_defined(fg.iter().map(|c| c.hd)),
        hd95: mean_defined(fg.iter().map(|c| c.hd95)),
    };
    Ok(MetricsReport {
        images: preds.len(),
        dice_variant: variant,
        mean,
        classes: per_class,
        notes: REPORT_NOTES.into(),
    })
}

pub fn predict_masks(params: &ModelParams, cfg: &ModelConfig, data: &[Sample]) -> Result<Vec<Vec<u8>>> {
    data.iter()
        .map(|s| Ok(argmax_labels(&predict_logits(&s.image, params, cfg)?)))
        .collect()
}

/// Run the model over `data` and score its argmax predictions.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Sample],
    variant: DiceVariant,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_masks(params, cfg, data)?;
    let truth: Vec<(&[u8], usize)> = data.iter().map(|s| (s.mask.as_slice(), s.width())).collect();
    evaluate_predictions(&preds, &truth, cfg.num_classes, variant)
}

/// Mean foreground Dice over `data`, skipping the Hausdorff work.
pub fn mean_foreground_dsc(params: &ModelParams, cfg: &ModelConfig, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_masks(params, cfg, data)?;
    let mut total = 0.0;
    for (pred, s) in preds.iter().zip(data) {
        for class in 1..cfg.num_classes {
            total += basic_metrics(&confusion(pred, &s.mask, class as u8)?).dsc.value();
        }
    }
    Ok(total / (data.len() * (cfg.num_classes - 1)) as f64)
}
