//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from a backward pass at the requested
//! precision. The numeric gradient is always evaluated in the f64 shadow
//! width, so an f32 check measures the f32 backward pass rather than f32
//! cancellation in the difference quotient. Central differences at `h` and
//! `h / 2` are combined by Richardson extrapolation, which cancels the
//! `h^2` truncation term.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// A scalar objective that can be built at either precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub precision: Precision,
    /// Check only this many coordinates, drawn uniformly with the given seed.
    pub sample: Option<(usize, u64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            precision: Precision::F32,
            sample: None,
        }
    }
}

impl GradCheckConfig {
    pub fn f64() -> Self {
        Self {
            precision: Precision::F64,
            ..Self::default()
        }
    }

    pub fn with_step(self, step: f64) -> Self {
        Self { step, ..self }
    }

    pub fn with_sample(self, count: usize, seed: u64) -> Self {
        Self {
            sample: Some((count, seed)),
            ..self
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn grad_check(
    f: &impl ScalarFn,
    params: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = match cfg.precision {
        Precision::F32 => analytic_grads::<f32>(f, params)?,
        Precision::F64 => analytic_grads::<f64>(f, params)?,
    };

    let coords: Vec<(usize, usize)> = match cfg.sample {
        None => params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
            .collect(),
        Some((count, seed)) => {
            let total: usize = params.iter().map(Tensor::numel).sum();
            let mut rng = Rng::new(seed);
            (0..count)
                .map(|_| locate(params, rng.below(total)))
                .collect()
        }
    };

    let mut shadow: Vec<Tensor<f64>> = params.iter().map(|t| t.cast()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: coords.len(),
    };
    for &(p, i) in &coords {
        let coarse = central_difference(f, &mut shadow, p, i, cfg.step)?;
        let fine = central_difference(f, &mut shadow, p, i, cfg.step / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic[p][i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((p, i));
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// `(f(θ + h) − f(θ − h)) / 2h` along one coordinate.
pub fn central_difference(
    f: &impl ScalarFn,
    shadow: &mut [Tensor<f64>],
    p: usize,
    i: usize,
    h: f64,
) -> Result<f64> {
    let orig = shadow[p].data()[i];
    shadow[p].data_mut()[i] = orig + h;
    let plus = eval_f64(f, shadow);
    shadow[p].data_mut()[i] = orig - h;
    let minus = eval_f64(f, shadow);
    shadow[p].data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (p, t) in params.iter().enumerate() {
        if flat < t.numel() {
            return (p, flat);
        }
        flat -= t.numel();
    }
    unreachable!("flat index within total")
}

/// Backward-pass gradients at precision `T`, widened to f64.
pub fn analytic_grads<T: Scalar>(f: &impl ScalarFn, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.cast())).collect();
    let loss = f.eval(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

fn eval_f64(f: &impl ScalarFn, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}
