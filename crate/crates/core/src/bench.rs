//! Timing of the gather kernel against the dense masked oracle.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{build_neighborhood_mask, dina_forward, oracle_masked_attention, AttentionSpec, QkvParams};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest kernel/oracle disagreement tolerated before timing.
pub const GUARD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![8, 16, 32],
            kernel_sizes: vec![3],
            dilations: vec![1, 2],
            heads: 2,
            head_dim: 8,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub size: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub max_abs_diff: f64,
    /// Median wall time per forward pass.
    pub kernel_ms: f64,
    pub oracle_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub entries: Vec<BenchEntry>,
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn bench_one(size: usize, kernel: usize, dilation: usize, cfg: &BenchConfig) -> Result<BenchEntry> {
    let spec = AttentionSpec::new(kernel, dilation, cfg.heads, cfg.head_dim);
    let dim = spec.dim();
    let mut rng = Rng::new(cfg.seed);
    let mut params = QkvParams::init(dim, &spec, &mut rng)?;
    if let Some(b) = params.rel_bias.as_mut() {
        *b = rng.normal_tensor(b.shape(), 0.5);
    }
    let x = rng.normal_tensor(&[size, size, dim], 1.0);
    let mask = build_neighborhood_mask(size, size, kernel, dilation)?;

    let fast = dina_forward(&x, &params, &spec)?;
    let slow = oracle_masked_attention(&x, &params, &spec, &mask)?;
    let max_abs_diff = fast.max_abs_diff(&slow);
    if !(max_abs_diff < GUARD) {
        return Err(Error::invalid(format!(
            "kernel disagrees with oracle by {max_abs_diff:e} at size {size}, k {kernel}, dilation {dilation}; not timing"
        )));
    }
    let kernel_ms = median_ms(cfg.repeats, || dina_forward(&x, &params, &spec).map(drop))?;
    let oracle_ms = median_ms(cfg.repeats, || oracle_masked_attention(&x, &params, &spec, &mask).map(drop))?;
    Ok(BenchEntry {
        size,
        kernel_size: kernel,
        dilation,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        max_abs_diff,
        kernel_ms,
        oracle_ms,
        speedup: oracle_ms / kernel_ms,
    })
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut entries = Vec::new();
    for &size in &cfg.sizes {
        for &k in &cfg.kernel_sizes {
            for &d in &cfg.dilations {
                entries.push(bench_one(size, k, d, cfg)?);
            }
        }
    }
    Ok(BenchReport {
        repeats: cfg.repeats,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_report_is_guarded_and_serializable() {
        let cfg = BenchConfig {
            sizes: vec![6],
            dilations: vec![1, 2],
            repeats: 1,
            ..BenchConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.entries.len(), 2);
        assert!(r.entries.iter().all(|e| e.max_abs_diff < GUARD && e.kernel_ms >= 0.0));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<BenchReport>(&json).unwrap(), r);
    }

    #[test]
    fn invalid_config_errors() {
        let cfg = BenchConfig {
            sizes: vec![4],
            kernel_sizes: vec![2],
            ..BenchConfig::default()
        };
        assert!(run(&cfg).is_err());
        assert!(run(&BenchConfig { repeats: 0, ..BenchConfig::default() }).is_err());
    }
}
