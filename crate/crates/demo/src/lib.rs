//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust twin so it can be tested
//! natively. Results that are not flat arrays are returned as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dilunet::attention::{
    build_neighborhood_mask, dina_forward, oracle_masked_attention, AttentionSpec, NeighborhoodPlan, QkvParams,
};
use dilunet::io::synth;
use dilunet::rng::Rng;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Row-major token indices attended by the token at `(row, col)`.
pub fn neighborhood_of(
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    row: usize,
    col: usize,
) -> Result<Vec<u32>, String> {
    if row >= height || col >= width {
        return Err(format!("({row}, {col}) is outside the {height}x{width} map"));
    }
    let plan = NeighborhoodPlan::new(height, width, kernel, dilation).map_err(|e| e.to_string())?;
    Ok(plan.neighbors_of(row * width + col).iter().map(|&t| t as u32).collect())
}

#[wasm_bindgen]
pub fn neighborhood(
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    row: usize,
    col: usize,
) -> Result<Vec<u32>, JsValue> {
    neighborhood_of(height, width, kernel, dilation, row, col).map_err(js_err)
}

/// One synthetic pair as `size * size` image bytes followed by as many
/// label bytes.
pub fn synth_pair(size: usize, classes: usize, seed: u64) -> Result<Vec<u8>, String> {
    let (pairs, _) = synth::generate_pairs(1, size, classes, seed).map_err(|e| e.to_string())?;
    let mut out = pairs[0].image.pixels.clone();
    out.extend_from_slice(&pairs[0].mask.pixels);
    Ok(out)
}

#[wasm_bindgen]
pub fn synth_sample(size: usize, classes: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    synth_pair(size, classes, seed).map_err(js_err)
}

#[derive(Debug, Serialize)]
pub struct Agreement {
    pub tokens: usize,
    pub neighbors_per_token: f64,
    pub max_abs_diff: f64,
}

/// Run the gather kernel and the dense masked oracle on the same random
/// input and report how far apart they are.
pub fn agreement(size: usize, kernel: usize, dilation: usize, heads: usize, seed: u64) -> Result<Agreement, String> {
    let run = || -> dilunet::Result<Agreement> {
        let spec = AttentionSpec::new(kernel, dilation, heads, 4);
        let mut rng = Rng::new(seed);
        let mut p = QkvParams::init(spec.dim(), &spec, &mut rng)?;
        if let Some(b) = p.rel_bias.as_mut() {
            *b = rng.normal_tensor(b.shape(), 0.5);
        }
        let x = rng.normal_tensor(&[size, size, spec.dim()], 1.0);
        let mask = build_neighborhood_mask(size, size, kernel, dilation)?;
        let fast = dina_forward(&x, &p, &spec)?;
        let slow = oracle_masked_attention(&x, &p, &spec, &mask)?;
        let tokens = size * size;
        let total: usize = (0..tokens).map(|i| mask.row_count(i)).sum();
        Ok(Agreement {
            tokens,
            neighbors_per_token: total as f64 / tokens as f64,
            max_abs_diff: fast.max_abs_diff(&slow),
        })
    };
    run().map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn kernel_vs_oracle(size: usize, kernel: usize, dilation: usize, heads: usize, seed: u64) -> Result<String, JsValue> {
    let a = agreement(size, kernel, dilation, heads, seed).map_err(js_err)?;
    serde_json::to_string(&a).map_err(js_err)
}
