//! Dense masked attention, a deliberately naive O(tokens^2) reference.
//!
//! Computes every query/key logit in f64, sets entries outside the mask to
//! negative infinity and normalizes full rows. Shares no code with the
//! gather kernel.

use super::{AttentionSpec, NeighborhoodMask, QkvParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn project(x: &[f64], w: &Tensor, rows: usize) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += x[r * k + p] * wd[p * n + j] as f64;
            }
            out[r * n + j] = s;
        }
    }
    out
}

pub fn oracle_masked_attention(
    x: &Tensor,
    p: &QkvParams,
    spec: &AttentionSpec,
    mask: &NeighborhoodMask,
) -> Result<Tensor> {
    let [h, w, dim] = x.shape()[..] else {
        return Err(Error::invalid("oracle expects a [H, W, dim] map"));
    };
    spec.validate(dim)?;
    let tokens = h * w;
    if mask.tokens() != tokens {
        return Err(Error::invalid(format!(
            "mask covers {} tokens, map has {tokens}",
            mask.tokens()
        )));
    }
    if let Some(empty) = (0..tokens).find(|&i| mask.row_count(i) == 0) {
        return Err(Error::EmptyMaskRow(empty));
    }

    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let q = project(&xs, &p.wq, tokens);
    let k = project(&xs, &p.wk, tokens);
    let v = project(&xs, &p.wv, tokens);
    let hd = spec.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let reach = (spec.dilation * (spec.kernel_size - 1)) as isize;
    let side = 2 * reach + 1;
    let table = (side * side) as usize;

    let mut attended = vec![0.0; tokens * dim];
    for head in 0..spec.heads {
        for i in 0..tokens {
            let (ri, ci) = ((i / w) as isize, (i % w) as isize);
            let mut logits = vec![f64::NEG_INFINITY; tokens];
            for (j, logit) in logits.iter_mut().enumerate() {
                if !mask.get(i, j) {
                    continue;
                }
                let mut a = 0.0;
                for c in 0..hd {
                    a += q[i * dim + head * hd + c] * k[j * dim + head * hd + c];
                }
                if let Some(bias) = &p.rel_bias {
                    let dr = (j / w) as isize - ri + reach;
                    let dc = (j % w) as isize - ci + reach;
                    if (0..side).contains(&dr) && (0..side).contains(&dc) {
                        a += bias.data()[head * table + (dr * side + dc) as usize] as f64;
                    }
                }
                *logit = a * scale;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                let wgt = e / total;
                for c in 0..hd {
                    attended[i * dim + head * hd + c] += wgt * v[j * dim + head * hd + c];
                }
            }
        }
    }
    let mut out = project(&attended, &p.wo, tokens);
    for (i, o) in out.iter_mut().enumerate() {
        *o += p.bo.data()[i % dim] as f64;
    }
    Tensor::new([h, w, dim], out.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_neighborhood_mask, dina_forward};
    use crate::params::ParamTree;
    use crate::rng::Rng;

    fn case(h: usize, w: usize, spec: &AttentionSpec, seed: u64) -> (Tensor, QkvParams) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[h, w, spec.dim()], 1.0);
        let mut p = QkvParams::init(spec.dim(), spec, &mut rng).unwrap();
        for t in p.leaves_mut() {
            *t = rng.normal_tensor(t.shape(), 0.4);
        }
        (x, p)
    }

    #[test]
    fn identity_mask_returns_projected_values() {
        let spec = AttentionSpec::new(3, 1, 2, 2);
        let (x, p) = case(3, 3, &spec, 11);
        let out = oracle_masked_attention(&x, &p, &spec, &NeighborhoodMask::identity(9)).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let v = project(&xs, &p.wv, 9);
        let mut y = project(&v, &p.wo, 9);
        y.iter_mut().enumerate().for_each(|(i, o)| *o += p.bo.data()[i % 4] as f64);
        for (a, b) in out.data().iter().zip(&y) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_row_is_rejected() {
        let spec = AttentionSpec::new(3, 1, 1, 2);
        let (x, p) = case(2, 2, &spec, 12);
        let mut bits = vec![true; 16];
        bits[4..8].iter_mut().for_each(|b| *b = false);
        let mask = NeighborhoodMask::from_bits(4, bits).unwrap();
        assert!(matches!(
            oracle_masked_attention(&x, &p, &spec, &mask),
            Err(Error::EmptyMaskRow(1))
        ));
    }

    #[test]
    fn kernel_matches_oracle_on_random_cases() {
        let mut rng = Rng::new(99);
        for case_id in 0..20 {
            let h = 1 + rng.below(12);
            let w = 1 + rng.below(12);
            let k = [3, 5][rng.below(2)];
            let d = 1 + rng.below(3);
            let heads = 1 + rng.below(2);
            let spec = AttentionSpec::new(k, d, heads, 2).with_bias(rng.coin());
            let (x, p) = case(h, w, &spec, 1000 + case_id);
            let mask = build_neighborhood_mask(h, w, k, d).unwrap();
            let fast = dina_forward(&x, &p, &spec).unwrap();
            let slow = oracle_masked_attention(&x, &p, &spec, &mask).unwrap();
            let diff = fast.max_abs_diff(&slow);
            assert!(diff < 1e-5, "case {case_id}: {h}x{w} k={k} d={d}: {diff}");
        }
    }
}
