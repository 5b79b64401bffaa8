//! Neighborhood geometry: which keys each query attends to.
//!
//! A query at position `i` on an axis of length `S` attends to positions in
//! its own residue class `i mod dilation`, forming a strided window of up to
//! `kernel` positions. The window is centered on `i` and shifted back inside
//! the axis near the borders, so it keeps its full size whenever the residue
//! class has at least `kernel` members.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

pub(crate) fn check_window(kernel: usize, dilation: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel size must be odd and positive, got {kernel}"
        )));
    }
    if dilation == 0 {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    Ok(())
}

/// Positions attended by query `i` along one axis of length `len`.
pub fn neighborhood_indices_1d(
    len: usize,
    kernel: usize,
    dilation: usize,
    i: usize,
) -> Result<Vec<usize>> {
    check_window(kernel, dilation)?;
    if i >= len {
        return Err(Error::invalid(format!(
            "position {i} outside axis of length {len}"
        )));
    }
    Ok(indices_unchecked(len, kernel, dilation, i))
}

fn indices_unchecked(len: usize, kernel: usize, dilation: usize, i: usize) -> Vec<usize> {
    let residue = i % dilation;
    let class_len = (len - residue).div_ceil(dilation);
    let size = kernel.min(class_len);
    let pos = i / dilation;
    let start = pos.saturating_sub(size / 2).min(class_len - size);
    (start..start + size).map(|p| residue + p * dilation).collect()
}

/// Side length of the relative positional bias table for one head.
pub fn bias_table_side(kernel: usize, dilation: usize) -> usize {
    2 * dilation * (kernel - 1) + 1
}

/// Precomputed neighbor lists for one `(height, width, kernel, dilation)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodPlan {
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    /// `starts[t]..starts[t + 1]` indexes the slots of token `t`.
    starts: Vec<usize>,
    neighbors: Vec<usize>,
    bias_index: Vec<usize>,
}

impl NeighborhoodPlan {
    pub fn new(height: usize, width: usize, kernel: usize, dilation: usize) -> Result<Self> {
        check_window(kernel, dilation)?;
        if height == 0 || width == 0 {
            return Err(Error::invalid("feature map must be non-empty"));
        }
        let rows: Vec<_> = (0..height)
            .map(|r| indices_unchecked(height, kernel, dilation, r))
            .collect();
        let cols: Vec<_> = (0..width)
            .map(|c| indices_unchecked(width, kernel, dilation, c))
            .collect();
        let reach = dilation * (kernel - 1);
        let side = bias_table_side(kernel, dilation);
        let mut starts = Vec::with_capacity(height * width + 1);
        let mut neighbors = Vec::new();
        let mut bias_index = Vec::new();
        for r in 0..height {
            for c in 0..width {
                starts.push(neighbors.len());
                for &nr in &rows[r] {
                    for &nc in &cols[c] {
                        neighbors.push(nr * width + nc);
                        let dr = nr + reach - r;
                        let dc = nc + reach - c;
                        bias_index.push(dr * side + dc);
                    }
                }
            }
        }
        starts.push(neighbors.len());
        Ok(Self {
            height,
            width,
            kernel,
            dilation,
            starts,
            neighbors,
            bias_index,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Total neighbor slots over all queries.
    pub fn slots(&self) -> usize {
        self.neighbors.len()
    }

    pub fn bias_table_len(&self) -> usize {
        let side = bias_table_side(self.kernel, self.dilation);
        side * side
    }

    pub fn slot_range(&self, token: usize) -> std::ops::Range<usize> {
        self.starts[token]..self.starts[token + 1]
    }

    pub fn neighbors_of(&self, token: usize) -> &[usize] {
        &self.neighbors[self.slot_range(token)]
    }

    pub(crate) fn neighbor(&self, slot: usize) -> usize {
        self.neighbors[slot]
    }

    pub(crate) fn bias_slot(&self, slot: usize) -> usize {
        self.bias_index[slot]
    }
}

type PlanKey = (usize, usize, usize, usize);

/// Shared plan for a shape, built once and then read-only.
pub fn cached_plan(
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
) -> Result<Arc<NeighborhoodPlan>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<NeighborhoodPlan>>>> = OnceLock::new();
    let key = (height, width, kernel, dilation);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(plan) = cache.lock().unwrap().get(&key) {
        return Ok(plan.clone());
    }
    let plan = Arc::new(NeighborhoodPlan::new(height, width, kernel, dilation)?);
    cache.lock().unwrap().insert(key, plan.clone());
    Ok(plan)
}

/// Dense `[tokens, tokens]` boolean view of a neighborhood, used by the
/// reference attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMask {
    tokens: usize,
    bits: Vec<bool>,
}

impl NeighborhoodMask {
    pub fn from_bits(tokens: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != tokens * tokens {
            return Err(Error::invalid(format!(
                "mask for {tokens} tokens needs {} entries, got {}",
                tokens * tokens,
                bits.len()
            )));
        }
        Ok(Self { tokens, bits })
    }

    pub fn all(tokens: usize) -> Self {
        Self {
            tokens,
            bits: vec![true; tokens * tokens],
        }
    }

    pub fn identity(tokens: usize) -> Self {
        let mut bits = vec![false; tokens * tokens];
        (0..tokens).for_each(|i| bits[i * tokens + i] = true);
        Self { tokens, bits }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.bits[query * self.tokens + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.bits[query * self.tokens..(query + 1) * self.tokens]
    }

    pub fn row_count(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&b| b).count()
    }
}

/// Row `i` is true exactly on the product of the row and column windows of
/// token `i`.
pub fn build_neighborhood_mask(
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
) -> Result<NeighborhoodMask> {
    check_window(kernel, dilation)?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("feature map must be non-empty"));
    }
    let tokens = height * width;
    let mut bits = vec![false; tokens * tokens];
    for r in 0..height {
        let rows = neighborhood_indices_1d(height, kernel, dilation, r)?;
        for c in 0..width {
            let cols = neighborhood_indices_1d(width, kernel, dilation, c)?;
            let q = r * width + c;
            for &nr in &rows {
                for &nc in &cols {
                    bits[q * tokens + nr * width + nc] = true;
                }
            }
        }
    }
    Ok(NeighborhoodMask { tokens, bits })
}
