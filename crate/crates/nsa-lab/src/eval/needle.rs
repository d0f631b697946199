use serde::Serialize;

use crate::numeric::SeededRng;
use crate::nsa::{nsa_forward, NsaConfig};
use crate::{Error, Result};

use super::train::{beacon, ToyModel};

/// Structural retrieval grid: for each (sequence length, needle depth)
/// cell, whether the needle token is reachable from the final query —
/// inside a selected block or the sliding window of at least one group.
#[derive(Debug, Clone, Serialize)]
pub struct NeedleGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// hits[length_idx][depth_idx]
    pub hits: Vec<Vec<bool>>,
    pub hit_rate: f64,
}

/// Evaluate structural needle retrieval for a model over a grid of
/// sequence lengths and relative needle depths. Depths are evenly spaced
/// in [0, 1]; each cell plants a fixed beacon token and asks whether the
/// final position's selection or window covers it.
pub fn needle_task_eval(
    model: &ToyModel,
    cfg: &NsaConfig,
    feature_dim: usize,
    lengths: &[usize],
    n_depths: usize,
    seed: u64,
) -> Result<NeedleGrid> {
    if lengths.is_empty() || n_depths == 0 {
        return Err(Error::Argument("needle grid must be non-empty".into()));
    }
    if lengths.iter().any(|&t| t == 0) {
        return Err(Error::Argument("sequence lengths must be positive".into()));
    }
    let depths: Vec<f64> = if n_depths == 1 {
        vec![0.0]
    } else {
        (0..n_depths).map(|i| i as f64 / (n_depths - 1) as f64).collect()
    };

    let mut hits = Vec::with_capacity(lengths.len());
    let mut hit_count = 0usize;
    for (li, &t) in lengths.iter().enumerate() {
        let mut row = Vec::with_capacity(n_depths);
        for (di, &depth) in depths.iter().enumerate() {
            let needle = ((t - 1) as f64 * depth).round() as usize;
            let mut rng = SeededRng::new(seed ^ ((li as u64) << 32) ^ di as u64);
            let mut features = rng.normal_matrix(t, feature_dim);
            features.row_mut(needle).copy_from_slice(&beacon(feature_dim));

            let inputs = model.make_inputs(&features)?;
            let out = nsa_forward(&inputs, cfg, &model.nsa)?;
            let last = t - 1;
            let in_window = needle + cfg.window.min(t) >= t;
            let needle_block = needle / cfg.sel_block_len;
            let in_selection = out.diag.selections[last]
                .iter()
                .any(|sel| sel.contains(needle_block));
            let hit = in_window || in_selection;
            hit_count += hit as usize;
            row.push(hit);
        }
        hits.push(row);
    }
    let hit_rate = hit_count as f64 / (lengths.len() * n_depths) as f64;
    Ok(NeedleGrid { lengths: lengths.to_vec(), depths, hits, hit_rate })
}
