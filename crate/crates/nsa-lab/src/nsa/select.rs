use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

use super::NsaConfig;

/// Per-position importance scores: compression-block attention per head,
/// remapped selection-block scores per head, and the per-group aggregate
/// that drives the shared block choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// One probability vector over compression blocks per head.
    pub p_cmp: Vec<Vec<f64>>,
    /// Remapped selection-block scores per head.
    pub p_slc: Vec<Vec<f64>>,
    /// Head-summed scores per group.
    pub p_slc_group: Vec<Vec<f64>>,
}

/// Ordered selection-block index set I_t for one (position, group).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSelection {
    /// Ascending, distinct selection-block ids.
    pub indices: Vec<usize>,
    /// Marks indices that were force-included (initial/local blocks).
    pub forced: Vec<bool>,
}

impl BlockSelection {
    pub fn contains(&self, block: usize) -> bool {
        self.indices.binary_search(&block).is_ok()
    }
}

/// Remap compression-block attention mass onto selection blocks.
///
/// Entry j sums p_cmp over the compression blocks spatially overlapping
/// selection block j; out-of-range indices contribute zero. With
/// l = l' = d this is a bitwise copy of the input.
pub fn remap_scores(p_cmp: &[f64], cfg: &NsaConfig) -> Vec<f64> {
    let m = p_cmp.len();
    if m == 0 {
        return Vec::new();
    }
    let covered = (m - 1) * cfg.stride + cfg.block_len;
    let out_len = covered.div_ceil(cfg.sel_block_len);
    let ratio_sel = cfg.sel_block_len / cfg.stride;
    let ratio_cmp = cfg.block_len / cfg.stride;
    let mut out = vec![0.0; out_len];
    for (j, slot) in out.iter_mut().enumerate() {
        let hi = ratio_sel * j;
        let mut acc = 0.0;
        for m_off in 0..ratio_sel {
            for n_off in 0..ratio_cmp {
                let idx = hi as isize - m_off as isize - n_off as isize;
                if idx >= 0 && (idx as usize) < m {
                    acc += p_cmp[idx as usize];
                }
            }
        }
        // single in-range term: preserve the input bit pattern
        if ratio_sel == 1 && ratio_cmp == 1 {
            acc = p_cmp[j];
        }
        *slot = acc;
    }
    out
}

/// Elementwise sum of the per-head selection scores of one group.
pub fn aggregate_group(per_head: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = per_head.first() else {
        return Err(Error::Argument("aggregate_group: no heads".into()));
    };
    let mut out = vec![0.0; first.len()];
    for head in per_head {
        if head.len() != first.len() {
            return Err(Error::Shape(format!(
                "aggregate_group: head score lengths differ ({} vs {})",
                head.len(),
                first.len()
            )));
        }
        for (o, &v) in out.iter_mut().zip(head) {
            *o += v;
        }
    }
    Ok(out)
}

/// Choose the selection-block set for a prefix of `t` tokens.
///
/// The first `n_fixed_initial` blocks and the `n_fixed_local` most recent
/// blocks are always included; remaining budget goes to the highest
/// scores, ties broken toward the lower block index. Indices ascending.
pub fn select_blocks(scores: &[f64], cfg: &NsaConfig, t: usize) -> BlockSelection {
    let avail = cfg.num_sel_blocks(t);
    debug_assert_eq!(scores.len(), avail, "score vector must cover available blocks");
    let n = cfg.n_selected;

    let mut is_forced = vec![false; avail];
    for b in 0..cfg.n_fixed_initial.min(avail) {
        is_forced[b] = true;
    }
    for b in avail.saturating_sub(cfg.n_fixed_local)..avail {
        is_forced[b] = true;
    }

    let mut chosen: Vec<usize> = if avail <= n {
        (0..avail).collect()
    } else {
        let mut picked: Vec<usize> = (0..avail).filter(|&b| is_forced[b]).collect();
        let budget = n - picked.len();
        let mut free: Vec<usize> = (0..avail).filter(|&b| !is_forced[b]).collect();
        free.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        picked.extend(free.into_iter().take(budget));
        picked
    };
    chosen.sort_unstable();
    let forced = chosen.iter().map(|&b| is_forced[b]).collect();
    BlockSelection { indices: chosen, forced }
}

/// Rows of the selection-branch K/V gathered for a block set, together
/// with per-row positions and a causal keep-mask (false for positions
/// beyond the query).
#[derive(Debug, Clone)]
pub struct Gathered {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
    /// true where the row position is <= the query position
    pub allowed: Vec<bool>,
}

/// Concatenate the rows of the selected blocks in ascending block order.
/// Rows past the end of K are dropped; rows past the query prefix `t` are
/// carried but flagged disallowed.
pub fn gather_selected(
    keys: &Matrix,
    values: &Matrix,
    sel: &BlockSelection,
    cfg: &NsaConfig,
    t: usize,
) -> Gathered {
    let mut positions = Vec::new();
    for &b in &sel.indices {
        let start = b * cfg.sel_block_len;
        let end = ((b + 1) * cfg.sel_block_len).min(keys.rows());
        positions.extend(start..end);
    }
    let mut k = Matrix::zeros(positions.len(), keys.cols());
    let mut v = Matrix::zeros(positions.len(), values.cols());
    let mut allowed = Vec::with_capacity(positions.len());
    for (row, &p) in positions.iter().enumerate() {
        k.row_mut(row).copy_from_slice(keys.row(p));
        v.row_mut(row).copy_from_slice(values.row(p));
        allowed.push(p < t);
    }
    Gathered { keys: k, values: v, positions, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(l: usize, d: usize, lp: usize) -> NsaConfig {
        NsaConfig {
            block_len: l,
            stride: d,
            sel_block_len: lp,
            ..NsaConfig::toy()
        }
    }

    #[test]
    fn remap_identity_when_blocking_matches() {
        let cfg = cfg_with(4, 4, 4);
        let p = vec![0.125, 0.5, 0.0625, 0.3125];
        assert_eq!(remap_scores(&p, &cfg), p);
    }

    // Hand expansion of the overlap double sum with l'/d = 4, l/d = 2.
    #[test]
    fn remap_hand_expanded_case() {
        let cfg = cfg_with(32, 16, 64);
        let p = vec![0.1, 0.2, 0.3, 0.25, 0.15];
        let out = remap_scores(&p, &cfg);
        assert_eq!(out.len(), 2);
        assert!((out[0] - 0.1).abs() < 1e-15);
        // p[4] + 2 p[3] + 2 p[2] + 2 p[1] + p[0]
        let want = 0.15 + 2.0 * 0.25 + 2.0 * 0.3 + 2.0 * 0.2 + 0.1;
        assert!((out[1] - want).abs() < 1e-15);
    }

    #[test]
    fn remap_zeros_stay_zero() {
        let cfg = cfg_with(32, 16, 64);
        assert!(remap_scores(&[0.0; 7], &cfg).iter().all(|&v| v == 0.0));
        assert!(remap_scores(&[], &cfg).is_empty());
    }

    #[test]
    fn aggregate_sums_heads() {
        let a = vec![vec![1.0, 2.0]];
        assert_eq!(aggregate_group(&a).unwrap(), vec![1.0, 2.0]);
        let b = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(aggregate_group(&b).unwrap(), vec![2.0, 4.0]);
        let bad = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(aggregate_group(&bad).is_err());
    }

    #[test]
    fn select_all_when_few_blocks() {
        let cfg = NsaConfig::toy(); // n_selected = 3
        let sel = select_blocks(&[0.5, 0.5], &cfg, 16);
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn select_top_scores_without_forced() {
        let mut cfg = NsaConfig::toy();
        cfg.n_fixed_initial = 0;
        cfg.n_fixed_local = 0;
        // 5 blocks of 8 tokens -> t = 40
        let sel = select_blocks(&[0.5, 0.1, 0.1, 0.9, 0.2], &cfg, 40);
        assert_eq!(sel.indices, vec![0, 3, 4]);
    }

    #[test]
    fn forced_blocks_always_present() {
        let mut cfg = NsaConfig::toy();
        cfg.n_selected = 3;
        cfg.n_fixed_initial = 1;
        cfg.n_fixed_local = 1;
        // give the forced blocks the worst scores
        let sel = select_blocks(&[0.0, 0.9, 0.8, 0.7, 0.0], &cfg, 40);
        assert!(sel.contains(0));
        assert!(sel.contains(4));
        assert_eq!(sel.indices.len(), 3);
        assert_eq!(sel.indices, vec![0, 1, 4]);
        assert_eq!(sel.forced, vec![true, false, true]);
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        let mut cfg = NsaConfig::toy();
        cfg.n_fixed_initial = 0;
        cfg.n_fixed_local = 0;
        cfg.n_selected = 2;
        let sel = select_blocks(&[0.3, 0.5, 0.5, 0.5], &cfg, 32);
        assert_eq!(sel.indices, vec![1, 2]);
    }

    #[test]
    fn default_config_large_t_selection() {
        let cfg = NsaConfig::default();
        let t = 32768;
        let avail = cfg.num_sel_blocks(t); // 512 blocks
        let scores = vec![1.0 / avail as f64; avail];
        let sel = select_blocks(&scores, &cfg, t);
        assert_eq!(sel.indices.len(), 16);
        assert!(sel.contains(0));
        assert!(sel.contains(avail - 1));
        assert!(sel.contains(avail - 2));
    }

    #[test]
    fn gather_single_block() {
        let cfg = cfg_with(4, 4, 4);
        let k = Matrix::from_fn(8, 2, |r, c| (r * 2 + c) as f64);
        let v = k.clone();
        let sel = BlockSelection { indices: vec![0], forced: vec![true] };
        let g = gather_selected(&k, &v, &sel, &cfg, 8);
        assert_eq!(g.positions, vec![0, 1, 2, 3]);
        assert!(g.allowed.iter().all(|&a| a));
        assert_eq!(g.keys.row(2), k.row(2));
    }

    #[test]
    fn gather_two_blocks_skips_middle() {
        let mut cfg = cfg_with(2, 2, 2);
        cfg.sel_block_len = 2;
        let k = Matrix::from_fn(6, 1, |r, _| r as f64);
        let sel = BlockSelection { indices: vec![0, 2], forced: vec![false, false] };
        let g = gather_selected(&k, &k, &sel, &cfg, 6);
        assert_eq!(g.positions, vec![0, 1, 4, 5]);
    }

    #[test]
    fn gather_masks_future_positions() {
        let cfg = cfg_with(4, 4, 4);
        let k = Matrix::from_fn(8, 1, |r, _| r as f64);
        let sel = BlockSelection { indices: vec![1], forced: vec![true] };
        // query prefix of 6 tokens: block 1 covers positions 4..8
        let g = gather_selected(&k, &k, &sel, &cfg, 6);
        assert_eq!(g.allowed, vec![true, true, false, false]);
    }
}
