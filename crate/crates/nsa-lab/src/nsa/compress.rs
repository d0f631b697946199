use crate::numeric::{Matrix, Mlp, MlpCache};
use crate::{Error, Result};

use super::NsaConfig;

/// One side (keys or values) of the compression cache: one output row per
/// compression block, plus the 0-based start position of each block.
#[derive(Debug, Clone)]
pub struct CompressedSide {
    pub rows: Matrix,
    pub block_starts: Vec<usize>,
}

impl CompressedSide {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Compress a full t x dim sequence into block rows: block i covers
/// positions [i*d, i*d + l) and maps through phi after adding the
/// intra-block positional rows. Sequences shorter than one block yield an
/// empty cache.
pub fn compress_sequence(
    input: &Matrix,
    cfg: &NsaConfig,
    phi: &Mlp,
    pos: &Matrix,
) -> Result<CompressedSide> {
    Ok(compress_sequence_cached(input, cfg, phi, pos)?.0)
}

/// As [`compress_sequence`], also returning the per-block MLP caches the
/// backward pass needs.
pub fn compress_sequence_cached(
    input: &Matrix,
    cfg: &NsaConfig,
    phi: &Mlp,
    pos: &Matrix,
) -> Result<(CompressedSide, Vec<MlpCache>)> {
    let l = cfg.block_len;
    let dim = input.cols();
    if pos.rows() != l || pos.cols() != dim {
        return Err(Error::Shape(format!(
            "positional table {}x{} does not match block {}x{}",
            pos.rows(),
            pos.cols(),
            l,
            dim
        )));
    }
    let m = cfg.num_cmp_blocks(input.rows());
    let out_dim = phi.out_dim();
    let mut rows = Matrix::zeros(m, out_dim);
    let mut block_starts = Vec::with_capacity(m);
    let mut caches = Vec::with_capacity(m);
    let mut flat = vec![0.0; l * dim];
    for i in 0..m {
        let start = i * cfg.stride;
        for r in 0..l {
            let src = input.row(start + r);
            let prow = pos.row(r);
            for c in 0..dim {
                flat[r * dim + c] = src[c] + prow[c];
            }
        }
        let cache = phi.forward_cached(&flat)?;
        rows.row_mut(i).copy_from_slice(cache.output());
        block_starts.push(start);
        caches.push(cache);
    }
    Ok((CompressedSide { rows, block_starts }, caches))
}

/// Backward through one compressed block: routes the upstream gradient on
/// block row `i` into phi's parameters, the positional table, and the
/// covered input rows.
pub fn compress_block_backward(
    cfg: &NsaConfig,
    phi: &Mlp,
    cache: &MlpCache,
    block_index: usize,
    d_row: &[f64],
    phi_grads: &mut Mlp,
    pos_grads: &mut Matrix,
    d_input: &mut Matrix,
) {
    let d_flat = phi.backward(cache, d_row, phi_grads);
    let dim = pos_grads.cols();
    let start = block_index * cfg.stride;
    for r in 0..cfg.block_len {
        let seg = &d_flat[r * dim..(r + 1) * dim];
        pos_grads.add_row(r, seg);
        d_input.add_row(start + r, seg);
    }
}
