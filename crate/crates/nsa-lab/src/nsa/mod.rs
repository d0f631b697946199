//! The sparse attention operator: compression, blockwise selection, and
//! sliding-window branches with a gated merge, plus analytic gradients
//! with a stop-gradient through the discrete block choice.

mod backward;
pub mod checkpoint;
mod compress;
mod config;
mod forward;
mod params;
mod select;
mod verify;

pub use backward::{nsa_grad, NsaGradients};
pub use compress::{compress_sequence, CompressedSide};
pub use config::NsaConfig;
pub use forward::{
    compression_branch, compute_gates, nsa_forward, nsa_forward_frozen, project_branch,
    selection_branch, window_branch, Diagnostics, GateVector, HeadOutputs, NsaInputs, NsaOutput,
};
pub use params::{Branch, KvProjection, NsaParams, ParamGroup};
pub use verify::{gradcheck_instance, GradcheckReport, GroupCheck};
pub use select::{
    aggregate_group, gather_selected, remap_scores, select_blocks, BlockSelection, Gathered,
    ImportanceScores,
};

use crate::numeric::SeededRng;

/// Random queries + features sized for `cfg`; the standard way tests and
/// the CLI build a problem instance.
pub fn random_inputs(cfg: &NsaConfig, d_in: usize, t: usize, rng: &mut SeededRng) -> NsaInputs {
    let queries = (0..cfg.n_heads).map(|_| rng.normal_matrix(t, cfg.d_q)).collect();
    let features = rng.normal_matrix(t, d_in);
    NsaInputs { queries, features }
}

/// Serialize all parameter groups into named checkpoint tensors.
pub fn params_to_tensors(params: &NsaParams) -> Vec<checkpoint::NamedTensor> {
    params
        .named_groups()
        .into_iter()
        .map(|(name, values)| checkpoint::NamedTensor::flat(name, values))
        .collect()
}

/// Restore parameter groups from checkpoint tensors into a
/// same-architecture parameter set.
pub fn params_from_tensors(
    params: &mut NsaParams,
    tensors: &[checkpoint::NamedTensor],
) -> crate::Result<()> {
    let groups: Vec<(String, Vec<f64>)> = tensors
        .iter()
        .map(|t| (t.name.clone(), t.values.clone()))
        .collect();
    params.set_named_groups(&groups)
}

/// Total remapped key/value count N_t at 1-based position `t`.
pub fn sparsity_count(cfg: &NsaConfig, t: usize) -> usize {
    cfg.sparsity_count(t)
}
