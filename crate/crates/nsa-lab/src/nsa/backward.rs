use crate::numeric::{axpy, dot, softmax_backward, Matrix};
use crate::Result;

use super::compress::compress_block_backward;
use super::forward::{run_forward, NsaInputs, NsaOutput};
use super::{NsaConfig, NsaParams};

/// Gradients of a scalar loss w.r.t. every parameter (stored in a
/// same-shaped [`NsaParams`]) and w.r.t. the inputs.
pub struct NsaGradients {
    pub params: NsaParams,
    pub d_queries: Vec<Matrix>,
    pub d_features: Matrix,
}

/// Backward through one softmax-attention read. `p` are the forward
/// probabilities (masked entries exactly 0, which kills their gradient),
/// `key_row`/`value_row` resolve local index -> row slice, and the sinks
/// accumulate gradients per local index.
#[allow(clippy::too_many_arguments)]
fn attn_backward<'a>(
    q: &[f64],
    scale: f64,
    p: &[f64],
    d_o: &[f64],
    key_row: impl Fn(usize) -> &'a [f64],
    value_row: impl Fn(usize) -> &'a [f64],
    d_q: &mut [f64],
    mut sink_key: impl FnMut(usize, f64, &[f64]),
    mut sink_value: impl FnMut(usize, f64, &[f64]),
) {
    let n = p.len();
    if n == 0 {
        return;
    }
    let mut d_p = vec![0.0; n];
    for i in 0..n {
        d_p[i] = dot(d_o, value_row(i));
        sink_value(i, p[i], d_o);
    }
    let d_s = softmax_backward(p, &d_p);
    for i in 0..n {
        let g = d_s[i] * scale;
        axpy(d_q, g, key_row(i));
        sink_key(i, g, q);
    }
}

/// Analytic gradients of the forward pass for an upstream gradient on the
/// merged outputs (one t x d_v matrix per head).
///
/// Gradients flow through both attentions of every branch, the
/// compression MLPs, the gates, and the K/V projections; the discrete
/// block selection is a constant of the forward pass. Accumulation order
/// is fixed (ascending position, then group, then head) so repeated runs
/// are bit-identical.
pub fn nsa_grad(
    inputs: &NsaInputs,
    cfg: &NsaConfig,
    params: &NsaParams,
    upstream: &[Matrix],
) -> Result<NsaGradients> {
    let (output, trace) = run_forward(inputs, cfg, params, None)?;
    nsa_grad_with(inputs, cfg, params, upstream, &output, &trace)
}

pub(crate) fn nsa_grad_with(
    inputs: &NsaInputs,
    cfg: &NsaConfig,
    params: &NsaParams,
    upstream: &[Matrix],
    output: &NsaOutput,
    trace: &super::forward::Trace,
) -> Result<NsaGradients> {
    let t = inputs.features.rows();
    if upstream.len() != cfg.n_heads {
        return Err(crate::Error::Shape(format!(
            "{} upstream matrices for {} heads",
            upstream.len(),
            cfg.n_heads
        )));
    }
    for u in upstream {
        if u.rows() != t || u.cols() != cfg.d_v {
            return Err(crate::Error::Shape(format!(
                "upstream {}x{}, want {}x{}",
                u.rows(),
                u.cols(),
                t,
                cfg.d_v
            )));
        }
    }

    let scale = cfg.scale();
    let heads_per_group = cfg.heads_per_group();
    let mut grads = params.zeros_like();
    let mut d_queries: Vec<Matrix> = (0..cfg.n_heads).map(|_| Matrix::zeros(t, cfg.d_q)).collect();
    let mut d_features = Matrix::zeros(t, params.d_in);

    // row-gradient accumulators for projected K/V, per group per branch
    let mut d_kc: Vec<Vec<Matrix>> = (0..cfg.n_groups)
        .map(|_| (0..3).map(|_| Matrix::zeros(t, cfg.d_k)).collect())
        .collect();
    let mut d_vc: Vec<Vec<Matrix>> = (0..cfg.n_groups)
        .map(|_| (0..3).map(|_| Matrix::zeros(t, cfg.d_v)).collect())
        .collect();
    // gradients on compressed cache rows, per group
    let mut d_comp_k: Vec<Matrix> =
        (0..cfg.n_groups).map(|g| Matrix::zeros(trace.comp_k[g].0.len(), cfg.d_k)).collect();
    let mut d_comp_v: Vec<Matrix> =
        (0..cfg.n_groups).map(|g| Matrix::zeros(trace.comp_v[g].0.len(), cfg.d_v)).collect();
    let mut d_gates = Matrix::zeros(t, 3);

    for qi in 0..t {
        let pos = &trace.positions[qi];
        let gv = output.diag.gates[qi];
        for g in 0..cfg.n_groups {
            let gathered = &pos.groups[g].gathered;
            for hi in 0..heads_per_group {
                let h = g * heads_per_group + hi;
                let ht = &pos.heads[h];
                let q = inputs.queries[h].row(qi);
                let d_merged = upstream[h].row(qi);
                let out = &output.heads[h];

                // gate gradients: merged = sum_c g_c * o_c
                d_gates.add_at(qi, 0, dot(d_merged, out.o_cmp.row(qi)));
                d_gates.add_at(qi, 1, dot(d_merged, out.o_slc.row(qi)));
                d_gates.add_at(qi, 2, dot(d_merged, out.o_win.row(qi)));

                let d_o_cmp: Vec<f64> = d_merged.iter().map(|&v| gv.cmp * v).collect();
                let d_o_slc: Vec<f64> = d_merged.iter().map(|&v| gv.slc * v).collect();
                let d_o_win: Vec<f64> = d_merged.iter().map(|&v| gv.win * v).collect();

                // compression branch
                {
                    let ck = &trace.comp_k[g].0.rows;
                    let cv = &trace.comp_v[g].0.rows;
                    let (dck, dcv) = (&mut d_comp_k[g], &mut d_comp_v[g]);
                    let mut key_sink: Vec<(usize, f64)> = Vec::new();
                    let mut val_sink: Vec<(usize, f64)> = Vec::new();
                    attn_backward(
                        q,
                        scale,
                        &ht.p_cmp,
                        &d_o_cmp,
                        |i| ck.row(i),
                        |i| cv.row(i),
                        d_queries[h].row_mut(qi),
                        |i, g_, _| key_sink.push((i, g_)),
                        |i, p_, _| val_sink.push((i, p_)),
                    );
                    for (i, gk) in key_sink {
                        axpy(dck.row_mut(i), gk, q);
                    }
                    for (i, pv) in val_sink {
                        axpy(dcv.row_mut(i), pv, &d_o_cmp);
                    }
                }

                // selection branch
                {
                    let positions = &gathered.positions;
                    let mut key_sink: Vec<(usize, f64)> = Vec::new();
                    let mut val_sink: Vec<(usize, f64)> = Vec::new();
                    attn_backward(
                        q,
                        scale,
                        &ht.p_sel,
                        &d_o_slc,
                        |i| gathered.keys.row(i),
                        |i| gathered.values.row(i),
                        d_queries[h].row_mut(qi),
                        |i, g_, _| key_sink.push((i, g_)),
                        |i, p_, _| val_sink.push((i, p_)),
                    );
                    for (i, gk) in key_sink {
                        axpy(d_kc[g][1].row_mut(positions[i]), gk, q);
                    }
                    for (i, pv) in val_sink {
                        axpy(d_vc[g][1].row_mut(positions[i]), pv, &d_o_slc);
                    }
                }

                // window branch
                {
                    let start = pos.win_start;
                    let (win_k, win_v) = &trace.proj[g][2];
                    let mut key_sink: Vec<(usize, f64)> = Vec::new();
                    let mut val_sink: Vec<(usize, f64)> = Vec::new();
                    attn_backward(
                        q,
                        scale,
                        &ht.p_win,
                        &d_o_win,
                        |i| win_k.row(start + i),
                        |i| win_v.row(start + i),
                        d_queries[h].row_mut(qi),
                        |i, g_, _| key_sink.push((i, g_)),
                        |i, p_, _| val_sink.push((i, p_)),
                    );
                    for (i, gk) in key_sink {
                        axpy(d_kc[g][2].row_mut(start + i), gk, q);
                    }
                    for (i, pv) in val_sink {
                        axpy(d_vc[g][2].row_mut(start + i), pv, &d_o_win);
                    }
                }
            }
        }
    }

    // compressed rows -> phi, positional table, and the cmp-branch K/V rows
    for g in 0..cfg.n_groups {
        let (side_k, caches_k) = &trace.comp_k[g];
        for i in 0..side_k.len() {
            compress_block_backward(
                cfg,
                &params.phi_k,
                &caches_k[i],
                i,
                d_comp_k[g].row(i),
                &mut grads.phi_k,
                &mut grads.pos_k,
                &mut d_kc[g][0],
            );
        }
        let (side_v, caches_v) = &trace.comp_v[g];
        for i in 0..side_v.len() {
            compress_block_backward(
                cfg,
                &params.phi_v,
                &caches_v[i],
                i,
                d_comp_v[g].row(i),
                &mut grads.phi_v,
                &mut grads.pos_v,
                &mut d_vc[g][0],
            );
        }
    }

    // projected rows -> projection weights and input features
    for g in 0..cfg.n_groups {
        for b in 0..3 {
            let pj = &params.proj[g][b];
            let gj = &mut grads.proj[g][b];
            for r in 0..t {
                let dx = pj.key.backward(inputs.features.row(r), d_kc[g][b].row(r), &mut gj.key);
                d_features.add_row(r, &dx);
                let dx = pj.value.backward(inputs.features.row(r), d_vc[g][b].row(r), &mut gj.value);
                d_features.add_row(r, &dx);
            }
        }
    }

    // gate head
    for qi in 0..t {
        let dx = params.gate.backward(&trace.gate_caches[qi], d_gates.row(qi), &mut grads.gate);
        d_features.add_row(qi, &dx);
    }

    Ok(NsaGradients { params: grads, d_queries, d_features })
}
