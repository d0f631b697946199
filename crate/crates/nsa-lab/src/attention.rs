//! Dense causal attention with analytic gradients, plus the Exact-Top
//! baseline that keeps only the highest-scoring keys per query. Both serve
//! as ground truth for the sparse operator.

use crate::numeric::{axpy, dot, masked_softmax, softmax_backward, Matrix};
use crate::{Error, Result};

/// One attention head over positions 1..t: queries, keys, and values as
/// row-per-position matrices.
#[derive(Debug, Clone)]
pub struct HeadSequence {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl HeadSequence {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.cols() != k.cols() {
            return Err(Error::Shape(format!(
                "query dim {} != key dim {}",
                q.cols(),
                k.cols()
            )));
        }
        if q.rows() != k.rows() || k.rows() != v.rows() {
            return Err(Error::Shape(format!(
                "row counts differ: q={} k={} v={}",
                q.rows(),
                k.rows(),
                v.rows()
            )));
        }
        Ok(HeadSequence { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1/sqrt(d_k), the conventional logit scale.
    pub fn default_scale(&self) -> f64 {
        1.0 / (self.k.cols() as f64).sqrt()
    }
}

/// Attention output rows plus the (lower-triangular) weight matrix.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub output: Matrix,
    pub weights: Matrix,
}

/// Causal dense attention: o_t = sum_{i<=t} softmax(q_t . k_i * scale) v_i.
pub fn full_attention(seq: &HeadSequence, scale: f64) -> Result<AttnOutput> {
    let t = seq.len();
    let d_v = seq.v.cols();
    let mut output = Matrix::zeros(t, d_v);
    let mut weights = Matrix::zeros(t, t);
    for qi in 0..t {
        let q = seq.q.row(qi);
        let logits: Vec<f64> = (0..=qi).map(|i| dot(q, seq.k.row(i)) * scale).collect();
        let p = masked_softmax(&logits, &vec![true; qi + 1])?;
        for (i, &pi) in p.iter().enumerate() {
            weights.set(qi, i, pi);
            axpy(output.row_mut(qi), pi, seq.v.row(i));
        }
    }
    Ok(AttnOutput { output, weights })
}

/// Gradients of `full_attention` w.r.t. Q, K, V for a given upstream
/// gradient on the output rows.
pub fn full_attention_grad(
    seq: &HeadSequence,
    upstream: &Matrix,
    scale: f64,
) -> Result<(Matrix, Matrix, Matrix)> {
    let t = seq.len();
    if upstream.rows() != t || upstream.cols() != seq.v.cols() {
        return Err(Error::Shape(format!(
            "upstream {}x{} does not match output {}x{}",
            upstream.rows(),
            upstream.cols(),
            t,
            seq.v.cols()
        )));
    }
    let mut d_q = Matrix::zeros(t, seq.q.cols());
    let mut d_k = Matrix::zeros(t, seq.k.cols());
    let mut d_v = Matrix::zeros(t, seq.v.cols());
    for qi in 0..t {
        let q = seq.q.row(qi);
        let logits: Vec<f64> = (0..=qi).map(|i| dot(q, seq.k.row(i)) * scale).collect();
        let p = masked_softmax(&logits, &vec![true; qi + 1])?;
        let d_o = upstream.row(qi);
        // d p_i = d_o . v_i ; d v_i += p_i d_o
        let mut d_p = vec![0.0; qi + 1];
        for i in 0..=qi {
            d_p[i] = dot(d_o, seq.v.row(i));
            axpy(d_v.row_mut(i), p[i], d_o);
        }
        let d_s = softmax_backward(&p, &d_p);
        for i in 0..=qi {
            let g = d_s[i] * scale;
            axpy(d_q.row_mut(qi), g, seq.k.row(i));
            axpy(d_k.row_mut(i), g, q);
        }
    }
    Ok((d_q, d_k, d_v))
}

/// Exact-Top baseline: per query keep the `budget` highest pre-softmax
/// scores (ties broken toward the lower index), renormalize among the kept
/// positions, and take the weighted value sum.
pub fn exact_top_attention(seq: &HeadSequence, budget: usize, scale: f64) -> Result<AttnOutput> {
    if budget == 0 {
        return Err(Error::Argument("exact_top_attention: budget must be >= 1".into()));
    }
    let t = seq.len();
    let d_v = seq.v.cols();
    let mut output = Matrix::zeros(t, d_v);
    let mut weights = Matrix::zeros(t, t);
    for qi in 0..t {
        let q = seq.q.row(qi);
        let logits: Vec<f64> = (0..=qi).map(|i| dot(q, seq.k.row(i)) * scale).collect();
        let keep = top_indices(&logits, budget);
        let mut mask = vec![false; qi + 1];
        for &i in &keep {
            mask[i] = true;
        }
        let p = masked_softmax(&logits, &mask)?;
        for (i, &pi) in p.iter().enumerate() {
            weights.set(qi, i, pi);
            axpy(output.row_mut(qi), pi, seq.v.row(i));
        }
    }
    Ok(AttnOutput { output, weights })
}

/// Indices of the `budget` largest scores, descending, ties toward the
/// lower index. Returns all indices when budget >= len.
pub fn top_indices(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(budget);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, SeededRng};

    fn random_seq(rng: &mut SeededRng, t: usize, d_k: usize, d_v: usize) -> HeadSequence {
        HeadSequence::new(
            rng.normal_matrix(t, d_k),
            rng.normal_matrix(t, d_k),
            rng.normal_matrix(t, d_v),
        )
        .unwrap()
    }

    #[test]
    fn single_position_returns_value() {
        let mut rng = SeededRng::new(1);
        let seq = random_seq(&mut rng, 1, 3, 2);
        let out = full_attention(&seq, seq.default_scale()).unwrap();
        assert_eq!(out.output.row(0), seq.v.row(0));
        assert_eq!(out.weights.get(0, 0), 1.0);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let t = 5;
        let k = Matrix::from_fn(t, 2, |_, c| if c == 0 { 1.0 } else { -0.5 });
        let q = Matrix::from_fn(t, 2, |r, c| (r + c) as f64 * 0.3);
        let v = Matrix::from_fn(t, 3, |r, c| (r * 3 + c) as f64);
        let seq = HeadSequence::new(q, k, v).unwrap();
        let out = full_attention(&seq, seq.default_scale()).unwrap();
        for qi in 0..t {
            for c in 0..3 {
                let mean: f64 =
                    (0..=qi).map(|i| seq.v.get(i, c)).sum::<f64>() / (qi + 1) as f64;
                assert!((out.output.get(qi, c) - mean).abs() < 1e-12);
            }
        }
    }

    // Independent double-loop evaluation of the softmax-weighted sum,
    // written without the masked_softmax helper.
    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = SeededRng::new(7);
        let seq = random_seq(&mut rng, 4, 2, 2);
        let scale = seq.default_scale();
        let out = full_attention(&seq, scale).unwrap();
        for qi in 0..4 {
            let mut denom = 0.0;
            let mut numer = vec![0.0; 2];
            for i in 0..=qi {
                let mut s = 0.0;
                for c in 0..2 {
                    s += seq.q.get(qi, c) * seq.k.get(i, c);
                }
                let a = (s * scale).exp();
                denom += a;
                for c in 0..2 {
                    numer[c] += a * seq.v.get(i, c);
                }
            }
            for c in 0..2 {
                assert!((out.output.get(qi, c) - numer[c] / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_rows_on_simplex() {
        let mut rng = SeededRng::new(11);
        let seq = random_seq(&mut rng, 8, 4, 3);
        let out = full_attention(&seq, seq.default_scale()).unwrap();
        for qi in 0..8 {
            let row_sum: f64 = (0..=qi).map(|i| out.weights.get(qi, i)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for i in qi + 1..8 {
                assert_eq!(out.weights.get(qi, i), 0.0);
            }
        }
    }

    #[test]
    fn causality_exact() {
        let mut rng = SeededRng::new(13);
        let seq = random_seq(&mut rng, 6, 3, 3);
        let out = full_attention(&seq, seq.default_scale()).unwrap();
        let mut perturbed = seq.clone();
        perturbed.k.set(5, 0, 99.0);
        perturbed.v.set(5, 1, -99.0);
        let out2 = full_attention(&perturbed, seq.default_scale()).unwrap();
        for qi in 0..5 {
            assert_eq!(out.output.row(qi), out2.output.row(qi));
        }
    }

    #[test]
    fn grad_zero_upstream() {
        let mut rng = SeededRng::new(3);
        let seq = random_seq(&mut rng, 4, 2, 2);
        let up = Matrix::zeros(4, 2);
        let (dq, dk, dv) = full_attention_grad(&seq, &up, seq.default_scale()).unwrap();
        assert_eq!(dq.max_abs(), 0.0);
        assert_eq!(dk.max_abs(), 0.0);
        assert_eq!(dv.max_abs(), 0.0);
    }

    #[test]
    fn grad_single_position() {
        let mut rng = SeededRng::new(4);
        let seq = random_seq(&mut rng, 1, 3, 2);
        let up = Matrix::from_vec(1, 2, vec![1.5, -0.5]).unwrap();
        let (dq, _dk, dv) = full_attention_grad(&seq, &up, seq.default_scale()).unwrap();
        assert_eq!(dv.row(0), up.row(0));
        assert_eq!(dq.max_abs(), 0.0);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let seq = random_seq(&mut rng, 4, 2, 2);
        let scale = seq.default_scale();
        let mut up_rng = SeededRng::new(70);
        let upstream = up_rng.normal_matrix(4, 2);

        let (dq, dk, dv) = full_attention_grad(&seq, &upstream, scale).unwrap();

        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let s = HeadSequence::new(q.clone(), k.clone(), v.clone()).unwrap();
            let out = full_attention(&s, scale).unwrap();
            out.output
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(o, u)| o * u)
                .sum()
        };

        for (which, analytic) in [(0, &dq), (1, &dk), (2, &dv)] {
            let base = match which {
                0 => seq.q.clone(),
                1 => seq.k.clone(),
                _ => seq.v.clone(),
            };
            let numeric = finite_diff_grad(
                |theta| {
                    let m = Matrix::from_vec(base.rows(), base.cols(), theta.to_vec()).unwrap();
                    match which {
                        0 => loss(&m, &seq.k, &seq.v),
                        1 => loss(&seq.q, &m, &seq.v),
                        _ => loss(&seq.q, &seq.k, &m),
                    }
                },
                base.data(),
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs());
                assert!(rel < 1e-6, "grad mismatch: {a} vs {n}");
            }
        }
    }

    #[test]
    fn exact_top_full_budget_equals_dense() {
        let mut rng = SeededRng::new(9);
        let seq = random_seq(&mut rng, 6, 3, 3);
        let scale = seq.default_scale();
        let dense = full_attention(&seq, scale).unwrap();
        let top = exact_top_attention(&seq, 6, scale).unwrap();
        for (a, b) in dense.output.data().iter().zip(top.output.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_top_budget_one_is_argmax_value() {
        let mut rng = SeededRng::new(10);
        let seq = random_seq(&mut rng, 5, 3, 2);
        let scale = seq.default_scale();
        let top = exact_top_attention(&seq, 1, scale).unwrap();
        for qi in 0..5 {
            let q = seq.q.row(qi);
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for i in 0..=qi {
                let s = dot(q, seq.k.row(i)) * scale;
                if s > best_s {
                    best_s = s;
                    best = i;
                }
            }
            assert_eq!(top.output.row(qi), seq.v.row(best));
        }
    }

    // Brute-force sort-and-renormalize oracle, independent of masked_softmax.
    #[test]
    fn exact_top_matches_brute_force() {
        let mut rng = SeededRng::new(7);
        let seq = random_seq(&mut rng, 8, 3, 3);
        let scale = seq.default_scale();
        let budget = 3;
        let top = exact_top_attention(&seq, budget, scale).unwrap();
        for qi in 0..8 {
            let q = seq.q.row(qi);
            let mut scored: Vec<(usize, f64)> = (0..=qi)
                .map(|i| (i, dot(q, seq.k.row(i)) * scale))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(budget);
            let denom: f64 = scored.iter().map(|&(_, s)| s.exp()).sum();
            let mut want = vec![0.0; 3];
            for &(i, s) in &scored {
                for c in 0..3 {
                    want[c] += s.exp() / denom * seq.v.get(i, c);
                }
            }
            for c in 0..3 {
                assert!((top.output.get(qi, c) - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_top_kept_mass_monotone_in_budget() {
        let mut rng = SeededRng::new(21);
        let seq = random_seq(&mut rng, 10, 4, 2);
        let scale = seq.default_scale();
        let dense = full_attention(&seq, scale).unwrap();
        for qi in 0..10 {
            let mut prev = 0.0;
            for budget in 1..=qi + 1 {
                let logits: Vec<f64> = (0..=qi)
                    .map(|i| dot(seq.q.row(qi), seq.k.row(i)) * scale)
                    .collect();
                let kept = top_indices(&logits, budget);
                let mass: f64 = kept.iter().map(|&i| dense.weights.get(qi, i)).sum();
                assert!(mass >= prev - 1e-15);
                prev = mass;
            }
        }
    }
}
