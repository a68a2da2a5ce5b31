//! Symmetric InfoNCE over cosine similarities.
//!
//! For queries q and targets t (both length B), per index k:
//!
//! term1_k = -log( e^{c(q_k,t_k)/tau} / ( sum_j e^{c(q_k,t_j)/tau}
//!                                      + sum_{j!=k} e^{c(t_k,t_j)/tau} ) )
//! term2_k = -log( e^{c(t_k,q_k)/tau} / ( sum_j e^{c(t_k,q_j)/tau}
//!                                      + sum_{j!=k} e^{c(q_k,q_j)/tau} ) )
//!
//! loss = mean_k(term1_k + term2_k), evaluated through logsumexp. With
//! `anchor_targets` the targets are detached, so they contribute values but
//! no gradient.

use crate::diff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

/// Build the loss graph on `tape`. Accepts B=1 (both terms collapse to
/// -log(1) = 0); batch-size policy belongs to callers.
pub fn symmetric_infonce(
    tape: &mut Tape,
    queries: &[VarId],
    targets: &[VarId],
    tau: f64,
    anchor_targets: bool,
) -> Result<VarId> {
    if !(tau > 0.0) {
        return Err(Error::input(format!("infonce: tau must be positive, got {tau}")));
    }
    if queries.is_empty() || queries.len() != targets.len() {
        return Err(Error::input(format!(
            "infonce: need equal non-zero counts, got {} queries / {} targets",
            queries.len(),
            targets.len()
        )));
    }
    let b = queries.len();
    let targets: Vec<VarId> = if anchor_targets {
        targets.iter().map(|&t| tape.detach(t)).collect()
    } else {
        targets.to_vec()
    };

    let inv_tau = 1.0 / tau;
    // qt[k][j] = c(q_k, t_j) / tau; qq and tt are symmetric, built once per
    // unordered pair and mirrored.
    let mut qt = vec![vec![0usize; b]; b];
    for k in 0..b {
        for j in 0..b {
            let c = tape.cosine_similarity(queries[k], targets[j])?;
            qt[k][j] = tape.scale(c, inv_tau);
        }
    }
    let mut qq = vec![vec![None::<VarId>; b]; b];
    let mut tt = vec![vec![None::<VarId>; b]; b];
    for k in 0..b {
        for j in (k + 1)..b {
            let cq = tape.cosine_similarity(queries[k], queries[j])?;
            let sq = tape.scale(cq, inv_tau);
            qq[k][j] = Some(sq);
            qq[j][k] = Some(sq);
            let ct = tape.cosine_similarity(targets[k], targets[j])?;
            let st = tape.scale(ct, inv_tau);
            tt[k][j] = Some(st);
            tt[j][k] = Some(st);
        }
    }

    let mut terms = Vec::with_capacity(2 * b);
    for k in 0..b {
        let mut pool1: Vec<VarId> = (0..b).map(|j| qt[k][j]).collect();
        pool1.extend((0..b).filter(|&j| j != k).map(|j| tt[k][j].unwrap()));
        let logits1 = tape.concat_scalars(&pool1)?;
        let lse1 = tape.logsumexp(logits1)?;
        terms.push(tape.sub(lse1, qt[k][k])?);

        let mut pool2: Vec<VarId> = (0..b).map(|j| qt[j][k]).collect();
        pool2.extend((0..b).filter(|&j| j != k).map(|j| qq[k][j].unwrap()));
        let logits2 = tape.concat_scalars(&pool2)?;
        let lse2 = tape.logsumexp(logits2)?;
        terms.push(tape.sub(lse2, qt[k][k])?);
    }
    let all = tape.concat_scalars(&terms)?;
    let total = tape.sum_vec(all)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

#[derive(Debug, Clone)]
pub struct TclOutput {
    pub loss: f64,
    pub query_grads: Vec<Vec<f64>>,
    pub target_grads: Vec<Vec<f64>>,
}

/// Standalone evaluation on raw vectors: loss plus gradients with respect to
/// each query and target. Training requires at least two pairs; the B=1
/// degenerate case exists only for the graph-level primitive.
pub fn tcl_loss(
    queries: &[Tensor],
    targets: &[Tensor],
    tau: f64,
    anchor_targets: bool,
) -> Result<TclOutput> {
    if queries.len() < 2 {
        return Err(Error::input(format!(
            "tcl_loss: need at least 2 pairs, got {}",
            queries.len()
        )));
    }
    let mut tape = Tape::new();
    let q_ids: Vec<VarId> = queries
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let t_ids: Vec<VarId> = targets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let root = symmetric_infonce(&mut tape, &q_ids, &t_ids, tau, anchor_targets)?;
    let loss = tape.scalar_value(root);
    if !loss.is_finite() {
        return Err(Error::numeric(format!("tcl_loss: non-finite loss {loss}")));
    }
    tape.backward(root)?;
    let query_grads = q_ids
        .iter()
        .map(|&id| tape.grad(id).expect("query grad").to_vec())
        .collect();
    let target_grads = t_ids
        .iter()
        .map(|&id| tape.grad(id).expect("target grad").to_vec())
        .collect();
    Ok(TclOutput {
        loss,
        query_grads,
        target_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradients;
    use rand::Rng;

    /// Direct transcription of the two-term loss with plain exp sums.
    fn brute_force(queries: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> f64 {
        fn cos(a: &[f64], b: &[f64]) -> f64 {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            d / (na * nb)
        }
        let b = queries.len();
        let mut total = 0.0;
        for k in 0..b {
            let mut den1 = 0.0;
            for j in 0..b {
                den1 += (cos(&queries[k], &targets[j]) / tau).exp();
            }
            for j in 0..b {
                if j != k {
                    den1 += (cos(&targets[k], &targets[j]) / tau).exp();
                }
            }
            let num = (cos(&queries[k], &targets[k]) / tau).exp();
            total += -(num / den1).ln();

            let mut den2 = 0.0;
            for j in 0..b {
                den2 += (cos(&targets[k], &queries[j]) / tau).exp();
            }
            for j in 0..b {
                if j != k {
                    den2 += (cos(&queries[k], &queries[j]) / tau).exp();
                }
            }
            total += -(num / den2).ln();
        }
        total / b as f64
    }

    fn eval_graph(queries: &[Vec<f64>], targets: &[Vec<f64>], tau: f64, anchor: bool) -> f64 {
        let mut tape = Tape::new();
        let q: Vec<VarId> = queries
            .iter()
            .map(|v| tape.constant_vector(v.clone()))
            .collect();
        let t: Vec<VarId> = targets
            .iter()
            .map(|v| tape.constant_vector(v.clone()))
            .collect();
        let root = symmetric_infonce(&mut tape, &q, &t, tau, anchor).unwrap();
        tape.scalar_value(root)
    }

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    #[test]
    fn single_pair_identical_vectors_gives_zero() {
        let v = vec![vec![0.6, 0.8]];
        let loss = eval_graph(&v, &v, 0.07, true);
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn two_pairs_match_brute_force() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = q.clone();
        let got = eval_graph(&q, &t, 0.07, true);
        let want = brute_force(&q, &t, 0.07);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn random_batches_match_brute_force() {
        let mut rng = crate::rng::stream(42, "loss-test");
        for _ in 0..25 {
            let b = [2usize, 3, 4, 8][rng.gen_range(0..4)];
            let d = if rng.gen_bool(0.5) { 4 } else { 16 };
            let q: Vec<Vec<f64>> = (0..b).map(|_| random_unit(&mut rng, d)).collect();
            let t: Vec<Vec<f64>> = (0..b).map(|_| random_unit(&mut rng, d)).collect();
            let got = eval_graph(&q, &t, 0.07, true);
            let want = brute_force(&q, &t, 0.07);
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel <= 1e-9, "rel err {rel}");
        }
    }

    #[test]
    fn pair_order_does_not_change_loss() {
        let mut rng = crate::rng::stream(7, "loss-perm");
        let q: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
        let t: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
        let base = eval_graph(&q, &t, 0.07, true);
        let perm = [2usize, 0, 3, 1];
        let qp: Vec<Vec<f64>> = perm.iter().map(|&i| q[i].clone()).collect();
        let tp: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        let shuffled = eval_graph(&qp, &tp, 0.07, true);
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn rescaling_a_vector_does_not_change_loss() {
        let mut rng = crate::rng::stream(8, "loss-scale");
        let mut q: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 8)).collect();
        let t: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 8)).collect();
        let base = eval_graph(&q, &t, 0.07, true);
        for v in q[1].iter_mut() {
            *v *= 3.5;
        }
        let scaled = eval_graph(&q, &t, 0.07, true);
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn anchored_targets_get_exactly_zero_gradient() {
        let q = vec![
            Tensor::vector(vec![0.6, 0.8]),
            Tensor::vector(vec![-0.8, 0.6]),
        ];
        let t = vec![
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0]),
        ];
        let out = tcl_loss(&q, &t, 0.07, true).unwrap();
        for g in &out.target_grads {
            assert!(g.iter().all(|&v| v == 0.0));
        }
        assert!(out.query_grads.iter().any(|g| g.iter().any(|&v| v != 0.0)));

        let unanchored = tcl_loss(&q, &t, 0.07, false).unwrap();
        assert!((unanchored.loss - out.loss).abs() < 1e-12);
        assert!(unanchored
            .target_grads
            .iter()
            .any(|g| g.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn query_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(11, "loss-fd");
        let params: Vec<Tensor> = (0..4)
            .map(|_| Tensor::vector(random_unit(&mut rng, 5)))
            .collect();
        let f = |tape: &mut Tape, ids: &[VarId]| {
            let (q, t) = ids.split_at(2);
            symmetric_infonce(tape, q, t, 0.07, false)
        };
        let report = check_gradients(f, &params, 1e-4, 1e-4).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn standalone_wrapper_rejects_degenerate_batches_and_bad_tau() {
        let v = vec![Tensor::vector(vec![1.0, 0.0])];
        assert!(tcl_loss(&v, &v, 0.07, true).is_err());
        let q = vec![
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0]),
        ];
        assert!(tcl_loss(&q, &q, 0.0, true).is_err());
        assert!(tcl_loss(&q, &q, -0.5, true).is_err());
        let mut tape = Tape::new();
        let a = tape.constant_vector(vec![1.0]);
        assert!(symmetric_infonce(&mut tape, &[a], &[], 0.07, true).is_err());
    }
}
