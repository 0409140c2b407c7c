//! InfoNCE regularizer that pushes expert encodings apart.
//!
//! For expert `i` the query is its encoding at time `t`, the positive key its
//! own encoding at `t + 1`, and the negatives are the other experts'
//! encodings at `t`. The per-sample loss sums the InfoNCE term over experts.

use serde::{Deserialize, Serialize};

use crate::diff::tape::logsumexp;
use crate::diff::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// L2-normalize encodings before taking dot products.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            normalize: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::input(format!("contrastive temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log( exp(q.k+/tau) / (exp(q.k+/tau) + sum exp(q.k-/tau)) )`
pub fn info_nce(q: &[f64], k_pos: &[f64], k_negs: &[&[f64]], tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::input(format!("contrastive temperature must be positive, got {tau}")));
    }
    if k_negs.is_empty() {
        return Err(Error::input("InfoNCE needs at least one negative"));
    }
    if k_pos.len() != q.len() || k_negs.iter().any(|k| k.len() != q.len()) {
        return Err(Error::input("query and keys must share a dimension"));
    }
    let pos = dot(q, k_pos) / tau;
    let mut logits = Vec::with_capacity(k_negs.len() + 1);
    logits.push(pos);
    logits.extend(k_negs.iter().map(|k| dot(q, k) / tau));
    Ok(logsumexp(&logits) - pos)
}

/// Encodings of `K` experts at consecutive steps, each `B x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub enc_t: Vec<Matrix>,
    pub enc_t1: Vec<Matrix>,
    pub config: ContrastiveConfig,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.enc_t.len() < 2 {
            return Err(Error::config("contrastive loss needs at least two experts"));
        }
        if self.enc_t.len() != self.enc_t1.len() {
            return Err(Error::input("enc_t and enc_t1 must hold the same number of experts"));
        }
        let shape = self.enc_t[0].dim();
        if self.enc_t.iter().chain(&self.enc_t1).any(|m| m.dim() != shape) {
            return Err(Error::input("all encodings must share one shape"));
        }
        if shape.0 == 0 {
            return Err(Error::input("empty contrastive batch"));
        }
        Ok(())
    }
}

/// Mean over the batch of the summed per-expert InfoNCE terms.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let t: Vec<Var> = batch.enc_t.iter().map(|m| tape.constant(m.clone())).collect();
    let t1: Vec<Var> = batch.enc_t1.iter().map(|m| tape.constant(m.clone())).collect();
    let rows = batch.enc_t[0].nrows();
    let weights = Matrix::from_elem((rows, 1), 1.0 / rows as f64);
    let loss = contrastive_loss_tape(&mut tape, &t, &t1, batch.config, weights)?;
    Ok(tape.scalar(loss))
}

/// Per-sample, per-expert InfoNCE terms as `B x 1` variables, one per expert.
pub fn contrastive_terms_tape(
    tape: &mut Tape<'_>,
    enc_t: &[Var],
    enc_t1: &[Var],
    config: ContrastiveConfig,
) -> Result<Vec<Var>> {
    config.validate()?;
    let k = enc_t.len();
    if k < 2 {
        return Err(Error::config("contrastive loss needs at least two experts"));
    }
    if enc_t1.len() != k {
        return Err(Error::input("enc_t and enc_t1 must hold the same number of experts"));
    }
    let (q, pos): (Vec<Var>, Vec<Var>) = if config.normalize {
        (
            enc_t.iter().map(|&v| tape.normalize_rows(v)).collect(),
            enc_t1.iter().map(|&v| tape.normalize_rows(v)).collect(),
        )
    } else {
        (enc_t.to_vec(), enc_t1.to_vec())
    };
    let inv_tau = 1.0 / config.tau;
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let p = tape.row_dot(q[i], pos[i]);
        let p = tape.scale(p, inv_tau);
        let mut logits = vec![p];
        for j in (0..k).filter(|&j| j != i) {
            let n = tape.row_dot(q[i], q[j]);
            logits.push(tape.scale(n, inv_tau));
        }
        let all = tape.concat_cols(&logits);
        let lse = tape.logsumexp_rows(all);
        terms.push(tape.sub(lse, p));
    }
    Ok(terms)
}

/// `sum_b weights[b] * sum_i term(b, i)` as a `1 x 1` variable.
pub fn contrastive_loss_tape(
    tape: &mut Tape<'_>,
    enc_t: &[Var],
    enc_t1: &[Var],
    config: ContrastiveConfig,
    weights: Matrix,
) -> Result<Var> {
    let terms = contrastive_terms_tape(tape, enc_t, enc_t1, config)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(tape.weighted_sum(total, weights))
}

/// Mean cosine similarity over all pairs of distinct experts, averaged over
/// rows. `encodings[j]` is the `B x d` output of expert `j`.
pub fn mean_pairwise_cosine(encodings: &[Matrix]) -> f64 {
    let k = encodings.len();
    let rows = encodings.first().map_or(0, Matrix::nrows);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        for i in 0..k {
            for j in (i + 1)..k {
                let a = encodings[i].row(r);
                let b = encodings[j].row(r);
                let denom = (a.dot(&a) * b.dot(&b)).sqrt().max(1e-12);
                total += a.dot(&b) / denom;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn batch(enc_t: Vec<Matrix>, enc_t1: Vec<Matrix>, tau: f64) -> ContrastiveBatch {
        ContrastiveBatch {
            enc_t,
            enc_t1,
            config: ContrastiveConfig { tau, normalize: false },
        }
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let v = info_nce(&[1.0, 2.0], &[0.5, 0.5], &[&[0.5, 0.5]], 0.3).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_query_has_vanishing_loss() {
        let v = info_nce(&[1.0, 0.0], &[41.0, 0.0], &[&[0.0, 1.0], &[0.0, -1.0]], 1.0).unwrap();
        assert!(v < 1e-15, "{v}");
    }

    #[test]
    fn orthonormal_closed_form() {
        let v = info_nce(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 1.0)).ln())).abs() < 1e-14);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        assert!(matches!(info_nce(&[1.0], &[1.0], &[&[1.0]], 0.0), Err(Error::Input(_))));
        assert!(matches!(info_nce(&[1.0], &[1.0], &[&[1.0]], -1.0), Err(Error::Input(_))));
    }

    #[test]
    fn identical_encodings_give_two_ln2() {
        let e = array![[0.3, -0.7, 1.1]];
        let b = batch(vec![e.clone(), e.clone()], vec![e.clone(), e], 0.5);
        assert!((contrastive_loss(&b).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_batch_closed_form() {
        let e1 = array![[1.0, 0.0]];
        let e2 = array![[0.0, 1.0]];
        let b = batch(vec![e1.clone(), e2.clone()], vec![e1, e2], 1.0);
        let l = contrastive_loss(&b).unwrap();
        let e = std::f64::consts::E;
        assert!((l - 2.0 * (-(e / (e + 1.0)).ln())).abs() < 1e-14);
        assert!((l - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn single_expert_is_a_config_error() {
        let e = array![[1.0]];
        let b = batch(vec![e.clone()], vec![e], 1.0);
        assert!(matches!(contrastive_loss(&b), Err(Error::Config(_))));
    }

    fn encodings(k: usize, b: usize, d: usize) -> impl Strategy<Value = Vec<Matrix>> {
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, b * d), k)
            .prop_map(move |vs| vs.into_iter().map(|v| Matrix::from_shape_vec((b, d), v).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn every_term_is_non_negative(t in encodings(3, 2, 4), t1 in encodings(3, 2, 4)) {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let a: Vec<Var> = t.iter().map(|m| tape.constant(m.clone())).collect();
            let b: Vec<Var> = t1.iter().map(|m| tape.constant(m.clone())).collect();
            let terms = contrastive_terms_tape(&mut tape, &a, &b, ContrastiveConfig { tau: 0.5, normalize: false }).unwrap();
            for v in terms {
                prop_assert!(tape.value(v).iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn expert_permutation_is_invariant(t in encodings(4, 3, 2), t1 in encodings(4, 3, 2)) {
            let base = contrastive_loss(&batch(t.clone(), t1.clone(), 0.7)).unwrap();
            let perm = [2, 0, 3, 1];
            let pt = perm.iter().map(|&i| t[i].clone()).collect();
            let pt1 = perm.iter().map(|&i| t1[i].clone()).collect();
            let permuted = contrastive_loss(&batch(pt, pt1, 0.7)).unwrap();
            prop_assert!((base - permuted).abs() < 1e-10);
        }

        #[test]
        fn normalized_loss_ignores_positive_scaling(
            t in encodings(3, 2, 3),
            t1 in encodings(3, 2, 3),
            scale in 0.1f64..10.0,
            which in 0usize..3,
        ) {
            let cfg = ContrastiveConfig { tau: 0.2, normalize: true };
            let base = contrastive_loss(&ContrastiveBatch { enc_t: t.clone(), enc_t1: t1.clone(), config: cfg }).unwrap();
            let mut st = t.clone();
            st[which] *= scale;
            let mut st1 = t1.clone();
            st1[(which + 1) % 3] *= scale;
            let scaled = contrastive_loss(&ContrastiveBatch { enc_t: st, enc_t1: st1, config: cfg }).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_of_identical_and_opposite_encodings() {
        let a = array![[1.0, 2.0]];
        assert!((mean_pairwise_cosine(&[a.clone(), a.clone()]) - 1.0).abs() < 1e-15);
        assert!((mean_pairwise_cosine(&[a.clone(), -a]) + 1.0).abs() < 1e-15);
    }
}
