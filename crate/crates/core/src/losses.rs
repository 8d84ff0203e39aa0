//! Metric, retrospective, and composite objectives.
//!
//! Each loss has a tape form (`*_on`) used during training and a value form
//! operating on plain arrays. The value forms run the tape form on constants
//! so both paths share one definition.

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{GaitError, Result};
use crate::tape::{Tape, Var};

pub use crate::model::ModelSnapshot;

/// Lower clamp for probabilities inside logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-sample embeddings (`[S, m·C]`) with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl BatchEmbeddings {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(GaitError::invalid(format!("{} embeddings for {} labels", embeddings.nrows(), labels.len())));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(GaitError::numerical("embeddings", "non-finite entry"));
        }
        Ok(BatchEmbeddings { embeddings, labels })
    }
}

/// `mask[i][j]` is true when samples `i` and `j` carry different labels.
pub fn negative_mask(labels: &[usize]) -> Array2<bool> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| labels[i] != labels[j])
}

/// Softmax-normalized negative-pair proximities; masked entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDistribution {
    pub probs: Array2<f64>,
    pub mask: Array2<bool>,
}

impl NegativeDistribution {
    /// Rows that have at least one negative.
    pub fn valid_rows(&self) -> usize {
        self.mask.outer_iter().filter(|r| r.iter().any(|&m| m)).count()
    }

    /// True when no sample has a negative (single-identity batch).
    pub fn is_empty(&self) -> bool {
        self.valid_rows() == 0
    }
}

/// Log of the negative-pair distribution, recorded on a tape.
pub fn negative_log_distribution_on(tape: &mut Tape, emb: Var, labels: &[usize]) -> Result<(Var, Array2<bool>)> {
    let n = tape.value(emb).shape()[0];
    if n != labels.len() {
        return Err(GaitError::invalid(format!("{n} embeddings for {} labels", labels.len())));
    }
    let mask = negative_mask(labels);
    let d = tape.sq_dist(emb, emb);
    let logits = tape.scale(d, -0.5);
    let ls = tape.masked_log_softmax(logits, mask.clone());
    Ok((ls, mask))
}

pub fn negative_distance_distribution(batch: &BatchEmbeddings) -> Result<NegativeDistribution> {
    let mut tape = Tape::new();
    let e = tape.constant(batch.embeddings.clone().into_dyn());
    let (ls, mask) = negative_log_distribution_on(&mut tape, e, &batch.labels)?;
    let mut probs: Array2<f64> = tape.value(ls).clone().into_dimensionality().expect("rank-2");
    ndarray::Zip::from(&mut probs).and(&mask).for_each(|p, &m| *p = if m { p.exp() } else { 0.0 });
    Ok(NegativeDistribution { probs, mask })
}

/// `Σ_{i,j} d_old_ij · ln(d_old_ij / d_new_ij)` over unmasked entries.
pub fn edsn_loss(d_new: &NegativeDistribution, d_old: &NegativeDistribution) -> Result<f64> {
    if d_new.mask != d_old.mask {
        return Err(GaitError::invalid("negative-pair masks differ between model versions"));
    }
    let mut total = 0.0;
    ndarray::Zip::from(&d_new.probs).and(&d_old.probs).and(&d_new.mask).for_each(|&q, &p, &m| {
        if m && p > 0.0 {
            total += p * (p.max(KL_FLOOR).ln() - q.max(KL_FLOOR).ln());
        }
    });
    Ok(total)
}

/// EDSN loss of the current embeddings against a frozen teacher distribution.
/// Summed over all pairs, or divided by the batch size when `batch_mean`.
pub fn edsn_loss_on(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    d_old: &NegativeDistribution,
    batch_mean: bool,
) -> Result<Var> {
    let (ls, mask) = negative_log_distribution_on(tape, emb, labels)?;
    if mask != d_old.mask {
        return Err(GaitError::invalid("negative-pair masks differ between model versions"));
    }
    let mut target = d_old.probs.clone();
    ndarray::Zip::from(&mut target).and(&mask).for_each(|p, &m| {
        if !m {
            *p = 0.0
        }
    });
    let entropy_term: f64 = target.iter().filter(|p| **p > 0.0).map(|p| p * p.max(KL_FLOOR).ln()).sum();
    let clamped = tape.clamp_min(ls, KL_FLOOR.ln());
    let t = tape.constant(target.into_dyn());
    let cross = tape.mul(clamped, t);
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    let loss = tape.offset(neg, entropy_term);
    Ok(if batch_mean { tape.scale(loss, 1.0 / labels.len().max(1) as f64) } else { loss })
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn check_distill_shapes(new: (usize, usize), old: (usize, usize)) -> Result<()> {
    if new.0 != old.0 {
        return Err(GaitError::invalid(format!("{} new rows vs {} teacher rows", new.0, old.0)));
    }
    if old.1 > new.1 {
        return Err(GaitError::invalid(format!("teacher has {} classes, student only {}", old.1, new.1)));
    }
    Ok(())
}

/// `-(1/S) Σ_i Σ_{j<C_old} softmax(old)_ij · log softmax(new[:, :C_old])_ij`
pub fn logit_distillation_on(tape: &mut Tape, new_logits: Var, old_logits: &Array2<f64>) -> Result<Var> {
    let shape = tape.value(new_logits).shape().to_vec();
    check_distill_shapes((shape[0], shape[1]), old_logits.dim())?;
    let old_classes = old_logits.ncols();
    let restricted = tape.slice_cols(new_logits, old_classes);
    let ls = tape.log_softmax(restricted);
    let p = tape.constant(softmax_rows(old_logits).into_dyn());
    let w = tape.mul(ls, p);
    let s = tape.sum(w);
    Ok(tape.scale(s, -1.0 / shape[0].max(1) as f64))
}

pub fn logit_distillation_loss(new_logits: &Array2<f64>, old_logits: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let n = tape.constant(new_logits.clone().into_dyn());
    let l = logit_distillation_on(&mut tape, n, old_logits)?;
    Ok(tape.scalar(l))
}

/// Mean Shannon entropy of the row softmax; the floor of the logit
/// distillation loss.
pub fn mean_entropy(logits: &Array2<f64>) -> f64 {
    let p = softmax_rows(logits);
    let total: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
    total / logits.nrows().max(1) as f64
}

/// Result of batch-hard triplet mining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletOutcome {
    pub value: f64,
    /// Anchors that had both a positive and a negative.
    pub valid_anchors: usize,
}

/// Soft-margin batch-hard triplet loss:
/// mean over anchors of `ln(1 + exp(max_p ‖a−p‖ − min_n ‖a−n‖))`.
///
/// Returns the zero node and `0` valid anchors when no triplet exists.
pub fn triplet_loss_on(tape: &mut Tape, emb: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let n = tape.value(emb).shape()[0];
    if n != labels.len() {
        return Err(GaitError::invalid(format!("{n} embeddings for {} labels", labels.len())));
    }
    let sq = tape.sq_dist(emb, emb);
    let dist = tape.safe_sqrt(sq);
    let dv = tape.value(dist).clone();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dv[[a, j]];
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (hardest_pos, hardest_neg) {
            pos_idx.push(a * n + p);
            neg_idx.push(a * n + q);
        }
    }
    let valid = pos_idx.len();
    if valid == 0 {
        log::warn!("triplet loss: batch has no valid (anchor, positive, negative) triplet");
        return Ok((tape.constant_scalar(0.0), 0));
    }
    let dap = tape.gather(dist, pos_idx);
    let dan = tape.gather(dist, neg_idx);
    let gap = tape.sub(dap, dan);
    let sp = tape.softplus(gap);
    Ok((tape.mean(sp), valid))
}

pub fn triplet_loss(batch: &BatchEmbeddings) -> Result<TripletOutcome> {
    let mut tape = Tape::new();
    let e = tape.constant(batch.embeddings.clone().into_dyn());
    let (l, valid) = triplet_loss_on(&mut tape, e, &batch.labels)?;
    Ok(TripletOutcome { value: tape.scalar(l), valid_anchors: valid })
}

/// Multipliers for the five objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub id: f64,
    pub triplet: f64,
    pub distill: f64,
    pub repository: f64,
    pub edsn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { id: 1.0, triplet: 1.0, distill: 1.0, repository: 1.0, edsn: 1.0 }
    }
}

/// Measured objective terms. Retrospective terms are `None` when the method
/// does not use them or no previous-step snapshot exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub id: f64,
    pub triplet: f64,
    pub distill: Option<f64>,
    pub repository: Option<f64>,
    pub edsn: Option<f64>,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("id", Some(self.id)),
            ("triplet", Some(self.triplet)),
            ("distill", self.distill),
            ("repository", self.repository),
            ("edsn", self.edsn),
        ]
    }
}

/// Weighted sum of the objective terms for continual step `step` (1-based).
/// At step 1 every retrospective term counts as zero.
pub fn total_loss(step: usize, c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in c.named() {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(GaitError::numerical(format!("loss component `{name}`"), format!("value {v}")));
            }
        }
    }
    let mut total = w.id * c.id + w.triplet * c.triplet;
    if step > 1 {
        total += w.distill * c.distill.unwrap_or(0.0)
            + w.repository * c.repository.unwrap_or(0.0)
            + w.edsn * c.edsn.unwrap_or(0.0);
    }
    Ok(total)
}

pub(crate) fn to_array2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().expect("rank-2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(rng: &mut ChaCha8Rng, labels: &[usize], dim: usize) -> BatchEmbeddings {
        let e = Array2::from_shape_fn((labels.len(), dim), |_| rng.random_range(-1.0..1.0));
        BatchEmbeddings::new(e, labels.to_vec()).unwrap()
    }

    #[test]
    fn negative_distribution_examples() {
        // anchor at origin, two negatives at equal distance, one positive
        let e = arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]);
        let d = negative_distance_distribution(&BatchEmbeddings::new(e, vec![0, 1, 2, 0]).unwrap()).unwrap();
        assert!((d.probs[[0, 1]] - 0.5).abs() < 1e-15);
        assert!((d.probs[[0, 2]] - 0.5).abs() < 1e-15);
        assert_eq!(d.probs[[0, 3]], 0.0);
        assert!(!d.mask[[0, 3]] && !d.mask[[0, 0]]);

        let e = arr2(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]);
        let d = negative_distance_distribution(&BatchEmbeddings::new(e, vec![0, 1, 2]).unwrap()).unwrap();
        assert!((d.probs[[0, 1]] - 0.7310585786).abs() < 1e-9);
        assert!((d.probs[[0, 2]] - 0.2689414214).abs() < 1e-9);
        for (row, m) in d.probs.outer_iter().zip(d.mask.outer_iter()) {
            if m.iter().any(|&x| x) {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }

        let e = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let d = negative_distance_distribution(&BatchEmbeddings::new(e, vec![4, 4]).unwrap()).unwrap();
        assert!(d.is_empty());
        assert!(d.probs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edsn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_batch(&mut rng, &[0, 0, 1, 1, 2, 2], 5);
        let d = negative_distance_distribution(&b).unwrap();
        assert_eq!(edsn_loss(&d, &d).unwrap(), 0.0);

        let mask = arr2(&[[false, true, true], [false, false, false], [false, false, false]]);
        let old = NegativeDistribution { probs: arr2(&[[0.0, 0.5, 0.5], [0.0; 3], [0.0; 3]]), mask: mask.clone() };
        let new = NegativeDistribution { probs: arr2(&[[0.0, 0.9, 0.1], [0.0; 3], [0.0; 3]]), mask };
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((edsn_loss(&new, &old).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.5108).abs() < 1e-4);

        let other = negative_distance_distribution(&rand_batch(&mut rng, &[0, 1, 1, 1, 2, 2], 5)).unwrap();
        assert!(edsn_loss(&other, &d).is_err());
    }

    #[test]
    fn edsn_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = [0, 0, 1, 1, 2];
        let old = rand_batch(&mut rng, &labels, 2);
        let new = rand_batch(&mut rng, &labels, 2);
        let d_old = negative_distance_distribution(&old).unwrap();
        let base = edsn_loss(&negative_distance_distribution(&new).unwrap(), &d_old).unwrap();
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let rot = arr2(&[[c, -s], [s, c]]);
        let rotated = BatchEmbeddings::new(new.embeddings.dot(&rot), labels.to_vec()).unwrap();
        let l = edsn_loss(&negative_distance_distribution(&rotated).unwrap(), &d_old).unwrap();
        assert!((l - base).abs() < 1e-12);
    }

    #[test]
    fn edsn_tape_matches_value_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [0, 0, 1, 1, 2, 3];
        let old = negative_distance_distribution(&rand_batch(&mut rng, &labels, 4)).unwrap();
        let new = rand_batch(&mut rng, &labels, 4);
        let mut tape = Tape::new();
        let e = tape.constant(new.embeddings.clone().into_dyn());
        let l = edsn_loss_on(&mut tape, e, &labels, &old, false).unwrap();
        let direct = edsn_loss(&negative_distance_distribution(&new).unwrap(), &old).unwrap();
        assert!((tape.scalar(l) - direct).abs() < 1e-12);
        let mut tape = Tape::new();
        let e = tape.constant(new.embeddings.clone().into_dyn());
        let l = edsn_loss_on(&mut tape, e, &labels, &old, true).unwrap();
        assert!((tape.scalar(l) - direct / 6.0).abs() < 1e-12);
    }

    #[test]
    fn logit_distillation_examples() {
        let old = arr2(&[[0.2, 1.0, -0.5], [2.0, 0.1, 0.3]]);
        // new equals old on old classes, extra classes arbitrary
        let new = arr2(&[[0.2, 1.0, -0.5, 7.0], [2.0, 0.1, 0.3, -3.0]]);
        let l = logit_distillation_loss(&new, &old).unwrap();
        assert!((l - mean_entropy(&old)).abs() < 1e-12);

        // one-hot teacher
        let old = arr2(&[[0.0, 200.0], [-300.0, 0.0]]);
        let new = arr2(&[[0.5, -0.2, 1.0], [0.3, 0.9, -1.0]]);
        let l = logit_distillation_loss(&new, &old).unwrap();
        let ls = |r: usize, k: usize| {
            let z = new[[r, 0]].exp() + new[[r, 1]].exp();
            (new[[r, k]].exp() / z).ln()
        };
        assert!((l + 0.5 * (ls(0, 1) + ls(1, 1))).abs() < 1e-12);

        // naive double sum
        let old = arr2::<f64, 3>(&[[0.3, -0.4, 1.1], [0.0, 0.8, -1.5]]);
        let new = arr2::<f64, 5>(&[[1.0, 0.2, -0.3, 0.7, 0.1], [-0.6, 0.4, 0.9, 0.0, 2.0]]);
        let mut oracle = 0.0;
        for i in 0..2 {
            let zo: f64 = (0..3).map(|j| old[[i, j]].exp()).sum();
            let zn: f64 = (0..3).map(|j| new[[i, j]].exp()).sum();
            for j in 0..3 {
                oracle -= (old[[i, j]].exp() / zo) * (new[[i, j]].exp() / zn).ln();
            }
        }
        oracle /= 2.0;
        assert!((logit_distillation_loss(&new, &old).unwrap() - oracle).abs() < 1e-8);
        assert!(logit_distillation_loss(&old, &new).is_err());
    }

    /// Enumerates every (a, p, n) triplet; batch-hard keeps each anchor's
    /// worst one, and softplus is monotone.
    fn triplet_oracle(e: &Array2<f64>, labels: &[usize]) -> f64 {
        let n = labels.len();
        let dist = |i: usize, j: usize| e.row(i).iter().zip(e.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut total = 0.0;
        let mut anchors = 0;
        for a in 0..n {
            let mut worst: Option<f64> = None;
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let v = (dist(a, p) - dist(a, q)).exp().ln_1p();
                    worst = Some(worst.map_or(v, |w: f64| w.max(v)));
                }
            }
            if let Some(w) = worst {
                total += w;
                anchors += 1;
            }
        }
        total / anchors as f64
    }

    #[test]
    fn triplet_examples() {
        // square: every anchor has its positive and nearest negative at distance 1
        let e = arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let t = triplet_loss(&BatchEmbeddings::new(e, vec![0, 1, 1, 0]).unwrap()).unwrap();
        assert_eq!(t.valid_anchors, 4);
        // positive is the diagonal here, so compute the oracle as well
        let e2 = arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!((t.value - triplet_oracle(&e2, &[0, 1, 1, 0])).abs() < 1e-12);

        let eq = arr2(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        // anchor 0: positive and hardest negative both at 1; anchor 1: positive at 1, negative at sqrt 2
        let t = triplet_loss(&BatchEmbeddings::new(eq, vec![0, 0, 1, 2]).unwrap()).unwrap();
        let expect = (2f64.ln() + (1.0 + (1.0 - 2f64.sqrt()).exp()).ln()) / 2.0;
        assert_eq!(t.valid_anchors, 2);
        assert!((t.value - expect).abs() < 1e-9);

        let far = arr2(&[[0.0, 0.0], [0.0, 0.1], [1e3, 0.0], [1e3, 0.1]]);
        let t = triplet_loss(&BatchEmbeddings::new(far, vec![0, 0, 1, 1]).unwrap()).unwrap();
        assert!(t.value < 1e-300);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let b = rand_batch(&mut rng, &[0, 1, 0, 1], 3);
            let t = triplet_loss(&b).unwrap();
            assert!((t.value - triplet_oracle(&b.embeddings, &b.labels)).abs() < 1e-8);
        }
        let single = rand_batch(&mut rng, &[3, 3, 3], 3);
        let t = triplet_loss(&single).unwrap();
        assert_eq!((t.value, t.valid_anchors), (0.0, 0));
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        let c = LossComponents { id: 1.5, triplet: 0.25, distill: Some(9.0), repository: Some(9.0), edsn: Some(9.0) };
        assert_eq!(total_loss(1, &c, &w).unwrap(), 1.75);
        let ones = LossComponents { id: 1.0, triplet: 1.0, distill: Some(1.0), repository: Some(1.0), edsn: Some(1.0) };
        assert_eq!(total_loss(2, &ones, &w).unwrap(), 5.0);
        let m = LossComponents { id: 0.31, triplet: 0.72, distill: Some(1.9), repository: Some(0.69), edsn: Some(0.05) };
        assert!((total_loss(3, &m, &w).unwrap() - 3.67).abs() < 1e-12);
        let bad = LossComponents { edsn: Some(f64::NAN), ..m };
        match total_loss(3, &bad, &w) {
            Err(GaitError::Numerical { component, .. }) => assert!(component.contains("edsn")),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
