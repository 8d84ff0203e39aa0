//! Comparison methods sharing the extractor and training loop: sequential
//! fine-tuning, Learning without Forgetting, similarity-preserving
//! distillation, and the margin-hinged logit distillation of CRL.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GaitError, Result};
use crate::losses::{softmax_rows, LossComponents, KL_FLOOR};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "LwF")]
    Lwf,
    #[serde(rename = "SPD")]
    Spd,
    #[serde(rename = "CRL")]
    Crl,
    GaitAdapter,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "SFT",
            Method::Lwf => "LwF",
            Method::Spd => "SPD",
            Method::Crl => "CRL",
            Method::GaitAdapter => "GaitAdapter",
        }
    }

    pub fn parse(tag: &str) -> Result<Method> {
        match tag.to_ascii_lowercase().as_str() {
            "sft" => Ok(Method::Sft),
            "lwf" => Ok(Method::Lwf),
            "spd" => Ok(Method::Spd),
            "crl" => Ok(Method::Crl),
            "gaitadapter" => Ok(Method::GaitAdapter),
            _ => Err(GaitError::config("method", format!("unknown method `{tag}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_SPD_WEIGHT: f64 = 1.0;
pub const DEFAULT_CRL_MARGIN: f64 = 0.1;

/// One continual-learning method and its scalars.
///
/// `use_gpak` and `use_edsn` only matter for [`Method::GaitAdapter`]; with
/// both off it is the plain base objective, identical to SFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub use_gpak: bool,
    pub use_edsn: bool,
    pub spd_weight: f64,
    pub crl_margin: f64,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            use_gpak: true,
            use_edsn: true,
            spd_weight: DEFAULT_SPD_WEIGHT,
            crl_margin: DEFAULT_CRL_MARGIN,
        }
    }

    pub fn sft() -> Self {
        Self::new(Method::Sft)
    }

    pub fn gait_adapter() -> Self {
        Self::new(Method::GaitAdapter)
    }

    /// GaitAdapter with individual components switched off.
    pub fn ablation(use_gpak: bool, use_edsn: bool) -> Self {
        MethodConfig { use_gpak, use_edsn, ..Self::gait_adapter() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spd_weight >= 0.0 && self.spd_weight.is_finite()) {
            return Err(GaitError::config("spd_weight", "must be a finite non-negative number"));
        }
        if !(self.crl_margin >= 0.0 && self.crl_margin.is_finite()) {
            return Err(GaitError::config("crl_margin", "must be a finite non-negative number"));
        }
        Ok(())
    }

    fn ga(&self) -> bool {
        self.method == Method::GaitAdapter
    }

    /// Knowledge transfer through the repository graph (and its stability loss).
    pub fn transfer(&self) -> bool {
        self.ga() && self.use_gpak
    }

    pub fn uses_edsn(&self) -> bool {
        self.ga() && self.use_edsn
    }

    pub fn uses_distill(&self) -> bool {
        self.method == Method::Lwf || self.uses_edsn()
    }

    pub fn uses_repository(&self) -> bool {
        self.transfer()
    }

    pub fn uses_relation(&self) -> bool {
        matches!(self.method, Method::Spd | Method::Crl)
    }

    /// Whether any loss term consults the previous-step snapshot.
    pub fn needs_teacher(&self) -> bool {
        self.uses_distill() || self.uses_edsn() || self.uses_repository() || self.uses_relation()
    }

    /// Display name; ablated GaitAdapter variants are named after their parts.
    pub fn label(&self) -> String {
        match (self.method, self.use_gpak, self.use_edsn) {
            (Method::GaitAdapter, true, true) => "GaitAdapter".into(),
            (Method::GaitAdapter, true, false) => "Base+GPAK".into(),
            (Method::GaitAdapter, false, true) => "Base+EDSN".into(),
            (Method::GaitAdapter, false, false) => "Base".into(),
            (m, _, _) => m.as_str().into(),
        }
    }
}

/// `L_c + L_t`.
pub fn sft_loss(c: &LossComponents) -> f64 {
    c.id + c.triplet
}

/// `L_c + L_t + L_d`; a missing distillation term counts as zero.
pub fn lwf_loss(c: &LossComponents) -> f64 {
    sft_loss(c) + c.distill.unwrap_or(0.0)
}

/// `(1/S²) ‖G_new − G_old‖²` with `G` the row-normalized Gram matrix.
pub fn spd_loss(new: &Array2<f64>, old: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let n = tape.constant(new.clone().into_dyn());
    let l = spd_loss_on(&mut tape, n, old)?;
    Ok(tape.scalar(l))
}

fn gram_normalized(a: &Array2<f64>) -> Array2<f64> {
    let mut g = a.dot(&a.t());
    for mut row in g.outer_iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    g
}

pub fn spd_loss_on(tape: &mut Tape, new: Var, old: &Array2<f64>) -> Result<Var> {
    let shape = tape.value(new).shape().to_vec();
    if shape.len() != 2 || shape[0] != old.nrows() {
        return Err(GaitError::invalid(format!("activation shapes {shape:?} and {:?} differ", old.dim())));
    }
    let s = shape[0];
    if s < 2 {
        log::warn!("similarity distillation needs at least two samples; contributing 0");
        return Ok(tape.constant_scalar(0.0));
    }
    let g = tape.matmul_t(new, new);
    let g = tape.row_normalize(g);
    let target = tape.constant(gram_normalized(old).into_dyn());
    let d = tape.sub(g, target);
    let sq = tape.mul(d, d);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (s * s) as f64))
}

/// Mean over rows of `max(KL(p‖q) − δ, 0)`.
pub fn crl_loss(p_old: &Array2<f64>, q_new: &Array2<f64>, delta: f64) -> Result<f64> {
    if p_old.dim() != q_new.dim() {
        return Err(GaitError::invalid(format!("distribution shapes {:?} and {:?} differ", p_old.dim(), q_new.dim())));
    }
    if p_old.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, q) in p_old.outer_iter().zip(q_new.outer_iter()) {
        let kl: f64 = p
            .iter()
            .zip(q.iter())
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.max(KL_FLOOR).ln() - qi.max(KL_FLOOR).ln()))
            .sum();
        total += (kl - delta).max(0.0);
    }
    Ok(total / p_old.nrows() as f64)
}

/// CRL objective on the tape: teacher distribution from `old_logits`, student
/// distribution from the student's logits restricted to the old classes.
pub fn crl_loss_on(tape: &mut Tape, new_logits: Var, old_logits: &Array2<f64>, delta: f64) -> Result<Var> {
    let shape = tape.value(new_logits).shape().to_vec();
    let (rows, old_classes) = old_logits.dim();
    if shape[0] != rows || shape[1] < old_classes {
        return Err(GaitError::invalid(format!("student logits {shape:?} cannot cover teacher {:?}", old_logits.dim())));
    }
    if rows == 0 || old_classes == 0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let p = softmax_rows(old_logits);
    let neg_entropy: Vec<f64> = p
        .outer_iter()
        .map(|r| r.iter().filter(|v| **v > 0.0).map(|v| v * v.max(KL_FLOOR).ln()).sum())
        .collect();
    let restricted = tape.slice_cols(new_logits, old_classes);
    let ls = tape.log_softmax(restricted);
    let ls = tape.clamp_min(ls, KL_FLOOR.ln());
    let pc = tape.constant(p.into_dyn());
    let cross = tape.mul(ls, pc);
    let cross = tape.row_sum(cross);
    let h = tape.constant(ndarray::Array1::from(neg_entropy).into_dyn());
    let kl = tape.sub(h, cross);
    let shifted = tape.offset(kl, -delta);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn method_switches() {
        assert!(!MethodConfig::sft().needs_teacher());
        assert!(!MethodConfig::ablation(false, false).needs_teacher());
        assert_eq!(MethodConfig::ablation(false, false).label(), "Base");
        assert_eq!(MethodConfig::ablation(true, false).label(), "Base+GPAK");
        let lwf = MethodConfig::new(Method::Lwf);
        assert!(lwf.uses_distill() && !lwf.uses_edsn() && !lwf.transfer());
        let ga = MethodConfig::gait_adapter();
        assert!(ga.transfer() && ga.uses_edsn() && ga.uses_distill() && ga.uses_repository());
        // ablation switches are inert for the baselines
        let spd = MethodConfig { use_gpak: true, ..MethodConfig::new(Method::Spd) };
        assert!(!spd.transfer() && spd.uses_relation());
        for m in [Method::Sft, Method::Lwf, Method::Spd, Method::Crl, Method::GaitAdapter] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("AKA").is_err());
    }

    #[test]
    fn composite_baseline_objectives() {
        let c = LossComponents { id: 1.25, triplet: 0.5, distill: Some(0.75), repository: None, edsn: None };
        assert_eq!(sft_loss(&c), 1.75);
        assert_eq!(lwf_loss(&c), 2.5);
        let first = LossComponents { distill: None, ..c };
        assert_eq!(lwf_loss(&first), sft_loss(&first));
    }

    #[test]
    fn spd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand2(5, 6, &mut rng);
        assert!(spd_loss(&a, &a).unwrap().abs() < 1e-15);
        assert!(spd_loss(&a.mapv(|v| 3.5 * v), &a).unwrap() < 1e-24);

        let new = rand2(3, 4, &mut rng);
        let old = rand2(3, 4, &mut rng);
        let gram = |x: &Array2<f64>| {
            let mut g = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] = (0..4).map(|k| x[[i, k]] * x[[j, k]]).sum();
                }
                let n = (0..3).map(|j| g[i][j] * g[i][j]).sum::<f64>().sqrt();
                for j in 0..3 {
                    g[i][j] /= n;
                }
            }
            g
        };
        let (gn, go) = (gram(&new), gram(&old));
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                oracle += (gn[i][j] - go[i][j]).powi(2);
            }
        }
        oracle /= 9.0;
        assert!((spd_loss(&new, &old).unwrap() - oracle).abs() < 1e-8);
        assert_eq!(spd_loss(&rand2(1, 4, &mut rng), &rand2(1, 4, &mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn crl_examples() {
        let p = arr2(&[[0.2, 0.3, 0.5]]);
        assert_eq!(crl_loss(&p, &p, 0.0).unwrap(), 0.0);
        assert_eq!(crl_loss(&p, &p, 0.7).unwrap(), 0.0);
        // two-point distributions with a chosen divergence
        let kl = |a: f64, b: f64| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        let solve = |target: f64| {
            let (mut lo, mut hi) = (0.5, 1.0 - 1e-15);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if kl(0.5, mid) < target { lo = mid } else { hi = mid }
            }
            0.5 * (lo + hi)
        };
        let pp = arr2(&[[0.5, 0.5]]);
        let b = solve(0.3);
        assert_eq!(crl_loss(&pp, &arr2(&[[b, 1.0 - b]]), 0.5).unwrap(), 0.0);
        let b = solve(0.8);
        assert!((crl_loss(&pp, &arr2(&[[b, 1.0 - b]]), 0.5).unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn crl_tape_matches_value_and_is_monotone_in_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let old = rand2(4, 3, &mut rng).mapv(|v| 2.0 * v);
        let new = rand2(4, 5, &mut rng).mapv(|v| 2.0 * v);
        let restricted = new.slice(ndarray::s![.., ..3]).to_owned();
        let mut prev = f64::INFINITY;
        for delta in [0.0, 0.05, 0.1, 0.3, 1.0] {
            let v = crl_loss(&softmax_rows(&old), &softmax_rows(&restricted), delta).unwrap();
            let mut tape = Tape::new();
            let n = tape.constant(new.clone().into_dyn());
            let l = crl_loss_on(&mut tape, n, &old, delta).unwrap();
            assert!((tape.scalar(l) - v).abs() < 1e-12);
            assert!(v <= prev);
            prev = v;
        }
    }
}
