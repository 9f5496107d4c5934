//! Training objectives.
//!
//! Three ingredients combine into the total loss:
//!
//! - supervised cross-entropy over the full vocabulary,
//! - the same cross-entropy on perturbed forward passes,
//! - a consistency divergence tying perturbed answer distributions to the
//!   distribution of the clean sample they derive from.
//!
//! `total = mean(sft) + mean(adv) + lambda * mean(consistency)`, where each
//! mean runs over however many terms the batch produced and an empty group
//! contributes zero. Divergences use natural log; gradients flow through
//! both arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "JS")]
    Js,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Weight of the consistency term in the total loss.
    pub lambda: f64,
    /// Softmax temperature applied to both logit rows.
    pub tau: f64,
    pub divergence: DivergenceKind,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { lambda: 0.01, tau: 1.0, divergence: DivergenceKind::Js }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Cross-entropy of one full-vocabulary logit row against a target token.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, target: usize) -> Result<Tensor> {
    if logits.rows() != 1 {
        return Err(Error::Contract(format!(
            "cross_entropy wants a single logit row, got {} rows",
            logits.rows()
        )));
    }
    if target >= logits.cols() {
        return Err(Error::Parameter(format!(
            "target {target} outside vocabulary of size {}",
            logits.cols()
        )));
    }
    let lsm = tape.log_softmax_rows(logits)?;
    // The negation rides along in the selector.
    let mut selector = vec![0.0; logits.cols()];
    selector[target] = -1.0;
    let sel = Tensor::constant(1, logits.cols(), selector)?;
    tape.sum(&tape.mul(&lsm, &sel)?)
}

/// `sum(p * (log p - log q))` where both log terms are already on the tape.
fn kl_from_parts(tape: &Tape, p: &Tensor, log_p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    let diff = tape.add(log_p, &tape.scale(log_q, -1.0)?)?;
    tape.sum(&tape.mul(p, &diff)?)
}

/// Divergence between the answer distributions induced by two logit rows.
///
/// `anchor` is the clean pass, `perturbed` the pass being pulled toward it.
/// KL is `KL(anchor || perturbed)`; JS is symmetric and bounded by ln 2.
pub fn consistency_divergence(
    tape: &Tape,
    anchor: &Tensor,
    perturbed: &Tensor,
    cfg: &ConsistencyConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if anchor.rows() != 1 || perturbed.rows() != 1 || anchor.cols() != perturbed.cols() {
        return Err(Error::Contract(format!(
            "consistency needs matching 1-row logit tensors, got {}x{} and {}x{}",
            anchor.rows(),
            anchor.cols(),
            perturbed.rows(),
            perturbed.cols()
        )));
    }
    let scaled_a = tape.scale(anchor, 1.0 / cfg.tau)?;
    let scaled_p = tape.scale(perturbed, 1.0 / cfg.tau)?;
    let p = tape.softmax_rows(&scaled_a)?;
    let log_p = tape.log_softmax_rows(&scaled_a)?;
    let log_q = tape.log_softmax_rows(&scaled_p)?;
    match cfg.divergence {
        DivergenceKind::Kl => kl_from_parts(tape, &p, &log_p, &log_q),
        DivergenceKind::Js => {
            let q = tape.softmax_rows(&scaled_p)?;
            let m = tape.scale(&tape.add(&p, &q)?, 0.5)?;
            let log_m = tape.log(&m)?;
            let kl_pm = kl_from_parts(tape, &p, &log_p, &log_m)?;
            let kl_qm = kl_from_parts(tape, &q, &log_q, &log_m)?;
            tape.scale(&tape.add(&kl_pm, &kl_qm)?, 0.5)
        }
    }
}

/// Per-batch loss values, recorded per step in the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub adv: f64,
    pub consistency: f64,
    pub total: f64,
    pub n_sft: usize,
    pub n_adv: usize,
    pub n_pairs: usize,
}

fn mean_of(tape: &Tape, terms: &[Tensor]) -> Result<Option<Tensor>> {
    if terms.is_empty() {
        return Ok(None);
    }
    for t in terms {
        if t.len() != 1 {
            return Err(Error::Contract("loss terms must be scalars".into()));
        }
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let stacked = tape.concat_rows(&refs)?;
    Ok(Some(tape.mean(&stacked)?))
}

/// Assembles the total training loss from scalar per-sample terms.
pub fn total_loss(
    tape: &Tape,
    sft_terms: &[Tensor],
    adv_terms: &[Tensor],
    consistency_terms: &[Tensor],
    lambda: f64,
) -> Result<(Tensor, LossBreakdown)> {
    if sft_terms.is_empty() {
        return Err(Error::Contract("a batch must carry at least one supervised term".into()));
    }
    let sft = mean_of(tape, sft_terms)?.expect("non-empty");
    let adv = mean_of(tape, adv_terms)?;
    let cons = mean_of(tape, consistency_terms)?;

    let mut total = sft.clone();
    if let Some(a) = &adv {
        total = tape.add(&total, a)?;
    }
    if let Some(c) = &cons {
        total = tape.add(&total, &tape.scale(c, lambda)?)?;
    }

    let sft_v = sft.item()?;
    let adv_v = adv.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0);
    let cons_v = cons.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0);
    let breakdown = LossBreakdown {
        sft: sft_v,
        adv: adv_v,
        consistency: cons_v,
        total: total.item()?,
        n_sft: sft_terms.len(),
        n_adv: adv_terms.len(),
        n_pairs: consistency_terms.len(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;

    fn kl_cfg() -> ConsistencyConfig {
        ConsistencyConfig { divergence: DivergenceKind::Kl, ..ConsistencyConfig::default() }
    }

    fn logits(vals: &[f64]) -> Tensor {
        Tensor::constant(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let tape = Tape::new();
        let l = logits(&vec![0.0; 96]);
        let ce = cross_entropy(&tape, &l, 17).unwrap().item().unwrap();
        assert!((ce - (96.0f64).ln()).abs() < 1e-12);
        assert!((ce - 4.5643481914678361).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_negative_log_probability() {
        let tape = Tape::new();
        let l = logits(&[2.0, 0.0, 0.0]);
        let ce = cross_entropy(&tape, &l, 0).unwrap().item().unwrap();
        let p0 = (2.0f64).exp() / ((2.0f64).exp() + 2.0);
        assert!((ce + p0.ln()).abs() < 1e-12);
        assert!(cross_entropy(&tape, &l, 3).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let report = finite_difference_check(
            |tape, x| cross_entropy(tape, x, 2),
            1,
            6,
            &[0.3, -1.2, 0.8, 2.0, -0.5, 0.1],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn two_point_kl_matches_the_closed_form() {
        // KL(softmax([1,0]) || softmax([0,1])) = (e-1)/(e+1).
        let tape = Tape::new();
        let a = logits(&[1.0, 0.0]);
        let b = logits(&[0.0, 1.0]);
        let kl = consistency_divergence(&tape, &a, &b, &kl_cfg()).unwrap().item().unwrap();
        let expected = (std::f64::consts::E - 1.0) / (std::f64::consts::E + 1.0);
        assert!((kl - expected).abs() < 1e-14);
        assert!((kl - 0.4621171572600098).abs() < 1e-14);
    }

    #[test]
    fn kl_is_asymmetric_and_zero_on_identical_inputs() {
        let tape = Tape::new();
        let a = logits(&[1.5, -0.5, 0.0]);
        let b = logits(&[-1.0, 2.0, 0.3]);
        let ab = consistency_divergence(&tape, &a, &b, &kl_cfg()).unwrap().item().unwrap();
        let ba = consistency_divergence(&tape, &b, &a, &kl_cfg()).unwrap().item().unwrap();
        assert!(ab > 0.0 && ba > 0.0);
        assert!((ab - ba).abs() > 1e-3);
        let aa = consistency_divergence(&tape, &a, &a, &kl_cfg()).unwrap().item().unwrap();
        assert!(aa.abs() < 1e-12);
    }

    #[test]
    fn js_is_symmetric_bounded_and_zero_on_identical_inputs() {
        let tape = Tape::new();
        let cfg = ConsistencyConfig::default();
        let a = logits(&[3.0, -2.0, 0.5, 1.0]);
        let b = logits(&[-1.0, 4.0, 0.0, -3.0]);
        let ab = consistency_divergence(&tape, &a, &b, &cfg).unwrap().item().unwrap();
        let ba = consistency_divergence(&tape, &b, &a, &cfg).unwrap().item().unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
        assert!(ab <= std::f64::consts::LN_2 + 1e-12);
        let aa = consistency_divergence(&tape, &a, &a, &cfg).unwrap().item().unwrap();
        assert!(aa.abs() < 1e-12);

        // Near-disjoint distributions approach the ln 2 ceiling.
        let far = consistency_divergence(
            &tape,
            &logits(&[40.0, 0.0]),
            &logits(&[0.0, 40.0]),
            &cfg,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((far - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn temperature_softens_the_divergence() {
        let tape = Tape::new();
        let a = logits(&[2.0, 0.0]);
        let b = logits(&[0.0, 2.0]);
        let sharp = ConsistencyConfig { tau: 1.0, ..kl_cfg() };
        let soft = ConsistencyConfig { tau: 4.0, ..kl_cfg() };
        let d_sharp = consistency_divergence(&tape, &a, &b, &sharp).unwrap().item().unwrap();
        let d_soft = consistency_divergence(&tape, &a, &b, &soft).unwrap().item().unwrap();
        assert!(d_soft < d_sharp);
    }

    #[test]
    fn divergence_gradients_match_finite_differences_in_both_arguments() {
        let anchor_vals = [0.7, -0.4, 1.1, 0.0];
        let pert_vals = [-0.2, 0.9, 0.3, -1.0];
        for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
            let cfg = ConsistencyConfig { divergence: kind, tau: 2.0, ..Default::default() };
            let report = finite_difference_check(
                |tape, x| consistency_divergence(tape, &logits(&anchor_vals), x, &cfg),
                1,
                4,
                &pert_vals,
                1e-4,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{kind:?} wrt perturbed: {}", report.max_rel_err);

            let report = finite_difference_check(
                |tape, x| consistency_divergence(tape, x, &logits(&pert_vals), &cfg),
                1,
                4,
                &anchor_vals,
                1e-4,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{kind:?} wrt anchor: {}", report.max_rel_err);
        }
    }

    #[test]
    fn total_loss_weights_the_groups() {
        let tape = Tape::new();
        let sft = vec![Tensor::scalar(1.0).unwrap(), Tensor::scalar(3.0).unwrap()];
        let adv = vec![Tensor::scalar(4.0).unwrap()];
        let cons = vec![Tensor::scalar(0.5).unwrap(), Tensor::scalar(1.5).unwrap()];
        let (loss, b) = total_loss(&tape, &sft, &adv, &cons, 0.01).unwrap();
        assert!((b.sft - 2.0).abs() < 1e-15);
        assert!((b.adv - 4.0).abs() < 1e-15);
        assert!((b.consistency - 1.0).abs() < 1e-15);
        assert!((b.total - (2.0 + 4.0 + 0.01)).abs() < 1e-15);
        assert!((loss.item().unwrap() - b.total).abs() < 1e-15);
        assert_eq!((b.n_sft, b.n_adv, b.n_pairs), (2, 1, 2));
    }

    #[test]
    fn empty_groups_contribute_nothing() {
        let tape = Tape::new();
        let sft = vec![Tensor::scalar(2.0).unwrap()];
        let (loss, b) = total_loss(&tape, &sft, &[], &[], 0.5).unwrap();
        assert_eq!(b.adv, 0.0);
        assert_eq!(b.consistency, 0.0);
        assert!((loss.item().unwrap() - 2.0).abs() < 1e-15);
        assert!(total_loss(&tape, &[], &[], &[], 0.5).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ConsistencyConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ConsistencyConfig { lambda: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let tape = Tape::new();
        let a = logits(&[0.0, 1.0]);
        let b = logits(&[0.0, 1.0, 2.0]);
        assert!(consistency_divergence(&tape, &a, &b, &ConsistencyConfig::default()).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn logit_row() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-8.0f64..8.0, 4)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn kl_is_nonnegative(a in logit_row(), b in logit_row()) {
                let tape = Tape::new();
                let d = consistency_divergence(&tape, &logits(&a), &logits(&b), &kl_cfg())
                    .unwrap()
                    .item()
                    .unwrap();
                prop_assert!(d >= -1e-12, "KL {d}");
            }

            #[test]
            fn js_lives_in_the_unit_log_interval(a in logit_row(), b in logit_row()) {
                let tape = Tape::new();
                let cfg = ConsistencyConfig::default();
                let ab = consistency_divergence(&tape, &logits(&a), &logits(&b), &cfg)
                    .unwrap()
                    .item()
                    .unwrap();
                let ba = consistency_divergence(&tape, &logits(&b), &logits(&a), &cfg)
                    .unwrap()
                    .item()
                    .unwrap();
                prop_assert!(ab >= -1e-12);
                prop_assert!(ab <= std::f64::consts::LN_2 + 1e-12);
                prop_assert!((ab - ba).abs() < 1e-9);
            }

            #[test]
            fn cross_entropy_is_at_least_the_true_class_surprisal(a in logit_row(), t in 0usize..4) {
                let tape = Tape::new();
                let ce = cross_entropy(&tape, &logits(&a), t).unwrap().item().unwrap();
                prop_assert!(ce >= -1e-12);
            }
        }
    }
}
