//! Noise-tolerant training objective.
//!
//! For a one-hot target with gold class `g` and prediction `q`:
//!
//! * CE  = `-ln q_g`
//! * RCE = `-A (1 - q_g)`, where `A < 0` stands in for `ln 0`
//! * SCE = CE + RCE
//! * consistency = `KL(q || q') + KL(q' || q)` between the predictions on the
//!   original and the transformed input
//!
//! and the per-example loss is `SCE(q) + SCE(q') + mu * consistency`.
//! Sequence targets average each term over positions.
//!
//! Probabilities are floored at [`PROB_FLOOR`] before every log, in both the
//! value and gradient paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_LOG_ZERO_CLIP: f64 = -4.0;
pub const DEFAULT_MU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
}

/// A probability vector. Entries are non-negative and sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ObjectiveError> {
        if probs.is_empty() {
            return Err(ObjectiveError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ObjectiveError::InvalidDistribution("negative or non-finite entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ObjectiveError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Sce,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Consistency weight.
    pub mu: f64,
    /// Value substituted for `ln 0` in RCE.
    pub log_zero_clip: f64,
    pub loss: LossKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, log_zero_clip: DEFAULT_LOG_ZERO_CLIP, loss: LossKind::Sce }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("mu = {} must be >= 0", self.mu)));
        }
        if !(self.log_zero_clip < 0.0 && self.log_zero_clip.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "log_zero_clip = {} must be negative and finite",
                self.log_zero_clip
            )));
        }
        Ok(())
    }
}

fn floor(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

// d/dp ln(max(p, eps))
fn dlog(p: f64) -> f64 {
    if p > PROB_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

fn check_gold(gold: usize, q: &Distribution) -> Result<(), ObjectiveError> {
    if gold >= q.len() {
        return Err(ObjectiveError::InvalidDistribution(format!(
            "gold class {gold} outside {} outcomes",
            q.len()
        )));
    }
    Ok(())
}

pub fn ce_loss(gold: usize, q: &Distribution) -> Result<f64, ObjectiveError> {
    check_gold(gold, q)?;
    Ok(-floor(q.0[gold]).ln())
}

pub fn rce_loss(gold: usize, q: &Distribution, clip: f64) -> Result<f64, ObjectiveError> {
    check_gold(gold, q)?;
    Ok(-clip * (1.0 - q.0[gold]))
}

pub fn sce_loss(gold: usize, q: &Distribution, clip: f64) -> Result<f64, ObjectiveError> {
    Ok(ce_loss(gold, q)? + rce_loss(gold, q, clip)?)
}

/// Supervised term for the configured loss kind.
pub fn supervised_loss(gold: usize, q: &Distribution, cfg: &ObjectiveConfig) -> Result<f64, ObjectiveError> {
    match cfg.loss {
        LossKind::Sce => sce_loss(gold, q, cfg.log_zero_clip),
        LossKind::Ce => ce_loss(gold, q),
    }
}

/// Mean per-position supervised loss over a sequence.
pub fn sequence_supervised_loss(
    gold: &[usize],
    qs: &[Distribution],
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    if gold.len() != qs.len() {
        return Err(ObjectiveError::LengthMismatch(gold.len(), qs.len()));
    }
    if gold.is_empty() {
        return Err(ObjectiveError::ShapeMismatch("empty sequence".into()));
    }
    let mut total = 0.0;
    for (g, q) in gold.iter().zip(qs) {
        total += supervised_loss(*g, q, cfg)?;
    }
    Ok(total / gold.len() as f64)
}

pub fn sequence_sce_loss(gold: &[usize], qs: &[Distribution], clip: f64) -> Result<f64, ObjectiveError> {
    let cfg = ObjectiveConfig { log_zero_clip: clip, loss: LossKind::Sce, mu: 0.0 };
    sequence_supervised_loss(gold, qs, &cfg)
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * (floor(*x).ln() - floor(*y).ln())).sum()
}

/// Symmetric KL divergence.
pub fn consistency_loss(q1: &Distribution, q2: &Distribution) -> Result<f64, ObjectiveError> {
    if q1.len() != q2.len() {
        return Err(ObjectiveError::ShapeMismatch(format!("{} vs {} outcomes", q1.len(), q2.len())));
    }
    Ok(kl(&q1.0, &q2.0) + kl(&q2.0, &q1.0))
}

pub fn sequence_consistency_loss(
    q1: &[Distribution],
    q2: &[Distribution],
) -> Result<f64, ObjectiveError> {
    if q1.len() != q2.len() || q1.is_empty() {
        return Err(ObjectiveError::ShapeMismatch(format!("{} vs {} positions", q1.len(), q2.len())));
    }
    let mut total = 0.0;
    for (a, b) in q1.iter().zip(q2) {
        total += consistency_loss(a, b)?;
    }
    Ok(total / q1.len() as f64)
}

/// Per-example objective. A classification example is a length-1 sequence.
pub fn total_objective(
    q_x: &[Distribution],
    q_ct: &[Distribution],
    gold: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    let sup = sequence_supervised_loss(gold, q_x, cfg)? + sequence_supervised_loss(gold, q_ct, cfg)?;
    if cfg.mu == 0.0 {
        // Shapes still have to agree even when the term is switched off.
        if q_x.len() != q_ct.len() {
            return Err(ObjectiveError::ShapeMismatch(format!("{} vs {} positions", q_x.len(), q_ct.len())));
        }
        return Ok(sup);
    }
    Ok(sup + cfg.mu * sequence_consistency_loss(q_x, q_ct)?)
}

/// ∂CE/∂q.
pub fn ce_grad(gold: usize, q: &Distribution) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    g[gold] = -dlog(q.0[gold]);
    g
}

/// ∂RCE/∂q: `clip` at the gold entry, zero elsewhere, whatever `q` is.
pub fn rce_grad(gold: usize, q: &Distribution, clip: f64) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    g[gold] = clip;
    g
}

/// ∂/∂q1 and ∂/∂q2 of the symmetric KL.
pub fn consistency_grad(q1: &Distribution, q2: &Distribution) -> (Vec<f64>, Vec<f64>) {
    let n = q1.len();
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    for i in 0..n {
        let (a, b) = (q1.0[i], q2.0[i]);
        let (la, lb) = (floor(a).ln(), floor(b).ln());
        // KL(q1||q2) = Σ a (ln a - ln b), KL(q2||q1) = Σ b (ln b - ln a)
        g1[i] = (la - lb) + a * dlog(a) - b * dlog(a);
        g2[i] = (lb - la) + b * dlog(b) - a * dlog(b);
    }
    (g1, g2)
}

/// Pulls a gradient w.r.t. probabilities back through softmax to logits.
pub fn softmax_backward(q: &Distribution, dq: &[f64]) -> Vec<f64> {
    let dot: f64 = q.0.iter().zip(dq).map(|(p, d)| p * d).sum();
    q.0.iter().zip(dq).map(|(p, d)| p * (d - dot)).collect()
}

fn softmax_with_lse(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = q.iter().sum();
    q.iter_mut().for_each(|p| *p /= sum);
    (q, m + sum.ln())
}

// softmax_backward, scaled, reusing the probability buffer
fn backward_scaled(mut q: Vec<f64>, dq: &[f64], scale: f64) -> Vec<f64> {
    let dot: f64 = q.iter().zip(dq).map(|(p, d)| p * d).sum();
    q.iter_mut().zip(dq).for_each(|(p, d)| *p *= (d - dot) * scale);
    q
}

/// Value and logit gradients of [`total_objective`].
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub d_logits_x: Vec<Vec<f64>>,
    pub d_logits_ct: Vec<Vec<f64>>,
}

pub fn total_objective_with_grad(
    logits_x: &[Vec<f64>],
    logits_ct: &[Vec<f64>],
    gold: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveGrad, ObjectiveError> {
    if logits_x.len() != gold.len() {
        return Err(ObjectiveError::LengthMismatch(gold.len(), logits_x.len()));
    }
    if logits_ct.len() != gold.len() {
        return Err(ObjectiveError::LengthMismatch(gold.len(), logits_ct.len()));
    }
    let n = gold.len() as f64;
    let ln_floor = PROB_FLOOR.ln();
    let mut value = 0.0;
    let mut d_logits_x = Vec::with_capacity(gold.len());
    let mut d_logits_ct = Vec::with_capacity(gold.len());
    // Fused per-position pass. Floored logs come from log-softmax, which is
    // the same quantity as ln(max(q, floor)) without a log per outcome.
    for ((&g, zx), zc) in gold.iter().zip(logits_x).zip(logits_ct) {
        if zx.len() != zc.len() {
            return Err(ObjectiveError::ShapeMismatch(format!("{} vs {} outcomes", zx.len(), zc.len())));
        }
        if g >= zx.len() {
            return Err(ObjectiveError::InvalidDistribution(format!(
                "gold class {g} outside {} outcomes",
                zx.len()
            )));
        }
        let (qx, lsex) = softmax_with_lse(zx);
        let (qc, lsec) = softmax_with_lse(zc);
        let la = |i: usize| (zx[i] - lsex).max(ln_floor);
        let lb = |i: usize| (zc[i] - lsec).max(ln_floor);

        let mut dx = vec![0.0; qx.len()];
        let mut dc = vec![0.0; qc.len()];
        let mut sup = -la(g) - lb(g);
        dx[g] = -dlog(qx[g]);
        dc[g] = -dlog(qc[g]);
        if cfg.loss == LossKind::Sce {
            let clip = cfg.log_zero_clip;
            sup += -clip * (1.0 - qx[g]) - clip * (1.0 - qc[g]);
            dx[g] += clip;
            dc[g] += clip;
        }
        value += sup / n;
        if cfg.mu != 0.0 {
            let mut sym = 0.0;
            for i in 0..qx.len() {
                let (a, b) = (qx[i], qc[i]);
                let diff = la(i) - lb(i);
                sym += (a - b) * diff;
                let (ia, ib) = (dlog(a), dlog(b));
                dx[i] += cfg.mu * (diff + a * ia - b * ia);
                dc[i] += cfg.mu * (-diff + b * ib - a * ib);
            }
            value += cfg.mu * sym / n;
        }
        d_logits_x.push(backward_scaled(qx, &dx, 1.0 / n));
        d_logits_ct.push(backward_scaled(qc, &dc, 1.0 / n));
    }
    Ok(ObjectiveGrad { value, d_logits_x, d_logits_ct })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn ce_examples() {
        assert!(ce_loss(0, &d(&[1.0, 0.0])).unwrap().abs() < 1e-12);
        assert!((ce_loss(0, &d(&[0.5, 0.5])).unwrap() - LN2).abs() < 1e-12);
        // floor keeps ln(0) finite
        assert!((ce_loss(1, &d(&[1.0, 0.0])).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn rce_examples() {
        assert_eq!(rce_loss(0, &d(&[1.0, 0.0]), -4.0).unwrap(), 0.0);
        assert!((rce_loss(0, &d(&[0.5, 0.5]), -4.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(rce_grad(1, &d(&[0.3, 0.7]), -4.0), vec![0.0, -4.0]);
        assert_eq!(rce_grad(1, &d(&[0.9, 0.1]), -4.0), vec![0.0, -4.0]);
    }

    #[test]
    fn sce_examples() {
        assert!(sce_loss(1, &d(&[0.0, 1.0]), -4.0).unwrap().abs() < 1e-12);
        assert!((sce_loss(0, &d(&[0.5, 0.5]), -4.0).unwrap() - (LN2 + 2.0)).abs() < 1e-12);
        let qs = [d(&[0.5, 0.5]), d(&[0.25, 0.75])];
        let a = sce_loss(0, &qs[0], -4.0).unwrap();
        let b = sce_loss(1, &qs[1], -4.0).unwrap();
        assert!((sequence_sce_loss(&[0, 1], &qs, -4.0).unwrap() - (a + b) / 2.0).abs() < 1e-12);
        assert_eq!(sequence_sce_loss(&[0], &qs, -4.0), Err(ObjectiveError::LengthMismatch(1, 2)));
    }

    #[test]
    fn consistency_examples() {
        let a = d(&[0.75, 0.25]);
        let b = d(&[0.25, 0.75]);
        assert!((consistency_loss(&a, &b).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), consistency_loss(&b, &a).unwrap());
        assert!(matches!(consistency_loss(&a, &d(&[1.0])), Err(ObjectiveError::ShapeMismatch(_))));
    }

    #[test]
    fn total_objective_examples() {
        let cfg0 = ObjectiveConfig { mu: 0.0, ..Default::default() };
        let qx = [d(&[0.6, 0.4])];
        let qc = [d(&[0.3, 0.7])];
        let expected = sce_loss(0, &qx[0], -4.0).unwrap() + sce_loss(0, &qc[0], -4.0).unwrap();
        assert!((total_objective(&qx, &qc, &[0], &cfg0).unwrap() - expected).abs() < 1e-12);
        let hot = [Distribution::one_hot(3, 2)];
        assert!(total_objective(&hot, &hot, &[2], &ObjectiveConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ce_loss(3, &d(&[0.5, 0.5])).is_err());
        assert!(ObjectiveConfig { mu: -1.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { log_zero_clip: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(Distribution::uniform(3).argmax(), 0);
        assert_eq!(d(&[0.2, 0.4, 0.4]).argmax(), 1);
    }

    fn arb_logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn fused_value_matches_reference(
            zx in proptest::collection::vec(arb_logits(6), 1..4),
            zc in proptest::collection::vec(arb_logits(6), 1..4),
            g in 0usize..6,
            mu in 0.0f64..2.0,
            sce in any::<bool>(),
        ) {
            let n = zx.len().min(zc.len());
            let (zx, zc) = (&zx[..n], &zc[..n]);
            let gold = vec![g; n];
            let cfg = ObjectiveConfig { mu, log_zero_clip: -4.0, loss: if sce { LossKind::Sce } else { LossKind::Ce } };
            let qx: Vec<Distribution> = zx.iter().map(|z| Distribution::from_logits(z)).collect();
            let qc: Vec<Distribution> = zc.iter().map(|z| Distribution::from_logits(z)).collect();
            let want = total_objective(&qx, &qc, &gold, &cfg).unwrap();
            let got = total_objective_with_grad(zx, zc, &gold, &cfg).unwrap().value;
            prop_assert!((want - got).abs() <= 1e-9 * want.abs().max(1.0), "{want} vs {got}");
        }

        #[test]
        fn losses_nonnegative(z1 in arb_logits(5), z2 in arb_logits(5), g in 0usize..5) {
            let q1 = Distribution::from_logits(&z1);
            let q2 = Distribution::from_logits(&z2);
            prop_assert!((q1.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(ce_loss(g, &q1).unwrap() >= 0.0);
            let r = rce_loss(g, &q1, -4.0).unwrap();
            prop_assert!((0.0..=4.0).contains(&r));
            prop_assert!(consistency_loss(&q1, &q2).unwrap() >= -1e-12);
            prop_assert!(total_objective(&[q1.clone()], &[q2.clone()], &[g], &ObjectiveConfig::default()).unwrap() >= 0.0);
        }

        #[test]
        fn logit_gradient_matches_finite_differences(zx in arb_logits(4), zc in arb_logits(4), g in 0usize..4,
                                                     mu in 0.0f64..2.0, ce in any::<bool>()) {
            let cfg = ObjectiveConfig { mu, loss: if ce { LossKind::Ce } else { LossKind::Sce }, ..Default::default() };
            let grad = total_objective_with_grad(&[zx.clone()], &[zc.clone()], &[g], &cfg).unwrap();
            let f = |a: &[f64], b: &[f64]| total_objective_with_grad(&[a.to_vec()], &[b.to_vec()], &[g], &cfg).unwrap().value;
            let h = 1e-5;
            let mut analytic = grad.d_logits_x[0].clone();
            analytic.extend(&grad.d_logits_ct[0]);
            let mut numeric = Vec::new();
            for i in 0..8 {
                let (mut ap, mut am) = (zx.clone(), zx.clone());
                let (mut bp, mut bm) = (zc.clone(), zc.clone());
                if i < 4 { ap[i] += h; am[i] -= h; } else { bp[i - 4] += h; bm[i - 4] -= h; }
                numeric.push((f(&ap, &bp) - f(&am, &bm)) / (2.0 * h));
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
            prop_assert!(diff / scale <= 1e-4 || diff <= 1e-9, "rel err {}", diff / scale);
        }
    }
}
