//! Cross-entropy and the bias-aware combined losses.
//!
//! Every combined loss returns its gradient with respect to the base-model
//! logits only. Bias logits enter as constants; the bias-only branches are
//! trained by their own (optionally class-weighted) cross-entropy, see
//! [`bias_ce_loss`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ensure_same_len, log_softmax, logistic};

/// Floor for log-probabilities; keeps loss values finite.
pub const LOG_PROB_FLOOR: f64 = -745.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Poe,
    Dfl,
    Rubi,
    JointPoe,
    JointDfl,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Ce,
        LossKind::Poe,
        LossKind::Dfl,
        LossKind::Rubi,
        LossKind::JointPoe,
        LossKind::JointDfl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Poe => "poe",
            LossKind::Dfl => "dfl",
            LossKind::Rubi => "rubi",
            LossKind::JointPoe => "joint_poe",
            LossKind::JointDfl => "joint_dfl",
        }
    }

    /// Checks that `k` bias branches are enough for this loss.
    pub fn check_branches(self, k: usize) -> Result<()> {
        let ok = match self {
            LossKind::Ce => true,
            LossKind::Poe | LossKind::Dfl | LossKind::Rubi => k == 1,
            LossKind::JointPoe | LossKind::JointDfl => k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss `{self}` cannot run with {k} bias branch(es)"
            )))
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

/// Which combined loss to train with, plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Focusing exponent of the debiased focal loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Multiplier on the bias log-probabilities in the product of experts.
    #[serde(default = "default_one")]
    pub alpha: f64,
    /// Weight of the bias-only cross-entropy in the total objective.
    #[serde(default = "default_one")]
    pub beta: f64,
    /// Per-label weights for the bias-only cross-entropy (all 1 if absent).
    #[serde(default)]
    pub bias_class_weights: Option<Vec<f64>>,
}

fn default_gamma() -> f64 {
    2.0
}

fn default_one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            gamma: default_gamma(),
            alpha: 1.0,
            beta: 1.0,
            bias_class_weights: None,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if let Some(w) = &self.bias_class_weights {
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config("bias class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::new(LossKind::Ce)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_base_logits: Vec<f64>,
    /// One vector per bias branch; zero for every combined loss.
    pub d_bias_logits: Vec<Vec<f64>>,
}

fn check_label(y: usize, n: usize) -> Result<()> {
    if y >= n {
        return Err(Error::Label {
            label: y,
            num_labels: n,
        });
    }
    Ok(())
}

/// `(−log σ(u)_y, σ(u) − onehot(y))`
fn ce_parts(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let lp = log_softmax(logits)?;
    check_label(y, lp.len())?;
    let value = -lp[y].max(LOG_PROB_FLOOR);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[y] -= 1.0;
    Ok((value, grad))
}

fn zeros_like(bias: &[Vec<f64>]) -> Vec<Vec<f64>> {
    bias.iter().map(|b| vec![0.0; b.len()]).collect()
}

/// Cross-entropy with optional per-label weights (the weight of the gold
/// label scales both value and gradient).
pub fn ce_loss(logits: &[f64], y: usize, class_weights: Option<&[f64]>) -> Result<LossOutput> {
    let (mut value, mut grad) = ce_parts(logits, y)?;
    if let Some(w) = class_weights {
        if w.len() != logits.len() {
            return Err(Error::dim(format!(
                "{} class weights for {} labels",
                w.len(),
                logits.len()
            )));
        }
        value *= w[y];
        grad.iter_mut().for_each(|g| *g *= w[y]);
    }
    Ok(LossOutput {
        value,
        d_base_logits: grad,
        d_bias_logits: Vec::new(),
    })
}

/// Cross-entropy of every bias branch against the gold label, gradients in
/// `d_bias_logits`; `value` is the sum over branches.
pub fn bias_ce_loss(bias_logits: &[Vec<f64>], y: usize, class_weights: Option<&[f64]>) -> Result<LossOutput> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(bias_logits.len());
    let mut width = 0;
    for logits in bias_logits {
        let out = ce_loss(logits, y, class_weights)?;
        value += out.value;
        width = logits.len();
        grads.push(out.d_base_logits);
    }
    Ok(LossOutput {
        value,
        d_base_logits: vec![0.0; width],
        d_bias_logits: grads,
    })
}

/// `log σ(base) + α·Σ_j log σ(bias_j)`
pub fn joint_poe_combine(base_logits: &[f64], bias_logits: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    if bias_logits.is_empty() {
        return Err(Error::Config("product of experts needs at least one bias model".into()));
    }
    let mut combined = log_softmax(base_logits)?;
    for b in bias_logits {
        ensure_same_len(base_logits, b, "poe combine")?;
        for (c, lb) in combined.iter_mut().zip(log_softmax(b)?) {
            *c += alpha * lb;
        }
    }
    Ok(combined)
}

pub fn poe_combine(base_logits: &[f64], bias_logits: &[f64], alpha: f64) -> Result<Vec<f64>> {
    joint_poe_combine(base_logits, std::slice::from_ref(&bias_logits.to_vec()), alpha)
}

/// Cross-entropy of the product-of-experts ensemble.
///
/// The gradient through `log σ(base)` collapses to `σ(f_C) − onehot(y)`
/// because the upstream gradient sums to zero.
pub fn joint_poe_loss(base_logits: &[f64], bias_logits: &[Vec<f64>], y: usize, alpha: f64) -> Result<LossOutput> {
    let combined = joint_poe_combine(base_logits, bias_logits, alpha)?;
    let (value, grad) = ce_parts(&combined, y)?;
    Ok(LossOutput {
        value,
        d_base_logits: grad,
        d_bias_logits: zeros_like(bias_logits),
    })
}

pub fn poe_loss(base_logits: &[f64], bias_logits: &[f64], y: usize, alpha: f64) -> Result<LossOutput> {
    joint_poe_loss(base_logits, &[bias_logits.to_vec()], y, alpha)
}

/// `1 − σ(u)_y` without cancellation when `σ(u)_y` is close to one.
fn complement_prob(logits: &[f64], y: usize) -> Result<f64> {
    let lp = log_softmax(logits)?;
    check_label(y, lp.len())?;
    Ok(-lp[y].exp_m1())
}

/// `(1 − σ(bias)_y)^γ · CE(base, y)`
pub fn dfl_loss(base_logits: &[f64], bias_logits: &[f64], y: usize, gamma: f64) -> Result<LossOutput> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    ensure_same_len(base_logits, bias_logits, "dfl")?;
    let weight = complement_prob(bias_logits, y)?.powf(gamma);
    let (value, mut grad) = ce_parts(base_logits, y)?;
    grad.iter_mut().for_each(|g| *g *= weight);
    Ok(LossOutput {
        value: weight * value,
        d_base_logits: grad,
        d_bias_logits: vec![vec![0.0; bias_logits.len()]],
    })
}

/// Elementwise mean of the bias logit vectors.
pub fn joint_bias_average(bias_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = bias_logits
        .first()
        .ok_or_else(|| Error::Config("joint bias average needs at least one bias model".into()))?;
    if bias_logits.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = vec![0.0; first.len()];
    for b in bias_logits {
        ensure_same_len(first, b, "joint bias average")?;
        for (s, v) in sum.iter_mut().zip(b) {
            *s += v;
        }
    }
    let k = bias_logits.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}

pub fn joint_dfl_loss(base_logits: &[f64], bias_logits: &[Vec<f64>], y: usize, gamma: f64) -> Result<LossOutput> {
    let avg = joint_bias_average(bias_logits)?;
    let mut out = dfl_loss(base_logits, &avg, y, gamma)?;
    out.d_bias_logits = zeros_like(bias_logits);
    Ok(out)
}

/// Sigmoid mask kept strictly inside (0, 1).
pub fn rubi_mask(bias_logits: &[f64]) -> Vec<f64> {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    bias_logits
        .iter()
        .map(|&u| logistic(u).clamp(f64::MIN_POSITIVE, HI))
        .collect()
}

/// `base ⊙ sigmoid(bias)`
pub fn rubi_combine(base_logits: &[f64], bias_logits: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(base_logits, bias_logits, "rubi combine")?;
    Ok(base_logits
        .iter()
        .zip(rubi_mask(bias_logits))
        .map(|(b, m)| b * m)
        .collect())
}

pub fn rubi_loss(base_logits: &[f64], bias_logits: &[f64], y: usize) -> Result<LossOutput> {
    let combined = rubi_combine(base_logits, bias_logits)?;
    let (value, grad) = ce_parts(&combined, y)?;
    let d_base = grad
        .iter()
        .zip(rubi_mask(bias_logits))
        .map(|(g, m)| g * m)
        .collect();
    Ok(LossOutput {
        value,
        d_base_logits: d_base,
        d_bias_logits: vec![vec![0.0; bias_logits.len()]],
    })
}

/// The configured combined loss for one example.
pub fn combined_loss(spec: &LossSpec, base_logits: &[f64], bias_logits: &[Vec<f64>], y: usize) -> Result<LossOutput> {
    spec.kind.check_branches(bias_logits.len())?;
    match spec.kind {
        LossKind::Ce => {
            let mut out = ce_loss(base_logits, y, None)?;
            out.d_bias_logits = zeros_like(bias_logits);
            Ok(out)
        }
        LossKind::Poe => poe_loss(base_logits, &bias_logits[0], y, spec.alpha),
        LossKind::Dfl => dfl_loss(base_logits, &bias_logits[0], y, spec.gamma),
        LossKind::Rubi => rubi_loss(base_logits, &bias_logits[0], y),
        LossKind::JointPoe => joint_poe_loss(base_logits, bias_logits, y, spec.alpha),
        LossKind::JointDfl => joint_dfl_loss(base_logits, bias_logits, y, spec.gamma),
    }
}

/// One example's worth of loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInput {
    pub base_logits: Vec<f64>,
    pub bias_logits: Vec<Vec<f64>>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean combined loss.
    pub value: f64,
    pub outputs: Vec<LossOutput>,
}

/// Mean-reduced combined loss, summed in batch order.
pub fn batch_loss(spec: &LossSpec, batch: &[LossInput]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let outputs = batch
        .iter()
        .map(|b| combined_loss(spec, &b.base_logits, &b.bias_logits, b.y))
        .collect::<Result<Vec<_>>>()?;
    let value = outputs.iter().map(|o| o.value).sum::<f64>() / batch.len() as f64;
    Ok(BatchLoss { value, outputs })
}

/// Pieces of the training objective `combined + β·Σ_j mean CE(bias_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub combined: f64,
    /// Mean bias-only cross-entropy, one entry per branch.
    pub bias: Vec<f64>,
    pub total: f64,
}

pub fn objective(spec: &LossSpec, batch: &[LossInput]) -> Result<Objective> {
    let combined = batch_loss(spec, batch)?.value;
    let k = batch[0].bias_logits.len();
    let mut bias = vec![0.0; k];
    for b in batch {
        for (j, logits) in b.bias_logits.iter().enumerate() {
            bias[j] += ce_loss(logits, b.y, spec.bias_class_weights.as_deref())?.value;
        }
    }
    bias.iter_mut().for_each(|v| *v /= batch.len() as f64);
    let total = combined + spec.beta * bias.iter().sum::<f64>();
    Ok(Objective { combined, bias, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn logits_for(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn ce_examples() {
        let out = ce_loss(&[0.3, 0.3, 0.3], 2, None).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-15);
        let out = ce_loss(&[800.0, 0.0], 0, None).unwrap();
        assert_eq!(out.value, 0.0);
        let out = ce_loss(&logits_for(&[0.7, 0.3]), 0, Some(&[1.0, 1.0])).unwrap();
        assert!((out.value - 0.356_674_943_938_732_4).abs() < 1e-15);
        assert!(close(&out.d_base_logits, &[-0.3, 0.3], 1e-15));
        assert!(matches!(ce_loss(&[0.0, 0.0], 2, None), Err(Error::Label { .. })));
    }

    #[test]
    fn weighted_ce_scales_value_and_gradient() {
        let plain = ce_loss(&[0.2, -0.4, 1.0], 1, None).unwrap();
        let w = ce_loss(&[0.2, -0.4, 1.0], 1, Some(&[1.0, 2.5, 1.0])).unwrap();
        assert!((w.value - 2.5 * plain.value).abs() < 1e-15);
        assert!(close(&w.d_base_logits, &plain.d_base_logits.iter().map(|g| 2.5 * g).collect::<Vec<_>>(), 1e-15));
    }

    #[test]
    fn poe_combine_examples() {
        let base = logits_for(&[0.5, 0.5]);
        let bias = logits_for(&[0.8, 0.2]);
        let p = softmax(&poe_combine(&base, &bias, 1.0).unwrap()).unwrap();
        assert!(close(&p, &[0.8, 0.2], 1e-15));

        let base = [0.7, -1.2, 0.4];
        let uniform = [0.3, 0.3, 0.3];
        let p = softmax(&poe_combine(&base, &uniform, 1.0).unwrap()).unwrap();
        assert!(close(&p, &softmax(&base).unwrap(), 1e-15));
        let p = softmax(&poe_combine(&base, &[5.0, -3.0, 1.0], 0.0).unwrap()).unwrap();
        assert!(close(&p, &softmax(&base).unwrap(), 1e-15));
        assert!(poe_combine(&base, &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn poe_loss_examples() {
        let base = logits_for(&[0.5, 0.5]);
        let bias = logits_for(&[0.8, 0.2]);
        let out = poe_loss(&base, &bias, 1, 1.0).unwrap();
        assert!((out.value - 1.609_437_912_434_100_4).abs() < 1e-14);
        assert_eq!(out.d_bias_logits, vec![vec![0.0, 0.0]]);

        let base = [0.1, 0.9, -0.5];
        let out = poe_loss(&base, &[0.0; 3], 0, 1.0).unwrap();
        assert!(close(&out.d_base_logits, &ce_loss(&base, 0, None).unwrap().d_base_logits, 1e-15));

        let eps = 1e-12;
        let bias = logits_for(&[1.0 - eps, eps / 2.0, eps / 2.0]);
        let out = poe_loss(&base, &bias, 0, 1.0).unwrap();
        assert!(crate::math::l2_norm(&out.d_base_logits) < 1e-9);
    }

    #[test]
    fn dfl_examples() {
        let base = [0.4, -0.3, 1.2];
        let bias = [1.0, 0.2, -0.7];
        let d = dfl_loss(&base, &bias, 2, 0.0).unwrap();
        let c = ce_loss(&base, 2, None).unwrap();
        assert_eq!(d.value.to_bits(), c.value.to_bits());
        assert_eq!(d.d_base_logits, c.d_base_logits);

        let eps = 1e-12;
        let bias = logits_for(&[1.0 - eps, eps]);
        let out = dfl_loss(&[0.0, 0.0], &bias, 0, 2.0).unwrap();
        assert!(out.value < 1e-9 && crate::math::l2_norm(&out.d_base_logits) < 1e-9);

        let out = dfl_loss(&logits_for(&[0.5, 0.5]), &logits_for(&[0.9, 0.1]), 0, 2.0).unwrap();
        assert!((out.value - 0.006_931_471_805_599_453).abs() < 1e-15);
        assert!(dfl_loss(&[0.0, 0.0], &[0.0, 0.0], 0, -1.0).is_err());
        assert!(dfl_loss(&[0.0, 0.0], &[0.0, 0.0], 5, 1.0).is_err());
    }

    #[test]
    fn dfl_weight_is_monotone_in_bias_confidence() {
        let base = [0.3, -0.2, 0.1];
        for gamma in [0.5, 1.0, 2.0, 4.0] {
            let mut prev = f64::INFINITY;
            for step in 0..50 {
                let p = 0.02 * step as f64 + 1e-3;
                let rest = (1.0 - p) / 2.0;
                let v = dfl_loss(&base, &logits_for(&[p, rest, rest]), 0, gamma).unwrap().value;
                assert!(v <= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn rubi_examples() {
        let c = rubi_combine(&[2.0, -1.0], &[3f64.ln(), 0.0]).unwrap();
        assert!(close(&c, &[1.5, -0.5], 1e-15));
        assert_eq!(rubi_combine(&[0.0, 0.0], &[4.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let half = rubi_combine(&[3.0, 1.0, -2.0], &[0.0; 3]).unwrap();
        assert!(close(&half, &[1.5, 0.5, -1.0], 1e-15));
        assert_eq!(crate::math::argmax(&half).unwrap(), 0);

        let out = rubi_loss(&[2.0, -1.0], &[3f64.ln(), 0.0], 0).unwrap();
        assert!((out.value - 0.126_928_011_042_972_5).abs() < 1e-15);
        let base = [0.4, -0.3, 1.2];
        let out = rubi_loss(&base, &[30.0; 3], 1).unwrap();
        let ce = ce_loss(&base, 1, None).unwrap();
        assert!((out.value - ce.value).abs() < 1e-9);
        assert!(matches!(rubi_loss(&base, &[0.0; 3], 3), Err(Error::Label { .. })));
        assert!(rubi_mask(&[-800.0, 0.0, 800.0]).iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn joint_examples() {
        let base = [0.5, -0.5];
        let bias = vec![vec![1.0, -2.0]];
        assert_eq!(joint_poe_combine(&base, &bias, 1.0).unwrap(), poe_combine(&base, &bias[0], 1.0).unwrap());
        let uniform = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        let p = softmax(&joint_poe_combine(&base, &uniform, 1.0).unwrap()).unwrap();
        assert!(close(&p, &softmax(&base).unwrap(), 1e-15));

        let bias = vec![logits_for(&[0.8, 0.2]), logits_for(&[0.6, 0.4])];
        let p = softmax(&joint_poe_combine(&[0.0, 0.0], &bias, 1.0).unwrap()).unwrap();
        assert!(close(&p, &[0.857_142_857_142_857_1, 0.142_857_142_857_142_85], 1e-15));
        assert!(joint_poe_combine(&base, &[], 1.0).is_err());

        assert_eq!(joint_bias_average(&[vec![1.0, 3.0]]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(joint_bias_average(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(
            joint_bias_average(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(joint_bias_average(&[]).is_err());
        assert!(joint_bias_average(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn batch_examples() {
        let spec = LossSpec::new(LossKind::Ce);
        let a = LossInput { base_logits: vec![0.0; 3], bias_logits: vec![], y: 1 };
        let single = batch_loss(&spec, std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.value, ce_loss(&a.base_logits, 1, None).unwrap().value);
        let twice = batch_loss(&spec, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.value, single.value);
        let b = LossInput { base_logits: vec![0.7f64.ln(), 0.3f64.ln()], bias_logits: vec![], y: 0 };
        let two = batch_loss(&spec, &[a, b]).unwrap();
        assert!((two.value - 0.727_643_616_303_421).abs() < 1e-12);
        assert!(batch_loss(&spec, &[]).is_err());
    }

    #[test]
    fn objective_adds_weighted_bias_term() {
        let spec = LossSpec::new(LossKind::Poe).with_beta(0.5);
        let batch = vec![LossInput { base_logits: vec![0.2, -0.1, 0.0], bias_logits: vec![vec![1.0, 0.0, -1.0]], y: 0 }];
        let obj = objective(&spec, &batch).unwrap();
        let bias_ce = ce_loss(&[1.0, 0.0, -1.0], 0, None).unwrap().value;
        assert!((obj.bias[0] - bias_ce).abs() < 1e-15);
        assert!((obj.total - (obj.combined + 0.5 * bias_ce)).abs() < 1e-15);
    }

    #[test]
    fn branch_count_is_checked() {
        let spec = LossSpec::new(LossKind::Poe);
        assert!(combined_loss(&spec, &[0.0, 0.0], &[], 0).is_err());
        assert!(combined_loss(&spec, &[0.0, 0.0], &[vec![0.0, 0.0], vec![0.0, 0.0]], 0).is_err());
        assert!(combined_loss(&LossSpec::new(LossKind::JointDfl), &[0.0, 0.0], &[], 0).is_err());
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(LossSpec::new(LossKind::Dfl).with_gamma(-0.1).validate().is_err());
        assert!(LossSpec::new(LossKind::Poe).with_alpha(0.0).validate().is_err());
        assert!(LossSpec::new(LossKind::Poe).with_beta(-1.0).validate().is_err());
        let mut s = LossSpec::new(LossKind::Ce);
        s.bias_class_weights = Some(vec![1.0, 0.0]);
        assert!(s.validate().is_err());
        assert_eq!("joint-dfl".parse::<LossKind>().unwrap(), LossKind::JointDfl);
        assert!("focal".parse::<LossKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-20.0f64..20.0, n)
        }

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
            (2usize..6).prop_flat_map(|n| (logits(n), logits(n), 0..n))
        }

        proptest! {
            #[test]
            fn dfl_with_zero_gamma_is_ce((base, bias, y) in instance()) {
                let d = dfl_loss(&base, &bias, y, 0.0).unwrap();
                let c = ce_loss(&base, y, None).unwrap();
                prop_assert!((d.value - c.value).abs() <= 1e-15);
                prop_assert!(close(&d.d_base_logits, &c.d_base_logits, 1e-15));
            }

            #[test]
            fn combined_losses_are_nonnegative_and_stop_bias_gradients(
                (base, bias, y) in instance(),
                gamma in 0.0f64..5.0,
                alpha in 0.1f64..3.0,
            ) {
                for kind in LossKind::ALL {
                    let spec = LossSpec { gamma, alpha, ..LossSpec::new(kind) };
                    let branches = if kind == LossKind::Ce { vec![] } else { vec![bias.clone()] };
                    let out = combined_loss(&spec, &base, &branches, y).unwrap();
                    prop_assert!(out.value >= 0.0 && out.value.is_finite());
                    prop_assert!(out.d_base_logits.iter().all(|g| g.is_finite()));
                    prop_assert!(out.d_bias_logits.iter().flatten().all(|&g| g == 0.0));
                }
            }

            #[test]
            fn dfl_does_not_grow_with_bias_confidence(
                (base, bias, y) in instance(),
                gamma in 0.0f64..5.0,
                boost in 0.0f64..10.0,
            ) {
                let mut sharper = bias.clone();
                sharper[y] += boost;
                let before = dfl_loss(&base, &bias, y, gamma).unwrap().value;
                let after = dfl_loss(&base, &sharper, y, gamma).unwrap().value;
                prop_assert!(after <= before * (1.0 + 1e-12) + 1e-300);
            }

            #[test]
            fn rubi_mask_is_open_unit_interval(bias in prop::collection::vec(-700.0f64..700.0, 1..8)) {
                prop_assert!(rubi_mask(&bias).iter().all(|&m| m > 0.0 && m < 1.0));
            }

            #[test]
            fn joint_losses_with_one_branch_reduce_exactly(
                (base, bias, y) in instance(),
                gamma in 0.0f64..5.0,
                alpha in 0.1f64..3.0,
            ) {
                let one = [bias.clone()];
                let jp = joint_poe_loss(&base, &one, y, alpha).unwrap();
                let p = poe_loss(&base, &bias, y, alpha).unwrap();
                prop_assert_eq!(jp.value.to_bits(), p.value.to_bits());
                let jd = joint_dfl_loss(&base, &one, y, gamma).unwrap();
                let d = dfl_loss(&base, &bias, y, gamma).unwrap();
                prop_assert_eq!(jd.value.to_bits(), d.value.to_bits());
            }
        }
    }
}
