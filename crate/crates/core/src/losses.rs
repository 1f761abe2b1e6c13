//! Training objectives.
//!
//! * [`cross_entropy`]: mean negative log-likelihood of the softmax of the logits.
//! * [`feature_norm_loss`]: `gamma * mean_i (||F(x_i)|| - R_i)^2` with the adaptive
//!   radius `R_i = stopgrad(||F(x_i)||) + delta_r`. The forward value is always
//!   `gamma * delta_r^2`; the gradient pushes every feature norm outward.
//! * [`kl_mimicry`]: `mean_i KL(p_peer || p_self)` with the peer detached.
//! * [`fnn_total`] and [`cfnn_total`] combine them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight and residual step of the feature-norm term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLossConfig {
    pub gamma: f64,
    pub delta_r: f64,
}

impl Default for NormLossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            delta_r: 1.0,
        }
    }
}

impl NormLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.delta_r >= 0.0 && self.delta_r.is_finite()) {
            return Err(Error::config(format!("delta_r must be >= 0, got {}", self.delta_r)));
        }
        Ok(())
    }
}

/// Scalar loss nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub class_loss: Var,
    pub domain_loss: Var,
    pub mimicry_loss: Var,
    pub total: Var,
}

/// Plain numbers read off a [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub class_loss: f64,
    pub domain_loss: f64,
    pub mimicry_loss: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            class_loss: tape.value(self.class_loss).item(),
            domain_loss: tape.value(self.domain_loss).item(),
            mimicry_loss: tape.value(self.mimicry_loss).item(),
            total: tape.value(self.total).item(),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.class_loss.is_finite()
            && self.domain_loss.is_finite()
            && self.mimicry_loss.is_finite()
            && self.total.is_finite()
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!(
                "label {y} at index {i} is out of range for {k} classes"
            )));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Mean over the batch of `-log softmax(logits)[y_i]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} logit rows", labels.len())));
    }
    let targets = one_hot(labels, k)?;
    let targets = tape.constant(targets);
    let p = tape.softmax_rows(logits);
    let logp = tape.log(p);
    let picked = tape.mul(targets, logp)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// `stopgrad(||row||) + delta_r` for every row of `features`.
pub fn adaptive_radius(tape: &mut Tape, features: Var, delta_r: f64) -> Var {
    let norms = tape.row_l2_norm(features);
    radius_from_norms(tape, norms, delta_r)
}

fn radius_from_norms(tape: &mut Tape, norms: Var, delta_r: f64) -> Var {
    let frozen = tape.detach(norms);
    tape.offset(frozen, delta_r)
}

/// `gamma * mean_i (||F(x_i)|| - R_i)^2`.
pub fn feature_norm_loss(tape: &mut Tape, features: Var, cfg: NormLossConfig) -> Result<Var> {
    let norms = tape.row_l2_norm(features);
    let radius = radius_from_norms(tape, norms, cfg.delta_r);
    let gap = tape.sub(norms, radius)?;
    let sq = tape.square(gap);
    let mean = tape.mean_all(sq);
    Ok(tape.scale(mean, cfg.gamma))
}

/// `mean_i sum_k p_peer log(p_peer / p_self)`; gradient reaches `p_self` only.
pub fn kl_mimicry(tape: &mut Tape, p_self: Var, p_peer: Var) -> Result<Var> {
    if p_self.shape() != p_peer.shape() {
        return Err(Error::contract(format!(
            "kl_mimicry shape mismatch: {:?} vs {:?}",
            p_self.shape(),
            p_peer.shape()
        )));
    }
    let n = p_self.shape().0;
    let peer = tape.detach(p_peer);
    let log_peer = tape.log(peer);
    let log_self = tape.log(p_self);
    let ratio = tape.sub(log_peer, log_self)?;
    let weighted = tape.mul(peer, ratio)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Cross-entropy alone; the other terms are constant zeros.
pub fn source_only_total(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<LossTerms> {
    let class_loss = cross_entropy(tape, logits, labels)?;
    let domain_loss = tape.constant(Tensor::scalar(0.0));
    let mimicry_loss = tape.constant(Tensor::scalar(0.0));
    Ok(LossTerms {
        class_loss,
        domain_loss,
        mimicry_loss,
        total: class_loss,
    })
}

/// Cross-entropy plus feature-norm loss.
pub fn fnn_total(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    features: Var,
    cfg: NormLossConfig,
) -> Result<LossTerms> {
    let class_loss = cross_entropy(tape, logits, labels)?;
    let domain_loss = feature_norm_loss(tape, features, cfg)?;
    let mimicry_loss = tape.constant(Tensor::scalar(0.0));
    let total = tape.add(class_loss, domain_loss)?;
    Ok(LossTerms {
        class_loss,
        domain_loss,
        mimicry_loss,
        total,
    })
}

/// Cross-entropy plus feature-norm loss plus mimicry toward the (detached) peer.
pub fn cfnn_total(
    tape: &mut Tape,
    logits_self: Var,
    labels: &[usize],
    features_self: Var,
    p_peer: Var,
    cfg: NormLossConfig,
) -> Result<LossTerms> {
    let class_loss = cross_entropy(tape, logits_self, labels)?;
    let domain_loss = feature_norm_loss(tape, features_self, cfg)?;
    let p_self = tape.softmax_rows(logits_self);
    let mimicry_loss = kl_mimicry(tape, p_self, p_peer)?;
    let partial = tape.add(class_loss, domain_loss)?;
    let total = tape.add(partial, mimicry_loss)?;
    Ok(LossTerms {
        class_loss,
        domain_loss,
        mimicry_loss,
        total,
    })
}
