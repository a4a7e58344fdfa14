//! Instance and neighbourhood losses with exact gradients.
//!
//! For a fresh feature `x` and constant memory rows `m_j`, the logits are
//! `z_j = ⟨x, m_j⟩ / τ` and `p = softmax(z)`. With a member set `M`:
//!
//! ```text
//! L(x)      = −ln Σ_{j∈M} p_j = logsumexp(z) − logsumexp(z_M)
//! ∂L/∂x     = (1/τ) · ( Σ_k p_k m_k − Σ_{j∈M} p̃_j m_j ),   p̃_j = p_j / Σ_{l∈M} p_l
//! ```
//!
//! The instance loss is the case `M = {i}`, where the gradient becomes
//! `(1/τ)(Σ_k p_k m_k − m_i)`. Gradients flow only into `x`. Memory rows
//! are refreshed by the EMA in [`crate::memory_bank`] instead.
//!
//! A closed form sometimes quoted for the instance gradient carries an extra
//! `(p_ii − 2)·x_i` term that does not follow from the loss under this
//! graph; the tests here check the formulas above against finite differences
//! of the implemented loss.
//!
//! Both are evaluated through the log-odds `t = logsumexp(z_out) − logsumexp(z_M)`
//! of the mass outside `M`: `L = softplus(t)` and
//! `∂L/∂x = (σ(t)/τ)·(Σ_out r_k m_k − Σ_M p̃_j m_j)` with `r` the softmax over
//! the outside rows. This is the same quantity without the cancellation
//! that the direct form suffers once the members hold nearly all the mass.

use crate::affinity::{check_tau, Neighbourhood};
use crate::memory_bank::FeatureBank;
use crate::numerics::{log_sum_exp, Mat64};
use crate::pipeline::RoundPlan;
use crate::{Error, Result};

/// Loss of one sample and its gradient with respect to the fresh feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn member_term(x: &[f64], members: &[usize], bank: &FeatureBank, tau: f64) -> Result<LossGrad> {
    check_tau(tau)?;
    if members.is_empty() {
        return Err(Error::contract("neighbourhood has no members"));
    }
    let n = bank.n();
    if let Some(&bad) = members.iter().find(|&&j| j >= n) {
        return Err(Error::Bounds { index: bad, len: n });
    }
    let logits: Vec<f64> = bank
        .all_similarities(x)?
        .into_iter()
        .map(|s| s / tau)
        .collect();
    let member_logits: Vec<f64> = members.iter().map(|&j| logits[j]).collect();
    let lse_members = log_sum_exp(&member_logits);
    let mut is_member = vec![false; n];
    members.iter().for_each(|&j| is_member[j] = true);
    let lse_outside = log_sum_exp(
        &logits
            .iter()
            .zip(&is_member)
            .filter_map(|(&z, &m)| (!m).then_some(z))
            .collect::<Vec<_>>(),
    );
    // log-odds of the mass outside the member set; evaluating through it
    // keeps full relative precision when the members hold almost everything
    let t = lse_outside - lse_members;
    let loss = softplus(t);
    let p_outside = sigmoid(t);

    // Σ_k p_k m_k − Σ_M p̃_j m_j rewritten as
    // P_out · (Σ_out r_k m_k − Σ_M p̃_j m_j), r = softmax over the outside
    let d = bank.d();
    let mut grad = vec![0.0; d];
    if p_outside > 0.0 {
        for (j, &z) in logits.iter().enumerate() {
            let w = if is_member[j] {
                -(z - lse_members).exp()
            } else {
                (z - lse_outside).exp()
            };
            for (g, &m) in grad.iter_mut().zip(bank.row(j)) {
                *g += w * m;
            }
        }
    }
    let scale = p_outside / tau;
    grad.iter_mut().for_each(|g| *g *= scale);
    if grad.iter().any(|g| !g.is_finite()) || !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok(LossGrad { loss, grad })
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow; `softplus(−∞) = 0`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `−ln p_ii`: the anchor against its own memory row.
pub fn instance_term(i: usize, x: &[f64], bank: &FeatureBank, tau: f64) -> Result<LossGrad> {
    member_term(x, &[i], bank, tau)
}

/// `−ln Σ_{j∈N(i)} p_ij` over the anchor's neighbourhood members.
pub fn neighbourhood_term(
    i: usize,
    x: &[f64],
    nb: &Neighbourhood,
    bank: &FeatureBank,
    tau: f64,
) -> Result<LossGrad> {
    if nb.anchor != i {
        return Err(Error::contract(format!(
            "neighbourhood anchored at {} used for sample {i}",
            nb.anchor
        )));
    }
    member_term(x, &nb.members, bank, tau)
}

/// Mean loss of a batch and the gradient of that mean with respect to each
/// fresh feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    /// Row `b` is `∂ mean_loss / ∂ features[b]`.
    pub grads: Mat64,
}

/// Round objective: selected anchors use their neighbourhood term, all other
/// samples the instance term. Reduction is the arithmetic mean.
pub fn round_batch_loss(
    indices: &[usize],
    features: &Mat64,
    plan: &RoundPlan,
    bank: &FeatureBank,
    tau: f64,
) -> Result<BatchLoss> {
    if indices.len() != features.rows() {
        return Err(Error::Dimension {
            expected: indices.len(),
            actual: features.rows(),
        });
    }
    if indices.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let b = indices.len() as f64;
    let mut losses = Vec::with_capacity(indices.len());
    let mut grads = Mat64::zeros(indices.len(), bank.d());
    for (row, &i) in indices.iter().enumerate() {
        let x = features.row(row);
        let term = match plan.neighbourhood_for(i)? {
            Some(nb) => neighbourhood_term(i, x, nb, bank, tau)?,
            None => instance_term(i, x, bank, tau)?,
        };
        for (g, t) in grads.row_mut(row).iter_mut().zip(&term.grad) {
            *g = t / b;
        }
        losses.push(term.loss);
    }
    let mean_loss = losses.iter().sum::<f64>() / b;
    Ok(BatchLoss {
        mean_loss,
        losses,
        grads,
    })
}
