//! Forward losses and logit gradients for real and generated samples.
//!
//! All values are computed through a max-shifted log-sum-exp, so logits of
//! any finite magnitude are safe. Rank weights are held constant during
//! differentiation: they are piecewise constant in the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{log_sum_exp, sigma, softmax_slice, Logits, RankWeights, Scheme, VirtualLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradientMode {
    /// Exact derivative of the generated-sample loss:
    /// `lambda * sigma * ((K+1)/2 * p_k - alpha_k / K)`.
    #[default]
    #[serde(alias = "analytic")]
    Analytic,
    /// `-lambda * sigma * (alpha_k / K) * (1 - p_k)`, the closed form in
    /// circulation for this loss. It is strictly negative for every input and
    /// is not the derivative of the forward value; kept for fidelity runs.
    #[serde(alias = "complement")]
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    lambda: f64,
    classes: usize,
    gradient_mode: GradientMode,
}

impl LossConfig {
    pub fn new(classes: usize, lambda: f64, gradient_mode: GradientMode) -> Result<Self> {
        if classes == 0 {
            return Err(Error::dim("class count must be at least 1"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidValue(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(LossConfig {
            lambda,
            classes,
            gradient_mode,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Always `2 / (1 + K)` for the configured class count.
    pub fn sigma(&self) -> f64 {
        sigma(self.classes)
    }

    pub fn gradient_mode(&self) -> GradientMode {
        self.gradient_mode
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        LossConfig::new(self.classes, lambda, self.gradient_mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Softmax cross-entropy against ground-truth class `class` (0-based).
pub fn real_ce_loss(logits: &Logits, class: usize) -> Result<LossOutput> {
    let x = logits.as_slice();
    if class >= x.len() {
        return Err(Error::InvalidClass {
            class,
            classes: x.len(),
        });
    }
    // lse(x) - x_c written so that small losses keep full relative precision
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let others: f64 = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != class)
        .map(|(_, v)| (v - m).exp())
        .sum();
    let value = (m - x[class]) + ((x[class] - m).exp_m1() + others).ln_1p();
    let mut grad = softmax_slice(x);
    grad[class] -= 1.0;
    Ok(LossOutput {
        value,
        grad_logits: grad,
    })
}

/// Cross-entropy against the uniform distribution `1/K`.
pub fn lsro_loss(logits: &Logits) -> LossOutput {
    let x = logits.as_slice();
    let k = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / k;
    let value = log_sum_exp(x) - mean;
    let grad = softmax_slice(x).into_iter().map(|p| p - 1.0 / k).collect();
    LossOutput {
        value,
        grad_logits: grad,
    }
}

/// Multi-pseudo loss `-lambda * sigma * sum_k (alpha_k/K) log p_k`.
pub fn mprl_generated_loss(
    logits: &Logits,
    alpha: &RankWeights,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let k = logits.len();
    if alpha.len() != k || cfg.classes != k {
        return Err(Error::dim(format!(
            "logits have {k} entries, rank weights {}, config {} classes",
            alpha.len(),
            cfg.classes
        )));
    }
    let kf = k as f64;
    let weights: Vec<f64> = alpha.alpha().iter().map(|a| a / kf).collect();
    Ok(mprl_from_weights(
        logits.as_slice(),
        &weights,
        cfg.lambda,
        cfg.gradient_mode,
    ))
}

fn mprl_from_weights(x: &[f64], weights: &[f64], lambda: f64, mode: GradientMode) -> LossOutput {
    let k = x.len();
    let scale = lambda * sigma(k);
    let lse = log_sum_exp(x);
    let value = -scale
        * weights
            .iter()
            .zip(x)
            .map(|(w, xk)| w * (xk - lse))
            .sum::<f64>();
    let p = softmax_slice(x);
    // sum_k alpha_k / K == (K+1)/2 for a valid rank vector
    let mass: f64 = weights.iter().sum();
    let grad = match mode {
        GradientMode::Analytic => p
            .iter()
            .zip(weights)
            .map(|(pk, w)| scale * (mass * pk - w))
            .collect(),
        GradientMode::Complement => p
            .iter()
            .zip(weights)
            .map(|(pk, w)| -scale * w * (1.0 - pk))
            .collect(),
    };
    LossOutput {
        value,
        grad_logits: grad,
    }
}

/// Cross-entropy of `logits` against an arbitrary non-negative target.
/// The gradient `(sum t) p - t` is exact for any target mass.
pub fn soft_target_loss(logits: &Logits, target: &[f64]) -> Result<LossOutput> {
    let x = logits.as_slice();
    if target.len() != x.len() {
        return Err(Error::dim(format!(
            "target has {} entries, logits {}",
            target.len(),
            x.len()
        )));
    }
    let lse = log_sum_exp(x);
    let value = -target
        .iter()
        .zip(x)
        .map(|(t, xk)| t * (xk - lse))
        .sum::<f64>();
    let mass: f64 = target.iter().sum();
    let grad = softmax_slice(x)
        .into_iter()
        .zip(target)
        .map(|(p, t)| mass * p - t)
        .collect();
    Ok(LossOutput {
        value,
        grad_logits: grad,
    })
}

/// Unscaled (`lambda = 1`) loss of one sample against its label.
///
/// MpRL labels are weighted by `sigma`, the gradient mode applies to them only.
pub fn label_loss(logits: &Logits, label: &VirtualLabel, mode: GradientMode) -> Result<LossOutput> {
    if label.width() != logits.len() {
        return Err(Error::dim(format!(
            "label targets a head of width {}, logits have {}",
            label.width(),
            logits.len()
        )));
    }
    match label.scheme() {
        Scheme::GroundTruth | Scheme::AllInOne | Scheme::OneHotPseudo => {
            let class = label
                .source_class()
                .ok_or_else(|| Error::InvalidState("one-hot label without a class".into()))?;
            real_ce_loss(logits, class)
        }
        Scheme::Lsro => Ok(lsro_loss(logits)),
        Scheme::Mprl => Ok(mprl_from_weights(
            logits.as_slice(),
            label.weights(),
            1.0,
            mode,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchEntry<'a> {
    pub logits: &'a Logits,
    pub label: &'a VirtualLabel,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    /// `l1 + lambda * l2`
    pub value: f64,
    /// Mean real-sample loss.
    pub l1: f64,
    /// Mean generated-sample loss before the `lambda` factor; zero when the
    /// gate is closed or the batch holds no generated samples.
    pub l2: f64,
    /// Gradient of `value` with respect to each entry's logits, in batch order.
    pub grads: Vec<Vec<f64>>,
}

/// Batch objective `mean(real terms) + lambda * mean(generated terms)`.
///
/// With `gate_active == false` generated entries contribute nothing, neither
/// to the value nor to the gradients.
pub fn combined_loss(
    batch: &[BatchEntry<'_>],
    cfg: &LossConfig,
    gate_active: bool,
) -> Result<CombinedLoss> {
    let width = match batch.first() {
        Some(e) => e.logits.len(),
        None => {
            return Ok(CombinedLoss {
                value: 0.0,
                l1: 0.0,
                l2: 0.0,
                grads: Vec::new(),
            })
        }
    };
    if let Some(e) = batch.iter().find(|e| e.logits.len() != width) {
        return Err(Error::dim(format!(
            "batch mixes head widths {width} and {}",
            e.logits.len()
        )));
    }
    let n_real = batch.iter().filter(|e| e.role == Role::Real).count();
    let n_gen = if gate_active { batch.len() - n_real } else { 0 };

    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for entry in batch {
        match entry.role {
            Role::Real => {
                if entry.label.scheme() != Scheme::GroundTruth {
                    return Err(Error::InvalidValue(
                        "real samples must carry ground-truth labels".into(),
                    ));
                }
                let out = label_loss(entry.logits, entry.label, cfg.gradient_mode)?;
                l1 += out.value;
                let w = 1.0 / n_real as f64;
                grads.push(out.grad_logits.into_iter().map(|g| g * w).collect());
            }
            Role::Generated if gate_active => {
                let out = label_loss(entry.logits, entry.label, cfg.gradient_mode)?;
                l2 += out.value;
                let w = cfg.lambda / n_gen as f64;
                grads.push(out.grad_logits.into_iter().map(|g| g * w).collect());
            }
            Role::Generated => grads.push(vec![0.0; width]),
        }
    }
    if n_real > 0 {
        l1 /= n_real as f64;
    }
    if n_gen > 0 {
        l2 /= n_gen as f64;
    }
    Ok(CombinedLoss {
        value: l1 + cfg.lambda * l2,
        l1,
        l2,
        grads,
    })
}
