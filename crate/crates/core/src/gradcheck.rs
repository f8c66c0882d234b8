//! Central finite-difference checks of the logit gradients.
//!
//! Each trial draws logits from `N(0, logit_std^2)` and compares the
//! analytic gradient `a` against the numeric one `n` with the norm-wise
//! relative error `max|a - n| / max(max|a|, max|n|)`. Rank weights for the
//! multi-pseudo loss are taken at the unperturbed point and held fixed.
//!
//! The complement gradient mode is not a derivative of the forward value, so
//! it is measured against the analytic mode and reported as a divergence
//! rather than checked.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::{mprl_alpha, softmax, Logits, TiePolicy};
use crate::losses::{
    lsro_loss, mprl_generated_loss, real_ce_loss, GradientMode, LossConfig, LossOutput,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub classes: Vec<usize>,
    pub trials: usize,
    pub tolerance: f64,
    pub logit_std: f64,
    pub step: f64,
    pub seed: u64,
    /// Also measure how far the complement mode is from the derivative.
    pub include_complement: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            classes: vec![2, 5, 10, 751],
            trials: 100,
            tolerance: 1e-6,
            logit_std: 3.0,
            step: 1e-5,
            seed: 0,
            include_complement: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckKind {
    RealCrossEntropy,
    Lsro,
    MprlAnalytic,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::RealCrossEntropy => "real-ce",
            CheckKind::Lsro => "lsro",
            CheckKind::MprlAnalytic => "mprl-analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub classes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub classes: usize,
    /// Largest norm-wise relative gap between complement and analytic modes.
    pub max_rel_divergence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub divergences: Vec<Divergence>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>12}  result (tolerance {:e})",
            "loss", "K", "max rel err", self.tolerance
        );
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>12.3e}  {}",
                c.kind.name(),
                c.classes,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        for d in &self.divergences {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>12.3e}  not a derivative of the forward value (measured against analytic)",
                "mprl-complement", d.classes, d.max_rel_divergence
            );
        }
        out
    }
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = inf(analytic).max(inf(numeric));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, f: impl Fn(&Logits) -> f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Logits::new(probe.clone())?);
        probe[i] = orig - h;
        let down = f(&Logits::new(probe.clone())?);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Running maximum that turns a NaN error into a failure instead of
/// dropping it.
fn worst(acc: f64, err: f64) -> f64 {
    if err.is_nan() {
        f64::INFINITY
    } else {
        acc.max(err)
    }
}

struct ClassOutcome {
    classes: usize,
    errors: [f64; 3],
    divergence: Option<f64>,
}

fn check_classes(cfg: &GradcheckConfig, k: usize) -> Result<ClassOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, k as u64]));
    let normal =
        Normal::new(0.0, cfg.logit_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let analytic = LossConfig::new(k, 1.0, GradientMode::Analytic)?;
    let complement = LossConfig::new(k, 1.0, GradientMode::Complement)?;
    let mut errors = [0.0f64; 3];
    let mut divergence = 0.0f64;
    let value = |r: Result<LossOutput>| r.map(|o| o.value).unwrap_or(f64::NAN);

    for _ in 0..cfg.trials {
        let x: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let logits = Logits::new(x.clone())?;
        let class = rng.random_range(0..k);
        let alpha = mprl_alpha(&softmax(&logits), TiePolicy::AverageRank);

        let ce = real_ce_loss(&logits, class)?;
        let ce_num = numeric_gradient(&x, cfg.step, |l| value(real_ce_loss(l, class)))?;
        errors[0] = worst(errors[0], max_rel_error(&ce.grad_logits, &ce_num));

        let ls = lsro_loss(&logits);
        let ls_num = numeric_gradient(&x, cfg.step, |l| lsro_loss(l).value)?;
        errors[1] = worst(errors[1], max_rel_error(&ls.grad_logits, &ls_num));

        let mp = mprl_generated_loss(&logits, &alpha, &analytic)?;
        let mp_num = numeric_gradient(&x, cfg.step, |l| {
            value(mprl_generated_loss(l, &alpha, &analytic))
        })?;
        errors[2] = worst(errors[2], max_rel_error(&mp.grad_logits, &mp_num));

        if cfg.include_complement {
            let c = mprl_generated_loss(&logits, &alpha, &complement)?;
            divergence = divergence.max(max_rel_error(&c.grad_logits, &mp.grad_logits));
        }
    }
    Ok(ClassOutcome {
        classes: k,
        errors,
        divergence: cfg.include_complement.then_some(divergence),
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if cfg.classes.is_empty() || cfg.classes.contains(&0) {
        return Err(Error::InvalidConfig(
            "class list must be nonempty and positive".into(),
        ));
    }
    if [cfg.tolerance, cfg.step, cfg.logit_std]
        .iter()
        .any(|v| v.is_nan() || *v <= 0.0)
    {
        return Err(Error::InvalidConfig(
            "tolerance, step and logit_std must be positive".into(),
        ));
    }
    let outcomes: Vec<ClassOutcome> = cfg
        .classes
        .par_iter()
        .map(|&k| check_classes(cfg, k))
        .collect::<Result<_>>()?;

    let mut checks = Vec::new();
    let mut divergences = Vec::new();
    for kind in [
        CheckKind::RealCrossEntropy,
        CheckKind::Lsro,
        CheckKind::MprlAnalytic,
    ] {
        for o in &outcomes {
            let err = o.errors[kind as usize];
            checks.push(CheckResult {
                kind,
                classes: o.classes,
                max_rel_error: err,
                passed: err < cfg.tolerance,
            });
        }
    }
    for o in &outcomes {
        if let Some(d) = o.divergence {
            divergences.push(Divergence {
                classes: o.classes,
                max_rel_divergence: d,
            });
        }
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        checks,
        divergences,
    })
}
