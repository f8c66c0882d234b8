//! Training over real plus generated data.
//!
//! The merged set `D = R ∪ G` is reshuffled every epoch and cut into
//! minibatches. Real samples are trained with softmax cross-entropy on their
//! class; generated samples get a virtual label chosen by the strategy:
//!
//! | strategy       | generated label                                     |
//! |----------------|-----------------------------------------------------|
//! | `Baseline`     | none, `G` is left out of `D`                        |
//! | `AllInOne`     | one extra class, head width `K+1`                   |
//! | `OneHotPseudo` | argmax of the current prediction                    |
//! | `Lsro`         | uniform `1/K`                                       |
//! | `SMprl`        | MpRL from a pretrained baseline, frozen             |
//! | `DMprlI`       | MpRL from the current prediction, every visit       |
//! | `DMprlII`      | as `DMprlI`, but only from `warmup_epoch` onwards   |
//!
//! Epochs are 1-based. Everything random is derived from `TrainConfig::seed`,
//! so identical inputs give bit-identical parameters and histories.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{
    all_in_one_label, argmax, lsro_label, mprl_alpha, mprl_label, one_hot_pseudo_label, softmax,
    Logits, RankWeights, TiePolicy, VirtualLabel,
};
use crate::losses::{combined_loss, BatchEntry, GradientMode, LossConfig, Role};
use crate::net::{sgd_step, Activation, ForwardMode, Gradients, ModelParams, OptimizerState};
use crate::retrieval::{evaluate_sets, EmbeddingSet, EvalReport};
use crate::seed;
use crate::synthgen::{Dataset, Origin, Sample, Split};

// seed stream tags
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_RANDOM_ALPHA: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Baseline,
    AllInOne,
    OneHotPseudo,
    Lsro,
    SMprl,
    DMprlI,
    DMprlII,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Baseline,
        Strategy::AllInOne,
        Strategy::OneHotPseudo,
        Strategy::Lsro,
        Strategy::SMprl,
        Strategy::DMprlI,
        Strategy::DMprlII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "Baseline",
            Strategy::AllInOne => "AllInOne",
            Strategy::OneHotPseudo => "OneHotPseudo",
            Strategy::Lsro => "LSRO",
            Strategy::SMprl => "sMpRL",
            Strategy::DMprlI => "dMpRL-I",
            Strategy::DMprlII => "dMpRL-II",
        }
    }

    pub fn uses_generated(self) -> bool {
        self != Strategy::Baseline
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "baseline" => Strategy::Baseline,
            "allinone" => Strategy::AllInOne,
            "onehotpseudo" | "onehot" | "pseudo" => Strategy::OneHotPseudo,
            "lsro" => Strategy::Lsro,
            "smprl" => Strategy::SMprl,
            "dmprli" | "dmprl1" => Strategy::DMprlI,
            "dmprlii" | "dmprl2" => Strategy::DMprlII,
            _ => return Err(Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip)]
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_decay: f64,
    /// Last epoch trained at `lr_initial`.
    pub decay_epoch: usize,
    pub momentum: f64,
    /// Generated-side trade-off. `None` picks 0.1 for dMpRL-II and 1 otherwise.
    pub lambda: Option<f64>,
    /// First epoch in which dMpRL-II generated samples contribute.
    pub warmup_epoch: usize,
    pub tie_policy: TiePolicy,
    pub gradient_mode: GradientMode,
    pub dropout_rate: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Hidden widths; the last one is the embedding width.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    /// Number of generated samples whose argmax class is logged per epoch.
    pub track_generated: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Baseline,
            epochs: 50,
            batch_size: 64,
            lr_initial: 0.01,
            lr_after_decay: 0.001,
            decay_epoch: 40,
            momentum: 0.9,
            lambda: None,
            warmup_epoch: 20,
            tie_policy: TiePolicy::AverageRank,
            gradient_mode: GradientMode::Analytic,
            dropout_rate: 0.5,
            seed: 0,
            hidden: vec![64, 32],
            activation: Activation::Relu,
            init_scale: 1.0,
            track_generated: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        TrainConfig {
            strategy,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.strategy {
            Strategy::DMprlII => 0.1,
            _ => 1.0,
        })
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch > self.decay_epoch {
            self.lr_after_decay
        } else {
            self.lr_initial
        }
    }

    /// Whether generated samples contribute in `epoch`.
    pub fn gate_open(&self, epoch: usize) -> bool {
        match self.strategy {
            Strategy::Baseline => false,
            Strategy::DMprlII => epoch >= self.warmup_epoch,
            _ => true,
        }
    }

    pub fn head_width(&self, classes: usize) -> usize {
        match self.strategy {
            Strategy::AllInOne => classes + 1,
            _ => classes,
        }
    }

    pub fn layer_sizes(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.head_width(classes));
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_after_decay", self.lr_after_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one positive width".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        let lambda = self.effective_lambda();
        if !lambda.is_finite() || lambda < 0.0 {
            return bad(format!("lambda must be finite and >= 0, got {lambda}"));
        }
        if self.strategy.uses_generated() && lambda <= 0.0 {
            return bad(format!("lambda must be > 0 for {}", self.strategy));
        }
        if self.strategy == Strategy::DMprlII && !(1..self.epochs).contains(&self.warmup_epoch) {
            return bad(format!(
                "warmup_epoch must be in [1, epochs) for dMpRL-II, got {} with {} epochs",
                self.warmup_epoch, self.epochs
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean real-sample loss over the epoch.
    pub l1: f64,
    /// Mean generated-sample loss (before `lambda`); zero while gated.
    pub l2: f64,
    pub combined: f64,
    pub train_acc: f64,
    pub lr: f64,
    /// Norm of the generated-sample share of the parameter gradients,
    /// accumulated over all batches of the epoch.
    pub generated_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub sample_id: u64,
    /// Argmax over the `K` pre-defined classes, one entry per epoch.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub trajectories: Option<Vec<Trajectory>>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l1,l2,combined,train_acc,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l1, r.l2, r.combined, r.train_acc, r.lr
            );
        }
        out
    }
}

pub fn log_label_trajectory(history: &TrainHistory) -> Result<&[Trajectory]> {
    history.trajectories.as_deref().ok_or(Error::NotRecorded)
}

pub fn trajectory_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("sample_id,epoch,argmax_class\n");
    for t in trajectories {
        for (e, c) in t.classes.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", t.sample_id, e + 1, c);
        }
    }
    out
}

/// One row per epoch, one column per tracked sample.
pub fn trajectory_wide_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("epoch");
    for t in trajectories {
        let _ = write!(out, ",s{}", t.sample_id);
    }
    out.push('\n');
    let epochs = trajectories.first().map_or(0, |t| t.classes.len());
    for e in 0..epochs {
        let _ = write!(out, "{}", e + 1);
        for t in trajectories {
            let _ = write!(out, ",{}", t.classes[e]);
        }
        out.push('\n');
    }
    out
}

pub type StaticLabels = BTreeMap<u64, VirtualLabel>;

/// Frozen MpRL labels from a model's evaluation-mode prediction.
pub fn assign_static_labels(
    pretrained: &ModelParams,
    generated: &Dataset,
    tie_policy: TiePolicy,
) -> Result<StaticLabels> {
    if pretrained.input_dim() != generated.feature_dim() {
        return Err(Error::dim(format!(
            "model expects {} features, generated data has {}",
            pretrained.input_dim(),
            generated.feature_dim()
        )));
    }
    let k = pretrained.classes();
    generated
        .samples()
        .iter()
        .map(|s| {
            let logits = pretrained.logits(&s.features)?;
            let label = mprl_label(&mprl_alpha(&softmax(&logits), tie_policy), k)?;
            Ok((s.id, label))
        })
        .collect()
}

/// Visiting order of `n` samples in `epoch`; always a permutation.
pub fn epoch_order(n: usize, base_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(&[base_seed, STREAM_SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub total: Gradients,
    /// Share of `total` that flows from generated samples.
    pub generated: Gradients,
    pub l1: f64,
    pub l2: f64,
    pub n_real: usize,
    /// Generated samples that contributed (zero while gated).
    pub n_generated: usize,
    pub real_correct: usize,
}

/// Forward, label, loss and backward for one minibatch at fixed parameters.
///
/// `label_for` is called for each generated sample with its training-mode
/// logits; real samples always use their ground-truth class.
pub fn batch_gradients<F>(
    params: &ModelParams,
    batch: &[&Sample],
    modes: &[ForwardMode],
    loss_cfg: &LossConfig,
    gate_open: bool,
    mut label_for: F,
) -> Result<BatchGradients>
where
    F: FnMut(&Sample, &Logits) -> Result<VirtualLabel>,
{
    if modes.len() != batch.len() {
        return Err(Error::dim("one forward mode per batch sample required"));
    }
    let width = params.classes();
    let mut forwards = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut real_correct = 0;
    for (s, mode) in batch.iter().zip(modes) {
        let fwd = params.forward(&s.features, *mode)?;
        let label = match s.origin {
            Origin::Real(c) => {
                if argmax(fwd.logits.as_slice()) == c {
                    real_correct += 1;
                }
                VirtualLabel::ground_truth(c, width)?
            }
            Origin::Generated => label_for(s, &fwd.logits)?,
        };
        forwards.push(fwd);
        labels.push(label);
    }
    let entries: Vec<BatchEntry<'_>> = forwards
        .iter()
        .zip(&labels)
        .zip(batch)
        .map(|((f, label), s)| BatchEntry {
            logits: &f.logits,
            label,
            role: match s.origin {
                Origin::Real(_) => Role::Real,
                Origin::Generated => Role::Generated,
            },
        })
        .collect();
    let loss = combined_loss(&entries, loss_cfg, gate_open)?;

    let mut total = Gradients::zeros_like(params);
    let mut generated = Gradients::zeros_like(params);
    let mut n_real = 0;
    let mut n_generated = 0;
    for ((fwd, grad), entry) in forwards.iter().zip(&loss.grads).zip(&entries) {
        match entry.role {
            Role::Real => n_real += 1,
            Role::Generated if gate_open => n_generated += 1,
            Role::Generated => continue,
        }
        let g = params.backward(&fwd.cache, grad)?;
        total.add_scaled(&g, 1.0)?;
        if entry.role == Role::Generated {
            generated.add_scaled(&g, 1.0)?;
        }
    }
    Ok(BatchGradients {
        total,
        generated,
        l1: loss.l1,
        l2: loss.l2,
        n_real,
        n_generated,
        real_correct,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Starting point instead of a fresh seeded initialization.
    pub initial_params: Option<ModelParams>,
    /// Frozen labels for sMpRL; when absent a baseline model is trained on
    /// the real data with the same settings and used to assign them.
    pub static_labels: Option<StaticLabels>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub static_labels: Option<StaticLabels>,
}

pub fn train(real: &Dataset, generated: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(real, generated, cfg, TrainOptions::default())
}

pub fn train_with(
    real: &Dataset,
    generated: &Dataset,
    cfg: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = real.classes();
    let dim = real.feature_dim();
    if !generated.is_empty() && (generated.feature_dim() != dim || generated.classes() != k) {
        return Err(Error::dim(format!(
            "real data is {k} classes x {dim} features, generated data {} x {}",
            generated.classes(),
            generated.feature_dim()
        )));
    }
    if generated
        .samples()
        .iter()
        .any(|s| s.origin != Origin::Generated)
    {
        return Err(Error::InvalidValue(
            "generated dataset holds labeled samples".into(),
        ));
    }
    let train_real: Vec<&Sample> = real.split(Split::Train).collect();
    if train_real.is_empty() {
        return Err(Error::InvalidValue(
            "real dataset has no training split".into(),
        ));
    }
    let layer_sizes = cfg.layer_sizes(dim, k);
    let mut params = match options.initial_params {
        Some(p) => {
            if p.layer_sizes() != layer_sizes {
                return Err(Error::dim(format!(
                    "initial parameters have layers {:?}, expected {layer_sizes:?}",
                    p.layer_sizes()
                )));
            }
            p
        }
        None => ModelParams::init(
            &layer_sizes,
            cfg.activation,
            seed::derive(&[cfg.seed, STREAM_INIT]),
            cfg.init_scale,
        )?,
    };

    let static_labels = if cfg.strategy == Strategy::SMprl {
        let labels = match options.static_labels {
            Some(l) => l,
            None => {
                let pre_cfg = TrainConfig {
                    strategy: Strategy::Baseline,
                    track_generated: 0,
                    ..cfg.clone()
                };
                let pre = train(real, &Dataset::new(k, dim, Vec::new())?, &pre_cfg)?;
                assign_static_labels(&pre.params, generated, cfg.tie_policy)?
            }
        };
        if let Some(s) = generated
            .samples()
            .iter()
            .find(|s| !labels.contains_key(&s.id))
        {
            return Err(Error::InvalidState(format!(
                "no static label for generated sample {}",
                s.id
            )));
        }
        Some(labels)
    } else {
        None
    };

    let mut pool: Vec<&Sample> = train_real;
    if cfg.strategy.uses_generated() {
        pool.extend(generated.samples());
    }
    let tracked: Vec<&Sample> = generated
        .samples()
        .iter()
        .take(cfg.track_generated)
        .collect();
    let mut trajectories: Option<Vec<Trajectory>> = (cfg.track_generated > 0).then(|| {
        tracked
            .iter()
            .map(|s| Trajectory {
                sample_id: s.id,
                classes: Vec::with_capacity(cfg.epochs),
            })
            .collect()
    });

    let lambda = cfg.effective_lambda();
    let loss_cfg = LossConfig::new(params.classes(), lambda, cfg.gradient_mode)?;
    let mut opt = OptimizerState::new(&params, cfg.lr_initial, cfg.momentum)?;
    let lsro = lsro_label(k)?;
    let all_in_one = all_in_one_label(k)?;
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        opt.set_learning_rate(lr);
        let gate = cfg.gate_open(epoch);
        let order = epoch_order(pool.len(), cfg.seed, epoch);

        let (mut l1_sum, mut l2_sum) = (0.0, 0.0);
        let (mut n_real, mut n_gen, mut correct) = (0usize, 0usize, 0usize);
        let mut gen_norm_sq = 0.0;
        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| pool[i]).collect();
            let modes: Vec<ForwardMode> = (0..batch.len())
                .map(|j| ForwardMode::Train {
                    dropout_rate: cfg.dropout_rate,
                    seed: seed::derive(&[
                        cfg.seed,
                        STREAM_DROPOUT,
                        epoch as u64,
                        (chunk_idx * cfg.batch_size + j) as u64,
                    ]),
                })
                .collect();
            let first_iteration = step == 0;
            let grads =
                batch_gradients(
                    &params,
                    &batch,
                    &modes,
                    &loss_cfg,
                    gate,
                    |s, logits| match cfg.strategy {
                        Strategy::Baseline => Err(Error::InvalidState(
                            "baseline batches never hold generated samples".into(),
                        )),
                        Strategy::AllInOne => Ok(all_in_one.clone()),
                        Strategy::Lsro => Ok(lsro.clone()),
                        Strategy::OneHotPseudo => Ok(one_hot_pseudo_label(&softmax(logits))),
                        Strategy::SMprl => Ok(static_labels
                            .as_ref()
                            .and_then(|m| m.get(&s.id))
                            .cloned()
                            .expect("static labels checked before training")),
                        Strategy::DMprlI if first_iteration => {
                            mprl_label(&random_alpha(k, cfg.seed, s.id)?, k)
                        }
                        Strategy::DMprlI | Strategy::DMprlII => {
                            mprl_label(&mprl_alpha(&softmax(logits), cfg.tie_policy), k)
                        }
                    },
                )?;
            l1_sum += grads.l1 * grads.n_real as f64;
            l2_sum += grads.l2 * grads.n_generated as f64;
            n_real += grads.n_real;
            n_gen += grads.n_generated;
            correct += grads.real_correct;
            gen_norm_sq += grads.generated.norm_sq();
            sgd_step(&mut params, &grads.total, &mut opt)?;
            step += 1;
        }

        let l1 = if n_real > 0 {
            l1_sum / n_real as f64
        } else {
            0.0
        };
        let l2 = if n_gen > 0 {
            l2_sum / n_gen as f64
        } else {
            0.0
        };
        if !l1.is_finite() || !l2.is_finite() {
            return Err(Error::InvalidState(format!(
                "loss diverged in epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            l1,
            l2,
            combined: l1 + lambda * l2,
            train_acc: if n_real > 0 {
                correct as f64 / n_real as f64
            } else {
                0.0
            },
            lr,
            generated_grad_norm: gen_norm_sq.sqrt(),
        });

        if let Some(trajs) = trajectories.as_mut() {
            for (t, s) in trajs.iter_mut().zip(&tracked) {
                let logits = params.logits(&s.features)?;
                t.classes.push(argmax(&logits.as_slice()[..k]));
            }
        }
    }
    history.trajectories = trajectories.take();
    Ok(TrainOutcome {
        params,
        history,
        static_labels,
    })
}

/// Uniformly random rank permutation for a generated sample seen in the
/// very first iteration.
fn random_alpha(classes: usize, base_seed: u64, sample_id: u64) -> Result<RankWeights> {
    let mut perm: Vec<usize> = (0..classes).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(&[base_seed, STREAM_RANDOM_ALPHA, sample_id]));
    perm.shuffle(&mut rng);
    RankWeights::from_permutation(&perm)
}

/// Evaluation-mode embeddings of one split of real data.
pub fn embed_split(params: &ModelParams, data: &Dataset, split: Split) -> Result<EmbeddingSet> {
    let (mut ids, mut labels, mut vectors) = (Vec::new(), Vec::new(), Vec::new());
    for s in data.split(split) {
        let class = s.class().ok_or_else(|| {
            Error::InvalidValue(format!("sample {} in {split} split has no class", s.id))
        })?;
        ids.push(s.id);
        labels.push(class);
        vectors.push(params.embed(&s.features)?);
    }
    EmbeddingSet::new(ids, labels, vectors)
}

/// Query-vs-gallery retrieval with the model's embeddings.
pub fn evaluate_model(params: &ModelParams, real: &Dataset) -> Result<EvalReport> {
    let queries = embed_split(params, real, Split::Query)?;
    let gallery = embed_split(params, real, Split::Gallery)?;
    evaluate_sets(&queries, &gallery)
}
