//! Alternating offline training of the two branches and per-sequence online
//! fine-tuning of the segmentation branch.
//!
//! A phase trains one branch with the other frozen, by plain SGD (optional
//! momentum) on single pairs, averaging gradients over `batch_size` pairs per
//! update. Validation runs every `eval_interval` updates starting at update 0;
//! the phase stops once `patience` consecutive evaluations fail to improve on
//! the reference error by more than `min_delta`, or at `max_steps_per_phase`.
//! The model is left at the best validated parameters of the phase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_affine_pair, augment_dataset, sample_affine, AugmentOptions};
use crate::error::{Error, Result};
use crate::losses::{epe_loss_grad, weighted_seg_loss_grad, Reduction};
use crate::metrics::{average_endpoint_error, region_similarity};
use crate::model::{Branch, SegFlowModel};
use crate::tensor::Tensor;
use crate::types::{FramePair, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub lr_seg: f64,
    pub lr_flow: f64,
    pub lr_online: f64,
    pub halving_interval: usize,
    pub batch_size: usize,
    /// Evaluations without a `min_delta` improvement before a phase stops.
    pub patience: usize,
    pub min_delta: f64,
    pub max_steps_per_phase: usize,
    /// Updates between validation evaluations.
    pub eval_interval: usize,
    pub momentum: f64,
    pub first_branch: Branch,
    /// Fraction of training pairs held out for validation.
    pub val_fraction: f64,
    pub seg_reduction: Reduction,
    pub flow_reduction: Reduction,
    pub online_steps: usize,
    /// Augmented pairs generated from the first frame for fine-tuning.
    pub online_samples: usize,
    pub augment: AugmentOptions,
    /// Chance that an offline training pair is affinely augmented.
    pub augment_probability: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            lr_seg: 1e-4,
            lr_flow: 1e-5,
            lr_online: 1e-5,
            halving_interval: 500,
            batch_size: 1,
            patience: 5,
            min_delta: 1e-3,
            max_steps_per_phase: 2000,
            eval_interval: 50,
            momentum: 0.0,
            first_branch: Branch::Segmentation,
            val_fraction: 0.1,
            seg_reduction: Reduction::Sum,
            flow_reduction: Reduction::Mean,
            online_steps: 200,
            online_samples: 32,
            augment: AugmentOptions::default(),
            augment_probability: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("halving_interval", self.halving_interval),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_steps_per_phase", self.max_steps_per_phase),
            ("eval_interval", self.eval_interval),
            ("online_samples", self.online_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr_seg", self.lr_seg), ("lr_flow", self.lr_flow), ("lr_online", self.lr_online)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config("augment_probability must lie in [0, 1]".into()));
        }
        self.augment.affine.validate()
    }

    pub fn base_lr(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Segmentation => self.lr_seg,
            Branch::Flow => self.lr_flow,
        }
    }
}

/// `lr0 · 2^(−⌊step / halving_interval⌋)`.
pub fn learning_rate(lr0: f64, step: usize, halving_interval: usize) -> f64 {
    let halvings = (step / halving_interval).min(i32::MAX as usize) as i32;
    lr0 * 2f64.powi(-halvings)
}

/// Suppress gradients for every parameter owned by `branch`. Its forward
/// features still feed the other branch.
pub fn freeze_branch(model: &mut SegFlowModel, branch: Branch) {
    model.freeze(branch);
}

pub fn unfreeze_branch(model: &mut SegFlowModel, branch: Branch) {
    model.unfreeze(branch);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    StepLimit,
}

/// Progress of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub round_index: usize,
    pub active_branch: Branch,
    pub step: usize,
    pub lr_current: f64,
    /// `(step, validation error)`, strictly increasing in step.
    pub val_history: Vec<(usize, f64)>,
    /// Mean training loss over the updates preceding each evaluation.
    pub train_loss: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_error: f64,
    pub stop_reason: Option<StopReason>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub round: usize,
    pub branch: Branch,
    pub step: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_error: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let loss = self.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        write!(
            f,
            "round={} phase={} step={} lr={:e} train_loss={} val_error={:.6}",
            self.round, self.branch, self.step, self.lr, loss, self.val_error
        )
    }
}

fn require_targets(pairs: &[FramePair], branch: Branch) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        p.validate()?;
        let ok = match branch {
            Branch::Segmentation => p.mask_gt.is_some(),
            Branch::Flow => p.flow_gt.is_some(),
        };
        if !ok {
            return Err(Error::Data(format!("pair {i} lacks {branch} ground truth")));
        }
    }
    Ok(())
}

/// Validation error of one branch: `1 − mean J` for segmentation, mean
/// average endpoint error for flow.
pub fn validation_error(model: &SegFlowModel, branch: Branch, val: &[FramePair]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut total = 0.0;
    for pair in val {
        let out = model.forward(pair)?;
        if !out.seg_logits.is_finite() || !out.flow_pred.is_finite() {
            return Err(Error::NonFinite("model output"));
        }
        total += match branch {
            Branch::Segmentation => {
                let gt = pair.mask_gt.as_ref().ok_or_else(|| Error::Data("validation pair lacks a mask".into()))?;
                1.0 - region_similarity(&Mask::from_logits(&out.seg_logits), gt)?
            }
            Branch::Flow => {
                let gt = pair.flow_gt.as_ref().ok_or_else(|| Error::Data("validation pair lacks flow".into()))?;
                average_endpoint_error(&out.flow_pred, gt, pair.flow_valid.as_ref())?
            }
        };
    }
    Ok(total / val.len() as f64)
}

/// Loss of `branch` on one pair and gradients for every trainable parameter.
fn loss_and_grads(model: &SegFlowModel, branch: Branch, pair: &FramePair, config: &TrainConfig) -> Result<(f64, Vec<Option<Tensor>>)> {
    let pass = model.forward_graph(&pair.frame_t, &pair.frame_t1)?;
    let (value, d_seg, d_flow) = match branch {
        Branch::Segmentation => {
            let mask = pair.mask_gt.as_ref().expect("checked by require_targets");
            let (loss, grad) = weighted_seg_loss_grad(pass.graph.value(pass.seg_logits), mask, config.seg_reduction)?;
            (loss.value, Some(grad), None)
        }
        Branch::Flow => {
            let gt = pair.flow_gt.as_ref().expect("checked by require_targets");
            let lambda = model.config().lambda_flow;
            let (loss, mut grad) = epe_loss_grad(pass.graph.value(pass.flow_pred), gt, pair.flow_valid.as_ref(), config.flow_reduction)?;
            grad.scale(lambda);
            (lambda * loss.value, None, Some(grad))
        }
    };
    Ok((value, model.backward(&pass, d_seg, d_flow).0))
}

struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    fn new(momentum: f64, slots: usize) -> Self {
        Self {
            momentum,
            velocity: vec![None; slots],
        }
    }

    fn step(&mut self, model: &mut SegFlowModel, grads: &[Option<Tensor>], lr: f64) {
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !model.params.is_trainable(slot) {
                continue;
            }
            let update = if self.momentum > 0.0 {
                let v = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(g.shape()));
                v.scale(self.momentum);
                v.add_assign(g);
                v.clone()
            } else {
                g.clone()
            };
            let p = &mut model.params.get_mut(slot).value;
            for (w, u) in p.data_mut().iter_mut().zip(update.data()) {
                *w -= lr * u;
            }
        }
    }
}

fn accumulate(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn augmented(pair: &FramePair, config: &TrainConfig, branch: Branch, rng: &mut ChaCha8Rng) -> FramePair {
    let enabled = match branch {
        Branch::Segmentation => config.augment.segmentation,
        Branch::Flow => config.augment.flow,
    };
    if !enabled || !rng.random_bool(config.augment_probability) {
        return pair.clone();
    }
    let params = sample_affine(rng, &config.augment.affine, pair.spatial());
    let out = apply_affine_pair(pair, &params);
    // An affine that pushes the object or every valid flow pixel off-canvas
    // leaves nothing to learn from.
    let usable = match branch {
        Branch::Segmentation => out.mask_gt.as_ref().is_some_and(|m| !m.is_empty()) || pair.mask_gt.as_ref().is_some_and(|m| m.is_empty()),
        Branch::Flow => out.flow_valid.as_ref().is_none_or(|v| !v.is_empty()),
    };
    if usable {
        out
    } else {
        pair.clone()
    }
}

/// Train `branch` with the other branch frozen. On success the model holds
/// the best validated parameters of the phase. A non-finite loss restores
/// those parameters and returns [`Error::Diverged`].
pub fn train_phase(
    model: &mut SegFlowModel,
    branch: Branch,
    train: &[FramePair],
    val: &[FramePair],
    config: &TrainConfig,
    round_index: usize,
    rng: &mut ChaCha8Rng,
    mut log: impl FnMut(&LogLine),
) -> Result<TrainState> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("empty {branch} training set")));
    }
    require_targets(train, branch)?;
    require_targets(val, branch)?;
    let was_frozen = (model.params.is_frozen(Branch::Segmentation), model.params.is_frozen(Branch::Flow));
    unfreeze_branch(model, branch);
    freeze_branch(model, branch.other());

    let lr0 = config.base_lr(branch);
    let mut state = TrainState {
        round_index,
        active_branch: branch,
        step: 0,
        lr_current: lr0,
        val_history: Vec::new(),
        train_loss: Vec::new(),
        best_step: 0,
        best_error: f64::INFINITY,
        stop_reason: None,
    };
    let mut best_params = model.params.snapshot();
    let mut reference = f64::INFINITY;
    let mut stale = 0usize;
    let mut sgd = Sgd::new(config.momentum, model.params.len());
    let mut order: Vec<usize> = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    let diverged = |step: usize, reason: String| Error::Diverged {
        phase: format!("{branch} round {round_index}"),
        step,
        reason,
    };
    let result = (|| -> Result<()> {
        loop {
            let step = state.step;
            if step.is_multiple_of(config.eval_interval) || step == config.max_steps_per_phase {
                let err = validation_error(model, branch, val).map_err(|e| match e {
                    Error::NonFinite(what) => diverged(step, format!("non-finite {what} during validation")),
                    other => other,
                })?;
                let train_loss = (loss_count > 0).then(|| loss_sum / loss_count as f64);
                if let Some(l) = train_loss {
                    state.train_loss.push((step, l));
                }
                (loss_sum, loss_count) = (0.0, 0);
                state.val_history.push((step, err));
                log(&LogLine {
                    round: round_index,
                    branch,
                    step,
                    lr: learning_rate(lr0, step, config.halving_interval),
                    train_loss,
                    val_error: err,
                });
                if err < state.best_error {
                    state.best_error = err;
                    state.best_step = step;
                    best_params = model.params.snapshot();
                }
                if err < reference - config.min_delta {
                    reference = err;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        state.stop_reason = Some(StopReason::Converged);
                        return Ok(());
                    }
                }
            }
            if step == config.max_steps_per_phase {
                state.stop_reason = Some(StopReason::StepLimit);
                return Ok(());
            }

            let lr = learning_rate(lr0, step, config.halving_interval);
            state.lr_current = lr;
            let mut acc = Vec::new();
            for _ in 0..config.batch_size {
                if order.is_empty() {
                    order = (0..train.len()).collect();
                    order.shuffle(rng);
                }
                let pair = augmented(&train[order.pop().expect("refilled")], config, branch, rng);
                let (loss, grads) = loss_and_grads(model, branch, &pair, config).map_err(|e| match e {
                    Error::NonFinite(what) => diverged(step, format!("non-finite {what}")),
                    other => other,
                })?;
                if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(diverged(step, format!("non-finite loss or gradient (loss {loss})")));
                }
                loss_sum += loss;
                loss_count += 1;
                accumulate(&mut acc, grads);
            }
            if config.batch_size > 1 {
                for g in acc.iter_mut().flatten() {
                    g.scale(1.0 / config.batch_size as f64);
                }
            }
            sgd.step(model, &acc, lr);
            if model.params.iter().any(|p| !p.value.is_finite()) {
                return Err(diverged(step, "parameters overflowed".into()));
            }
            state.step += 1;
        }
    })();

    model.params.restore(&best_params);
    model.params.set_frozen(Branch::Segmentation, was_frozen.0);
    model.params.set_frozen(Branch::Flow, was_frozen.1);
    result.map(|()| state)
}

/// Deterministic `(train, val)` split holding out `fraction` of the pairs
/// (at least one when `fraction > 0`).
pub fn split_validation(pairs: &[FramePair], fraction: f64, seed: u64) -> (Vec<FramePair>, Vec<FramePair>) {
    let n = pairs.len();
    let n_val = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| pairs[i].clone()).collect(),
        val_idx.iter().map(|&i| pairs[i].clone()).collect(),
    )
}

/// Seed of the RNG driving phase `index` (0-based, in execution order).
pub fn phase_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93)
}

/// Branch trained by phase `index`.
pub fn phase_branch(config: &TrainConfig, index: usize) -> Branch {
    if index.is_multiple_of(2) {
        config.first_branch
    } else {
        config.first_branch.other()
    }
}

/// Validation curves of a whole offline run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub phases: Vec<TrainState>,
}

impl OfflineReport {
    /// Best validation error of `branch` in each round, in round order.
    pub fn best_per_round(&self, branch: Branch) -> Vec<f64> {
        self.phases.iter().filter(|p| p.active_branch == branch).map(|p| p.best_error).collect()
    }

    /// One line per validation evaluation, suitable for plotting.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("round,branch,step,val_error\n");
        for p in &self.phases {
            for (step, err) in &p.val_history {
                out.push_str(&format!("{},{},{},{}\n", p.round_index, p.active_branch, step, err));
            }
        }
        out
    }
}

/// Alternate segmentation and flow phases for `config.rounds` rounds, each
/// phase starting from the previous phase's best parameters.
///
/// `start_phase` and `previous` resume an interrupted run: phases before
/// `start_phase` are taken from `previous` and the model must already hold
/// their result. `on_phase_end` sees the model after every completed phase.
pub fn offline_train(
    model: &mut SegFlowModel,
    seg_dataset: &[FramePair],
    flow_dataset: &[FramePair],
    config: &TrainConfig,
    start_phase: usize,
    previous: Vec<TrainState>,
    mut log: impl FnMut(&LogLine),
    mut on_phase_end: impl FnMut(usize, &TrainState, &SegFlowModel) -> Result<()>,
) -> Result<OfflineReport> {
    config.validate()?;
    if seg_dataset.is_empty() {
        return Err(Error::Data("segmentation dataset is empty".into()));
    }
    if flow_dataset.is_empty() {
        return Err(Error::Data("flow dataset is empty".into()));
    }
    require_targets(seg_dataset, Branch::Segmentation)?;
    require_targets(flow_dataset, Branch::Flow)?;
    if previous.len() != start_phase {
        return Err(Error::Config(format!("resume at phase {start_phase} needs {start_phase} earlier phase records")));
    }
    let seg_split = split_validation(seg_dataset, config.val_fraction, config.seed ^ 0x5e6);
    let flow_split = split_validation(flow_dataset, config.val_fraction, config.seed ^ 0xf10);
    let split_for = |b: Branch| match b {
        Branch::Segmentation => &seg_split,
        Branch::Flow => &flow_split,
    };
    let mut report = OfflineReport { phases: previous };
    for index in start_phase..2 * config.rounds {
        let branch = phase_branch(config, index);
        let (train, val) = split_for(branch);
        // With no held-out pairs the training pairs double as validation.
        let val = if val.is_empty() { train } else { val };
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(config.seed, index));
        let state = train_phase(model, branch, train, val, config, index / 2, &mut rng, &mut log)?;
        on_phase_end(index, &state, model)?;
        report.phases.push(state);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub losses: Vec<f64>,
    /// Learning rate used at every step.
    pub lrs: Vec<f64>,
}

/// Adapt the segmentation branch to one sequence from its first annotated
/// frame. Training pairs come from [`augment_dataset`]; the flow branch is
/// frozen throughout and the learning rate is constant.
pub fn online_finetune(model: &mut SegFlowModel, first_frame: &Tensor, first_mask: &Mask, config: &TrainConfig) -> Result<OnlineReport> {
    config.validate()?;
    if first_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0417_11e5);
    let samples = augment_dataset(first_frame, first_mask, config.online_samples, &mut rng, &config.augment)?;
    let was_frozen = (model.params.is_frozen(Branch::Segmentation), model.params.is_frozen(Branch::Flow));
    unfreeze_branch(model, Branch::Segmentation);
    freeze_branch(model, Branch::Flow);
    let mut sgd = Sgd::new(config.momentum, model.params.len());
    let mut report = OnlineReport {
        losses: Vec::with_capacity(config.online_steps),
        lrs: Vec::with_capacity(config.online_steps),
    };
    let mut order: Vec<usize> = Vec::new();
    let result = (|| -> Result<()> {
        for step in 0..config.online_steps {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let pair = &samples[order.pop().expect("refilled")];
            let (loss, grads) = loss_and_grads(model, Branch::Segmentation, pair, config)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    phase: "online".into(),
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            sgd.step(model, &grads, config.lr_online);
            report.losses.push(loss);
            report.lrs.push(config.lr_online);
        }
        Ok(())
    })();
    model.params.set_frozen(Branch::Segmentation, was_frozen.0);
    model.params.set_frozen(Branch::Flow, was_frozen.1);
    result.map(|()| report)
}
