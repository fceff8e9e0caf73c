//! Seeded SGD over triplet databases.
//!
//! Training starts on the random-negative database. When the validation
//! loss plateaus, the caller may resume once on the hard-negative database
//! via [`fine_tune_hard`]; the phase flip is one way. Per-batch gradients
//! may be computed in parallel, but the reduction runs in batch order, so a
//! given seed produces bit-identical weights at any thread count.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_gradients, triplet_loss_value, LossConfig};
use super::net::{GradientSet, TowerWeights};
use super::DescriptorError;
use crate::mining::{splitmix64, TripletDb, TripletRecord};
use crate::SampleId;

const VAL_SPLIT_SALT: u64 = 0x76616c5f73706c69;
const RANDOM_PHASE_SALT: u64 = 0x72616e646f6d5f64;
const HARD_PHASE_SALT: u64 = 0x686172645f646221;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    RandomDb,
    HardDb,
}

impl TrainPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::RandomDb => "random_db",
            TrainPhase::HardDb => "hard_db",
        }
    }

    fn salt(self) -> u64 {
        match self {
            TrainPhase::RandomDb => RANDOM_PHASE_SALT,
            TrainPhase::HardDb => HARD_PHASE_SALT,
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Momentum coefficient in [0, 1); 0 is plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch budget for the random_db phase.
    pub max_epochs: usize,
    /// Epoch budget for the hard_db phase.
    pub hard_epochs: usize,
    /// Fraction of the triplet database held out for validation.
    pub val_fraction: f64,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
    /// Optional cap on triplets visited per epoch, applied after the
    /// epoch shuffle.
    pub triplets_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 40,
            hard_epochs: 6,
            val_fraction: 0.15,
            plateau_window: 3,
            plateau_epsilon: 2e-3,
            triplets_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        let bad = |msg: String| Err(DescriptorError::BadConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 || self.hard_epochs == 0 {
            return bad("epoch budgets must be at least 1".into());
        }
        if !(self.val_fraction.is_finite() && (0.0..1.0).contains(&self.val_fraction)) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.plateau_window < 2 {
            return bad("plateau_window must be at least 2".into());
        }
        if !(self.plateau_epsilon.is_finite() && self.plateau_epsilon > 0.0) {
            return bad(format!("plateau_epsilon must be > 0, got {}", self.plateau_epsilon));
        }
        if self.triplets_per_epoch == Some(0) {
            return bad("triplets_per_epoch must be at least 1 when set".into());
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs across both phases; log entries are 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub phase: TrainPhase,
    pub plateau_reached: bool,
    pub seed: u64,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(seed: u64, learning_rate: f64) -> Self {
        Self {
            epoch: 0,
            learning_rate,
            phase: TrainPhase::RandomDb,
            plateau_reached: false,
            seed,
            history: Vec::new(),
        }
    }

    /// Latest training loss, if any epoch has completed.
    pub fn train_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.train_loss)
    }

    /// Validation losses of the given phase, in epoch order.
    pub fn val_losses(&self, phase: TrainPhase) -> Vec<f64> {
        self.history
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.val_loss)
            .collect()
    }
}

/// True when the best validation loss of the last `window` epochs improved
/// by less than `epsilon` over the best before the window. Histories
/// shorter than the window never plateau; at exactly window length the
/// first entry serves as the baseline.
pub fn detect_plateau(state: &TrainState, window: usize, epsilon: f64) -> bool {
    plateau_in(&state.val_losses(state.phase), window, epsilon)
}

fn plateau_in(losses: &[f64], window: usize, epsilon: f64) -> bool {
    let len = losses.len();
    if window < 2 || len < window {
        return false;
    }
    let cut = if len == window { 1 } else { len - window };
    let baseline = losses[..cut].iter().cloned().fold(f64::INFINITY, f64::min);
    let best = losses[len - window..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    baseline - best < epsilon
}

/// Result of a training run: final weights plus the state that produced
/// them. `warning` carries non-fatal conditions such as an empty hard
/// database.
#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: TowerWeights,
    pub state: TrainState,
    pub warning: Option<String>,
}

fn phase_epoch_rng(seed: u64, phase: TrainPhase, epoch: usize) -> ChaCha12Rng {
    let mixed = splitmix64(seed ^ phase.salt()).wrapping_add(splitmix64(epoch as u64 + 1));
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Deterministic validation holdout: shuffle indices under a salted seed,
/// take the first round(val_fraction * n), keep at least one training
/// triplet.
fn split_validation(n: usize, fraction: f64, seed: u64, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ VAL_SPLIT_SALT ^ salt));
    idx.shuffle(&mut rng);
    let val_len = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut val: Vec<usize> = idx[..val_len].to_vec();
    let mut train: Vec<usize> = idx[val_len..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

struct PhasePlan<'a> {
    db: &'a TripletDb,
    phase: TrainPhase,
    epochs: usize,
    plateau_break: bool,
}

fn run_phase<R>(
    weights: &mut TowerWeights,
    state: &mut TrainState,
    plan: &PhasePlan,
    resolve: &R,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(), DescriptorError>
where
    R: Fn(SampleId) -> Result<Array3<f64>, DescriptorError> + Sync,
{
    let n = plan.db.records.len();
    let (train_idx, val_idx) = split_validation(n, cfg.val_fraction, cfg.seed, plan.phase.salt());
    let mut velocity = GradientSet::zeros_like(weights);
    let mut last_good = weights.clone();
    // Checkpoint of the best validation loss this phase. The phase hands
    // back this snapshot, not the last step, so late drift costs nothing.
    let mut best: Option<(f64, TowerWeights)> = None;

    for _ in 0..plan.epochs {
        let this_epoch = state.epoch + 1;
        let diverged = |w: &TowerWeights| DescriptorError::Diverged {
            epoch: this_epoch,
            last_good: Box::new(w.clone()),
        };

        let mut order = train_idx.clone();
        let mut rng = phase_epoch_rng(cfg.seed, plan.phase, this_epoch);
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.triplets_per_epoch {
            order.truncate(cap);
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let wref: &TowerWeights = weights;
            let results: Result<Vec<_>, DescriptorError> = chunk
                .par_iter()
                .map(|&i| {
                    let r: &TripletRecord = &plan.db.records[i];
                    let a = resolve(r.anchor)?;
                    let p = resolve(r.positive)?;
                    let neg = resolve(r.negative)?;
                    loss_gradients(wref, &a, &p, &neg, loss)
                })
                .collect();
            let results = results.map_err(|e| match e {
                DescriptorError::NonFinite { .. } => diverged(&last_good),
                other => other,
            })?;

            let mut acc = GradientSet::zeros_like(weights);
            for r in &results {
                acc.add_assign(&r.grads);
                loss_sum += r.loss;
            }
            seen += results.len();
            acc.scale(1.0 / results.len() as f64);
            if !acc.is_finite() {
                return Err(diverged(&last_good));
            }
            if cfg.learning_rate != 0.0 {
                weights.apply_momentum_step(&mut velocity, &acc, cfg.learning_rate, cfg.momentum);
            }
        }

        let train_loss = if seen == 0 { 0.0 } else { loss_sum / seen as f64 };
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let wref: &TowerWeights = weights;
            let losses: Result<Vec<f64>, DescriptorError> = val_idx
                .par_iter()
                .map(|&i| {
                    let r = &plan.db.records[i];
                    let a = resolve(r.anchor)?;
                    let p = resolve(r.positive)?;
                    let neg = resolve(r.negative)?;
                    triplet_loss_value(wref, &a, &p, &neg, loss)
                })
                .collect();
            let losses = losses.map_err(|e| match e {
                DescriptorError::NonFinite { .. } => diverged(&last_good),
                other => other,
            })?;
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(diverged(&last_good));
        }

        state.epoch = this_epoch;
        state.history.push(EpochLog {
            epoch: this_epoch,
            phase: plan.phase,
            train_loss,
            val_loss,
        });
        last_good = weights.clone();
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, weights.clone()));
        }

        if plan.plateau_break && detect_plateau(state, cfg.plateau_window, cfg.plateau_epsilon) {
            state.plateau_reached = true;
            break;
        }
    }
    if let Some((_, snapshot)) = best {
        *weights = snapshot;
    }
    Ok(())
}

/// Train on the random-negative database from the given initial weights.
/// Stops early once the validation loss plateaus and flags the state so a
/// hard fine-tune may follow. The returned weights are the best
/// validation checkpoint of the run, not the final step.
pub fn train<R>(
    init: TowerWeights,
    db: &TripletDb,
    resolve: &R,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DescriptorError>
where
    R: Fn(SampleId) -> Result<Array3<f64>, DescriptorError> + Sync,
{
    cfg.validate()?;
    loss.validate()?;
    if db.records.is_empty() {
        return Err(DescriptorError::EmptyDb);
    }
    let mut weights = init;
    let mut state = TrainState::new(cfg.seed, cfg.learning_rate);
    let plan = PhasePlan {
        db,
        phase: TrainPhase::RandomDb,
        epochs: cfg.max_epochs,
        plateau_break: true,
    };
    run_phase(&mut weights, &mut state, &plan, resolve, loss, cfg)?;
    Ok(TrainOutcome { weights, state, warning: None })
}

/// Resume training once on the hard-negative database. Requires that the
/// random_db phase ended in a plateau; an empty hard database leaves the
/// weights untouched and reports a warning instead of failing.
pub fn fine_tune_hard<R>(
    weights: TowerWeights,
    mut state: TrainState,
    hard_db: &TripletDb,
    resolve: &R,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DescriptorError>
where
    R: Fn(SampleId) -> Result<Array3<f64>, DescriptorError> + Sync,
{
    cfg.validate()?;
    loss.validate()?;
    if state.phase != TrainPhase::RandomDb || !state.plateau_reached {
        return Err(DescriptorError::PhaseOrder);
    }
    state.phase = TrainPhase::HardDb;
    if hard_db.records.is_empty() {
        return Ok(TrainOutcome {
            weights,
            state,
            warning: Some("hard triplet database is empty; weights left unchanged".into()),
        });
    }
    let mut weights = weights;
    let plan = PhasePlan {
        db: hard_db,
        phase: TrainPhase::HardDb,
        epochs: cfg.hard_epochs,
        plateau_break: true,
    };
    run_phase(&mut weights, &mut state, &plan, resolve, loss, cfg)?;
    Ok(TrainOutcome { weights, state, warning: None })
}
