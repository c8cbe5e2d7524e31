//! Epoch loop shared by every task: minibatch gradients, the update rule,
//! posterior collection, per-epoch evaluation and early stopping.

mod objective;

pub use objective::{
    classifier_probs, lm_eval_stream, score_class_probs, BatchGrad, ClassifierObjective, LmObjective, Objective, Split,
    SplitEval, StreamEval,
};

use crate::error::{Error, Result};
use crate::models::DropoutSpec;
use crate::numerics::SeededRng;
use crate::params::{FlatParams, Parameterized};
use crate::posterior::{CollectionPolicy, SampleBank};
use crate::samplers::{posterior_grad, Algorithm, HyperParams, Sampler};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// `batch_size` and `dataset_size` are filled in from the objective.
    pub hp: HyperParams,
    pub epochs: usize,
    /// Snapshot schedule; `None` collects nothing.
    pub collection: Option<CollectionPolicy>,
    pub dropout: DropoutSpec,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub score: f64,
    pub epoch: usize,
    pub params: FlatParams,
}

/// Everything needed to continue a run bit-exactly from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: FlatParams,
    pub sampler: Sampler,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    /// Snapshots handed to the observer so far; only their count and the
    /// latest stamp are kept here, the parameters go to the observer.
    pub collected: usize,
    pub last_stamp: Option<f64>,
    pub best: Option<BestState>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
}

/// Receives progress as it happens. All methods default to doing nothing.
pub trait TrainObserver {
    fn metric(&mut self, _epoch: usize, _split: &str, _name: &str, _value: f64) -> Result<()> {
        Ok(())
    }

    /// Called when snapshot number `index` (zero-based) is taken at time
    /// `stamp`; the snapshot is `state.theta`.
    fn sample(&mut self, _index: usize, _stamp: f64, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Keeps every snapshot in memory.
impl TrainObserver for SampleBank {
    fn sample(&mut self, _index: usize, stamp: f64, state: &TrainState) -> Result<()> {
        self.push(&state.theta, stamp)
    }
}

pub struct Trainer<O: Objective> {
    objective: O,
    model: O::Model,
    config: TrainConfig,
    state: TrainState,
}

impl<O: Objective> Trainer<O> {
    /// Starts from `model`'s current parameters; `rng` drives every random
    /// choice made during training.
    pub fn new(objective: O, model: O::Model, mut config: TrainConfig, rng: SeededRng) -> Result<Self> {
        config.hp.batch_size = objective.batch_size();
        config.hp.dataset_size = objective.dataset_size();
        let theta = model.flatten();
        let sampler = Sampler::new(config.algorithm, config.hp, theta.len())?;
        let state = TrainState {
            theta,
            sampler,
            rng,
            epoch: 0,
            collected: 0,
            last_stamp: None,
            best: None,
            bad_epochs: 0,
            stopped_early: false,
        };
        Ok(Self {
            objective,
            model,
            config,
            state,
        })
    }

    /// Continues from a saved state. `model` supplies the architecture.
    pub fn resume(objective: O, model: O::Model, config: TrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(objective, model, config, state.rng.clone())?;
        if !t.state.theta.same_layout(&state.theta) || state.sampler.state.v.len() != state.theta.len() {
            return Err(Error::invalid("saved state does not match the model architecture"));
        }
        t.state = state;
        t.state.sampler.hp = t.config.hp;
        t.state.sampler.algorithm = t.config.algorithm;
        Ok(t)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.epoch >= self.config.epochs
    }

    /// Model carrying the current parameters.
    pub fn current_model(&self) -> Result<O::Model> {
        let mut m = self.model.clone();
        m.load_flat(&self.state.theta)?;
        Ok(m)
    }

    /// Runs epochs until done or until `stop_after` epochs have completed.
    pub fn run(&mut self, observer: &mut dyn TrainObserver, stop_after: Option<usize>) -> Result<()> {
        while !self.finished() && stop_after.is_none_or(|s| self.state.epoch < s) {
            self.run_epoch(observer)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        let e = self.state.epoch;
        let nb = self.objective.begin_epoch(&mut self.state.rng)?;
        if nb == 0 {
            return Err(Error::invalid("epoch has no minibatches"));
        }
        // Collection is checked on the nominal grid k·thinning; each grid
        // point inside this epoch maps to the batch boundary nearest to it.
        let checks: Vec<(usize, f64)> = match &self.config.collection {
            Some(p) => p
                .check_points(self.config.epochs as f64)
                .into_iter()
                .filter(|&c| c > e as f64 + 1e-9 && c <= (e + 1) as f64 + 1e-9)
                .map(|c| ((((c - e as f64) * nb as f64).round() as usize).clamp(1, nb), c))
                .collect(),
            None => Vec::new(),
        };
        let mut next_check = 0;
        let (mut nll, mut count) = (0.0, 0usize);

        for k in 0..nb {
            self.model.load_flat(&self.state.theta)?;
            let bg = self
                .objective
                .batch_grad(&self.model, k, &self.config.dropout, &mut self.state.rng)?;
            if !bg.nll.is_finite() {
                let culprit = if let Some(name) = self.state.theta.first_nonfinite() {
                    format!("parameter `{name}`")
                } else if let Some(name) = bg.grad.first_nonfinite() {
                    format!("gradient `{name}`")
                } else {
                    // Finite parameters can still overflow the activations.
                    let (name, max) = largest_tensor(&self.state.theta);
                    format!("none; overflow from parameter `{name}` (max |value| {max:e})")
                };
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {} batch {k}; first nonfinite tensor: {culprit}",
                    e + 1
                )));
            }
            if let Some(name) = bg.grad.first_nonfinite() {
                return Err(Error::NonFinite(format!(
                    "gradient at epoch {} batch {k}: tensor `{name}`",
                    e + 1
                )));
            }
            let g = posterior_grad(&bg.grad, &self.state.theta, &self.config.hp, bg.items)?;
            self.state.sampler.step(&mut self.state.theta, &g, &mut self.state.rng).map_err(|err| match err {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {} batch {k}", e + 1)),
                other => other,
            })?;
            nll += bg.nll;
            count += bg.count;
            while next_check < checks.len() && checks[next_check].0 == k + 1 {
                let stamp = checks[next_check].1;
                let policy = self.config.collection.expect("checks imply a policy");
                if policy.due(stamp, self.state.last_stamp) {
                    observer.sample(self.state.collected, stamp, &self.state)?;
                    self.state.collected += 1;
                    self.state.last_stamp = Some(stamp);
                }
                next_check += 1;
            }
        }
        self.state.epoch = e + 1;
        let epoch = self.state.epoch;
        observer.metric(epoch, "train", "loss", nll / count as f64)?;

        self.model.load_flat(&self.state.theta)?;
        if self.objective.has_split(Split::Valid) {
            let ev = self.objective.evaluate(&self.model, Split::Valid)?;
            for (name, v) in self.objective.report(&ev) {
                observer.metric(epoch, "valid", name, v)?;
            }
            let score = self.objective.selection_score(&ev);
            let improved = self.state.best.as_ref().is_none_or(|b| score < b.score);
            if improved {
                self.state.best = Some(BestState {
                    score,
                    epoch,
                    params: self.state.theta.clone(),
                });
                self.state.bad_epochs = 0;
            } else {
                self.state.bad_epochs += 1;
                if self.config.patience > 0 && self.state.bad_epochs >= self.config.patience {
                    self.state.stopped_early = true;
                }
            }
        }
        if self.objective.has_split(Split::Test) {
            let ev = self.objective.evaluate(&self.model, Split::Test)?;
            for (name, v) in self.objective.report(&ev) {
                observer.metric(epoch, "test", name, v)?;
            }
        }
        observer.epoch_end(&self.state)
    }
}

fn largest_tensor(theta: &FlatParams) -> (&str, f64) {
    let mut best = ("", 0.0);
    for e in theta.index().entries() {
        let m = theta.values()[e.range()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > best.1 || best.0.is_empty() {
            best = (e.name.as_str(), m);
        }
    }
    best
}
