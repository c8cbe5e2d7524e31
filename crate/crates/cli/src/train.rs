use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use sgrnn_core::posterior::CollectionPolicy;
use sgrnn_core::samplers::Sampler;
use sgrnn_core::train::{BestState, ClassifierObjective, LmObjective, Objective, TrainConfig, TrainObserver, TrainState, Trainer};
use sgrnn_core::{Parameterized, SeededRng};

use crate::checkpoint::{load_checkpoint, sample_dir, save_checkpoint, Checkpoint, Progress};
use crate::config::RunConfig;
use crate::error::{CliError, IoContext, Result};
use crate::layout::RunLayout;
use crate::metrics::MetricsWriter;
use crate::task::{build_classifier, build_lm, prepare, Prepared};

const SAMPLER_V: &str = "sampler.v";

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue the run found in the output directory.
    pub resume: bool,
    /// Stop (resumably) once this many epochs have completed.
    pub stop_after: Option<usize>,
    /// Echo metric rows to stderr as they are written.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs_completed: usize,
    pub finished: bool,
    pub stopped_early: bool,
    pub samples_collected: usize,
    /// Last reported value per `split/metric`.
    pub last_metrics: BTreeMap<String, f64>,
}

/// Holds `<out>/LOCK` for the lifetime of a training process.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).at(&path)?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::usage(format!(
                "{} exists: another training process owns this output directory (delete the file if that process is gone)",
                path.display()
            ))),
            Err(e) => Err(e).at(path),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn core_io(e: CliError) -> sgrnn_core::Error {
    sgrnn_core::Error::Io(std::io::Error::other(e.to_string()))
}

struct RunObserver<'a> {
    layout: &'a RunLayout,
    algorithm: String,
    metrics: MetricsWriter,
    last: BTreeMap<String, f64>,
    verbose: bool,
}

impl RunObserver<'_> {
    fn snapshot(&self, state: &TrainState, epoch: f64, progress: Option<Progress>) -> Checkpoint {
        Checkpoint {
            algorithm: self.algorithm.clone(),
            epoch,
            step: state.sampler.state.step,
            rng: state.rng.state(),
            params: state.theta.clone(),
            extra: Vec::new(),
            progress,
        }
    }
}

impl TrainObserver for RunObserver<'_> {
    fn metric(&mut self, epoch: usize, split: &str, name: &str, value: f64) -> sgrnn_core::Result<()> {
        self.last.insert(format!("{split}/{name}"), value);
        if self.verbose {
            eprintln!("epoch {epoch:>3}  {split:<5}  {name:<13} {value:.6}");
        }
        self.metrics.write(epoch, split, name, value).map_err(core_io)
    }

    fn sample(&mut self, index: usize, stamp: f64, state: &TrainState) -> sgrnn_core::Result<()> {
        save_checkpoint(&sample_dir(&self.layout.bank(), index), &self.snapshot(state, stamp, None)).map_err(core_io)
    }

    fn epoch_end(&mut self, state: &TrainState) -> sgrnn_core::Result<()> {
        if let Some(best) = &state.best {
            if best.epoch == state.epoch {
                let ck = self.snapshot(state, state.epoch as f64, None);
                save_checkpoint(&self.layout.best(), &ck).map_err(core_io)?;
            }
        }
        let mut ck = self.snapshot(state, state.epoch as f64, Some(progress_of(state)));
        ck.extra.push((SAMPLER_V.into(), state.sampler.state.v.clone()));
        save_checkpoint(&self.layout.state(), &ck).map_err(core_io)
    }
}

fn progress_of(state: &TrainState) -> Progress {
    Progress {
        epoch: state.epoch,
        collected: state.collected,
        last_stamp: state.last_stamp,
        best_score: state.best.as_ref().map(|b| b.score),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        bad_epochs: state.bad_epochs,
        stopped_early: state.stopped_early,
    }
}

fn restore_state<O: Objective>(
    layout: &RunLayout,
    model: &O::Model,
    objective: &O,
    config: &TrainConfig,
) -> Result<TrainState> {
    let index = std::sync::Arc::new(model.param_index());
    let dir = layout.state();
    let ck = load_checkpoint(&dir, &index)?;
    let progress = ck
        .progress
        .clone()
        .ok_or_else(|| CliError::checkpoint(&dir, "no training progress recorded"))?;
    let v = ck
        .extra(SAMPLER_V)
        .ok_or_else(|| CliError::checkpoint(&dir, format!("missing `{SAMPLER_V}`")))?
        .to_vec();
    let mut hp = config.hp;
    hp.batch_size = objective.batch_size();
    hp.dataset_size = objective.dataset_size();
    let mut sampler = Sampler::new(config.algorithm, hp, index.total())?;
    if v.len() != index.total() {
        return Err(CliError::checkpoint(&dir, "sampler state has the wrong length"));
    }
    sampler.state.v = v;
    sampler.state.step = ck.step;
    let best = match (progress.best_score, progress.best_epoch) {
        (Some(score), Some(epoch)) => Some(BestState {
            score,
            epoch,
            params: load_checkpoint(&layout.best(), &index)?.params,
        }),
        _ => None,
    };
    Ok(TrainState {
        theta: ck.params,
        sampler,
        rng: SeededRng::from_state(ck.rng)?,
        epoch: progress.epoch,
        collected: progress.collected,
        last_stamp: progress.last_stamp,
        best,
        bad_epochs: progress.bad_epochs,
        stopped_early: progress.stopped_early,
    })
}

/// Trains as configured, writing everything under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out);
    fs::create_dir_all(layout.root()).at(layout.root())?;
    let _lock = OutputLock::acquire(layout.lock())?;

    let cfg_text = cfg.to_text();
    if opts.resume {
        let saved = fs::read_to_string(layout.config()).at(layout.config())?;
        if saved != cfg_text {
            return Err(CliError::config(format!(
                "configuration differs from the one recorded in {}",
                layout.config().display()
            )));
        }
        if !layout.state().is_dir() {
            return Err(CliError::usage(format!("nothing to resume in {}", layout.root().display())));
        }
    } else if layout.config().exists() {
        return Err(CliError::usage(format!(
            "{} already holds a run; pass --resume or choose another output directory",
            layout.root().display()
        )));
    }

    let mut master = SeededRng::new(cfg.seed);
    let mut data_rng = master.fork();
    let mut init_rng = master.fork();
    let train_rng = master.fork();
    let prepared = prepare(cfg, None, &mut data_rng)?;

    if !opts.resume {
        fs::write(layout.config(), &cfg_text).at(layout.config())?;
        fs::write(layout.vocab(), prepared.vocab().to_text()).at(layout.vocab())?;
        if let Prepared::Classify { folds, labels, .. } = &prepared {
            fs::write(layout.labels(), labels.join("\n") + "\n").at(layout.labels())?;
            if let Some(folds) = folds {
                let text: String = folds.iter().map(|f| format!("{f}\n")).collect();
                fs::write(layout.folds(), text).at(layout.folds())?;
            }
        }
        if layout.bank().exists() {
            fs::remove_dir_all(layout.bank()).at(layout.bank())?;
        }
    }

    let config = TrainConfig {
        algorithm: cfg.algorithm,
        hp: cfg.hyper_params(1, 1),
        epochs: cfg.epochs,
        collection: cfg.collection()?,
        dropout: cfg.dropout_spec()?,
        patience: cfg.patience,
    };
    match prepared {
        Prepared::Lm { vocab, train, valid, test } => {
            let model = build_lm(cfg, &vocab, &mut init_rng)?;
            let objective = LmObjective::new(train, valid, test, cfg.batch_plan(), cfg.eval_stream_count())?;
            drive(cfg, &layout, opts, objective, model, config, train_rng)
        }
        Prepared::Classify {
            vocab,
            labels,
            train,
            valid,
            test,
            ..
        } => {
            let model = build_classifier(cfg, &vocab, labels.len(), &mut init_rng)?;
            let objective = ClassifierObjective::new(train, valid, test, cfg.batch_size)?;
            drive(cfg, &layout, opts, objective, model, config, train_rng)
        }
    }
}

fn drive<O: Objective>(
    cfg: &RunConfig,
    layout: &RunLayout,
    opts: TrainOptions,
    objective: O,
    model: O::Model,
    config: TrainConfig,
    rng: SeededRng,
) -> Result<TrainReport> {
    let (mut trainer, metrics) = if opts.resume {
        let state = restore_state(layout, &model, &objective, &config)?;
        remove_samples_from(&layout.bank(), state.collected)?;
        let metrics = MetricsWriter::resume(&layout.metrics(), state.epoch)?;
        (Trainer::resume(objective, model, config, state)?, metrics)
    } else {
        (Trainer::new(objective, model, config, rng)?, MetricsWriter::create(&layout.metrics())?)
    };
    let mut observer = RunObserver {
        layout,
        algorithm: cfg.algorithm.to_string(),
        metrics,
        last: BTreeMap::new(),
        verbose: opts.verbose,
    };
    trainer.run(&mut observer, opts.stop_after)?;

    let state = trainer.state();
    let report = TrainReport {
        epochs_completed: state.epoch,
        finished: trainer.finished(),
        stopped_early: state.stopped_early,
        samples_collected: state.collected,
        last_metrics: observer.last.clone(),
    };
    if report.finished {
        let ck = observer.snapshot(state, state.epoch as f64, None);
        save_checkpoint(&layout.final_checkpoint(), &ck)?;
        let expected = trainer
            .config()
            .collection
            .map(|p: CollectionPolicy| p.replay(cfg.epochs as f64));
        let summary = json!({
            "task": cfg.task.to_string(),
            "algorithm": cfg.algorithm.to_string(),
            "seed": cfg.seed,
            "epochs_completed": state.epoch,
            "stopped_early": state.stopped_early,
            "samples_collected": state.collected,
            "samples_scheduled": expected,
            "best_epoch": state.best.as_ref().map(|b| b.epoch),
            "best_valid_score": state.best.as_ref().map(|b| b.score),
            "sampler_steps": state.sampler.state.step,
            "final_metrics": report.last_metrics,
        });
        let text = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
        fs::write(layout.summary(), text).at(layout.summary())?;
    }
    Ok(report)
}

/// Deletes snapshots numbered `from` and above, left by an interrupted run.
fn remove_samples_from(bank: &Path, from: usize) -> Result<()> {
    let mut i = from;
    loop {
        let d = sample_dir(bank, i);
        if !d.exists() {
            return Ok(());
        }
        fs::remove_dir_all(&d).at(&d)?;
        i += 1;
    }
}
