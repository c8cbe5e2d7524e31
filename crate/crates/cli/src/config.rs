//! Flat `key = value` run configuration.
//!
//! Every key can also be given on the command line as `--key value` (with
//! underscores written as hyphens); command-line values win over the file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sgrnn_core::data::{BatchMode, BatchPlan, TokenLevel};
use sgrnn_core::models::{DropoutMode, DropoutSpec, WeightNoise};
use sgrnn_core::posterior::{CollectionPolicy, StrategyKind};
use sgrnn_core::samplers::{Algorithm, HyperParams, Preconditioner, StepSchedule};
use sgrnn_core::CellType;

use crate::error::{CliError, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    CharLm,
    WordLm,
    Classify,
}

impl Task {
    pub fn is_lm(self) -> bool {
        self != Task::Classify
    }

    pub fn token_level(self) -> TokenLevel {
        match self {
            Task::CharLm => TokenLevel::Char,
            _ => TokenLevel::Word,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::CharLm => "char-lm",
            Task::WordLm => "word-lm",
            Task::Classify => "classify",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "char-lm" => Ok(Task::CharLm),
            "word-lm" => Ok(Task::WordLm),
            "classify" => Ok(Task::Classify),
            _ => Err("expected char-lm, word-lm or classify".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    Off,
    Naive,
    DropConnect,
}

impl fmt::Display for DropoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutKind::Off => "off",
            DropoutKind::Naive => "naive",
            DropoutKind::DropConnect => "dropconnect",
        })
    }
}

impl FromStr for DropoutKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(DropoutKind::Off),
            "naive" => Ok(DropoutKind::Naive),
            "dropconnect" => Ok(DropoutKind::DropConnect),
            _ => Err("expected off, naive or dropconnect".into()),
        }
    }
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "char-lm | word-lm | classify"),
    ("train_path", "training text (LM)"),
    ("valid_path", "validation text, or TSV for classify"),
    ("test_path", "test text, or TSV for classify"),
    ("corpus_path", "single LM text split by train_fraction/valid_fraction"),
    ("train_fraction", "share of corpus_path used for training"),
    ("valid_fraction", "share of corpus_path used for validation"),
    ("data_path", "label<TAB>sentence file (classify)"),
    ("folds", "cross-validation folds for data_path; 0 disables"),
    ("fold", "fold held out for testing"),
    ("vocab_size", "largest vocabulary incl. reserved tokens; 0 = unlimited"),
    ("min_count", "rarer tokens map to <unk>"),
    ("cell", "vanilla | lstm | gru"),
    ("layers", "stacked recurrent layers"),
    ("hidden", "units per layer and direction"),
    ("embed", "embedding width; 0 = hidden"),
    ("bidirectional", "bidirectional stack (classify only)"),
    ("init_scale", "uniform(-s, s) initialisation"),
    ("algorithm", "sgd | rmsprop | sgld | psgld"),
    ("step_size", "step size, or a in a(b+t)^-gamma"),
    ("step_b", "b in a(b+t)^-gamma"),
    ("step_gamma", "gamma in a(b+t)^-gamma; 0 = constant"),
    ("beta1", "RMS decay"),
    ("lambda", "preconditioner offset"),
    ("prior_variance", "Gaussian prior variance"),
    ("clip_norm", "clip the likelihood gradient to this norm; 0 = off"),
    ("noise", "inject Langevin noise (samplers)"),
    ("prewarm", "seed the RMS average from the first gradient"),
    ("preconditioner", "rmsprop | identity"),
    ("batch_mode", "successive | random (LM)"),
    ("batch_size", "minibatch size"),
    ("unroll", "BPTT length; 0 = 100 for chars, 20 for words"),
    ("eval_streams", "parallel evaluation streams (LM); 0 = batch_size"),
    ("epochs", "training epochs"),
    ("burn_in", "epochs before the first snapshot"),
    ("thinning", "epochs between snapshots"),
    ("collect", "write posterior snapshots"),
    ("patience", "early-stopping patience in epochs; 0 = off"),
    ("dropout", "off | naive | dropconnect"),
    ("dropout_rate", "probability of dropping a unit or weight"),
    ("weight_noise", "binary | gaussian (dropconnect)"),
    ("seed", "master seed"),
    ("out", "output directory"),
    ("strategy", "forward | backward | thinned (eval)"),
    ("num_samples", "samples averaged at eval; 0 = all"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub data_path: Option<PathBuf>,
    pub folds: usize,
    pub fold: usize,
    pub vocab_size: usize,
    pub min_count: usize,
    pub cell: CellType,
    pub layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub bidirectional: bool,
    pub init_scale: f64,
    pub algorithm: Algorithm,
    pub step_size: f64,
    pub step_b: f64,
    pub step_gamma: f64,
    pub beta1: f64,
    pub lambda: f64,
    pub prior_variance: f64,
    pub clip_norm: f64,
    pub noise: bool,
    pub prewarm: bool,
    pub preconditioner: Preconditioner,
    pub batch_mode: BatchMode,
    pub batch_size: usize,
    pub unroll: usize,
    pub eval_streams: usize,
    pub epochs: usize,
    pub burn_in: f64,
    pub thinning: f64,
    pub collect: bool,
    pub patience: usize,
    pub dropout: DropoutKind,
    pub dropout_rate: f64,
    pub weight_noise: WeightNoise,
    pub seed: u64,
    pub out: PathBuf,
    pub strategy: StrategyKind,
    pub num_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::CharLm,
            train_path: None,
            valid_path: None,
            test_path: None,
            corpus_path: None,
            train_fraction: 0.9,
            valid_fraction: 0.05,
            data_path: None,
            folds: 10,
            fold: 0,
            vocab_size: 0,
            min_count: 1,
            cell: CellType::Lstm,
            layers: 1,
            hidden: 128,
            embed: 0,
            bidirectional: false,
            init_scale: 0.08,
            algorithm: Algorithm::Psgld,
            step_size: 1e-3,
            step_b: 1.0,
            step_gamma: 0.0,
            beta1: 0.99,
            lambda: 1e-8,
            prior_variance: 1.0,
            clip_norm: 0.0,
            noise: true,
            prewarm: true,
            preconditioner: Preconditioner::Rmsprop,
            batch_mode: BatchMode::Successive,
            batch_size: 32,
            unroll: 0,
            eval_streams: 0,
            epochs: 20,
            burn_in: 4.0,
            thinning: 0.5,
            collect: true,
            patience: 3,
            dropout: DropoutKind::Off,
            dropout_rate: 0.5,
            weight_noise: WeightNoise::Binary,
            seed: 1,
            out: PathBuf::from("out"),
            strategy: StrategyKind::Thinned,
            num_samples: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::config(format!("bad value `{value}` for `{key}`: expected true or false"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = parse(key, v)?,
            "train_path" => self.train_path = parse_path(v),
            "valid_path" => self.valid_path = parse_path(v),
            "test_path" => self.test_path = parse_path(v),
            "corpus_path" => self.corpus_path = parse_path(v),
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "valid_fraction" => self.valid_fraction = parse(key, v)?,
            "data_path" => self.data_path = parse_path(v),
            "folds" => self.folds = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "cell" => self.cell = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "bidirectional" => self.bidirectional = parse_bool(key, v)?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "algorithm" => self.algorithm = parse(key, v)?,
            "step_size" => self.step_size = parse(key, v)?,
            "step_b" => self.step_b = parse(key, v)?,
            "step_gamma" => self.step_gamma = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "prior_variance" => self.prior_variance = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "noise" => self.noise = parse_bool(key, v)?,
            "prewarm" => self.prewarm = parse_bool(key, v)?,
            "preconditioner" => {
                self.preconditioner = match v {
                    "rmsprop" => Preconditioner::Rmsprop,
                    "identity" => Preconditioner::Identity,
                    _ => return Err(CliError::config(format!("bad value `{v}` for `{key}`: expected rmsprop or identity"))),
                }
            }
            "batch_mode" => self.batch_mode = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "unroll" => self.unroll = parse(key, v)?,
            "eval_streams" => self.eval_streams = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "burn_in" => self.burn_in = parse(key, v)?,
            "thinning" => self.thinning = parse(key, v)?,
            "collect" => self.collect = parse_bool(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "dropout_rate" => self.dropout_rate = parse(key, v)?,
            "weight_noise" => self.weight_noise = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => {
                self.out = parse_path(v).ok_or_else(|| CliError::config("`out` must not be empty"))?;
            }
            "strategy" => self.strategy = parse(key, v)?,
            "num_samples" => self.num_samples = parse(key, v)?,
            _ => return Err(CliError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.to_string(),
            "train_path" => show_path(&self.train_path),
            "valid_path" => show_path(&self.valid_path),
            "test_path" => show_path(&self.test_path),
            "corpus_path" => show_path(&self.corpus_path),
            "train_fraction" => self.train_fraction.to_string(),
            "valid_fraction" => self.valid_fraction.to_string(),
            "data_path" => show_path(&self.data_path),
            "folds" => self.folds.to_string(),
            "fold" => self.fold.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "min_count" => self.min_count.to_string(),
            "cell" => self.cell.to_string(),
            "layers" => self.layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "embed" => self.embed.to_string(),
            "bidirectional" => self.bidirectional.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "algorithm" => self.algorithm.to_string(),
            "step_size" => self.step_size.to_string(),
            "step_b" => self.step_b.to_string(),
            "step_gamma" => self.step_gamma.to_string(),
            "beta1" => self.beta1.to_string(),
            "lambda" => self.lambda.to_string(),
            "prior_variance" => self.prior_variance.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "noise" => self.noise.to_string(),
            "prewarm" => self.prewarm.to_string(),
            "preconditioner" => match self.preconditioner {
                Preconditioner::Rmsprop => "rmsprop".into(),
                Preconditioner::Identity => "identity".into(),
            },
            "batch_mode" => self.batch_mode.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "unroll" => self.unroll.to_string(),
            "eval_streams" => self.eval_streams.to_string(),
            "epochs" => self.epochs.to_string(),
            "burn_in" => self.burn_in.to_string(),
            "thinning" => self.thinning.to_string(),
            "collect" => self.collect.to_string(),
            "patience" => self.patience.to_string(),
            "dropout" => self.dropout.to_string(),
            "dropout_rate" => self.dropout_rate.to_string(),
            "weight_noise" => self.weight_noise.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "strategy" => self.strategy.to_string(),
            "num_samples" => self.num_samples.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped; a key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                CliError::Config(m) => CliError::config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut c = Self::default();
        c.apply_text(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(c)
    }

    /// Canonical form listing every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::config(m));
        if self.layers == 0 || self.hidden == 0 {
            return fail("layers and hidden must be at least 1".into());
        }
        if !(self.init_scale > 0.0) {
            return fail(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.clip_norm >= 0.0) {
            return fail(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.collect {
            CollectionPolicy::new(self.burn_in, self.thinning)?;
        }
        self.hyper_params(1, 1).validate()?;
        match self.task {
            Task::Classify => {
                if self.data_path.is_none() && (self.train_path.is_none() || self.test_path.is_none()) {
                    return fail("classify needs data_path, or train_path and test_path".into());
                }
                if self.data_path.is_some() && self.folds > 0 && (self.folds < 2 || self.fold >= self.folds) {
                    return fail(format!("need folds >= 2 and fold < folds, got fold {} of {}", self.fold, self.folds));
                }
            }
            _ => {
                if self.bidirectional {
                    return fail("a bidirectional stack cannot be used for language modelling".into());
                }
                if self.corpus_path.is_none() && self.train_path.is_none() {
                    return fail("language modelling needs corpus_path or train_path".into());
                }
                let (t, v) = (self.train_fraction, self.valid_fraction);
                if self.corpus_path.is_some() && !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
                    return fail(format!("bad split fractions {t} / {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn embed_width(&self) -> usize {
        if self.embed == 0 {
            self.hidden
        } else {
            self.embed
        }
    }

    pub fn unroll_len(&self) -> usize {
        match (self.unroll, self.task) {
            (0, Task::CharLm) => 100,
            (0, _) => 20,
            (u, _) => u,
        }
    }

    pub fn eval_stream_count(&self) -> usize {
        if self.eval_streams == 0 {
            self.batch_size
        } else {
            self.eval_streams
        }
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            mode: self.batch_mode,
            batch_size: self.batch_size,
            unroll: self.unroll_len(),
        }
    }

    pub fn step_schedule(&self) -> StepSchedule {
        if self.step_gamma == 0.0 {
            StepSchedule::Constant(self.step_size)
        } else {
            StepSchedule::Polynomial {
                a: self.step_size,
                b: self.step_b,
                gamma: self.step_gamma,
            }
        }
    }

    pub fn hyper_params(&self, batch_size: usize, dataset_size: usize) -> HyperParams {
        HyperParams {
            step_size: self.step_schedule(),
            batch_size,
            dataset_size,
            beta1: self.beta1,
            lambda: self.lambda,
            prior_variance: self.prior_variance,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            noise: self.noise,
            prewarm: self.prewarm,
            preconditioner: self.preconditioner,
        }
    }

    pub fn collection(&self) -> Result<Option<CollectionPolicy>> {
        Ok(if self.collect {
            Some(CollectionPolicy::new(self.burn_in, self.thinning)?)
        } else {
            None
        })
    }

    pub fn dropout_spec(&self) -> Result<DropoutSpec> {
        let keep = 1.0 - self.dropout_rate;
        Ok(match self.dropout {
            DropoutKind::Off => DropoutSpec::OFF,
            DropoutKind::Naive => DropoutSpec::new(DropoutMode::Naive, keep)?,
            DropoutKind::DropConnect => DropoutSpec::new(DropoutMode::DropConnect(self.weight_noise), keep)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut c = RunConfig::default();
        c.set("task", "word-lm").unwrap();
        c.set("train_path", "a/b.txt").unwrap();
        c.set("step_size", "0.000125").unwrap();
        c.set("preconditioner", "identity").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut e = c.clone();
            e.set(k, &v).unwrap();
            assert_eq!(e, c, "{k}");
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 3\nlearning_rate = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2: unknown key `learning_rate`"), "{err}");
        let err = c.apply_text("seed = 3\nseed = 4\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        assert!(c.apply_text("seed 3\n").is_err());
        assert!(c.set("algorithm", "adam").is_err());
    }

    #[test]
    fn comments_and_derived_values() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\ntask = word-lm\nclip_norm = 5\ndropout = naive\n").unwrap();
        assert_eq!(c.unroll_len(), 20);
        assert_eq!(c.hyper_params(2, 10).clip_norm, Some(5.0));
        assert_eq!(c.dropout_spec().unwrap().keep, 0.5);
        assert_eq!(c.eval_stream_count(), c.batch_size);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_err(), "no data paths");
        c.corpus_path = Some("x.txt".into());
        c.validate().unwrap();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c.dropout_rate = 0.5;
        c.bidirectional = true;
        assert!(c.validate().is_err());
        c.task = Task::Classify;
        c.data_path = Some("d.tsv".into());
        c.validate().unwrap();
        c.fold = 10;
        assert!(c.validate().is_err());
    }
}
