//! Turns a config into token streams or labelled sentences plus a model.

use std::fs;
use std::path::Path;

use sgrnn_core::data::{
    build_vocab, encode_stream, kfold_assignments, parse_classification_tsv, split_by_fraction, tokenize,
    ClassificationData, Vocab,
};
use sgrnn_core::models::{LanguageModel, SentenceClassifier};
use sgrnn_core::SeededRng;

use crate::config::{RunConfig, Task};
use crate::error::{CliError, IoContext, Result};

pub type Labelled = Vec<(usize, Vec<usize>)>;

#[derive(Clone, Debug)]
pub enum Prepared {
    Lm {
        vocab: Vocab,
        train: Vec<usize>,
        valid: Vec<usize>,
        test: Vec<usize>,
    },
    Classify {
        vocab: Vocab,
        labels: Vec<String>,
        train: Labelled,
        valid: Labelled,
        test: Labelled,
        /// Fold of every `data_path` line when cross-validating.
        folds: Option<Vec<usize>>,
    },
}

impl Prepared {
    pub fn vocab(&self) -> &Vocab {
        match self {
            Prepared::Lm { vocab, .. } | Prepared::Classify { vocab, .. } => vocab,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).at(path)
}

fn tsv_file(path: &Path) -> Result<ClassificationData> {
    parse_classification_tsv(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn max_size(cfg: &RunConfig) -> Option<usize> {
    (cfg.vocab_size > 0).then_some(cfg.vocab_size)
}

fn encode_nonempty(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    if tokens.is_empty() {
        Vec::new()
    } else {
        encode_stream(vocab, tokens)
    }
}

/// Loads the data named by `cfg`. A vocabulary is built from the training
/// split unless one is supplied. `rng` draws the fold assignment.
pub fn prepare(cfg: &RunConfig, vocab: Option<Vocab>, rng: &mut SeededRng) -> Result<Prepared> {
    if cfg.task.is_lm() {
        prepare_lm(cfg, vocab)
    } else {
        prepare_classify(cfg, vocab, rng)
    }
}

fn prepare_lm(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Prepared> {
    let level = cfg.task.token_level();
    let (train, valid, test) = if let Some(p) = &cfg.corpus_path {
        let tokens = tokenize(&read(p)?, level);
        split_by_fraction(&tokens, cfg.train_fraction, cfg.valid_fraction)?
    } else {
        let load = |p: &Option<std::path::PathBuf>| -> Result<Vec<String>> {
            Ok(match p {
                Some(p) => tokenize(&read(p)?, level),
                None => Vec::new(),
            })
        };
        (load(&cfg.train_path)?, load(&cfg.valid_path)?, load(&cfg.test_path)?)
    };
    if train.is_empty() {
        return Err(CliError::config("the training split is empty"));
    }
    let vocab = vocab.unwrap_or_else(|| build_vocab(&train, max_size(cfg), cfg.min_count));
    Ok(Prepared::Lm {
        train: encode_nonempty(&vocab, &train),
        valid: encode_nonempty(&vocab, &valid),
        test: encode_nonempty(&vocab, &test),
        vocab,
    })
}

fn relabel(data: ClassificationData, labels: &[String], path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    data.examples
        .into_iter()
        .map(|(l, toks)| {
            let name = &data.labels[l];
            let idx = labels
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| CliError::config(format!("{}: label `{name}` does not occur in the training data", path.display())))?;
            Ok((idx, toks))
        })
        .collect()
}

fn prepare_classify(cfg: &RunConfig, vocab: Option<Vocab>, rng: &mut SeededRng) -> Result<Prepared> {
    type Raw = Vec<(usize, Vec<String>)>;
    let load = |p: &Option<std::path::PathBuf>, labels: &[String]| -> Result<Raw> {
        match p {
            Some(p) => relabel(tsv_file(p)?, labels, p),
            None => Ok(Vec::new()),
        }
    };
    let (labels, train, valid, test, folds): (Vec<String>, Raw, Raw, Raw, _) = match &cfg.data_path {
        Some(path) => {
            let data = tsv_file(path)?;
            let labels = data.labels.clone();
            let all = data.examples;
            if cfg.folds == 0 {
                let valid = load(&cfg.valid_path, &labels)?;
                let test = load(&cfg.test_path, &labels)?;
                (labels, all, valid, test, None)
            } else {
                let assign = kfold_assignments(all.len(), cfg.folds, rng)?;
                let mut parts: [Raw; 3] = Default::default();
                // With an external test file the held-out fold validates;
                // otherwise it tests and the next fold validates.
                let external_test = cfg.test_path.is_some();
                let valid_fold = if external_test { cfg.fold } else { (cfg.fold + 1) % cfg.folds };
                for (ex, &f) in all.into_iter().zip(&assign) {
                    let slot = if f == valid_fold {
                        1
                    } else if f == cfg.fold && !external_test {
                        2
                    } else {
                        0
                    };
                    parts[slot].push(ex);
                }
                let [train, valid, mut test] = parts;
                if external_test {
                    test = load(&cfg.test_path, &labels)?;
                }
                (labels, train, valid, test, Some(assign))
            }
        }
        None => {
            let p = cfg.train_path.as_ref().expect("validated");
            let data = tsv_file(p)?;
            let labels = data.labels.clone();
            let train = relabel(data, &labels, p)?;
            (labels.clone(), train, load(&cfg.valid_path, &labels)?, load(&cfg.test_path, &labels)?, None)
        }
    };
    if train.is_empty() {
        return Err(CliError::config("the training split is empty"));
    }
    let vocab = vocab.unwrap_or_else(|| build_vocab(train.iter().flat_map(|(_, t)| t.iter()), max_size(cfg), cfg.min_count));
    let enc = |raw: Raw| -> Labelled { raw.into_iter().map(|(l, t)| (l, vocab.encode(&t))).collect() };
    Ok(Prepared::Classify {
        train: enc(train),
        valid: enc(valid),
        test: enc(test),
        labels,
        folds,
        vocab,
    })
}

pub fn build_lm(cfg: &RunConfig, vocab: &Vocab, rng: &mut SeededRng) -> Result<LanguageModel> {
    Ok(LanguageModel::new(
        vocab.len(),
        cfg.embed_width(),
        cfg.cell,
        cfg.hidden,
        cfg.layers,
        cfg.init_scale,
        rng,
    )?)
}

pub fn build_classifier(cfg: &RunConfig, vocab: &Vocab, classes: usize, rng: &mut SeededRng) -> Result<SentenceClassifier> {
    Ok(SentenceClassifier::new(
        vocab.len(),
        cfg.embed_width(),
        classes,
        cfg.cell,
        cfg.hidden,
        cfg.layers,
        cfg.bidirectional,
        cfg.init_scale,
        rng,
    )?)
}

/// Splits text into tokens the way the task does.
pub fn tokens_of(task: Task, text: &str) -> Vec<String> {
    tokenize(text, task.token_level())
}
