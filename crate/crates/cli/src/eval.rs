use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use sgrnn_core::data::Vocab;
use sgrnn_core::models::{LanguageModel, SentenceClassifier};
use sgrnn_core::posterior::{average, ensemble_nll, predictive_stats, select_indices, AveragingStrategy, StrategyKind};
use sgrnn_core::train::{classifier_probs, lm_eval_stream, score_class_probs, Split};
use sgrnn_core::{FlatParams, ParamIndex, Parameterized, SeededRng, Tensor2D};

use crate::checkpoint::{list_bank, load_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, IoContext, Result};
use crate::layout::RunLayout;
use crate::task::{build_classifier, build_lm, prepare, Labelled, Prepared};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Sample bank directory; defaults to `<out>/bank`.
    pub bank: Option<PathBuf>,
    pub split: Split,
    /// Score every sample count under all three strategies.
    pub sweep: bool,
    /// Write full predictive rows for this many leading positions (LM).
    pub token_probs: usize,
    /// Write per-example predictive mean and spread (classify).
    pub uncertainty: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bank: None,
            split: Split::Test,
            sweep: false,
            token_probs: 0,
            uncertainty: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// `sample_<i>`, `final`, `best`, or a strategy name.
    pub selection: String,
    pub samples: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub sweep: Vec<EvalRow>,
}

impl EvalReport {
    pub fn value(&self, selection: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.selection == selection && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Scores of one parameter setting on the evaluated split.
enum Scores {
    /// Probability of every target token.
    Lm(Vec<f64>),
    /// Predictive rows, one per example.
    Classify(Tensor2D),
}

enum Evaluator {
    Lm {
        model: LanguageModel,
        ids: Vec<usize>,
        streams: usize,
        unroll: usize,
    },
    Classify {
        model: SentenceClassifier,
        data: Labelled,
        labels: Vec<String>,
    },
}

impl Evaluator {
    fn index(&self) -> Arc<ParamIndex> {
        match self {
            Evaluator::Lm { model, .. } => Arc::new(model.param_index()),
            Evaluator::Classify { model, .. } => Arc::new(model.param_index()),
        }
    }

    fn score(&mut self, theta: &FlatParams) -> Result<Scores> {
        Ok(match self {
            Evaluator::Lm {
                model,
                ids,
                streams,
                unroll,
            } => {
                model.load_flat(theta)?;
                Scores::Lm(lm_eval_stream(model, ids, *streams, *unroll, false)?.target_probs)
            }
            Evaluator::Classify { model, data, .. } => {
                model.load_flat(theta)?;
                Scores::Classify(classifier_probs(model, data)?)
            }
        })
    }

    /// Metrics of the probability-space average of `scores[selected]`.
    fn metrics(&self, scores: &[Scores], selected: &[usize]) -> Result<Vec<(&'static str, f64)>> {
        match self {
            Evaluator::Lm { .. } => {
                let probs: Vec<Vec<f64>> = selected
                    .iter()
                    .map(|&i| match &scores[i] {
                        Scores::Lm(p) => p.clone(),
                        Scores::Classify(_) => unreachable!("scores match the task"),
                    })
                    .collect();
                let all: Vec<usize> = (0..probs.len()).collect();
                let n = probs[0].len();
                let ce = ensemble_nll(&probs, &all)? / n as f64;
                Ok(vec![("cross_entropy", ce), ("perplexity", ce.exp())])
            }
            Evaluator::Classify { data, .. } => {
                let mats: Vec<Tensor2D> = selected
                    .iter()
                    .map(|&i| match &scores[i] {
                        Scores::Classify(t) => t.clone(),
                        Scores::Lm(_) => unreachable!("scores match the task"),
                    })
                    .collect();
                let labels: Vec<usize> = data.iter().map(|(l, _)| *l).collect();
                let ev = score_class_probs(&average(&mats)?, &labels);
                Ok(vec![("nll", ev.mean_nll()), ("error", ev.error.unwrap_or(f64::NAN))])
            }
        }
    }
}

fn split_of<T: Clone>(split: Split, train: &T, valid: &T, test: &T) -> T {
    match split {
        Split::Train => train.clone(),
        Split::Valid => valid.clone(),
        Split::Test => test.clone(),
    }
}

fn read_labels(layout: &RunLayout) -> Result<Vec<String>> {
    let text = fs::read_to_string(layout.labels()).at(layout.labels())?;
    Ok(text.lines().map(String::from).collect())
}

fn load_vocab(layout: &RunLayout) -> Result<Vocab> {
    let text = fs::read_to_string(layout.vocab()).at(layout.vocab())?;
    Ok(Vocab::from_text(&text)?)
}

fn csv_field(s: &str) -> String {
    let s: String = s.escape_debug().collect();
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// Scores the sample bank (and the `final`/`best` checkpoints when present)
/// on one split. Results are printed by the caller and written under
/// `<out>/eval/`.
pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out);
    let vocab = load_vocab(&layout)?;
    let mut master = SeededRng::new(cfg.seed);
    let mut data_rng = master.fork();
    // Architecture only; every parameter is overwritten before use.
    let mut arch_rng = SeededRng::new(0);
    let prepared = prepare(cfg, Some(vocab.clone()), &mut data_rng)?;
    let mut ev = match prepared {
        Prepared::Lm { train, valid, test, .. } => Evaluator::Lm {
            model: build_lm(cfg, &vocab, &mut arch_rng)?,
            ids: split_of(opts.split, &train, &valid, &test),
            streams: cfg.eval_stream_count(),
            unroll: cfg.unroll_len(),
        },
        Prepared::Classify {
            train, valid, test, ..
        } => {
            let labels = read_labels(&layout)?;
            Evaluator::Classify {
                model: build_classifier(cfg, &vocab, labels.len(), &mut arch_rng)?,
                data: split_of(opts.split, &train, &valid, &test),
                labels,
            }
        }
    };
    let empty = match &ev {
        Evaluator::Lm { ids, .. } => ids.is_empty(),
        Evaluator::Classify { data, .. } => data.is_empty(),
    };
    if empty {
        return Err(CliError::usage(format!("the {} split is empty", opts.split.name())));
    }

    let index = ev.index();
    let bank_dir = opts.bank.clone().unwrap_or_else(|| layout.bank());
    let paths = list_bank(&bank_dir)?;
    let mut scores = Vec::with_capacity(paths.len());
    let mut report = EvalReport::default();
    let push = |rows: &mut Vec<EvalRow>, sel: &str, s: usize, m: Vec<(&str, f64)>| {
        for (metric, value) in m {
            rows.push(EvalRow {
                selection: sel.to_string(),
                samples: s,
                metric: metric.to_string(),
                value,
            });
        }
    };

    for (i, p) in paths.iter().enumerate() {
        let ck = load_checkpoint(p, &index)?;
        scores.push(ev.score(&ck.params)?);
        let m = ev.metrics(&scores, &[i])?;
        push(&mut report.rows, &format!("sample_{i}"), 1, m);
    }
    for (name, dir) in [("final", layout.final_checkpoint()), ("best", layout.best())] {
        if dir.is_dir() {
            let ck = load_checkpoint(&dir, &index)?;
            let s = [ev.score(&ck.params)?];
            push(&mut report.rows, name, 1, ev.metrics(&s, &[0])?);
        }
    }
    let k = scores.len();
    if k > 0 {
        let count = if cfg.num_samples == 0 { k } else { cfg.num_samples };
        let strategy = AveragingStrategy {
            kind: cfg.strategy,
            count,
        };
        let selected = select_indices(k, &strategy)?;
        push(&mut report.rows, cfg.strategy.name(), count, ev.metrics(&scores, &selected)?);
        if opts.sweep {
            for kind in StrategyKind::ALL {
                for s in 1..=k {
                    let sel = select_indices(k, &AveragingStrategy { kind, count: s })?;
                    push(&mut report.sweep, kind.name(), s, ev.metrics(&scores, &sel)?);
                }
            }
        }
    }

    let dir = layout.eval_dir();
    fs::create_dir_all(&dir).at(&dir)?;
    let split = opts.split.name();
    let write_rows = |name: &str, header: &str, rows: &[EvalRow]| -> Result<()> {
        let mut text = format!("{header}\n");
        for r in rows {
            writeln!(text, "{},{},{},{}", r.selection, r.samples, r.metric, r.value).expect("string write");
        }
        let path = dir.join(name);
        fs::write(&path, text).at(&path)
    };
    write_rows(&format!("{split}_metrics.csv"), "selection,samples,metric,value", &report.rows)?;
    if opts.sweep {
        write_rows(&format!("{split}_sweep.csv"), "strategy,samples,metric,value", &report.sweep)?;
    }

    if k > 0 && (opts.token_probs > 0 || opts.uncertainty) {
        let count = if cfg.num_samples == 0 { k } else { cfg.num_samples };
        let selected = select_indices(k, &AveragingStrategy { kind: cfg.strategy, count })?;
        match &mut ev {
            Evaluator::Lm { model, ids, unroll, .. } if opts.token_probs > 0 => {
                let n = opts.token_probs.min(ids.len());
                let prefix = &ids[..(n + 1).min(ids.len())];
                let mut per = Vec::new();
                for &i in &selected {
                    let ck = load_checkpoint(&paths[i], &index)?;
                    model.load_flat(&ck.params)?;
                    let probs = lm_eval_stream(model, prefix, 1, *unroll, true)?.probs.expect("requested");
                    per.push(probs);
                }
                let avg = average(&per)?;
                let mut text = String::from("position,input,target,model");
                for t in vocab.tokens() {
                    write!(text, ",{}", csv_field(t)).expect("string write");
                }
                text.push('\n');
                let tok = |id: usize| csv_field(vocab.token(id).unwrap_or("?"));
                for pos in 0..n {
                    let target = prefix.get(pos + 1).copied().unwrap_or(sgrnn_core::data::END_ID);
                    let rows = selected
                        .iter()
                        .zip(&per)
                        .map(|(i, t)| (format!("sample_{i}"), t))
                        .chain(std::iter::once(("average".to_string(), &avg)));
                    for (name, t) in rows {
                        write!(text, "{pos},{},{},{name}", tok(prefix[pos]), tok(target)).expect("string write");
                        for p in t.row(pos) {
                            write!(text, ",{p}").expect("string write");
                        }
                        text.push('\n');
                    }
                }
                let path = dir.join(format!("{split}_token_probs.csv"));
                fs::write(&path, text).at(&path)?;
            }
            Evaluator::Classify { data, labels, .. } if opts.uncertainty => {
                let per: Vec<Tensor2D> = selected
                    .iter()
                    .map(|&i| match &scores[i] {
                        Scores::Classify(t) => t.clone(),
                        Scores::Lm(_) => unreachable!("scores match the task"),
                    })
                    .collect();
                let (mean, std) = predictive_stats(&per)?;
                let mut text = String::from("index,label,predicted");
                for l in labels.iter() {
                    write!(text, ",mean_{}", csv_field(l)).expect("string write");
                }
                for l in labels.iter() {
                    write!(text, ",std_{}", csv_field(l)).expect("string write");
                }
                text.push('\n');
                for (i, (label, _)) in data.iter().enumerate() {
                    let row = mean.row(i);
                    let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                    write!(text, "{i},{},{}", csv_field(&labels[*label]), csv_field(&labels[pred])).expect("string write");
                    for v in row.iter().chain(std.row(i)) {
                        write!(text, ",{v}").expect("string write");
                    }
                    text.push('\n');
                }
                let path = dir.join(format!("{split}_uncertainty.csv"));
                fs::write(&path, text).at(&path)?;
            }
            _ => {}
        }
    }
    Ok(report)
}
