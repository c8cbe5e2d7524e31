use crate::data::{plan_random, plan_successive, Batch, BatchMode, BatchPlan};
use crate::error::{Error, Result};
use crate::models::{
    classifier_loss_and_grad, classifier_predict, lm_batch_eval, lm_batch_loss_and_grad, DropoutSpec,
    LanguageModel, LmBatch, SentenceClassifier,
};
use crate::numerics::{SeededRng, Tensor2D};
use crate::params::{FlatParams, Parameterized};
use crate::rnn::StepState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Likelihood gradient summed over one minibatch.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub nll: f64,
    /// Tokens (LM) or sentences (classifier) scored.
    pub count: usize,
    /// Data items behind the sum, the `M` of the `N/M` scaling.
    pub items: usize,
    pub grad: FlatParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitEval {
    pub nll: f64,
    pub count: usize,
    /// Classification error rate; `None` for language models.
    pub error: Option<f64>,
}

impl SplitEval {
    pub fn mean_nll(&self) -> f64 {
        self.nll / self.count as f64
    }
}

/// A training task: its data, minibatch schedule and evaluation.
pub trait Objective {
    type Model: Parameterized + Clone;

    /// Number of data items `N`.
    fn dataset_size(&self) -> usize;
    /// Nominal minibatch size `M`.
    fn batch_size(&self) -> usize;
    /// Prepares the epoch's minibatch order and returns the number of batches.
    fn begin_epoch(&mut self, rng: &mut SeededRng) -> Result<usize>;
    fn batch_grad(
        &mut self,
        model: &Self::Model,
        k: usize,
        dropout: &DropoutSpec,
        rng: &mut SeededRng,
    ) -> Result<BatchGrad>;
    fn has_split(&self, split: Split) -> bool;
    fn evaluate(&self, model: &Self::Model, split: Split) -> Result<SplitEval>;
    /// Names and values of the metrics reported for an evaluated split.
    fn report(&self, eval: &SplitEval) -> Vec<(&'static str, f64)>;
    /// Lower is better; drives early stopping.
    fn selection_score(&self, eval: &SplitEval) -> f64;
}

/// Next-token prediction over token-id streams.
#[derive(Clone, Debug)]
pub struct LmObjective {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub plan: BatchPlan,
    /// Parallel streams used for evaluation.
    pub eval_streams: usize,
    batches: Vec<Batch>,
    windows: usize,
    carry: Option<StepState>,
}

impl LmObjective {
    pub fn new(train: Vec<usize>, valid: Vec<usize>, test: Vec<usize>, plan: BatchPlan, eval_streams: usize) -> Result<Self> {
        let (batches, windows) = match plan.mode {
            BatchMode::Successive => {
                let p = plan_successive(&train, &plan)?;
                let w = p.batches.len() * plan.batch_size;
                (p.batches, w)
            }
            BatchMode::Random => {
                let w = train.len() / plan.unroll;
                if w < plan.batch_size {
                    return Err(Error::invalid(format!(
                        "{w} training windows cannot fill a minibatch of {}",
                        plan.batch_size
                    )));
                }
                (Vec::new(), w)
            }
        };
        if eval_streams == 0 {
            return Err(Error::invalid("eval streams must be at least 1"));
        }
        Ok(Self {
            train,
            valid,
            test,
            plan,
            eval_streams,
            batches,
            windows,
            carry: None,
        })
    }

    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Result of scoring a token stream in parallel sub-streams.
#[derive(Clone, Debug)]
pub struct StreamEval {
    pub nll: f64,
    /// Position in the stream of each scored input token, in scoring order.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_probs: Vec<f64>,
    /// Full predictive rows, aligned with `positions`, when requested.
    pub probs: Option<Tensor2D>,
}

/// Splits `ids` into `streams` contiguous pieces of equal length (dropping
/// fewer than `streams` trailing tokens), runs them side by side in chunks
/// of `unroll` steps with carried state, and scores every next token.
pub fn lm_eval_stream(
    model: &LanguageModel,
    ids: &[usize],
    streams: usize,
    unroll: usize,
    keep_full_probs: bool,
) -> Result<StreamEval> {
    if unroll == 0 || streams == 0 {
        return Err(Error::invalid("streams and unroll must be at least 1"));
    }
    let streams = streams.min(ids.len().max(1));
    let len = ids.len() / streams;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let target_of = |i: usize| ids.get(i + 1).copied().unwrap_or(crate::data::END_ID);
    let mut out = StreamEval {
        nll: 0.0,
        positions: Vec::with_capacity(len * streams),
        targets: Vec::with_capacity(len * streams),
        target_probs: Vec::with_capacity(len * streams),
        probs: None,
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut state: Option<StepState> = None;
    let mut start = 0;
    while start < len {
        let steps = unroll.min(len - start);
        let mut inputs = Vec::with_capacity(steps * streams);
        let mut targets = Vec::with_capacity(steps * streams);
        let mut positions = Vec::with_capacity(steps * streams);
        for j in 0..steps {
            for s in 0..streams {
                let i = s * len + start + j;
                inputs.push(ids[i]);
                targets.push(target_of(i));
                positions.push(i);
            }
        }
        let b = LmBatch {
            inputs: &inputs,
            targets: &targets,
            steps,
            batch: streams,
        };
        let ev = lm_batch_eval(model, &b, state.as_ref(), keep_full_probs)?;
        out.nll += ev.nll_sum;
        out.positions.extend(positions);
        out.targets.extend(targets);
        out.target_probs.extend(ev.target_probs);
        if let Some(p) = ev.probs {
            rows.extend_from_slice(p.as_slice());
        }
        state = Some(ev.final_state);
        start += steps;
    }
    if keep_full_probs {
        let n = out.positions.len();
        out.probs = Some(Tensor2D::new(n, model.vocab_size(), rows)?);
    }
    Ok(out)
}

impl Objective for LmObjective {
    type Model = LanguageModel;

    fn dataset_size(&self) -> usize {
        self.windows
    }

    fn batch_size(&self) -> usize {
        self.plan.batch_size
    }

    fn begin_epoch(&mut self, rng: &mut SeededRng) -> Result<usize> {
        if self.plan.mode == BatchMode::Random {
            self.batches = plan_random(&self.train, &self.plan, rng)?;
        }
        self.carry = None;
        Ok(self.batches.len())
    }

    fn batch_grad(
        &mut self,
        model: &LanguageModel,
        k: usize,
        dropout: &DropoutSpec,
        rng: &mut SeededRng,
    ) -> Result<BatchGrad> {
        let batch = self
            .batches
            .get(k)
            .ok_or_else(|| Error::invalid(format!("batch {k} out of range")))?;
        let init = if batch.reset_state { None } else { self.carry.as_ref() };
        let b = LmBatch {
            inputs: &batch.inputs,
            targets: &batch.targets,
            steps: batch.steps,
            batch: batch.batch,
        };
        let out = lm_batch_loss_and_grad(model, &b, init, dropout, rng)?;
        let items = batch.batch;
        self.carry = (self.plan.mode == BatchMode::Successive).then_some(out.final_state);
        Ok(BatchGrad {
            nll: out.nll_sum,
            count: out.token_count,
            items,
            grad: out.grads,
        })
    }

    fn has_split(&self, split: Split) -> bool {
        !self.split_ids(split).is_empty()
    }

    fn evaluate(&self, model: &LanguageModel, split: Split) -> Result<SplitEval> {
        let ev = lm_eval_stream(model, self.split_ids(split), self.eval_streams, self.plan.unroll, false)?;
        Ok(SplitEval {
            nll: ev.nll,
            count: ev.target_probs.len(),
            error: None,
        })
    }

    fn report(&self, eval: &SplitEval) -> Vec<(&'static str, f64)> {
        let ce = eval.mean_nll();
        vec![("cross_entropy", ce), ("perplexity", ce.exp())]
    }

    fn selection_score(&self, eval: &SplitEval) -> f64 {
        eval.mean_nll()
    }
}

/// Sentence classification; one item per sentence.
#[derive(Clone, Debug)]
pub struct ClassifierObjective {
    pub train: Vec<(usize, Vec<usize>)>,
    pub valid: Vec<(usize, Vec<usize>)>,
    pub test: Vec<(usize, Vec<usize>)>,
    pub batch_size: usize,
    order: Vec<usize>,
}

impl ClassifierObjective {
    pub fn new(
        train: Vec<(usize, Vec<usize>)>,
        valid: Vec<(usize, Vec<usize>)>,
        test: Vec<(usize, Vec<usize>)>,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > train.len() {
            return Err(Error::invalid(format!(
                "need 1 <= batch size <= {} training sentences, got {batch_size}",
                train.len()
            )));
        }
        Ok(Self {
            train,
            valid,
            test,
            batch_size,
            order: Vec::new(),
        })
    }

    pub fn split(&self, split: Split) -> &[(usize, Vec<usize>)] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Class distributions for each sentence, one row per sentence.
pub fn classifier_probs(model: &SentenceClassifier, data: &[(usize, Vec<usize>)]) -> Result<Tensor2D> {
    let mut rows = Vec::with_capacity(data.len() * model.num_classes());
    for (_, tokens) in data {
        rows.extend(classifier_predict(model, tokens)?);
    }
    Tensor2D::new(data.len(), model.num_classes(), rows)
}

/// Summed NLL and error rate of probability rows against labels.
pub fn score_class_probs(probs: &Tensor2D, labels: &[usize]) -> SplitEval {
    let mut nll = 0.0;
    let mut wrong = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row(r);
        nll -= row[y].ln();
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best != y {
            wrong += 1;
        }
    }
    SplitEval {
        nll,
        count: labels.len(),
        error: Some(wrong as f64 / labels.len().max(1) as f64),
    }
}

impl Objective for ClassifierObjective {
    type Model = SentenceClassifier;

    fn dataset_size(&self) -> usize {
        self.train.len()
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn begin_epoch(&mut self, rng: &mut SeededRng) -> Result<usize> {
        self.order = (0..self.train.len()).collect();
        rng.shuffle(&mut self.order);
        Ok(self.train.len().div_ceil(self.batch_size))
    }

    fn batch_grad(
        &mut self,
        model: &SentenceClassifier,
        k: usize,
        dropout: &DropoutSpec,
        rng: &mut SeededRng,
    ) -> Result<BatchGrad> {
        let lo = k * self.batch_size;
        let hi = (lo + self.batch_size).min(self.order.len());
        if lo >= hi {
            return Err(Error::invalid(format!("batch {k} out of range")));
        }
        let mut grad: Option<FlatParams> = None;
        let mut nll = 0.0;
        for &i in &self.order[lo..hi] {
            let (label, tokens) = &self.train[i];
            let out = classifier_loss_and_grad(model, tokens, *label, dropout, rng)?;
            nll += out.nll;
            match grad.as_mut() {
                None => grad = Some(out.grads),
                Some(g) => {
                    for (a, b) in g.values_mut().iter_mut().zip(out.grads.values()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(BatchGrad {
            nll,
            count: hi - lo,
            items: hi - lo,
            grad: grad.expect("nonempty batch"),
        })
    }

    fn has_split(&self, split: Split) -> bool {
        !self.split(split).is_empty()
    }

    fn evaluate(&self, model: &SentenceClassifier, split: Split) -> Result<SplitEval> {
        let data = self.split(split);
        let probs = classifier_probs(model, data)?;
        let labels: Vec<usize> = data.iter().map(|(y, _)| *y).collect();
        Ok(score_class_probs(&probs, &labels))
    }

    fn report(&self, eval: &SplitEval) -> Vec<(&'static str, f64)> {
        vec![("nll", eval.mean_nll()), ("error", eval.error.unwrap_or(f64::NAN))]
    }

    fn selection_score(&self, eval: &SplitEval) -> f64 {
        eval.error.unwrap_or_else(|| eval.mean_nll())
    }
}
