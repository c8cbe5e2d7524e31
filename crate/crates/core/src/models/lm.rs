use super::{
    apply_dropconnect, apply_mask, decode, decode_backward, dropout_mask, embed_lookup, embed_scatter,
    mask_gradients, softmax_nll, DropoutMasks, DropoutMode, DropoutSpec,
};
use crate::data::{END_ID, START_ID};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, SeededRng, Tensor2D};
use crate::params::{FlatParams, Parameterized};
use crate::rnn::{backward_sequence, forward_sequence, CellType, RnnStack, SeqTensor, StepState};

/// Embedding → unidirectional stack → softmax over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub embedding: Tensor2D,
    pub stack: RnnStack,
    pub decoder_w: Tensor2D,
    pub decoder_b: Tensor2D,
}

impl LanguageModel {
    /// Weights uniform in `[-init_scale, init_scale]`, biases zero.
    pub fn new(
        vocab: usize,
        embed: usize,
        cell: CellType,
        hidden: usize,
        layers: usize,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if vocab == 0 || embed == 0 {
            return Err(Error::invalid("vocabulary and embedding sizes must be nonzero"));
        }
        let mut uniform = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.uniform(-init_scale, init_scale)).collect();
            Tensor2D::new(r, c, data).expect("shape")
        };
        let embedding = uniform(vocab, embed);
        let decoder_w = uniform(vocab, hidden);
        let stack = RnnStack::new(cell, embed, hidden, layers, false, init_scale, rng)?;
        Ok(Self {
            embedding,
            stack,
            decoder_w,
            decoder_b: Tensor2D::zeros(1, vocab),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    fn check(&self) -> Result<()> {
        let v = self.vocab_size();
        if self.embedding.cols() != self.stack.input_size()
            || self.decoder_w.shape() != (v, self.stack.output_size())
            || self.decoder_b.shape() != (1, v)
        {
            return Err(Error::shape(
                "LanguageModel",
                format!("embedding {v}x{}, decoder {v}x{}", self.stack.input_size(), self.stack.output_size()),
                format!(
                    "embedding {:?}, decoder {:?}, bias {:?}",
                    self.embedding.shape(),
                    self.decoder_w.shape(),
                    self.decoder_b.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl Parameterized for LanguageModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D)) {
        f("embedding", &self.embedding);
        self.stack.visit_params(f);
        f("decoder.V", &self.decoder_w);
        f("decoder.b", &self.decoder_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D)) {
        f("embedding", &mut self.embedding);
        self.stack.visit_params_mut(f);
        f("decoder.V", &mut self.decoder_w);
        f("decoder.b", &mut self.decoder_b);
    }
}

/// `batch` parallel sequences of `steps` tokens, time-major: position
/// `t·batch + b` holds step `t` of sequence `b`.
#[derive(Clone, Copy, Debug)]
pub struct LmBatch<'a> {
    pub inputs: &'a [usize],
    pub targets: &'a [usize],
    pub steps: usize,
    pub batch: usize,
}

impl LmBatch<'_> {
    fn check(&self) -> Result<()> {
        let n = self.steps * self.batch;
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if self.inputs.len() != n || self.targets.len() != n {
            return Err(Error::shape(
                "LmBatch",
                format!("{n} inputs and targets"),
                format!("{} inputs, {} targets", self.inputs.len(), self.targets.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LmOutput {
    pub nll_sum: f64,
    pub token_count: usize,
    /// Gradient of `nll_sum`, in the model's flattening order.
    pub grads: FlatParams,
    pub final_state: StepState,
    /// Predictive distribution at every position (rows follow the batch layout).
    pub probs: Tensor2D,
    pub masks: DropoutMasks,
}

#[derive(Clone, Debug)]
pub struct LmEval {
    pub nll_sum: f64,
    pub token_count: usize,
    /// Probability assigned to each target, in batch layout.
    pub target_probs: Vec<f64>,
    pub probs: Option<Tensor2D>,
    pub final_state: StepState,
}

/// Summed next-token NLL of a batch and its exact gradient.
pub fn lm_batch_loss_and_grad(
    model: &LanguageModel,
    batch: &LmBatch,
    init: Option<&StepState>,
    dropout: &DropoutSpec,
    rng: &mut SeededRng,
) -> Result<LmOutput> {
    model.check()?;
    batch.check()?;
    let n = batch.steps * batch.batch;
    let mut masks = DropoutMasks::default();

    let noisy;
    let m = match dropout.mode {
        DropoutMode::DropConnect(noise) => {
            let (mm, w) = apply_dropconnect(model, noise, dropout.keep, rng)?;
            masks.weights = w;
            noisy = mm;
            &noisy
        }
        _ => model,
    };
    let naive = dropout.mode == DropoutMode::Naive;

    let mut x = embed_lookup(&m.embedding, batch.inputs)?;
    if naive {
        let mask = dropout_mask(rng, n, x.cols(), dropout.keep)?;
        apply_mask(&mut x, &mask);
        masks.embedding = Some(mask);
    }
    let seq = forward_sequence(&m.stack, &SeqTensor::new(batch.steps, batch.batch, x)?, init)?;
    let mut h = seq.output.into_values();
    if naive {
        let mask = dropout_mask(rng, n, h.cols(), dropout.keep)?;
        apply_mask(&mut h, &mask);
        masks.decoder_input = Some(mask);
    }
    let mut probs = decode(&h, &m.decoder_w, &m.decoder_b);
    let nll_sum = softmax_nll(&mut probs, batch.targets)?;

    let (dv, db, mut dh) = decode_backward(&probs, batch.targets, &h, &m.decoder_w);
    if let Some(mask) = &masks.decoder_input {
        apply_mask(&mut dh, mask);
    }
    let sg = backward_sequence(&m.stack, &seq.cache, &SeqTensor::new(batch.steps, batch.batch, dh)?, None)?;
    let mut dx = sg.inputs.into_values();
    if let Some(mask) = &masks.embedding {
        apply_mask(&mut dx, mask);
    }
    let mut de = Tensor2D::zeros(m.embedding.rows(), m.embedding.cols());
    embed_scatter(&mut de, batch.inputs, &dx);

    let mut g = LanguageModel {
        embedding: de,
        stack: sg.params,
        decoder_w: dv,
        decoder_b: db,
    };
    mask_gradients(&mut g, &masks.weights);

    Ok(LmOutput {
        nll_sum,
        token_count: n,
        grads: g.flatten(),
        final_state: seq.final_state,
        probs,
        masks,
    })
}

/// Single-sequence form: predicts `tokens[1..]` followed by END.
pub fn lm_loss_and_grad(
    model: &LanguageModel,
    tokens: &[usize],
    init: Option<&StepState>,
    dropout: &DropoutSpec,
    rng: &mut SeededRng,
) -> Result<LmOutput> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let targets: Vec<usize> = tokens[1..].iter().copied().chain([END_ID]).collect();
    let b = LmBatch {
        inputs: tokens,
        targets: &targets,
        steps: tokens.len(),
        batch: 1,
    };
    lm_batch_loss_and_grad(model, &b, init, dropout, rng)
}

/// Forward pass only, with weights used as-is.
pub fn lm_batch_eval(
    model: &LanguageModel,
    batch: &LmBatch,
    init: Option<&StepState>,
    keep_full_probs: bool,
) -> Result<LmEval> {
    model.check()?;
    batch.check()?;
    let x = embed_lookup(&model.embedding, batch.inputs)?;
    let seq = forward_sequence(&model.stack, &SeqTensor::new(batch.steps, batch.batch, x)?, init)?;
    let mut probs = decode(seq.output.values(), &model.decoder_w, &model.decoder_b);
    let nll_sum = softmax_nll(&mut probs, batch.targets)?;
    let target_probs = batch.targets.iter().enumerate().map(|(r, &t)| probs.get(r, t)).collect();
    Ok(LmEval {
        nll_sum,
        token_count: batch.targets.len(),
        target_probs,
        probs: keep_full_probs.then_some(probs),
        final_state: seq.final_state,
    })
}

/// Samples up to `max_len` tokens after `prefix` (START when empty),
/// stopping early at END. Temperature 0 selects the most probable token.
pub fn generate(
    model: &LanguageModel,
    prefix: &[usize],
    max_len: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    model.check()?;
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    let start = [START_ID];
    let prefix = if prefix.is_empty() { &start[..] } else { prefix };
    let x = embed_lookup(&model.embedding, prefix)?;
    let seq = forward_sequence(&model.stack, &SeqTensor::new(prefix.len(), 1, x)?, None)?;
    let mut state = seq.final_state;
    let mut h = seq.output.step(prefix.len() - 1);
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = decode(&h, &model.decoder_w, &model.decoder_b);
        let row = logits.row(0);
        let next = if temperature == 0.0 {
            argmax(row)
        } else {
            let mut p: Vec<f64> = row.iter().map(|l| l / temperature).collect();
            softmax_in_place(&mut p);
            sample_categorical(&p, rng)
        };
        if next == END_ID {
            break;
        }
        out.push(next);
        let x = embed_lookup(&model.embedding, &[next])?;
        let step = forward_sequence(&model.stack, &SeqTensor::new(1, 1, x)?, Some(&state))?;
        state = step.final_state;
        h = step.output.step(0);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(p: &[f64], rng: &mut SeededRng) -> usize {
    let u = rng.uniform01();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::WeightNoise;

    fn model(cell: CellType, layers: usize, seed: u64) -> LanguageModel {
        let mut rng = SeededRng::new(seed);
        let mut m = LanguageModel::new(7, 5, cell, 6, layers, 0.5, &mut rng).unwrap();
        m.visit_params_mut(&mut |_, t| {
            if t.rows() == 1 {
                for v in t.as_mut_slice() {
                    *v = rng.uniform(-0.2, 0.2);
                }
            }
        });
        m
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let mut m = model(CellType::Lstm, 1, 1);
        m.decoder_w = Tensor2D::zeros(7, 6);
        m.decoder_b = Tensor2D::zeros(1, 7);
        let tokens = [0, 3, 4, 6, 2];
        let out = lm_loss_and_grad(&m, &tokens, None, &DropoutSpec::OFF, &mut SeededRng::new(0)).unwrap();
        assert!((out.nll_sum - 5.0 * 7f64.ln()).abs() < 1e-9);
        assert_eq!(out.token_count, 5);
        for r in 0..out.probs.rows() {
            assert!((out.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn fd_check(m: &LanguageModel, tokens: &[usize], dropout: DropoutSpec) {
        let out = lm_loss_and_grad(m, tokens, None, &dropout, &mut SeededRng::new(9)).unwrap();
        let flat = m.flatten();
        let eps = 1e-5;
        for i in 0..flat.len() {
            let f = |delta: f64| {
                let mut p = flat.clone();
                p.values_mut()[i] += delta;
                let mut mm = m.clone();
                mm.load_flat(&p).unwrap();
                // Same seed replays the same masks.
                lm_loss_and_grad(&mm, tokens, None, &dropout, &mut SeededRng::new(9)).unwrap().nll_sum
            };
            let num = (f(eps) - f(-eps)) / (2.0 * eps);
            let a = out.grads.values()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, cell) in [CellType::Vanilla, CellType::Lstm, CellType::Gru].into_iter().enumerate() {
            for layers in [1, 2] {
                fd_check(&model(cell, layers, 10 + k as u64), &[0, 4, 2, 6], DropoutSpec::OFF);
            }
        }
    }

    #[test]
    fn gradients_with_dropout_match_finite_differences() {
        let m = model(CellType::Lstm, 2, 3);
        fd_check(&m, &[0, 5, 1, 3], DropoutSpec::naive(0.5).unwrap());
        fd_check(&m, &[0, 5, 1, 3], DropoutSpec::dropconnect(WeightNoise::Binary, 0.7).unwrap());
        fd_check(&m, &[0, 5, 1, 3], DropoutSpec::dropconnect(WeightNoise::Gaussian, 0.5).unwrap());
    }

    #[test]
    fn batch_matches_independent_sequences() {
        let m = model(CellType::Gru, 2, 4);
        let a = [0, 3, 5];
        let b = [0, 6, 2];
        let inputs = [a[0], b[0], a[1], b[1], a[2], b[2]];
        let targets = [a[1], b[1], a[2], b[2], END_ID, END_ID];
        let batch = LmBatch {
            inputs: &inputs,
            targets: &targets,
            steps: 3,
            batch: 2,
        };
        let mut rng = SeededRng::new(0);
        let joint = lm_batch_loss_and_grad(&m, &batch, None, &DropoutSpec::OFF, &mut rng).unwrap();
        let oa = lm_loss_and_grad(&m, &a, None, &DropoutSpec::OFF, &mut rng).unwrap();
        let ob = lm_loss_and_grad(&m, &b, None, &DropoutSpec::OFF, &mut rng).unwrap();
        assert!((joint.nll_sum - oa.nll_sum - ob.nll_sum).abs() < 1e-12);
        for ((j, x), y) in joint.grads.values().iter().zip(oa.grads.values()).zip(ob.grads.values()) {
            assert!((j - x - y).abs() < 1e-12);
        }
        let ev = lm_batch_eval(&m, &batch, None, false).unwrap();
        assert_eq!(ev.nll_sum, joint.nll_sum);
        let nll: f64 = ev.target_probs.iter().map(|p| -p.ln()).sum();
        assert!((nll - ev.nll_sum).abs() < 1e-12);
    }

    #[test]
    fn carried_state_matches_one_long_sequence() {
        let m = model(CellType::Lstm, 1, 5);
        let toks = [0, 3, 4, 5, 6, 2];
        let tg = [3, 4, 5, 6, 2, END_ID];
        let full = LmBatch {
            inputs: &toks,
            targets: &tg,
            steps: 6,
            batch: 1,
        };
        let whole = lm_batch_eval(&m, &full, None, false).unwrap();
        let first = LmBatch {
            inputs: &toks[..3],
            targets: &tg[..3],
            steps: 3,
            batch: 1,
        };
        let second = LmBatch {
            inputs: &toks[3..],
            targets: &tg[3..],
            steps: 3,
            batch: 1,
        };
        let e1 = lm_batch_eval(&m, &first, None, false).unwrap();
        let e2 = lm_batch_eval(&m, &second, Some(&e1.final_state), false).unwrap();
        assert!((e1.nll_sum + e2.nll_sum - whole.nll_sum).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let m = model(CellType::Lstm, 2, 6);
        let a = generate(&m, &[0, 3], 40, 1.0, &mut SeededRng::new(1)).unwrap();
        let b = generate(&m, &[0, 3], 40, 1.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t < 7 && t != END_ID));
        let g1 = generate(&m, &[], 10, 0.0, &mut SeededRng::new(1)).unwrap();
        let g2 = generate(&m, &[], 10, 0.0, &mut SeededRng::new(99)).unwrap();
        assert_eq!(g1, g2);
        assert!(generate(&m, &[9], 3, 1.0, &mut SeededRng::new(1)).is_err());
        assert!(generate(&m, &[0], 3, -1.0, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn rejects_out_of_vocab() {
        let m = model(CellType::Vanilla, 1, 7);
        let r = lm_loss_and_grad(&m, &[0, 7], None, &DropoutSpec::OFF, &mut SeededRng::new(0));
        assert!(matches!(r, Err(Error::TokenOutOfRange { id: 7, vocab: 7 })));
        assert!(matches!(
            lm_loss_and_grad(&m, &[], None, &DropoutSpec::OFF, &mut SeededRng::new(0)),
            Err(Error::EmptySequence)
        ));
    }
}
