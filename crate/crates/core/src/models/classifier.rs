use super::{
    apply_dropconnect, apply_mask, decode, decode_backward, dropout_mask, embed_lookup, embed_scatter,
    mask_gradients, softmax_nll, DropoutMasks, DropoutMode, DropoutSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2D};
use crate::params::{FlatParams, Parameterized};
use crate::rnn::{backward_sequence, forward_sequence, CellType, RnnStack, SeqTensor, SequenceOutput};

/// Embedding → (usually bidirectional) stack → one softmax over classes
/// after the whole sentence has been read.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceClassifier {
    pub embedding: Tensor2D,
    pub stack: RnnStack,
    pub decoder_w: Tensor2D,
    pub decoder_b: Tensor2D,
}

impl SentenceClassifier {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab: usize,
        embed: usize,
        classes: usize,
        cell: CellType,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if vocab == 0 || embed == 0 || classes == 0 {
            return Err(Error::invalid("vocabulary, embedding and class counts must be nonzero"));
        }
        let mut uniform = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.uniform(-init_scale, init_scale)).collect();
            Tensor2D::new(r, c, data).expect("shape")
        };
        let dirs = if bidirectional { 2 } else { 1 };
        let embedding = uniform(vocab, embed);
        let decoder_w = uniform(classes, dirs * hidden);
        let stack = RnnStack::new(cell, embed, hidden, layers, bidirectional, init_scale, rng)?;
        Ok(Self {
            embedding,
            stack,
            decoder_w,
            decoder_b: Tensor2D::zeros(1, classes),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.decoder_w.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    fn check(&self) -> Result<()> {
        let c = self.num_classes();
        if self.embedding.cols() != self.stack.input_size()
            || self.decoder_w.cols() != self.stack.output_size()
            || self.decoder_b.shape() != (1, c)
        {
            return Err(Error::shape(
                "SentenceClassifier",
                format!("embedding width {}, decoder {c}x{}", self.stack.input_size(), self.stack.output_size()),
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

impl Parameterized for SentenceClassifier {
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

#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    pub nll: f64,
    pub grads: FlatParams,
    pub class_probs: Vec<f64>,
    pub masks: DropoutMasks,
}

/// `[forward h at the last step, backward h at the first step]`.
fn summary(seq: &SequenceOutput, hidden: usize, bidirectional: bool) -> Tensor2D {
    let last = seq.output.steps() - 1;
    let mut s = Tensor2D::zeros(1, seq.output.width());
    s.row_mut(0)[..hidden].copy_from_slice(&seq.output.step_slice(last)[..hidden]);
    if bidirectional {
        s.row_mut(0)[hidden..].copy_from_slice(&seq.output.step_slice(0)[hidden..2 * hidden]);
    }
    s
}

pub fn classifier_loss_and_grad(
    model: &SentenceClassifier,
    tokens: &[usize],
    label: usize,
    dropout: &DropoutSpec,
    rng: &mut SeededRng,
) -> Result<ClassifierOutput> {
    model.check()?;
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if label >= model.num_classes() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", model.num_classes())));
    }
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
    let (t, hid, bidir) = (tokens.len(), m.stack.hidden_size(), m.stack.bidirectional());

    let mut x = embed_lookup(&m.embedding, tokens)?;
    if naive {
        let mask = dropout_mask(rng, t, x.cols(), dropout.keep)?;
        apply_mask(&mut x, &mask);
        masks.embedding = Some(mask);
    }
    let seq = forward_sequence(&m.stack, &SeqTensor::new(t, 1, x)?, None)?;
    let mut s = summary(&seq, hid, bidir);
    if naive {
        let mask = dropout_mask(rng, 1, s.cols(), dropout.keep)?;
        apply_mask(&mut s, &mask);
        masks.decoder_input = Some(mask);
    }
    let mut probs = decode(&s, &m.decoder_w, &m.decoder_b);
    let nll = softmax_nll(&mut probs, &[label])?;

    let (dv, db, mut ds) = decode_backward(&probs, &[label], &s, &m.decoder_w);
    if let Some(mask) = &masks.decoder_input {
        apply_mask(&mut ds, mask);
    }
    let mut top = SeqTensor::zeros(t, 1, m.stack.output_size());
    top.step_slice_mut(t - 1)[..hid].copy_from_slice(&ds.row(0)[..hid]);
    if bidir {
        top.step_slice_mut(0)[hid..].copy_from_slice(&ds.row(0)[hid..]);
    }
    let sg = backward_sequence(&m.stack, &seq.cache, &top, None)?;
    let mut dx = sg.inputs.into_values();
    if let Some(mask) = &masks.embedding {
        apply_mask(&mut dx, mask);
    }
    let mut de = Tensor2D::zeros(m.embedding.rows(), m.embedding.cols());
    embed_scatter(&mut de, tokens, &dx);
    let mut g = SentenceClassifier {
        embedding: de,
        stack: sg.params,
        decoder_w: dv,
        decoder_b: db,
    };
    mask_gradients(&mut g, &masks.weights);
    Ok(ClassifierOutput {
        nll,
        grads: g.flatten(),
        class_probs: probs.into_vec(),
        masks,
    })
}

/// Class distribution for one sentence, weights used as-is.
pub fn classifier_predict(model: &SentenceClassifier, tokens: &[usize]) -> Result<Vec<f64>> {
    model.check()?;
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let x = embed_lookup(&model.embedding, tokens)?;
    let seq = forward_sequence(&model.stack, &SeqTensor::new(tokens.len(), 1, x)?, None)?;
    let s = summary(&seq, model.stack.hidden_size(), model.stack.bidirectional());
    let mut probs = decode(&s, &model.decoder_w, &model.decoder_b);
    softmax_nll(&mut probs, &[0])?;
    Ok(probs.into_vec())
}
