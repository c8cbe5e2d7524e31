//! Task heads over a recurrent stack: a next-token language model and an
//! end-of-sequence sentence classifier.

mod classifier;
mod dropout;
mod lm;

pub use classifier::{classifier_loss_and_grad, classifier_predict, ClassifierOutput, SentenceClassifier};
pub use dropout::{dropout_mask, weight_noise_mask, DropoutMasks, DropoutMode, DropoutSpec, WeightNoise};
pub use lm::{
    generate, lm_batch_eval, lm_batch_loss_and_grad, lm_loss_and_grad, LanguageModel, LmBatch, LmEval, LmOutput,
};

use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_tn, SeededRng, Tensor2D};
use crate::params::Parameterized;

/// `exp(total_nll / token_count)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> f64 {
    (total_nll / token_count as f64).exp()
}

/// Mean negative log-likelihood per character, in nats.
pub fn cross_entropy_per_char(total_nll: f64, char_count: usize) -> f64 {
    total_nll / char_count as f64
}

pub fn bits_per_char(total_nll: f64, char_count: usize) -> f64 {
    cross_entropy_per_char(total_nll, char_count) / std::f64::consts::LN_2
}

pub(crate) fn embed_lookup(table: &Tensor2D, ids: &[usize]) -> Result<Tensor2D> {
    let e = table.cols();
    let mut out = Tensor2D::zeros(ids.len(), e);
    for (r, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::TokenOutOfRange { id, vocab: table.rows() });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub(crate) fn embed_scatter(grad: &mut Tensor2D, ids: &[usize], d: &Tensor2D) {
    for (r, &id) in ids.iter().enumerate() {
        for (g, v) in grad.row_mut(id).iter_mut().zip(d.row(r)) {
            *g += v;
        }
    }
}

/// `h·Vᵀ + b` for a decoder `V` of shape `classes×width`.
pub(crate) fn decode(h: &Tensor2D, v: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let (n, c) = (h.rows(), v.rows());
    let mut logits = Tensor2D::zeros(n, c);
    for r in 0..n {
        logits.row_mut(r).copy_from_slice(b.as_slice());
    }
    let vt = v.transpose();
    gemm_nn(n, c, h.cols(), h.as_slice(), h.cols(), vt.as_slice(), c, logits.as_mut_slice(), c, true);
    logits
}

/// Turns each row of logits into probabilities in place and returns the
/// summed negative log-likelihood of `targets` (computed from the log-sum-exp
/// so it stays finite when a probability underflows).
pub(crate) fn softmax_nll(logits: &mut Tensor2D, targets: &[usize]) -> Result<f64> {
    let c = logits.cols();
    let mut nll = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::TokenOutOfRange { id: t, vocab: c });
        }
        let row = logits.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_target = row[t] - m;
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        nll += s.ln() - shifted_target;
        let inv = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(nll)
}

/// Given probabilities and targets, returns `(dV, db, dh)` for the summed NLL.
pub(crate) fn decode_backward(
    probs: &Tensor2D,
    targets: &[usize],
    h: &Tensor2D,
    v: &Tensor2D,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (n, c, w) = (h.rows(), v.rows(), v.cols());
    let mut dl = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        dl.row_mut(r)[t] -= 1.0;
    }
    let mut dv = Tensor2D::zeros(c, w);
    gemm_tn(c, w, n, dl.as_slice(), c, h.as_slice(), w, dv.as_mut_slice(), w, false);
    let db = dl.column_sums();
    let mut dh = Tensor2D::zeros(n, w);
    gemm_nn(n, w, c, dl.as_slice(), c, v.as_slice(), w, dh.as_mut_slice(), w, false);
    (dv, db, dh)
}

/// Tensors that receive DropConnect masks: every encoding matrix and the decoder.
pub(crate) fn is_dropconnect_target(name: &str) -> bool {
    (name.starts_with("rnn.") && name.ends_with(".W")) || name == "decoder.V"
}

/// Returns a copy of `model` with masked weights, plus the masks drawn.
pub(crate) fn apply_dropconnect<M: Parameterized + Clone>(
    model: &M,
    noise: WeightNoise,
    keep: f64,
    rng: &mut SeededRng,
) -> Result<(M, Vec<(String, Tensor2D)>)> {
    let mut noisy = model.clone();
    let mut masks = Vec::new();
    let mut err = None;
    noisy.visit_params_mut(&mut |name, t| {
        if err.is_some() || !is_dropconnect_target(name) {
            return;
        }
        match weight_noise_mask(rng, t.rows(), t.cols(), noise, keep) {
            Ok(m) => {
                for (w, k) in t.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *w *= k;
                }
                masks.push((name.to_string(), m));
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((noisy, masks)),
    }
}

/// Chain rule through `w_noisy = mask ⊙ w`.
pub(crate) fn mask_gradients<M: Parameterized>(grads: &mut M, masks: &[(String, Tensor2D)]) {
    let mut it = masks.iter().peekable();
    grads.visit_params_mut(&mut |name, t| {
        if let Some((n, m)) = it.peek() {
            if n == name {
                for (g, k) in t.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *g *= k;
                }
                it.next();
            }
        }
    });
}

/// Applies a mask elementwise in place.
pub(crate) fn apply_mask(t: &mut Tensor2D, mask: &Tensor2D) {
    for (v, m) in t.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert!((perplexity(10000f64.ln() * 3.0, 3) - 10000.0).abs() < 1e-6);
        assert_eq!(perplexity(0.0, 5), 1.0);
        assert!((perplexity(4.7 * 2.0, 2) - 109.95).abs() < 1e-2);
        assert!((cross_entropy_per_char(87f64.ln() * 10.0, 10) - 4.4659).abs() < 1e-4);
        assert_eq!(cross_entropy_per_char(0.0, 4), 0.0);
        assert!((bits_per_char(2f64.ln(), 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_nll_is_stable() {
        let mut l = Tensor2D::from_rows(&[[0.0, 1000.0], [1.0, 2.0]]).unwrap();
        let nll = softmax_nll(&mut l, &[0, 1]).unwrap();
        let direct = 1000.0 + (1.0 + (-1000f64).exp()).ln() + (1.0 + (-1f64).exp()).ln();
        assert!((nll - direct).abs() < 1e-9, "{nll} vs {direct}");
        assert!(nll.is_finite());
    }
}
