use sgrnn_core::data::{build_vocab, encode_stream, tokenize, BatchMode, BatchPlan, TokenLevel};
use sgrnn_core::models::{classifier_loss_and_grad, DropoutSpec, LanguageModel, SentenceClassifier};
use sgrnn_core::posterior::{ensemble_predict, map_predict, AveragingStrategy, CollectionPolicy, SampleBank, StrategyKind};
use sgrnn_core::samplers::{posterior_grad, Algorithm, HyperParams, StepSchedule};
use sgrnn_core::train::{lm_eval_stream, LmObjective, TrainConfig, Trainer};
use sgrnn_core::{CellType, FlatParams, Parameterized, SeededRng};

fn item_grad(model: &SentenceClassifier, tokens: &[usize], label: usize) -> FlatParams {
    classifier_loss_and_grad(model, tokens, label, &DropoutSpec::OFF, &mut SeededRng::new(0))
        .unwrap()
        .grads
}

fn sum(grads: &[&FlatParams]) -> FlatParams {
    let mut acc = FlatParams::zeros(grads[0].index().clone());
    for g in grads {
        for (a, &x) in acc.values_mut().iter_mut().zip(g.values()) {
            *a += x;
        }
    }
    acc
}

#[test]
fn minibatch_estimate_is_unbiased_over_all_pairs() {
    let mut rng = SeededRng::new(11);
    let model = SentenceClassifier::new(7, 4, 3, CellType::Gru, 5, 1, true, 0.3, &mut rng).unwrap();
    let data: Vec<(Vec<usize>, usize)> = (0..6)
        .map(|i| ((0..2 + i % 3).map(|j| (i * 3 + j) % 7).collect(), i % 3))
        .collect();
    let grads: Vec<FlatParams> = data.iter().map(|(t, l)| item_grad(&model, t, *l)).collect();
    let theta = model.flatten();

    let full_hp = HyperParams::new(6, 6);
    let all: Vec<&FlatParams> = grads.iter().collect();
    let full = posterior_grad(&sum(&all), &theta, &full_hp, 6).unwrap().grad;

    let hp = HyperParams::new(2, 6);
    let mut mean = vec![0.0; theta.len()];
    let mut pairs = 0;
    for a in 0..6 {
        for b in a + 1..6 {
            let g = posterior_grad(&sum(&[&grads[a], &grads[b]]), &theta, &hp, 2).unwrap().grad;
            for (m, &x) in mean.iter_mut().zip(g.values()) {
                *m += x;
            }
            pairs += 1;
        }
    }
    assert_eq!(pairs, 15);
    for (m, &f) in mean.iter().zip(full.values()) {
        assert!((m / 15.0 - f).abs() < 1e-10, "{} vs {f}", m / 15.0);
    }
}

#[test]
fn char_lm_trains_collects_and_averages() {
    let text = "the cat sat on the mat. the dog sat on the log. ".repeat(12);
    let tokens = tokenize(&text, TokenLevel::Char);
    let vocab = build_vocab(&tokens, None, 1);
    let ids = encode_stream(&vocab, &tokens);
    let cut = ids.len() * 8 / 10;
    let plan = BatchPlan {
        mode: BatchMode::Successive,
        batch_size: 4,
        unroll: 10,
    };
    let obj = LmObjective::new(ids[..cut].to_vec(), Vec::new(), ids[cut..].to_vec(), plan, 2).unwrap();
    let mut rng = SeededRng::new(5);
    let model = LanguageModel::new(vocab.len(), 8, CellType::Lstm, 12, 2, 0.1, &mut rng).unwrap();
    let mut hp = HyperParams::new(1, 1);
    hp.step_size = StepSchedule::Constant(5e-3);
    let config = TrainConfig {
        algorithm: Algorithm::Psgld,
        hp,
        epochs: 8,
        collection: Some(CollectionPolicy::new(4.0, 1.0).unwrap()),
        dropout: DropoutSpec::OFF,
        patience: 0,
    };
    let mut trainer = Trainer::new(obj, model.clone(), config, rng.fork()).unwrap();
    let mut bank = SampleBank::new();
    trainer.run(&mut bank, None).unwrap();
    assert_eq!(bank.len(), 4);
    assert_eq!(trainer.state().collected, 4);

    let test = &ids[cut..];
    let predict = |m: &LanguageModel| Ok(lm_eval_stream(m, test, 1, 10, true)?.probs.unwrap());
    let all = bank.select(&AveragingStrategy { kind: StrategyKind::Forward, count: 4 }).unwrap();
    let ens = ensemble_predict(&model, &all, predict).unwrap();
    for r in 0..ens.avg.rows() {
        let s: f64 = ens.avg.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    let last = bank.select(&AveragingStrategy { kind: StrategyKind::Backward, count: 1 }).unwrap();
    let single = ensemble_predict(&model, &last, predict).unwrap().avg;
    let map = map_predict(&model, &bank.entries()[3].params, predict).unwrap();
    assert_eq!(single, map);

    // Averaging in probability space can only lower the mean NLL.
    let ens_nll = lm_eval_stream_nll(&ens.avg, test);
    let mean_nll = ens.per_sample.iter().map(|p| lm_eval_stream_nll(p, test)).sum::<f64>() / 4.0;
    assert!(ens_nll <= mean_nll + 1e-12, "{ens_nll} > {mean_nll}");
    assert!(ens_nll / (test.len() as f64) < (vocab.len() as f64).ln());
}

fn lm_eval_stream_nll(probs: &sgrnn_core::Tensor2D, ids: &[usize]) -> f64 {
    (0..probs.rows())
        .map(|i| {
            let target = ids.get(i + 1).copied().unwrap_or(sgrnn_core::data::END_ID);
            -probs.row(i)[target].ln()
        })
        .sum()
}
