//! Posterior sample collection and test-time model averaging.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::params::{FlatParams, Parameterized};

const STAMP_TOL: f64 = 1e-9;

/// When to snapshot: strictly after `burn_in` epochs, then whenever at least
/// `thinning` epochs have passed since the previous snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollectionPolicy {
    pub burn_in: f64,
    pub thinning: f64,
}

impl CollectionPolicy {
    pub fn new(burn_in: f64, thinning: f64) -> Result<Self> {
        if !(burn_in >= 0.0 && thinning > 0.0 && burn_in.is_finite() && thinning.is_finite()) {
            return Err(Error::invalid(format!(
                "need burn_in >= 0 and thinning > 0, got {burn_in} and {thinning}"
            )));
        }
        Ok(Self { burn_in, thinning })
    }

    pub fn due(&self, epoch_fraction: f64, last: Option<f64>) -> bool {
        if epoch_fraction <= self.burn_in + STAMP_TOL {
            return false;
        }
        match last {
            None => true,
            Some(l) => epoch_fraction - l >= self.thinning - STAMP_TOL,
        }
    }

    /// Times at which a training run of `epochs` checks for collection:
    /// every multiple of the thinning interval up to the end of training.
    pub fn check_points(&self, epochs: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 1u64;
        loop {
            let t = k as f64 * self.thinning;
            if t > epochs + STAMP_TOL {
                break;
            }
            out.push(t);
            k += 1;
        }
        out
    }

    /// Number of snapshots a run of `epochs` collects.
    pub fn replay(&self, epochs: f64) -> usize {
        let mut last = None;
        let mut n = 0;
        for t in self.check_points(epochs) {
            if self.due(t, last) {
                last = Some(t);
                n += 1;
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub params: FlatParams,
    pub stamp: f64,
}

/// Ordered posterior snapshots sharing one parameter layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBank {
    entries: Vec<BankEntry>,
}

impl SampleBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn last_stamp(&self) -> Option<f64> {
        self.entries.last().map(|e| e.stamp)
    }

    /// Appends a deep copy of `params`. Stamps must strictly increase.
    pub fn push(&mut self, params: &FlatParams, stamp: f64) -> Result<()> {
        if let Some(first) = self.entries.first() {
            first.params.check_layout(params, "SampleBank::push")?;
        }
        if let Some(last) = self.last_stamp() {
            if !(stamp > last) {
                return Err(Error::invalid(format!("stamp {stamp} does not follow {last}")));
            }
        }
        self.entries.push(BankEntry {
            params: params.clone(),
            stamp,
        });
        Ok(())
    }

    /// Drops every snapshot stamped after `stamp`.
    pub fn truncate_after(&mut self, stamp: f64) {
        self.entries.retain(|e| e.stamp <= stamp + STAMP_TOL);
    }

    pub fn select(&self, strategy: &AveragingStrategy) -> Result<Vec<&FlatParams>> {
        Ok(select_indices(self.len(), strategy)?
            .into_iter()
            .map(|i| &self.entries[i].params)
            .collect())
    }
}

/// Appends `theta` when the policy says a snapshot is due; returns whether
/// it did.
pub fn maybe_collect(
    bank: &mut SampleBank,
    policy: &CollectionPolicy,
    epoch_fraction: f64,
    theta: &FlatParams,
) -> Result<bool> {
    if let Some(last) = bank.last_stamp() {
        if epoch_fraction < last {
            return Err(Error::invalid(format!("epoch fraction went backwards: {epoch_fraction} < {last}")));
        }
    }
    if policy.due(epoch_fraction, bank.last_stamp()) {
        bank.push(theta, epoch_fraction)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Forward,
    Backward,
    Thinned,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Forward, StrategyKind::Backward, StrategyKind::Thinned];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Forward => "forward",
            StrategyKind::Backward => "backward",
            StrategyKind::Thinned => "thinned",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(StrategyKind::Forward),
            "backward" => Ok(StrategyKind::Backward),
            "thinned" => Ok(StrategyKind::Thinned),
            other => Err(Error::invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AveragingStrategy {
    pub kind: StrategyKind,
    pub count: usize,
}

/// Zero-based bank positions used by a strategy. Thinned selection takes
/// the 1-based positions `⌈k·K/S⌉` for `k = 1..S`.
pub fn select_indices(bank_len: usize, strategy: &AveragingStrategy) -> Result<Vec<usize>> {
    let (k, s) = (bank_len, strategy.count);
    if s == 0 || s > k {
        return Err(Error::invalid(format!("need 1 <= S <= K, got S={s} with K={k}")));
    }
    Ok(match strategy.kind {
        StrategyKind::Forward => (0..s).collect(),
        StrategyKind::Backward => (k - s..k).collect(),
        StrategyKind::Thinned => (1..=s).map(|j| (j * k).div_ceil(s) - 1).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub avg: Tensor2D,
    pub per_sample: Vec<Tensor2D>,
}

/// Runs `predict` under each sample and averages the returned probability
/// rows. The template's parameters are overwritten per sample; its
/// architecture must match the samples' layout.
pub fn ensemble_predict<M, F>(template: &M, samples: &[&FlatParams], mut predict: F) -> Result<EnsemblePrediction>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> Result<Tensor2D>,
{
    if samples.is_empty() {
        return Err(Error::invalid("ensemble needs at least one sample"));
    }
    let mut model = template.clone();
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        model.load_flat(s)?;
        per_sample.push(predict(&model)?);
    }
    let avg = average(&per_sample)?;
    Ok(EnsemblePrediction { avg, per_sample })
}

/// Single point-estimate prediction.
pub fn map_predict<M, F>(template: &M, theta: &FlatParams, mut predict: F) -> Result<Tensor2D>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> Result<Tensor2D>,
{
    let mut model = template.clone();
    model.load_flat(theta)?;
    predict(&model)
}

/// Elementwise mean, summed in sample order.
pub fn average(tensors: &[Tensor2D]) -> Result<Tensor2D> {
    let first = tensors.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let mut acc = Tensor2D::zeros(first.rows(), first.cols());
    for t in tensors {
        acc.add_assign(t)?;
    }
    Ok(acc.scale(1.0 / tensors.len() as f64))
}

/// Per-entry mean and population standard deviation across samples.
pub fn predictive_stats(per_sample: &[Tensor2D]) -> Result<(Tensor2D, Tensor2D)> {
    let mean = average(per_sample)?;
    let mut var = Tensor2D::zeros(mean.rows(), mean.cols());
    for t in per_sample {
        for ((v, &x), &m) in var.as_mut_slice().iter_mut().zip(t.as_slice()).zip(mean.as_slice()) {
            *v += (x - m) * (x - m);
        }
    }
    let n = per_sample.len() as f64;
    Ok((mean, var.map(|v| (v / n).sqrt())))
}

/// Ensemble NLL from per-sample target probabilities (`probs[s][i]` is the
/// probability sample `s` gives the `i`-th target), averaging in
/// probability space over the selected samples.
pub fn ensemble_nll(probs: &[Vec<f64>], selected: &[usize]) -> Result<f64> {
    let first = selected.first().ok_or_else(|| Error::invalid("no samples selected"))?;
    let n = probs[*first].len();
    let mut acc = vec![0.0; n];
    for &s in selected {
        let p = probs.get(s).ok_or_else(|| Error::invalid(format!("sample {s} out of range")))?;
        if p.len() != n {
            return Err(Error::shape("ensemble_nll", n, p.len()));
        }
        for (a, &x) in acc.iter_mut().zip(p) {
            *a += x;
        }
    }
    let inv = 1.0 / selected.len() as f64;
    Ok(acc.iter().map(|a| -(a * inv).ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamIndex;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn table_schedules() {
        let count = |b, t, e| CollectionPolicy::new(b, t).unwrap().replay(e);
        assert_eq!(count(4.0, 0.5, 20.0), 32);
        assert_eq!(count(4.0, 0.5, 40.0), 72);
        assert_eq!(count(1.0, 1.0, 20.0), 19);
        assert_eq!(count(3.0, 1.0, 20.0), 17);
        assert_eq!(count(3.0, 0.5, 20.0), 34);
        assert_eq!(count(20.0, 0.5, 20.0), 0);
        assert_eq!(count(25.0, 1.0, 20.0), 0);
    }

    fn flat(v: f64) -> FlatParams {
        let mut idx = ParamIndex::default();
        idx.push("w", 1, 1);
        FlatParams::new(Arc::new(idx), vec![v]).unwrap()
    }

    #[test]
    fn maybe_collect_appends_copies() {
        let policy = CollectionPolicy::new(1.0, 1.0).unwrap();
        let mut bank = SampleBank::new();
        let mut theta = flat(0.0);
        for k in 1..=5 {
            theta.values_mut()[0] = k as f64;
            maybe_collect(&mut bank, &policy, k as f64, &theta).unwrap();
        }
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.entries()[0].params.values(), [2.0]);
        assert!(maybe_collect(&mut bank, &policy, 4.0, &theta).is_err());
        bank.truncate_after(3.0);
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn selection_examples() {
        let sel = |k, kind, s| select_indices(k, &AveragingStrategy { kind, count: s }).unwrap();
        assert_eq!(sel(6, StrategyKind::Thinned, 3), [1, 3, 5]);
        for kind in StrategyKind::ALL {
            assert_eq!(sel(5, kind, 5), [0, 1, 2, 3, 4]);
        }
        assert_eq!(sel(60, StrategyKind::Forward, 20), (0..20).collect::<Vec<_>>());
        assert_eq!(sel(60, StrategyKind::Backward, 20), (40..60).collect::<Vec<_>>());
        assert!(select_indices(3, &AveragingStrategy { kind: StrategyKind::Forward, count: 4 }).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let a = Tensor2D::row_vector(&[0.2, 0.8]);
        let b = Tensor2D::row_vector(&[0.6, 0.4]);
        let avg = average(&[a.clone(), b.clone()]).unwrap();
        assert!(avg.max_abs_diff(&Tensor2D::row_vector(&[0.4, 0.6])) < 1e-15);
        assert_eq!(average(std::slice::from_ref(&a)).unwrap(), a);
        let (m, s) = predictive_stats(&[a.clone(), b]).unwrap();
        assert!((m.get(0, 0) - 0.4).abs() < 1e-15 && (s.get(0, 0) - 0.2).abs() < 1e-15);
        let (_, s) = predictive_stats(&[a.clone(), a]).unwrap();
        assert!(s.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stats_match_direct_formula() {
        let mut rng = crate::numerics::SeededRng::new(8);
        let samples: Vec<Tensor2D> = (0..20)
            .map(|_| {
                let mut p: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 1.0)).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                Tensor2D::row_vector(&p)
            })
            .collect();
        let (m, s) = predictive_stats(&samples).unwrap();
        for c in 0..5 {
            let col: Vec<f64> = samples.iter().map(|t| t.get(0, c)).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
            assert!((m.get(0, c) - mean).abs() < 1e-12 && (s.get(0, c) - sd).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn average_is_convex_and_order_free(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..8)) {
            let ts: Vec<Tensor2D> = rows.iter().map(|r| Tensor2D::row_vector(r)).collect();
            let avg = average(&ts).unwrap();
            let mut rev = ts.clone();
            rev.reverse();
            prop_assert!(average(&rev).unwrap().max_abs_diff(&avg) < 1e-15);
            for c in 0..4 {
                let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg.get(0, c) >= lo - 1e-15 && avg.get(0, c) <= hi + 1e-15);
            }
        }

        #[test]
        fn thinned_indices_are_increasing_and_end_at_k(k in 1usize..200, s_frac in 0.0f64..1.0) {
            let s = 1 + ((k - 1) as f64 * s_frac) as usize;
            let idx = select_indices(k, &AveragingStrategy { kind: StrategyKind::Thinned, count: s }).unwrap();
            prop_assert_eq!(idx.len(), s);
            prop_assert_eq!(*idx.last().unwrap(), k - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
