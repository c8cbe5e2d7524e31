use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Parsed `label<TAB>sentence` file. Labels are indexed in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationData {
    pub labels: Vec<String>,
    /// `(label index, whitespace tokens)` in file order.
    pub examples: Vec<(usize, Vec<String>)>,
}

impl ClassificationData {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

pub fn parse_classification_tsv(text: &str) -> Result<ClassificationData> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `label<TAB>sentence`".into(),
        })?;
        let label = label.trim();
        let tokens: Vec<String> = sentence.split_whitespace().map(String::from).collect();
        if label.is_empty() || tokens.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty label or sentence".into(),
            });
        }
        raw.push((label.to_string(), tokens));
    }
    let mut labels: Vec<String> = raw.iter().map(|(l, _)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    let examples = raw
        .into_iter()
        .map(|(l, t)| (labels.binary_search(&l).expect("label present"), t))
        .collect();
    Ok(ClassificationData { labels, examples })
}

pub fn load_classification_tsv(path: &Path) -> Result<ClassificationData> {
    parse_classification_tsv(&std::fs::read_to_string(path)?)
}

/// Fold index for each of `n` items: a seeded permutation dealt round-robin,
/// so fold sizes differ by at most one.
pub fn kfold_assignments(n: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("need 2 <= folds <= items, got {k} folds for {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut fold = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        fold[item] = pos % k;
    }
    Ok(fold)
}
