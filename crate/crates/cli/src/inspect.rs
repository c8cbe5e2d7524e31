use std::path::PathBuf;

use crate::checkpoint::{list_bank, read_verified};
use crate::config::RunConfig;
use crate::error::Result;
use crate::layout::RunLayout;

#[derive(Clone, Debug, PartialEq)]
pub struct BankRow {
    pub index: usize,
    pub epoch: f64,
    pub step: u64,
    pub algorithm: String,
    pub values: usize,
    pub l2_norm: f64,
}

/// Verifies every snapshot's checksum and summarises it.
pub fn cmd_inspect_bank(cfg: &RunConfig, bank: Option<PathBuf>) -> Result<Vec<BankRow>> {
    let dir = bank.unwrap_or_else(|| RunLayout::new(&cfg.out).bank());
    list_bank(&dir)?
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let (m, values) = read_verified(p)?;
            Ok(BankRow {
                index,
                epoch: m.epoch,
                step: m.step,
                algorithm: m.algorithm,
                values: values.len(),
                l2_norm: values.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect()
}
