use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2D};

/// Distribution of a multiplicative weight mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightNoise {
    /// `Ber(keep) / keep`.
    Binary,
    /// `N(1, (1 − keep) / keep)`.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    /// Inverted dropout on the embedding output and on the decoder input.
    Naive,
    /// Multiplicative masks on encoding weights and the decoder matrix.
    DropConnect(WeightNoise),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub mode: DropoutMode,
    pub keep: f64,
}

impl DropoutSpec {
    pub const OFF: DropoutSpec = DropoutSpec {
        mode: DropoutMode::Off,
        keep: 1.0,
    };

    pub fn naive(keep: f64) -> Result<Self> {
        Self::new(DropoutMode::Naive, keep)
    }

    pub fn dropconnect(noise: WeightNoise, keep: f64) -> Result<Self> {
        Self::new(DropoutMode::DropConnect(noise), keep)
    }

    pub fn new(mode: DropoutMode, keep: f64) -> Result<Self> {
        check_keep(keep)?;
        Ok(Self { mode, keep })
    }

    pub fn is_off(&self) -> bool {
        self.mode == DropoutMode::Off
    }
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self::OFF
    }
}

impl fmt::Display for WeightNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightNoise::Binary => "binary",
            WeightNoise::Gaussian => "gaussian",
        })
    }
}

impl FromStr for WeightNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(WeightNoise::Binary),
            "gaussian" => Ok(WeightNoise::Gaussian),
            other => Err(Error::invalid(format!("unknown weight noise `{other}`"))),
        }
    }
}

fn check_keep(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("keep probability must lie in (0, 1], got {keep}")))
    }
}

/// Inverted dropout mask: entries are `1/keep` with probability `keep`, else 0.
pub fn dropout_mask(rng: &mut SeededRng, rows: usize, cols: usize, keep: f64) -> Result<Tensor2D> {
    check_keep(keep)?;
    let scale = 1.0 / keep;
    let data = (0..rows * cols)
        .map(|_| if rng.uniform01() < keep { scale } else { 0.0 })
        .collect();
    Tensor2D::new(rows, cols, data)
}

/// Multiplicative weight mask with mean one.
pub fn weight_noise_mask(rng: &mut SeededRng, rows: usize, cols: usize, noise: WeightNoise, keep: f64) -> Result<Tensor2D> {
    match noise {
        WeightNoise::Binary => dropout_mask(rng, rows, cols, keep),
        WeightNoise::Gaussian => {
            check_keep(keep)?;
            let std = ((1.0 - keep) / keep).sqrt();
            crate::numerics::gaussian(rng, rows, cols, 1.0, std)
        }
    }
}

/// Masks drawn for one loss evaluation, kept so the call can be replayed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub embedding: Option<Tensor2D>,
    pub decoder_input: Option<Tensor2D>,
    /// `(parameter name, mask)` for DropConnect.
    pub weights: Vec<(String, Tensor2D)>,
}
