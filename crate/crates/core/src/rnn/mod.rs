//! Vanilla, LSTM and GRU cells with exact backpropagation through time.
//!
//! All computations are batched: a vector is a `B×n` tensor with one row per
//! sequence in the batch. Sequences are stored time-major in [`SeqTensor`],
//! so rows `t·B .. (t+1)·B` hold time step `t`.
//!
//! Gate blocks are stacked along the rows of each weight matrix:
//!
//! | cell    | blocks              | equations |
//! |---------|---------------------|-----------|
//! | vanilla | `[h]`               | `h = tanh(W x + U h' + b)` |
//! | LSTM    | `[i; f; o; c̃]`      | `i,f,o = σ(..)`, `c̃ = tanh(..)`, `c = f⊙c' + i⊙c̃`, `h = o⊙tanh(c)` |
//! | GRU     | `[z; r; h̃]`         | `z,r = σ(..)`, `h̃ = tanh(W_h x + U_h (r⊙h') + b_h)`, `h = z⊙h' + (1−z)⊙h̃` |

mod cell;
mod sequence;

pub use cell::{gru_step, lstm_step, vanilla_step, GruStep, LstmStep, VanillaStep};
pub use sequence::{
    backward_sequence, forward_sequence, SeqTensor, SequenceOutput, StackCache, StackGradients,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2D};
use crate::params::Parameterized;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellType {
    Vanilla,
    Lstm,
    Gru,
}

impl CellType {
    /// Number of stacked gate blocks.
    pub fn blocks(self) -> usize {
        match self {
            CellType::Vanilla => 1,
            CellType::Lstm => 4,
            CellType::Gru => 3,
        }
    }

    pub fn has_cell_state(self) -> bool {
        matches!(self, CellType::Lstm)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Vanilla => "vanilla",
            CellType::Lstm => "lstm",
            CellType::Gru => "gru",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "rnn" => Ok(CellType::Vanilla),
            "lstm" => Ok(CellType::Lstm),
            "gru" => Ok(CellType::Gru),
            other => Err(Error::invalid(format!("unknown cell type `{other}`"))),
        }
    }
}

/// Weights of one cell (one direction of one layer).
///
/// `w` is `(blocks·H)×input`, `u` is `(blocks·H)×H` and `b` is `1×(blocks·H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub cell: CellType,
    pub w: Tensor2D,
    pub u: Tensor2D,
    pub b: Tensor2D,
}

impl CellParams {
    pub fn zeros(cell: CellType, input: usize, hidden: usize) -> Self {
        let g = cell.blocks() * hidden;
        Self {
            cell,
            w: Tensor2D::zeros(g, input),
            u: Tensor2D::zeros(g, hidden),
            b: Tensor2D::zeros(1, g),
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn init_uniform(cell: CellType, input: usize, hidden: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(cell, input, hidden);
        for v in p.w.as_mut_slice().iter_mut().chain(p.u.as_mut_slice()) {
            *v = rng.uniform(-scale, scale);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    /// Rows of block `k` of a stacked tensor (`w`, `u`, or the columns of `b`).
    pub fn block(&self, which: &Tensor2D, k: usize) -> Result<Tensor2D> {
        let h = self.hidden();
        if k >= self.cell.blocks() {
            return Err(Error::invalid(format!("block {k} out of range for {}", self.cell)));
        }
        if which.rows() == 1 {
            which.slice_cols(k * h, (k + 1) * h)
        } else {
            Tensor2D::new(h, which.cols(), which.rows_slice(k * h, (k + 1) * h).to_vec())
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let h = self.hidden();
        let g = self.cell.blocks() * h;
        if self.w.rows() != g || self.u.rows() != g || self.b.shape() != (1, g) {
            return Err(Error::shape(
                "CellParams",
                format!("{g} stacked rows for {} with hidden {h}", self.cell),
                format!("w {:?} u {:?} b {:?}", self.w.shape(), self.u.shape(), self.b.shape()),
            ));
        }
        Ok(())
    }
}

/// One layer of a stack: a forward cell and, when bidirectional, a cell run
/// over the reversed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer {
    pub forward: CellParams,
    pub backward: Option<CellParams>,
}

impl StackLayer {
    pub fn directions(&self) -> impl Iterator<Item = &CellParams> {
        std::iter::once(&self.forward).chain(self.backward.as_ref())
    }
}

/// Layered recurrent cells. Layer `ℓ+1` consumes the (concatenated) hidden
/// outputs of layer `ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnStack {
    cell: CellType,
    input_size: usize,
    hidden_size: usize,
    bidirectional: bool,
    layers: Vec<StackLayer>,
}

impl RnnStack {
    pub fn new(
        cell: CellType,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        bidirectional: bool,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if num_layers == 0 || hidden_size == 0 || input_size == 0 {
            return Err(Error::invalid("stack needs at least one layer and nonzero sizes"));
        }
        let dirs = if bidirectional { 2 } else { 1 };
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { input_size } else { dirs * hidden_size };
                let forward = CellParams::init_uniform(cell, input, hidden_size, init_scale, rng);
                let backward = bidirectional
                    .then(|| CellParams::init_uniform(cell, input, hidden_size, init_scale, rng));
                StackLayer { forward, backward }
            })
            .collect();
        Ok(Self {
            cell,
            input_size,
            hidden_size,
            bidirectional,
            layers,
        })
    }

    /// Builds a stack from explicit layers, validating the chaining invariant.
    pub fn from_layers(layers: Vec<StackLayer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("stack needs at least one layer"))?;
        let cell = first.forward.cell;
        let hidden_size = first.forward.hidden();
        let input_size = first.forward.input();
        let bidirectional = first.backward.is_some();
        let dirs = if bidirectional { 2 } else { 1 };
        for (l, layer) in layers.iter().enumerate() {
            if layer.backward.is_some() != bidirectional {
                return Err(Error::invalid("all layers must share directionality"));
            }
            let expected_in = if l == 0 { input_size } else { dirs * hidden_size };
            for p in layer.directions() {
                p.check()?;
                if p.cell != cell || p.hidden() != hidden_size || p.input() != expected_in {
                    return Err(Error::shape(
                        "RnnStack::from_layers",
                        format!("{cell} cell {expected_in}->{hidden_size} at layer {l}"),
                        format!("{} cell {}->{}", p.cell, p.input(), p.hidden()),
                    ));
                }
            }
        }
        Ok(Self {
            cell,
            input_size,
            hidden_size,
            bidirectional,
            layers,
        })
    }

    pub fn cell(&self) -> CellType {
        self.cell
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn bidirectional(&self) -> bool {
        self.bidirectional
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[StackLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [StackLayer] {
        &mut self.layers
    }

    /// Width of each layer's output (`directions × hidden`).
    pub fn output_size(&self) -> usize {
        self.directions() * self.hidden_size
    }
}

impl Parameterized for RnnStack {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D)) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (d, p) in layer.directions().enumerate() {
                let dir = if d == 0 { "fwd" } else { "bwd" };
                f(&format!("rnn.l{l}.{dir}.W"), &p.w);
                f(&format!("rnn.l{l}.{dir}.U"), &p.u);
                f(&format!("rnn.l{l}.{dir}.b"), &p.b);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let StackLayer { forward, backward } = layer;
            for (d, p) in std::iter::once(forward).chain(backward.as_mut()).enumerate() {
                let dir = if d == 0 { "fwd" } else { "bwd" };
                f(&format!("rnn.l{l}.{dir}.W"), &mut p.w);
                f(&format!("rnn.l{l}.{dir}.U"), &mut p.u);
                f(&format!("rnn.l{l}.{dir}.b"), &mut p.b);
            }
        }
    }
}

/// Recurrent state of one direction of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DirState {
    pub h: Tensor2D,
    /// Cell state; present only for LSTM.
    pub c: Option<Tensor2D>,
}

/// Recurrent state of a whole stack, one entry per layer and direction
/// (index `layer·directions + direction`).
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub entries: Vec<DirState>,
}

impl StepState {
    pub fn zeros(stack: &RnnStack, batch: usize) -> Self {
        let h = stack.hidden_size();
        let has_c = stack.cell().has_cell_state();
        let entries = (0..stack.num_layers() * stack.directions())
            .map(|_| DirState {
                h: Tensor2D::zeros(batch, h),
                c: has_c.then(|| Tensor2D::zeros(batch, h)),
            })
            .collect();
        Self { entries }
    }

    pub fn batch(&self) -> usize {
        self.entries.first().map_or(0, |e| e.h.rows())
    }

    pub(crate) fn check(&self, stack: &RnnStack, batch: usize) -> Result<()> {
        let n = stack.num_layers() * stack.directions();
        if self.entries.len() != n {
            return Err(Error::shape("StepState", n, self.entries.len()));
        }
        let has_c = stack.cell().has_cell_state();
        for e in &self.entries {
            let shape = (batch, stack.hidden_size());
            if e.h.shape() != shape || e.c.is_some() != has_c || e.c.as_ref().is_some_and(|c| c.shape() != shape) {
                return Err(Error::shape(
                    "StepState",
                    format!("{batch}x{} per entry (cell state: {has_c})", stack.hidden_size()),
                    format!("{:?} (cell state: {})", e.h.shape(), e.c.is_some()),
                ));
            }
        }
        Ok(())
    }
}
