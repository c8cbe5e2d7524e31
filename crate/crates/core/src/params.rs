//! Flat views of every trainable tensor in a model.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Location of one named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered name → (offset, shape) index. The order is the visit order of the
/// owning model and never changes for a given architecture.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ParamIndex {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamIndex {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        let entry = ParamEntry {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
        };
        self.total += entry.len();
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Every trainable value of a model in one contiguous vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    index: Arc<ParamIndex>,
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(index: Arc<ParamIndex>, values: Vec<f64>) -> Result<Self> {
        if values.len() != index.total() {
            return Err(Error::shape("FlatParams::new", index.total(), values.len()));
        }
        Ok(Self { index, values })
    }

    pub fn zeros(index: Arc<ParamIndex>) -> Self {
        let values = vec![0.0; index.total()];
        Self { index, values }
    }

    pub fn index(&self) -> &Arc<ParamIndex> {
        &self.index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.index, &other.index) || *self.index == *other.index
    }

    pub fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(op, "matching parameter layout", "different layout"))
        }
    }

    /// Copy of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<Tensor2D> {
        let e = self.index.get(name)?;
        Tensor2D::new(e.rows, e.cols, self.values[e.range()].to_vec()).ok()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.index
            .entries()
            .iter()
            .find(|e| self.values[e.range()].iter().any(|v| !v.is_finite()))
            .map(|e| e.name.as_str())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.first_nonfinite() {
            None => Ok(()),
            Some(name) => Err(Error::NonFinite(format!("{what}: tensor `{name}`"))),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Models expose their tensors in a fixed order through this trait.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D));

    fn param_index(&self) -> ParamIndex {
        let mut index = ParamIndex::default();
        self.visit_params(&mut |name, t| index.push(name, t.rows(), t.cols()));
        index
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    fn flatten_with(&self, index: Arc<ParamIndex>) -> FlatParams {
        let mut values = Vec::with_capacity(index.total());
        self.visit_params(&mut |_, t| values.extend_from_slice(t.as_slice()));
        FlatParams { index, values }
    }

    fn flatten(&self) -> FlatParams {
        self.flatten_with(Arc::new(self.param_index()))
    }

    /// Overwrites every tensor from a flat vector with a matching layout.
    fn load_flat(&mut self, flat: &FlatParams) -> Result<()> {
        let mut pos = 0usize;
        let mut mismatch = None;
        let entries = flat.index.entries();
        self.visit_params_mut(&mut |name, t| {
            if mismatch.is_some() {
                return;
            }
            match entries.get(pos) {
                Some(e) if e.name == name && e.rows == t.rows() && e.cols == t.cols() => {
                    t.as_mut_slice().copy_from_slice(&flat.values[e.range()]);
                }
                _ => mismatch = Some(name.to_string()),
            }
            pos += 1;
        });
        if let Some(name) = mismatch {
            return Err(Error::shape("load_flat", "matching parameter layout", format!("tensor `{name}`")));
        }
        if pos != entries.len() {
            return Err(Error::shape("load_flat", entries.len(), pos));
        }
        Ok(())
    }

    /// Sets every tensor to zero, leaving shapes intact.
    fn zero_params(&mut self) {
        self.visit_params_mut(&mut |_, t| t.as_mut_slice().fill(0.0));
    }
}
