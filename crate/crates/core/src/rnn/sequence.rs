//! Whole-sequence forward pass and backpropagation through time for a stack.

use super::cell::{
    gru_backward, gru_forward, lstm_backward, lstm_forward, vanilla_backward, vanilla_forward, Dims,
};
use super::{CellParams, CellType, DirState, RnnStack, StackLayer, StepState};
use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_tn, Tensor2D};

/// Time-major batch of vectors: row `t·batch + b` is step `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor {
    steps: usize,
    batch: usize,
    values: Tensor2D,
}

impl SeqTensor {
    pub fn new(steps: usize, batch: usize, values: Tensor2D) -> Result<Self> {
        if values.rows() != steps * batch {
            return Err(Error::shape("SeqTensor::new", steps * batch, values.rows()));
        }
        Ok(Self { steps, batch, values })
    }

    pub fn zeros(steps: usize, batch: usize, width: usize) -> Self {
        Self {
            steps,
            batch,
            values: Tensor2D::zeros(steps * batch, width),
        }
    }

    /// Stacks per-step `batch×width` tensors.
    pub fn from_steps(steps: &[Tensor2D]) -> Result<Self> {
        let first = steps.first().ok_or(Error::EmptySequence)?;
        let (batch, width) = first.shape();
        let mut data = Vec::with_capacity(steps.len() * batch * width);
        for s in steps {
            if s.shape() != (batch, width) {
                return Err(Error::shape("SeqTensor::from_steps", format!("{batch}x{width}"), format!("{:?}", s.shape())));
            }
            data.extend_from_slice(s.as_slice());
        }
        Self::new(steps.len(), batch, Tensor2D::new(steps.len() * batch, width, data)?)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn step_slice(&self, t: usize) -> &[f64] {
        self.values.rows_slice(t * self.batch, (t + 1) * self.batch)
    }

    pub fn step_slice_mut(&mut self, t: usize) -> &mut [f64] {
        self.values.rows_slice_mut(t * self.batch, (t + 1) * self.batch)
    }

    /// Copy of step `t` as a `batch×width` tensor.
    pub fn step(&self, t: usize) -> Tensor2D {
        Tensor2D::new(self.batch, self.width(), self.step_slice(t).to_vec()).expect("step shape")
    }

    pub fn values(&self) -> &Tensor2D {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor2D {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor2D {
        self.values
    }
}

/// Activations of one direction of one layer, indexed by original time.
#[derive(Clone, Debug)]
struct DirCache {
    reversed: bool,
    h_prev: Tensor2D,
    h: Tensor2D,
    gates: Tensor2D,
    /// LSTM: previous cell state and `tanh(c_t)`. GRU: `r⊙h_prev` in `aux`.
    c_prev: Option<Tensor2D>,
    aux: Option<Tensor2D>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct StackCache {
    steps: usize,
    batch: usize,
    layer_inputs: Vec<Tensor2D>,
    dirs: Vec<DirCache>,
}

impl StackCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// Top-layer outputs; forward and backward halves concatenated per row.
    pub output: SeqTensor,
    /// State after the last step of each direction (for the backward
    /// direction, the state after consuming step 0).
    pub final_state: StepState,
    pub cache: StackCache,
}

#[derive(Clone, Debug)]
pub struct StackGradients {
    /// Same shapes as the stack's parameters.
    pub params: RnnStack,
    pub inputs: SeqTensor,
    pub init: StepState,
}

fn time_order(steps: usize, reversed: bool) -> Box<dyn Iterator<Item = usize>> {
    if reversed {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    }
}

fn run_direction(
    p: &CellParams,
    x: &Tensor2D,
    steps: usize,
    batch: usize,
    reversed: bool,
    init: &DirState,
) -> (DirCache, DirState) {
    let hid = p.hidden();
    let g = p.cell.blocks() * hid;
    let rows = steps * batch;
    let d = Dims { batch, hidden: hid };
    let bh = batch * hid;

    let mut xproj = Tensor2D::zeros(rows, g);
    for r in 0..rows {
        xproj.row_mut(r).copy_from_slice(p.b.as_slice());
    }
    let wt = p.w.transpose();
    gemm_nn(rows, g, p.input(), x.as_slice(), p.input(), wt.as_slice(), g, xproj.as_mut_slice(), g, true);
    let ut = p.u.transpose();

    let mut h_prev_all = Tensor2D::zeros(rows, hid);
    let mut h_all = Tensor2D::zeros(rows, hid);
    let mut gates = Tensor2D::zeros(rows, g);
    let lstm = p.cell == CellType::Lstm;
    let mut c_prev_all = lstm.then(|| Tensor2D::zeros(rows, hid));
    let mut aux = (p.cell != CellType::Vanilla).then(|| Tensor2D::zeros(rows, hid));

    let mut h = init.h.as_slice().to_vec();
    let mut c = init.c.as_ref().map(|c| c.as_slice().to_vec());
    let mut h_next = vec![0.0; bh];
    let mut c_next = vec![0.0; bh];

    for t in time_order(steps, reversed) {
        let (r0, r1) = (t * batch, (t + 1) * batch);
        h_prev_all.rows_slice_mut(r0, r1).copy_from_slice(&h);
        let xp = xproj.rows_slice(r0, r1);
        let gt = gates.rows_slice_mut(r0, r1);
        match p.cell {
            CellType::Vanilla => vanilla_forward(d, ut.as_slice(), xp, &h, &mut h_next),
            CellType::Lstm => {
                let cp = c.as_mut().expect("lstm state");
                c_prev_all.as_mut().unwrap().rows_slice_mut(r0, r1).copy_from_slice(cp);
                let tc = aux.as_mut().unwrap().rows_slice_mut(r0, r1);
                lstm_forward(d, ut.as_slice(), xp, &h, cp, gt, &mut c_next, tc, &mut h_next);
                cp.copy_from_slice(&c_next);
            }
            CellType::Gru => {
                let rh = aux.as_mut().unwrap().rows_slice_mut(r0, r1);
                gru_forward(d, ut.as_slice(), xp, &h, gt, rh, &mut h_next);
            }
        }
        h_all.rows_slice_mut(r0, r1).copy_from_slice(&h_next);
        std::mem::swap(&mut h, &mut h_next);
    }

    let final_state = DirState {
        h: Tensor2D::new(batch, hid, h).expect("state shape"),
        c: c.map(|c| Tensor2D::new(batch, hid, c).expect("state shape")),
    };
    let cache = DirCache {
        reversed,
        h_prev: h_prev_all,
        h: h_all,
        gates,
        c_prev: c_prev_all,
        aux,
    };
    (cache, final_state)
}

/// Runs the stack over `inputs`. `init` defaults to zeros. The backward
/// direction of a bidirectional layer starts from its own `init` entry at
/// the last step and runs towards step 0.
pub fn forward_sequence(stack: &RnnStack, inputs: &SeqTensor, init: Option<&StepState>) -> Result<SequenceOutput> {
    let (steps, batch) = (inputs.steps(), inputs.batch());
    if steps == 0 || batch == 0 {
        return Err(Error::EmptySequence);
    }
    if inputs.width() != stack.input_size() {
        return Err(Error::shape("forward_sequence input", stack.input_size(), inputs.width()));
    }
    let zero;
    let init = match init {
        Some(s) => {
            s.check(stack, batch)?;
            s
        }
        None => {
            zero = StepState::zeros(stack, batch);
            &zero
        }
    };

    let hid = stack.hidden_size();
    let ndirs = stack.directions();
    let mut layer_inputs = Vec::with_capacity(stack.num_layers());
    let mut dirs = Vec::with_capacity(stack.num_layers() * ndirs);
    let mut finals = Vec::with_capacity(stack.num_layers() * ndirs);
    let mut x = inputs.values().clone();

    for (l, layer) in stack.layers().iter().enumerate() {
        let mut out = Tensor2D::zeros(steps * batch, ndirs * hid);
        for (di, p) in layer.directions().enumerate() {
            let (cache, fin) = run_direction(p, &x, steps, batch, di == 1, &init.entries[l * ndirs + di]);
            for r in 0..steps * batch {
                out.row_mut(r)[di * hid..(di + 1) * hid].copy_from_slice(cache.h.row(r));
            }
            dirs.push(cache);
            finals.push(fin);
        }
        layer_inputs.push(std::mem::replace(&mut x, out));
    }

    Ok(SequenceOutput {
        output: SeqTensor::new(steps, batch, x)?,
        final_state: StepState { entries: finals },
        cache: StackCache {
            steps,
            batch,
            layer_inputs,
            dirs,
        },
    })
}

/// Backward pass for one direction. `dh_out` is the gradient on this
/// direction's hidden outputs. Accumulates into `dx`; returns parameter and
/// initial-state gradients.
fn backprop_direction(
    p: &CellParams,
    cache: &DirCache,
    x: &Tensor2D,
    dh_out: &Tensor2D,
    final_grad: Option<&DirState>,
    steps: usize,
    batch: usize,
    dx: &mut Tensor2D,
) -> (CellParams, DirState) {
    let hid = p.hidden();
    let g = p.cell.blocks() * hid;
    let rows = steps * batch;
    let bh = batch * hid;
    let d = Dims { batch, hidden: hid };

    let mut dz_all = Tensor2D::zeros(rows, g);
    let mut dh_carry = final_grad.map_or_else(|| vec![0.0; bh], |s| s.h.as_slice().to_vec());
    let mut dc = match (p.cell, final_grad.and_then(|s| s.c.as_ref())) {
        (CellType::Lstm, Some(c)) => c.as_slice().to_vec(),
        _ => vec![0.0; bh],
    };
    let mut dh = vec![0.0; bh];
    let mut dh_prev = vec![0.0; bh];
    let mut scratch = vec![0.0; bh];
    let u = p.u.as_slice();

    for t in time_order(steps, !cache.reversed) {
        let (r0, r1) = (t * batch, (t + 1) * batch);
        for ((o, a), b) in dh.iter_mut().zip(dh_out.rows_slice(r0, r1)).zip(&dh_carry) {
            *o = a + b;
        }
        let gates = cache.gates.rows_slice(r0, r1);
        let dz = dz_all.rows_slice_mut(r0, r1);
        match p.cell {
            CellType::Vanilla => vanilla_backward(d, u, cache.h.rows_slice(r0, r1), &dh, dz, &mut dh_prev),
            CellType::Lstm => lstm_backward(
                d,
                u,
                gates,
                cache.c_prev.as_ref().unwrap().rows_slice(r0, r1),
                cache.aux.as_ref().unwrap().rows_slice(r0, r1),
                &dh,
                &mut dc,
                dz,
                &mut dh_prev,
            ),
            CellType::Gru => gru_backward(
                d,
                u,
                gates,
                cache.h_prev.rows_slice(r0, r1),
                &dh,
                dz,
                &mut dh_prev,
                &mut scratch,
            ),
        }
        std::mem::swap(&mut dh_carry, &mut dh_prev);
    }

    let mut grad = CellParams::zeros(p.cell, p.input(), hid);
    let dza = dz_all.as_slice();
    gemm_tn(g, p.input(), rows, dza, g, x.as_slice(), p.input(), grad.w.as_mut_slice(), p.input(), false);
    gemm_tn(g, hid, rows, dza, g, cache.h_prev.as_slice(), hid, grad.u.as_mut_slice(), hid, false);
    if p.cell == CellType::Gru {
        // The candidate block sees r⊙h_prev, not h_prev.
        let rh = cache.aux.as_ref().unwrap();
        gemm_tn(hid, hid, rows, &dza[2 * hid..], g, rh.as_slice(), hid, &mut grad.u.as_mut_slice()[2 * hid * hid..], hid, false);
    }
    grad.b = dz_all.column_sums();
    gemm_nn(rows, p.input(), g, dza, g, p.w.as_slice(), p.input(), dx.as_mut_slice(), p.input(), true);

    let init = DirState {
        h: Tensor2D::new(batch, hid, dh_carry).expect("state shape"),
        c: (p.cell == CellType::Lstm).then(|| Tensor2D::new(batch, hid, dc).expect("state shape")),
    };
    (grad, init)
}

/// Exact gradients of `Σ top_grad ⊙ output (+ Σ final_grad ⊙ final_state)`
/// with respect to the stack's parameters, its inputs and its initial state.
pub fn backward_sequence(
    stack: &RnnStack,
    cache: &StackCache,
    top_grad: &SeqTensor,
    final_grad: Option<&StepState>,
) -> Result<StackGradients> {
    let (steps, batch) = (cache.steps, cache.batch);
    if top_grad.steps() != steps || top_grad.batch() != batch || top_grad.width() != stack.output_size() {
        return Err(Error::shape(
            "backward_sequence top_grad",
            format!("{steps} steps x {batch} x {}", stack.output_size()),
            format!("{} steps x {} x {}", top_grad.steps(), top_grad.batch(), top_grad.width()),
        ));
    }
    if cache.layer_inputs.len() != stack.num_layers() {
        return Err(Error::invalid("cache does not belong to this stack"));
    }
    if let Some(s) = final_grad {
        s.check(stack, batch)?;
    }

    let hid = stack.hidden_size();
    let ndirs = stack.directions();
    let mut layer_grads: Vec<Option<StackLayer>> = vec![None; stack.num_layers()];
    let mut init_grads: Vec<Option<DirState>> = vec![None; stack.num_layers() * ndirs];
    let mut d_out = top_grad.values().clone();

    for (l, layer) in stack.layers().iter().enumerate().rev() {
        let x = &cache.layer_inputs[l];
        let mut dx = Tensor2D::zeros(x.rows(), x.cols());
        let mut grads = Vec::with_capacity(ndirs);
        for (di, p) in layer.directions().enumerate() {
            let idx = l * ndirs + di;
            let dh_dir = d_out.slice_cols(di * hid, (di + 1) * hid)?;
            let fg = final_grad.map(|s| &s.entries[idx]);
            let (gp, gi) = backprop_direction(p, &cache.dirs[idx], x, &dh_dir, fg, steps, batch, &mut dx);
            grads.push(gp);
            init_grads[idx] = Some(gi);
        }
        let mut it = grads.into_iter();
        layer_grads[l] = Some(StackLayer {
            forward: it.next().expect("forward direction"),
            backward: it.next(),
        });
        d_out = dx;
    }

    Ok(StackGradients {
        params: RnnStack::from_layers(layer_grads.into_iter().map(|g| g.expect("layer grad")).collect())?,
        inputs: SeqTensor::new(steps, batch, d_out)?,
        init: StepState {
            entries: init_grads.into_iter().map(|g| g.expect("init grad")).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::params::Parameterized;

    fn rand_seq(rng: &mut SeededRng, steps: usize, batch: usize, width: usize) -> SeqTensor {
        let data = (0..steps * batch * width).map(|_| rng.uniform(-1.0, 1.0)).collect();
        SeqTensor::new(steps, batch, Tensor2D::new(steps * batch, width, data).unwrap()).unwrap()
    }

    fn rand_state(stack: &RnnStack, batch: usize, rng: &mut SeededRng) -> StepState {
        let mut s = StepState::zeros(stack, batch);
        for e in &mut s.entries {
            for v in e.h.as_mut_slice() {
                *v = rng.uniform(-0.5, 0.5);
            }
            if let Some(c) = e.c.as_mut() {
                for v in c.as_mut_slice() {
                    *v = rng.uniform(-0.5, 0.5);
                }
            }
        }
        s
    }

    /// Scalar objective `Σ w_out ⊙ output + Σ w_fin ⊙ final_state`.
    fn objective(stack: &RnnStack, x: &SeqTensor, init: &StepState, w_out: &SeqTensor, w_fin: &StepState) -> f64 {
        let out = forward_sequence(stack, x, Some(init)).unwrap();
        let mut s: f64 = out.output.values().as_slice().iter().zip(w_out.values().as_slice()).map(|(a, b)| a * b).sum();
        for (e, w) in out.final_state.entries.iter().zip(&w_fin.entries) {
            s += e.h.as_slice().iter().zip(w.h.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            if let (Some(c), Some(wc)) = (&e.c, &w.c) {
                s += c.as_slice().iter().zip(wc.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    }

    fn check_relative(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        assert!(rel < 1e-4, "{what}: analytic {analytic} numeric {numeric} rel {rel}");
    }

    fn gradient_check(cell: CellType, layers: usize, bidir: bool, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let (steps, batch, input, hidden) = (4, 2, 3, 3);
        let stack = RnnStack::new(cell, input, hidden, layers, bidir, 0.6, &mut rng).unwrap();
        let mut stack = stack;
        stack.visit_params_mut(&mut |_, t| {
            if t.rows() == 1 {
                for v in t.as_mut_slice() {
                    *v = rng.uniform(-0.3, 0.3);
                }
            }
        });
        let x = rand_seq(&mut rng, steps, batch, input);
        let init = rand_state(&stack, batch, &mut rng);
        let w_out = rand_seq(&mut rng, steps, batch, stack.output_size());
        let w_fin = rand_state(&stack, batch, &mut rng);

        let fwd = forward_sequence(&stack, &x, Some(&init)).unwrap();
        let grads = backward_sequence(&stack, &fwd.cache, &w_out, Some(&w_fin)).unwrap();
        let eps = 1e-5;

        let flat = stack.flatten();
        let gflat = grads.params.flatten();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus.values_mut()[i] += eps;
            let mut minus = flat.clone();
            minus.values_mut()[i] -= eps;
            let mut sp = stack.clone();
            sp.load_flat(&plus).unwrap();
            let mut sm = stack.clone();
            sm.load_flat(&minus).unwrap();
            let num = (objective(&sp, &x, &init, &w_out, &w_fin) - objective(&sm, &x, &init, &w_out, &w_fin)) / (2.0 * eps);
            check_relative(gflat.values()[i], num, &format!("{cell} param {i}"));
        }

        for i in 0..x.values().len() {
            let mut xp = x.clone();
            xp.values_mut().as_mut_slice()[i] += eps;
            let mut xm = x.clone();
            xm.values_mut().as_mut_slice()[i] -= eps;
            let num = (objective(&stack, &xp, &init, &w_out, &w_fin) - objective(&stack, &xm, &init, &w_out, &w_fin)) / (2.0 * eps);
            check_relative(grads.inputs.values().as_slice()[i], num, &format!("{cell} input {i}"));
        }

        for (e, ge) in init.entries.iter().enumerate().zip(&grads.init.entries).map(|((i, _), g)| (i, g)) {
            for k in 0..batch * hidden {
                let perturb = |delta: f64, cell_state: bool| {
                    let mut s = init.clone();
                    let t = if cell_state { s.entries[e].c.as_mut().unwrap() } else { &mut s.entries[e].h };
                    t.as_mut_slice()[k] += delta;
                    objective(&stack, &x, &s, &w_out, &w_fin)
                };
                let num = (perturb(eps, false) - perturb(-eps, false)) / (2.0 * eps);
                check_relative(ge.h.as_slice()[k], num, &format!("{cell} init h {e}/{k}"));
                if let Some(gc) = &ge.c {
                    let num = (perturb(eps, true) - perturb(-eps, true)) / (2.0 * eps);
                    check_relative(gc.as_slice()[k], num, &format!("{cell} init c {e}/{k}"));
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut seed = 100;
        for cell in [CellType::Vanilla, CellType::Lstm, CellType::Gru] {
            for layers in [1, 2] {
                for bidir in [false, true] {
                    gradient_check(cell, layers, bidir, seed);
                    seed += 1;
                }
            }
        }
    }

    #[test]
    fn steps_agree_with_single_step_api() {
        let mut rng = SeededRng::new(8);
        for cell in [CellType::Vanilla, CellType::Lstm, CellType::Gru] {
            let stack = RnnStack::new(cell, 3, 4, 1, false, 0.5, &mut rng).unwrap();
            let x = rand_seq(&mut rng, 5, 2, 3);
            let out = forward_sequence(&stack, &x, None).unwrap();
            let p = &stack.layers()[0].forward;
            let mut h = Tensor2D::zeros(2, 4);
            let mut c = Tensor2D::zeros(2, 4);
            for t in 0..5 {
                let xt = x.step(t);
                h = match cell {
                    CellType::Vanilla => super::super::vanilla_step(p, &xt, &h).unwrap().h,
                    CellType::Gru => super::super::gru_step(p, &xt, &h).unwrap().h,
                    CellType::Lstm => {
                        let s = super::super::lstm_step(p, &xt, &h, &c).unwrap();
                        c = s.c;
                        s.h
                    }
                };
                assert!(out.output.step(t).max_abs_diff(&h) < 1e-13);
            }
        }
    }

    #[test]
    fn bidirectional_mirrors_on_palindromes() {
        // With identical forward/backward weights, a palindromic input gives
        // a backward half that is the time-reversal of the forward half.
        let mut rng = SeededRng::new(12);
        for cell in [CellType::Vanilla, CellType::Lstm, CellType::Gru] {
            let mut stack = RnnStack::new(cell, 2, 3, 1, true, 0.7, &mut rng).unwrap();
            let fwd = stack.layers()[0].forward.clone();
            stack.layers_mut()[0].backward = Some(fwd);
            let half = rand_seq(&mut rng, 3, 1, 2);
            let steps: Vec<Tensor2D> = (0..3).chain((0..3).rev()).map(|t| half.step(t)).collect();
            let x = SeqTensor::from_steps(&steps).unwrap();
            let out = forward_sequence(&stack, &x, None).unwrap().output;
            let t_len = 6;
            for t in 0..t_len {
                let f = out.step(t).slice_cols(0, 3).unwrap();
                let b = out.step(t_len - 1 - t).slice_cols(3, 6).unwrap();
                assert!(f.max_abs_diff(&b) < 1e-14, "{cell} t={t}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = SeededRng::new(3);
        let stack = RnnStack::new(CellType::Lstm, 3, 5, 2, true, 0.1, &mut rng).unwrap();
        let x = rand_seq(&mut rng, 7, 3, 3);
        let a = forward_sequence(&stack, &x, None).unwrap();
        let b = forward_sequence(&stack, &x, None).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = SeededRng::new(3);
        let stack = RnnStack::new(CellType::Gru, 3, 5, 1, false, 0.1, &mut rng).unwrap();
        assert!(forward_sequence(&stack, &rand_seq(&mut rng, 2, 1, 4), None).is_err());
        assert!(matches!(
            forward_sequence(&stack, &SeqTensor::zeros(0, 1, 3), None),
            Err(Error::EmptySequence)
        ));
        let wrong = StepState::zeros(&stack, 2);
        assert!(forward_sequence(&stack, &rand_seq(&mut rng, 2, 1, 3), Some(&wrong)).is_err());
    }
}
