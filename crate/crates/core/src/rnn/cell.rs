//! Single-step kernels. Forward kernels take the input projection
//! `x·Wᵀ + b` precomputed, so a sequence can project all time steps with one
//! product. Backward kernels turn the total gradient on `h_t` into gradients
//! on the stacked gate pre-activations and on the previous state.

use super::{CellParams, CellType};
use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, sigmoid_scalar, Tensor2D};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub batch: usize,
    pub hidden: usize,
}

/// `h = tanh(xproj + h_prev·Uᵀ)`; `ut` is `H×H`.
pub(crate) fn vanilla_forward(d: Dims, ut: &[f64], xproj: &[f64], h_prev: &[f64], h_out: &mut [f64]) {
    let h = d.hidden;
    h_out.copy_from_slice(xproj);
    gemm_nn(d.batch, h, h, h_prev, h, ut, h, h_out, h, true);
    for v in h_out.iter_mut() {
        *v = v.tanh();
    }
}

/// `ut` is `H×4H`; `gates` receives the activated `[i f o c̃]` blocks per row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward(
    d: Dims,
    ut: &[f64],
    xproj: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_out: &mut [f64],
    tanh_c: &mut [f64],
    h_out: &mut [f64],
) {
    let h = d.hidden;
    let g = 4 * h;
    gates.copy_from_slice(xproj);
    gemm_nn(d.batch, g, h, h_prev, h, ut, g, gates, g, true);
    for bi in 0..d.batch {
        let z = &mut gates[bi * g..(bi + 1) * g];
        for v in &mut z[..3 * h] {
            *v = sigmoid_scalar(*v);
        }
        for v in &mut z[3 * h..] {
            *v = v.tanh();
        }
        for j in 0..h {
            let k = bi * h + j;
            let c = z[h + j] * c_prev[k] + z[j] * z[3 * h + j];
            let tc = c.tanh();
            c_out[k] = c;
            tanh_c[k] = tc;
            h_out[k] = z[2 * h + j] * tc;
        }
    }
}

/// `ut` is `H×3H`; `gates` receives activated `[z r h̃]`, `rh` receives `r⊙h_prev`.
pub(crate) fn gru_forward(
    d: Dims,
    ut: &[f64],
    xproj: &[f64],
    h_prev: &[f64],
    gates: &mut [f64],
    rh: &mut [f64],
    h_out: &mut [f64],
) {
    let h = d.hidden;
    let g = 3 * h;
    gates.copy_from_slice(xproj);
    gemm_nn(d.batch, 2 * h, h, h_prev, h, ut, g, gates, g, true);
    for bi in 0..d.batch {
        let z = &mut gates[bi * g..bi * g + 2 * h];
        for v in z.iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        for j in 0..h {
            rh[bi * h + j] = z[h + j] * h_prev[bi * h + j];
        }
    }
    gemm_nn(d.batch, h, h, rh, h, &ut[2 * h..], g, &mut gates[2 * h..], g, true);
    for bi in 0..d.batch {
        let z = &mut gates[bi * g..(bi + 1) * g];
        for j in 0..h {
            let cand = z[2 * h + j].tanh();
            z[2 * h + j] = cand;
            let k = bi * h + j;
            let zg = z[j];
            h_out[k] = zg * h_prev[k] + (1.0 - zg) * cand;
        }
    }
}

/// `u` is `H×H`. Writes `dz` (pre-activation gradient) and `dh_prev`.
pub(crate) fn vanilla_backward(d: Dims, u: &[f64], h_t: &[f64], dh: &[f64], dz: &mut [f64], dh_prev: &mut [f64]) {
    let h = d.hidden;
    for ((z, &g), &y) in dz.iter_mut().zip(dh).zip(h_t) {
        *z = g * (1.0 - y * y);
    }
    gemm_nn(d.batch, h, h, dz, h, u, h, dh_prev, h, false);
}

/// `u` is `4H×H`. `dc` holds the cell-state gradient flowing in from step
/// `t+1` and is overwritten with the gradient on `c_{t-1}`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    d: Dims,
    u: &[f64],
    gates: &[f64],
    c_prev: &[f64],
    tanh_c: &[f64],
    dh: &[f64],
    dc: &mut [f64],
    dz: &mut [f64],
    dh_prev: &mut [f64],
) {
    let h = d.hidden;
    let g = 4 * h;
    for bi in 0..d.batch {
        let a = &gates[bi * g..(bi + 1) * g];
        let out = &mut dz[bi * g..(bi + 1) * g];
        for j in 0..h {
            let k = bi * h + j;
            let (i, f, o, cand) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
            let tc = tanh_c[k];
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let d_o = dh[k] * tc;
            let d_i = dct * cand;
            let d_f = dct * c_prev[k];
            let d_c = dct * i;
            out[j] = d_i * i * (1.0 - i);
            out[h + j] = d_f * f * (1.0 - f);
            out[2 * h + j] = d_o * o * (1.0 - o);
            out[3 * h + j] = d_c * (1.0 - cand * cand);
            dc[k] = dct * f;
        }
    }
    gemm_nn(d.batch, h, g, dz, g, u, h, dh_prev, h, false);
}

/// `u` is `3H×H`; `scratch` is `B×H`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward(
    d: Dims,
    u: &[f64],
    gates: &[f64],
    h_prev: &[f64],
    dh: &[f64],
    dz: &mut [f64],
    dh_prev: &mut [f64],
    scratch: &mut [f64],
) {
    let h = d.hidden;
    let g = 3 * h;
    for bi in 0..d.batch {
        let a = &gates[bi * g..(bi + 1) * g];
        let out = &mut dz[bi * g..(bi + 1) * g];
        for j in 0..h {
            let k = bi * h + j;
            let (zg, cand) = (a[j], a[2 * h + j]);
            let d_z = dh[k] * (h_prev[k] - cand);
            let d_cand = dh[k] * (1.0 - zg);
            out[j] = d_z * zg * (1.0 - zg);
            out[2 * h + j] = d_cand * (1.0 - cand * cand);
            dh_prev[k] = dh[k] * zg;
        }
    }
    // Gradient on r⊙h_prev through the candidate's recurrent block.
    gemm_nn(d.batch, h, h, &dz[2 * h..], g, &u[2 * h * h..], h, scratch, h, false);
    for bi in 0..d.batch {
        let a = &gates[bi * g..(bi + 1) * g];
        let out = &mut dz[bi * g..(bi + 1) * g];
        for j in 0..h {
            let k = bi * h + j;
            let r = a[h + j];
            let d_r = scratch[k] * h_prev[k];
            out[h + j] = d_r * r * (1.0 - r);
            dh_prev[k] += scratch[k] * r;
        }
    }
    gemm_nn(d.batch, h, 2 * h, dz, g, u, h, dh_prev, h, true);
}

fn input_projection(p: &CellParams, x: &Tensor2D) -> Result<Tensor2D> {
    p.check()?;
    if x.cols() != p.input() {
        return Err(Error::shape("cell input", p.input(), x.cols()));
    }
    let mut proj = x.matmul(&p.w.transpose())?;
    proj.add_row_broadcast(&p.b)?;
    Ok(proj)
}

fn check_state(p: &CellParams, x: &Tensor2D, state: &Tensor2D, what: &'static str) -> Result<()> {
    if state.shape() != (x.rows(), p.hidden()) {
        return Err(Error::shape(
            what,
            format!("{}x{}", x.rows(), p.hidden()),
            format!("{}x{}", state.rows(), state.cols()),
        ));
    }
    Ok(())
}

fn expect_cell(p: &CellParams, cell: CellType) -> Result<()> {
    if p.cell != cell {
        return Err(Error::invalid(format!("expected {cell} parameters, got {}", p.cell)));
    }
    Ok(())
}

/// Result of one LSTM step. `gates` holds the activated `[i f o c̃]` blocks.
#[derive(Clone, Debug)]
pub struct LstmStep {
    pub h: Tensor2D,
    pub c: Tensor2D,
    pub gates: Tensor2D,
}

/// One LSTM step on a batch of inputs (`x` is `B×input`).
pub fn lstm_step(p: &CellParams, x: &Tensor2D, h_prev: &Tensor2D, c_prev: &Tensor2D) -> Result<LstmStep> {
    expect_cell(p, CellType::Lstm)?;
    let xproj = input_projection(p, x)?;
    check_state(p, x, h_prev, "lstm h_prev")?;
    check_state(p, x, c_prev, "lstm c_prev")?;
    let d = Dims {
        batch: x.rows(),
        hidden: p.hidden(),
    };
    let ut = p.u.transpose();
    let mut gates = Tensor2D::zeros(d.batch, 4 * d.hidden);
    let mut c = Tensor2D::zeros(d.batch, d.hidden);
    let mut tanh_c = Tensor2D::zeros(d.batch, d.hidden);
    let mut h = Tensor2D::zeros(d.batch, d.hidden);
    lstm_forward(
        d,
        ut.as_slice(),
        xproj.as_slice(),
        h_prev.as_slice(),
        c_prev.as_slice(),
        gates.as_mut_slice(),
        c.as_mut_slice(),
        tanh_c.as_mut_slice(),
        h.as_mut_slice(),
    );
    Ok(LstmStep { h, c, gates })
}

/// Result of one GRU step. `gates` holds activated `[z r h̃]`.
#[derive(Clone, Debug)]
pub struct GruStep {
    pub h: Tensor2D,
    pub gates: Tensor2D,
}

pub fn gru_step(p: &CellParams, x: &Tensor2D, h_prev: &Tensor2D) -> Result<GruStep> {
    expect_cell(p, CellType::Gru)?;
    let xproj = input_projection(p, x)?;
    check_state(p, x, h_prev, "gru h_prev")?;
    let d = Dims {
        batch: x.rows(),
        hidden: p.hidden(),
    };
    let ut = p.u.transpose();
    let mut gates = Tensor2D::zeros(d.batch, 3 * d.hidden);
    let mut rh = Tensor2D::zeros(d.batch, d.hidden);
    let mut h = Tensor2D::zeros(d.batch, d.hidden);
    gru_forward(
        d,
        ut.as_slice(),
        xproj.as_slice(),
        h_prev.as_slice(),
        gates.as_mut_slice(),
        rh.as_mut_slice(),
        h.as_mut_slice(),
    );
    Ok(GruStep { h, gates })
}

#[derive(Clone, Debug)]
pub struct VanillaStep {
    pub h: Tensor2D,
}

pub fn vanilla_step(p: &CellParams, x: &Tensor2D, h_prev: &Tensor2D) -> Result<VanillaStep> {
    expect_cell(p, CellType::Vanilla)?;
    let xproj = input_projection(p, x)?;
    check_state(p, x, h_prev, "vanilla h_prev")?;
    let d = Dims {
        batch: x.rows(),
        hidden: p.hidden(),
    };
    let ut = p.u.transpose();
    let mut h = Tensor2D::zeros(d.batch, d.hidden);
    vanilla_forward(d, ut.as_slice(), xproj.as_slice(), h_prev.as_slice(), h.as_mut_slice());
    Ok(VanillaStep { h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sigmoid_scalar as sig, SeededRng};

    fn rand_t(rng: &mut SeededRng, r: usize, c: usize, s: f64) -> Tensor2D {
        Tensor2D::new(r, c, (0..r * c).map(|_| rng.uniform(-s, s)).collect()).unwrap()
    }

    fn rand_cell(cell: CellType, input: usize, hidden: usize, rng: &mut SeededRng) -> CellParams {
        let g = cell.blocks() * hidden;
        CellParams {
            cell,
            w: rand_t(rng, g, input, 0.8),
            u: rand_t(rng, g, hidden, 0.8),
            b: rand_t(rng, 1, g, 0.5),
        }
    }

    /// Row `k` of block `blk` dotted with `v`, plus bias: the affine map
    /// `W_blk x + U_blk h + b_blk` for a single unit, written out longhand.
    fn affine(p: &CellParams, blk: usize, j: usize, x: &[f64], h: &[f64]) -> f64 {
        let hid = p.hidden();
        let row = blk * hid + j;
        let mut acc = p.b.get(0, row);
        for (k, xv) in x.iter().enumerate() {
            acc += p.w.get(row, k) * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            acc += p.u.get(row, k) * hv;
        }
        acc
    }

    #[test]
    fn lstm_zero_params_fixed_point() {
        let p = CellParams::zeros(CellType::Lstm, 3, 4);
        let x = Tensor2D::row_vector(&[0.3, -1.0, 2.0]);
        let z = Tensor2D::zeros(1, 4);
        let out = lstm_step(&p, &x, &z, &z).unwrap();
        assert!(out.gates.as_slice()[..12].iter().all(|&g| g == 0.5));
        assert!(out.c.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.h.as_slice().iter().all(|&v| v == 0.0));

        let v = [1.0, -2.0, 0.5, 3.0];
        let c_prev = Tensor2D::row_vector(&v);
        let out = lstm_step(&p, &x, &z, &c_prev).unwrap();
        for (j, &vj) in v.iter().enumerate() {
            assert_eq!(out.c.get(0, j), 0.5 * vj);
            assert!((out.h.get(0, j) - 0.5 * (0.5 * vj).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_matches_straight_line_equations() {
        let mut rng = SeededRng::new(41);
        let p = rand_cell(CellType::Lstm, 3, 4, &mut rng);
        let x = rand_t(&mut rng, 1, 3, 1.0);
        let h0 = rand_t(&mut rng, 1, 4, 0.9);
        let c0 = rand_t(&mut rng, 1, 4, 1.5);
        let out = lstm_step(&p, &x, &h0, &c0).unwrap();
        for j in 0..4 {
            let i = sig(affine(&p, 0, j, x.row(0), h0.row(0)));
            let f = sig(affine(&p, 1, j, x.row(0), h0.row(0)));
            let o = sig(affine(&p, 2, j, x.row(0), h0.row(0)));
            let ct = affine(&p, 3, j, x.row(0), h0.row(0)).tanh();
            let c = f * c0.get(0, j) + i * ct;
            let h = o * c.tanh();
            assert!((out.c.get(0, j) - c).abs() < 1e-14);
            assert!((out.h.get(0, j) - h).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_examples() {
        let p = CellParams::zeros(CellType::Gru, 2, 4);
        let x = Tensor2D::row_vector(&[1.0, -1.0]);
        let z = Tensor2D::zeros(1, 4);
        assert!(gru_step(&p, &x, &z).unwrap().h.as_slice().iter().all(|&v| v == 0.0));

        // A large update-gate bias saturates z at 1, which carries h_prev through.
        let mut p = CellParams::zeros(CellType::Gru, 2, 4);
        for j in 0..4 {
            p.b.set(0, j, 40.0);
        }
        let h_prev = Tensor2D::row_vector(&[0.2, -0.7, 0.9, 0.0]);
        let out = gru_step(&p, &x, &h_prev).unwrap();
        assert!(out.h.max_abs_diff(&h_prev) < 1e-6);
    }

    #[test]
    fn gru_matches_straight_line_equations() {
        let mut rng = SeededRng::new(43);
        let p = rand_cell(CellType::Gru, 3, 4, &mut rng);
        let x = rand_t(&mut rng, 1, 3, 1.0);
        let h0 = rand_t(&mut rng, 1, 4, 0.9);
        let out = gru_step(&p, &x, &h0).unwrap();
        let hid = 4;
        let r: Vec<f64> = (0..hid).map(|j| sig(affine(&p, 1, j, x.row(0), h0.row(0)))).collect();
        let rh: Vec<f64> = (0..hid).map(|j| r[j] * h0.get(0, j)).collect();
        for j in 0..hid {
            let z = sig(affine(&p, 0, j, x.row(0), h0.row(0)));
            let row = 2 * hid + j;
            let mut a = p.b.get(0, row);
            for k in 0..3 {
                a += p.w.get(row, k) * x.get(0, k);
            }
            for k in 0..hid {
                a += p.u.get(row, k) * rh[k];
            }
            let h = z * h0.get(0, j) + (1.0 - z) * a.tanh();
            assert!((out.h.get(0, j) - h).abs() < 1e-14);
        }
    }

    #[test]
    fn vanilla_examples() {
        let p = CellParams::zeros(CellType::Vanilla, 2, 3);
        let x = Tensor2D::row_vector(&[1.0, 2.0]);
        let h0 = Tensor2D::row_vector(&[0.1, 0.2, 0.3]);
        assert!(vanilla_step(&p, &x, &h0).unwrap().h.as_slice().iter().all(|&v| v == 0.0));

        let mut rng = SeededRng::new(5);
        let mut p = rand_cell(CellType::Vanilla, 2, 3, &mut rng);
        p.u = Tensor2D::zeros(3, 3);
        let a = vanilla_step(&p, &x, &h0).unwrap().h;
        let b = vanilla_step(&p, &x, &Tensor2D::row_vector(&[-5.0, 4.0, 0.0])).unwrap().h;
        assert_eq!(a, b);

        let p = rand_cell(CellType::Vanilla, 2, 3, &mut rng);
        let out = vanilla_step(&p, &x, &h0).unwrap().h;
        for j in 0..3 {
            let h = affine(&p, 0, j, x.row(0), h0.row(0)).tanh();
            assert!((out.get(0, j) - h).abs() < 1e-14);
        }
    }

    #[test]
    fn step_shape_errors() {
        let p = CellParams::zeros(CellType::Lstm, 3, 4);
        let x = Tensor2D::zeros(1, 2);
        let z = Tensor2D::zeros(1, 4);
        assert!(lstm_step(&p, &x, &z, &z).is_err());
        let x = Tensor2D::zeros(1, 3);
        assert!(lstm_step(&p, &x, &Tensor2D::zeros(1, 3), &z).is_err());
        assert!(gru_step(&p, &x, &z).is_err());
    }
}
