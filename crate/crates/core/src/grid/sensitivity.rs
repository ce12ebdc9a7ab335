//! Affine grid model from power-flow sensitivity coefficients.
//!
//! At a solved operating point the implicit-function theorem gives the state
//! sensitivities as columns of the inverse power-flow Jacobian; voltage,
//! branch-current and loss sensitivities follow by the chain rule.  The
//! Jacobian is factorized once and reused for every injection variable.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::network::NetworkModel;
use super::powerflow::{branch_current_pu, jacobian, solve_polar, InjectionVector, PowerFlowOptions};
use super::GridError;

/// First-order model around an operating point u₀ = [p; q]:
/// v ≈ Aᵛ u + bᵛ, i ≈ Aⁱ u + bⁱ, [p_loss; q_loss] ≈ Aˡ u + bˡ.
/// Exact at u₀ by construction of the offsets.
#[derive(Debug, Clone)]
pub struct LinearGridModel {
    pub a_v: DMatrix<f64>,
    pub b_v: DVector<f64>,
    pub a_i: DMatrix<f64>,
    pub b_i: DVector<f64>,
    pub a_l: DMatrix<f64>,
    pub b_l: DVector<f64>,
    /// Operating-point injections (stacked [p; q], per-unit).
    pub operating_point: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictedState {
    pub v_pu: Vec<f64>,
    pub i_pu: Vec<f64>,
    pub p_loss_pu: f64,
    pub q_loss_pu: f64,
    /// Predicted GCP power, export positive: Σp − p_loss.
    pub p_gcp_pu: f64,
    pub q_gcp_pu: f64,
}

impl LinearGridModel {
    pub fn num_injections(&self) -> usize {
        self.operating_point.len() / 2
    }

    pub fn predict_state(&self, inj: &InjectionVector) -> Result<PredictedState, GridError> {
        let m = self.num_injections();
        if inj.len() != m {
            return Err(GridError::Dimension(format!(
                "injection length {} vs model {}",
                inj.len(),
                m
            )));
        }
        let u = DVector::from_vec(inj.stacked());
        let v = &self.a_v * &u + &self.b_v;
        let i = &self.a_i * &u + &self.b_i;
        let l = &self.a_l * &u + &self.b_l;
        Ok(PredictedState {
            v_pu: v.as_slice().to_vec(),
            i_pu: i.as_slice().to_vec(),
            p_loss_pu: l[0],
            q_loss_pu: l[1],
            p_gcp_pu: inj.total_p_pu() - l[0],
            q_gcp_pu: inj.total_q_pu() - l[1],
        })
    }
}

pub fn compute_sensitivities(
    model: &NetworkModel,
    at: &InjectionVector,
    opts: &PowerFlowOptions,
) -> Result<LinearGridModel, GridError> {
    let (st, _) = solve_polar(model, at, opts)?;
    let ns = model.non_slack();
    let m = ns.len();
    let n_l = model.num_lines();

    // State sensitivities: J · (d state / d u_k) = e_k, one solve per
    // injection coordinate with a single factorization.
    let j = jacobian(model, &st);
    let lu = nalgebra::linalg::LU::new(j);
    // Columns: d[θ_ns; v_ns]/du for u = [p_ns; q_ns].
    let mut dstate = DMatrix::<f64>::zeros(2 * m, 2 * m);
    let mut e = DVector::<f64>::zeros(2 * m);
    for k in 0..2 * m {
        e.fill(0.0);
        e[k] = 1.0;
        let col = lu.solve(&e).ok_or(GridError::Divergence {
            iterations: 0,
            mismatch: f64::NAN,
        })?;
        dstate.set_column(k, &col);
    }

    // Voltage rows are state rows m..2m directly.
    let a_v = dstate.rows(m, m).into_owned();

    // Branch currents and losses by chain rule through (θ, v).
    // d|i_l| and d(loss) against the full polar state of non-slack buses.
    let mut di_dstate = DMatrix::<f64>::zeros(n_l, 2 * m);
    let mut dl_dstate = DMatrix::<f64>::zeros(2, 2 * m);
    let pos_of_dense = |dense: usize| ns.iter().position(|&x| x == dense);
    for l in 0..n_l {
        let (a, b) = model.line_endpoints_dense(l);
        let y_abs = model.line_admittance_pu(l).norm();
        let z = model.line_admittance_pu(l).inv();
        let (va, ta) = (st.v[a], st.theta[a]);
        let (vb, tb) = (st.v[b], st.theta[b]);
        let dv = Complex64::from_polar(va, ta) - Complex64::from_polar(vb, tb);
        let dnorm = dv.norm();
        // ∂|V_a−V_b|² terms.
        let th = ta - tb;
        let (sth, cth) = th.sin_cos();
        let dd2_dva = 2.0 * (va - vb * cth);
        let dd2_dvb = 2.0 * (vb - va * cth);
        let dd2_dth = 2.0 * va * vb * sth;
        let current = y_abs * dnorm;
        for (dense, dd2_dv, sign_th) in [(a, dd2_dva, 1.0), (b, dd2_dvb, -1.0)] {
            if let Some(p) = pos_of_dense(dense) {
                // magnitude: ∂|D| = ∂|D|²/(2|D|); flat at a zero-flow kink.
                if dnorm > 1e-12 {
                    di_dstate[(l, m + p)] = y_abs * dd2_dv / (2.0 * dnorm);
                    di_dstate[(l, p)] = y_abs * sign_th * dd2_dth / (2.0 * dnorm);
                }
                // losses: d(|y|²|D|²·r) — quadratic, no kink.
                dl_dstate[(0, m + p)] += z.re * y_abs * y_abs * dd2_dv;
                dl_dstate[(0, p)] += z.re * y_abs * y_abs * sign_th * dd2_dth;
                dl_dstate[(1, m + p)] += z.im * y_abs * y_abs * dd2_dv;
                dl_dstate[(1, p)] += z.im * y_abs * y_abs * sign_th * dd2_dth;
            }
        }
        let _ = current;
    }
    let a_i = &di_dstate * &dstate;
    let a_l = &dl_dstate * &dstate;

    // Offsets pin the model to the operating point.
    let u0 = DVector::from_vec(at.stacked());
    let v0 = DVector::from_iterator(m, ns.iter().map(|&i| st.v[i]));
    let i0 = DVector::from_iterator(n_l, (0..n_l).map(|l| branch_current_pu(model, &st, l)));
    let mut loss0 = DVector::zeros(2);
    for l in 0..n_l {
        let z = model.line_admittance_pu(l).inv();
        let im = i0[l];
        loss0[0] += im * im * z.re;
        loss0[1] += im * im * z.im;
    }
    let b_v = &v0 - &a_v * &u0;
    let b_i = &i0 - &a_i * &u0;
    let b_l = &loss0 - &a_l * &u0;

    Ok(LinearGridModel {
        a_v,
        b_v,
        a_i,
        b_i,
        a_l,
        b_l,
        operating_point: at.stacked(),
    })
}
