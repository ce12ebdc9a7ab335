//! Newton–Raphson AC power flow in polar form, used as the ground-truth
//! oracle everywhere linearized predictions need checking.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::network::{BusKind, NetworkModel};
use super::GridError;

/// Nodal power injections at non-slack buses (injection positive), in the
/// model's injection layout and in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p_pu: Vec<f64>,
    pub q_pu: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(model: &NetworkModel) -> Self {
        let n = model.non_slack().len();
        InjectionVector {
            p_pu: vec![0.0; n],
            q_pu: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p_pu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_pu.is_empty()
    }

    /// Adds an injection given in kW / kvar at a bus id.
    pub fn add_kw(
        &mut self,
        model: &NetworkModel,
        bus_id: u32,
        p_kw: f64,
        q_kvar: f64,
    ) -> Result<(), GridError> {
        let k = model.injection_index(bus_id).ok_or_else(|| {
            GridError::Dimension(format!("bus {bus_id} is not a non-slack bus of the model"))
        })?;
        self.p_pu[k] += model.base.power_to_pu(p_kw);
        self.q_pu[k] += model.base.power_to_pu(q_kvar);
        Ok(())
    }

    /// Stacked [p; q] layout used by the affine grid model.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.p_pu.clone();
        v.extend_from_slice(&self.q_pu);
        v
    }

    pub fn total_p_pu(&self) -> f64 {
        self.p_pu.iter().sum()
    }

    pub fn total_q_pu(&self) -> f64 {
        self.q_pu.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Convergence threshold on the infinity norm of the power mismatch.
    pub tolerance_pu: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance_pu: 1e-10,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltage magnitude at non-slack buses, injection layout.
    pub v_pu: Vec<f64>,
    /// Voltage angle at non-slack buses, radians (slack at 0).
    pub theta_rad: Vec<f64>,
    /// Branch current magnitudes per line, per-unit.
    pub i_pu: Vec<f64>,
    /// Net feeder power delivered to the upper grid at the GCP (export
    /// positive): `p_gcp = Σ injections − losses`.
    pub p_gcp_pu: f64,
    pub q_gcp_pu: f64,
    /// Total series losses, positive.
    pub p_loss_pu: f64,
    pub q_loss_pu: f64,
    pub iterations: usize,
}

/// Full polar state (slack included) for internal reuse.
pub(crate) struct PolarState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

pub(crate) fn calc_pq(model: &NetworkModel, st: &PolarState, i: usize) -> (f64, f64) {
    let y = model.admittance();
    let n = model.num_buses();
    let (mut p, mut q) = (0.0, 0.0);
    for k in 0..n {
        let g = y[(i, k)].re;
        let b = y[(i, k)].im;
        let th = st.theta[i] - st.theta[k];
        let (s, c) = th.sin_cos();
        p += st.v[i] * st.v[k] * (g * c + b * s);
        q += st.v[i] * st.v[k] * (g * s - b * c);
    }
    (p, q)
}

/// Jacobian of the mismatch equations in the order [θ of non-slack; v of
/// non-slack] against rows [P of non-slack; Q of non-slack].
pub(crate) fn jacobian(model: &NetworkModel, st: &PolarState) -> DMatrix<f64> {
    let ns = model.non_slack();
    let m = ns.len();
    let y = model.admittance();
    let mut j = DMatrix::<f64>::zeros(2 * m, 2 * m);
    for (r, &i) in ns.iter().enumerate() {
        let (p_i, q_i) = calc_pq(model, st, i);
        for (c, &k) in ns.iter().enumerate() {
            let g = y[(i, k)].re;
            let b = y[(i, k)].im;
            let th = st.theta[i] - st.theta[k];
            let (s, co) = th.sin_cos();
            if i == k {
                j[(r, c)] = -q_i - b * st.v[i] * st.v[i];
                j[(r, m + c)] = p_i / st.v[i] + g * st.v[i];
                j[(m + r, c)] = p_i - g * st.v[i] * st.v[i];
                j[(m + r, m + c)] = q_i / st.v[i] - b * st.v[i];
            } else {
                j[(r, c)] = st.v[i] * st.v[k] * (g * s - b * co);
                j[(r, m + c)] = st.v[i] * (g * co + b * s);
                j[(m + r, c)] = -st.v[i] * st.v[k] * (g * co + b * s);
                j[(m + r, m + c)] = st.v[i] * (g * s - b * co);
            }
        }
    }
    j
}

pub(crate) fn solve_polar(
    model: &NetworkModel,
    inj: &InjectionVector,
    opts: &PowerFlowOptions,
) -> Result<(PolarState, usize), GridError> {
    let ns = model.non_slack();
    let m = ns.len();
    if inj.p_pu.len() != m || inj.q_pu.len() != m {
        return Err(GridError::Dimension(format!(
            "injection vector length {} does not match {} non-slack buses",
            inj.p_pu.len(),
            m
        )));
    }
    let n = model.num_buses();
    let mut st = PolarState {
        v: vec![model.base.slack_v_pu; n], // flat start
        theta: vec![0.0; n],
    };
    debug_assert!(model.buses()[model.slack_index()].kind == BusKind::Slack);

    let mut mismatch = DVector::<f64>::zeros(2 * m);
    let mut last_norm = f64::INFINITY;
    for it in 0..opts.max_iterations {
        for (r, &i) in ns.iter().enumerate() {
            let (p, q) = calc_pq(model, &st, i);
            mismatch[r] = inj.p_pu[r] - p;
            mismatch[m + r] = inj.q_pu[r] - q;
        }
        last_norm = mismatch.amax();
        if last_norm < opts.tolerance_pu {
            return Ok((st, it));
        }
        let j = jacobian(model, &st);
        let lu = nalgebra::linalg::LU::new(j);
        let step = lu.solve(&mismatch).ok_or(GridError::Divergence {
            iterations: it,
            mismatch: last_norm,
        })?;
        for (c, &i) in ns.iter().enumerate() {
            st.theta[i] += step[c];
            st.v[i] += step[m + c];
            if st.v[i] <= 0.0 || !st.v[i].is_finite() {
                return Err(GridError::Divergence {
                    iterations: it,
                    mismatch: last_norm,
                });
            }
        }
    }
    Err(GridError::Divergence {
        iterations: opts.max_iterations,
        mismatch: last_norm,
    })
}

pub(crate) fn branch_current_pu(model: &NetworkModel, st: &PolarState, l: usize) -> f64 {
    let (a, b) = model.line_endpoints_dense(l);
    let va = Complex64::from_polar(st.v[a], st.theta[a]);
    let vb = Complex64::from_polar(st.v[b], st.theta[b]);
    ((va - vb) * model.line_admittance_pu(l)).norm()
}

pub fn solve_power_flow(
    model: &NetworkModel,
    inj: &InjectionVector,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, GridError> {
    let (st, iterations) = solve_polar(model, inj, opts)?;
    let ns = model.non_slack();
    let v_pu: Vec<f64> = ns.iter().map(|&i| st.v[i]).collect();
    let theta_rad: Vec<f64> = ns.iter().map(|&i| st.theta[i]).collect();

    let mut i_pu = Vec::with_capacity(model.num_lines());
    let (mut p_loss, mut q_loss) = (0.0, 0.0);
    for l in 0..model.num_lines() {
        let i_mag = branch_current_pu(model, &st, l);
        i_pu.push(i_mag);
        let z = model.line_admittance_pu(l).inv();
        p_loss += i_mag * i_mag * z.re;
        q_loss += i_mag * i_mag * z.im;
    }

    // Slack injection from the admittance row, then flip to export convention.
    let y = model.admittance();
    let sl = model.slack_index();
    let v_sl = Complex64::from_polar(st.v[sl], st.theta[sl]);
    let mut i_sl = Complex64::new(0.0, 0.0);
    for k in 0..model.num_buses() {
        i_sl += y[(sl, k)] * Complex64::from_polar(st.v[k], st.theta[k]);
    }
    let s_slack = v_sl * i_sl.conj();
    Ok(PowerFlowSolution {
        v_pu,
        theta_rad,
        i_pu,
        p_gcp_pu: -s_slack.re,
        q_gcp_pu: -s_slack.im,
        p_loss_pu: p_loss,
        q_loss_pu: q_loss,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn two_bus() -> NetworkModel {
        NetworkModel::from_str_contents(
            "[base]\nv_base_v = 400.0\ns_base_va = 100000.0\nslack_v_pu = 1.0\n\
             [buses]\n1 slack\n2 pq\n[lines]\n1 2 0.16 0.16 250.0\n",
        )
        .unwrap()
    }

    /// Independent fixed-point oracle for the two-bus case:
    /// v₂ ← v₁ + z·conj(s₂/v₂) with s₂ the bus-2 injection, iterated to
    /// machine precision.
    fn fixed_point_v2(z: Complex64, s2: Complex64, v1: Complex64) -> Complex64 {
        let mut v2 = v1;
        for _ in 0..200 {
            let next = v1 + z * (s2 / v2).conj();
            if (next - v2).norm() < 1e-14 {
                return next;
            }
            v2 = next;
        }
        v2
    }

    #[test]
    fn two_bus_matches_fixed_point_oracle() {
        let m = two_bus();
        let mut inj = InjectionVector::zeros(&m);
        inj.p_pu[0] = -0.1; // 10 kW load
        let sol = solve_power_flow(&m, &inj, &PowerFlowOptions::default()).unwrap();

        let z = Complex64::new(0.1, 0.1);
        let v2 = fixed_point_v2(z, Complex64::new(-0.1, 0.0), Complex64::new(1.0, 0.0));
        assert_abs_diff_eq!(sol.v_pu[0], v2.norm(), epsilon = 1e-9);
        // Sanity magnitude from the same oracle.
        assert_abs_diff_eq!(sol.v_pu[0], 0.990, epsilon = 1e-3);

        // Loss oracle: |s₂/v₂|²·r.
        let i = (Complex64::new(-0.1, 0.0) / v2).norm();
        assert_abs_diff_eq!(sol.p_loss_pu, i * i * 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.i_pu[0], i, epsilon = 1e-9);
    }

    #[test]
    fn flat_profile_at_zero_injection() {
        let m = two_bus();
        let inj = InjectionVector::zeros(&m);
        let sol = solve_power_flow(&m, &inj, &PowerFlowOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.v_pu[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.p_loss_pu, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.p_gcp_pu, 0.0, epsilon = 1e-12);
        assert!(sol.iterations <= 1);
    }

    #[test]
    fn power_balance_export_convention() {
        let m = two_bus();
        let mut inj = InjectionVector::zeros(&m);
        inj.p_pu[0] = 0.15; // generation exports
        inj.q_pu[0] = -0.02;
        let sol = solve_power_flow(&m, &inj, &PowerFlowOptions::default()).unwrap();
        assert!(
            (sol.p_gcp_pu - (inj.total_p_pu() - sol.p_loss_pu)).abs() < 1e-8,
            "balance violated: gcp {} vs inj-loss {}",
            sol.p_gcp_pu,
            inj.total_p_pu() - sol.p_loss_pu
        );
        assert!(
            (sol.q_gcp_pu - (inj.total_q_pu() - sol.q_loss_pu)).abs() < 1e-8,
            "reactive balance violated"
        );
        assert!(sol.p_gcp_pu > 0.0, "generation should export");
    }

    #[test]
    fn losses_grow_quadratically() {
        let m = two_bus();
        let mut small = InjectionVector::zeros(&m);
        small.p_pu[0] = -0.05;
        let mut big = InjectionVector::zeros(&m);
        big.p_pu[0] = -0.10;
        let opts = PowerFlowOptions::default();
        let ls = solve_power_flow(&m, &small, &opts).unwrap().p_loss_pu;
        let lb = solve_power_flow(&m, &big, &opts).unwrap().p_loss_pu;
        // Doubling the load more than quadruples losses: the through-current
        // grows slightly faster than the power because the voltage sags.
        assert!(lb > 4.0 * ls, "losses {lb} not above 4x {ls}");
        assert!(ls > 0.0);
    }

    #[test]
    fn divergence_reported_with_diagnostics() {
        let m = two_bus();
        let mut inj = InjectionVector::zeros(&m);
        inj.p_pu[0] = -60.0; // far beyond the feeder's transfer capability
        match solve_power_flow(&m, &inj, &PowerFlowOptions::default()) {
            Err(GridError::Divergence { mismatch, .. }) => assert!(mismatch > 0.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
