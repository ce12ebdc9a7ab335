//! Affine GCP and limit-row algebra shared by the scheduling and real-time
//! layers: both express the grid-connection-point power and the operational
//! voltage/ampacity envelope as affine functions of the controllable
//! injections, differing only in how the resulting rows are wired into their
//! optimization variables.

use super::audit::GridLimits;
use super::powerflow::InjectionVector;
use super::sensitivity::LinearGridModel;

/// Column positions of one resource's bus in the stacked injection vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResourceCols {
    pub(crate) p: usize,
    pub(crate) q: usize,
}

/// Affine GCP power for one step:
/// `p₀ = const_p + Σ_r dp[r]·(p_r, q_r)` in kW, and likewise `q₀`.
/// The constants fold in the uncontrollable (demand) injections and the
/// linearized losses; the per-resource coefficients are `1 − ∂loss/∂u`.
pub(crate) struct GcpAffine {
    pub(crate) dp: Vec<[f64; 2]>,
    pub(crate) dq: Vec<[f64; 2]>,
    pub(crate) const_p_kw: f64,
    pub(crate) const_q_kw: f64,
}

pub(crate) fn gcp_terms(
    lgm: &LinearGridModel,
    unc: &InjectionVector,
    cols: &[ResourceCols],
    s_base_kw: f64,
) -> GcpAffine {
    let u = unc.stacked();
    let width = u.len();
    let lp: f64 = lgm.b_l[0] + (0..width).map(|c| lgm.a_l[(0, c)] * u[c]).sum::<f64>();
    let lq: f64 = lgm.b_l[1] + (0..width).map(|c| lgm.a_l[(1, c)] * u[c]).sum::<f64>();
    GcpAffine {
        dp: cols
            .iter()
            .map(|c| [1.0 - lgm.a_l[(0, c.p)], -lgm.a_l[(0, c.q)]])
            .collect(),
        dq: cols
            .iter()
            .map(|c| [-lgm.a_l[(1, c.p)], 1.0 - lgm.a_l[(1, c.q)]])
            .collect(),
        const_p_kw: s_base_kw * (unc.total_p_pu() - lp),
        const_q_kw: s_base_kw * (unc.total_q_pu() - lq),
    }
}

/// One voltage or ampacity inequality expressed over the resources' (p, q)
/// contributions in kW: `Σ_r coefs[r]·(p_r, q_r) ≤ rhs`, already normalized
/// by the largest coefficient magnitude.
#[derive(Debug)]
pub(crate) struct LimitRow {
    pub(crate) coefs: Vec<[f64; 2]>,
    pub(crate) rhs: f64,
}

#[derive(Debug)]
pub(crate) struct LimitRows {
    pub(crate) rows: Vec<LimitRow>,
    /// Rows pruned because no admissible resource action can make them bind.
    pub(crate) dropped: usize,
}

/// Builds the voltage-band and ampacity rows for one step of the affine
/// model, pruning rows whose worst-case resource contribution (per `reaches`,
/// the |p|/|q| rating reach of each resource) cannot close the margin.
/// Errors with a description when a margin is already negative and no
/// resource couples to the row.
pub(crate) fn limit_rows(
    lgm: &LinearGridModel,
    unc: &InjectionVector,
    cols: &[ResourceCols],
    reaches: &[[f64; 2]],
    lim: &GridLimits,
    s_base_kw: f64,
) -> Result<LimitRows, String> {
    let u = unc.stacked();
    let width = u.len();
    let m = lgm.num_injections();
    let mut out = LimitRows {
        rows: Vec::new(),
        dropped: 0,
    };

    let emit = |out: &mut LimitRows,
                    coefs: Vec<[f64; 2]>,
                    margin: f64,
                    what: &str|
     -> Result<(), String> {
        // Worst-case |Σ coef·x| over the resource ratings.
        let mut bound = 0.0f64;
        let mut max_c = 0.0f64;
        for (c, reach) in coefs.iter().zip(reaches) {
            for k in 0..2 {
                let a = c[k].abs();
                max_c = max_c.max(a);
                if a > 0.0 {
                    bound += a * reach[k];
                }
            }
        }
        if margin >= bound {
            out.dropped += 1;
            return Ok(());
        }
        if max_c <= 1e-15 {
            return Err(format!(
                "{what} limit violated by {:.3e} with no controllable resource coupled to it",
                -margin
            ));
        }
        out.rows.push(LimitRow {
            coefs: coefs
                .iter()
                .map(|c| [c[0] / max_c, c[1] / max_c])
                .collect(),
            rhs: margin / max_c,
        });
        Ok(())
    };

    // Voltage rows: v ≤ v_max and −v ≤ −v_min per non-slack bus.
    for row in 0..m {
        let vc: f64 = lgm.b_v[row] + (0..width).map(|c| lgm.a_v[(row, c)] * u[c]).sum::<f64>();
        let coefs: Vec<[f64; 2]> = cols
            .iter()
            .map(|c| {
                [
                    lgm.a_v[(row, c.p)] / s_base_kw,
                    lgm.a_v[(row, c.q)] / s_base_kw,
                ]
            })
            .collect();
        let neg: Vec<[f64; 2]> = coefs.iter().map(|c| [-c[0], -c[1]]).collect();
        emit(&mut out, coefs, lim.v_max_pu - vc, "voltage")?;
        emit(&mut out, neg, vc - lim.v_min_pu, "voltage")?;
    }
    // Ampacity rows: i ≤ i_max per line.
    for row in 0..lgm.b_i.len() {
        let ic: f64 = lgm.b_i[row] + (0..width).map(|c| lgm.a_i[(row, c)] * u[c]).sum::<f64>();
        let coefs: Vec<[f64; 2]> = cols
            .iter()
            .map(|c| {
                [
                    lgm.a_i[(row, c.p)] / s_base_kw,
                    lgm.a_i[(row, c.q)] / s_base_kw,
                ]
            })
            .collect();
        emit(&mut out, coefs, lim.i_max_pu[row] - ic, "ampacity")?;
    }
    Ok(out)
}
