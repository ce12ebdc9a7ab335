//! Brute-force reference optimum for small problems: enumerate active sets of
//! the linear constraints, solve each equality-constrained QP, and sweep disk
//! boundaries on a dense angle grid with local refinement.  Exponential in
//! the constraint count — strictly a test oracle for the splitting solver,
//! kept in the library so integration suites can call it.

use nalgebra as na;

use super::problem::ConvexProblem;

#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Angle samples per active disk boundary (pairs of active disks use the
    /// square root of this per axis).
    pub angle_grid: usize,
    pub refine_iters: usize,
    pub feas_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            angle_grid: 720,
            refine_iters: 80,
            feas_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// A face is one linear inequality held at equality.
struct Face {
    terms: Vec<(usize, f64)>,
    rhs: f64,
    /// Faces sharing a conflict group (the two bounds of one variable) are
    /// never activated together.
    conflict: Option<usize>,
}

const MAX_FACES: usize = 18;

/// Best feasible point found by exhaustive active-set enumeration, or `None`
/// when every candidate violates some constraint (empty feasible set, or a
/// problem too large for the oracle).
pub fn enumerate_optimum(p: &ConvexProblem, opts: &OracleOptions) -> Option<OracleSolution> {
    p.validate().ok()?;
    let n = p.num_vars();
    let mut faces: Vec<Face> = Vec::new();
    for r in 0..p.ineq_rows().len() {
        let (cols, vals) = p.ineq_rows().row(r);
        faces.push(Face {
            terms: cols.iter().copied().zip(vals.iter().copied()).collect(),
            rhs: p.ineq_rows().rhs(r),
            conflict: None,
        });
    }
    for i in 0..n {
        if p.lower()[i].is_finite() {
            faces.push(Face {
                terms: vec![(i, 1.0)],
                rhs: p.lower()[i],
                conflict: Some(i),
            });
        }
        if p.upper()[i].is_finite() && p.upper()[i] != p.lower()[i] {
            faces.push(Face {
                terms: vec![(i, 1.0)],
                rhs: p.upper()[i],
                conflict: Some(i),
            });
        }
    }
    if faces.len() > MAX_FACES {
        return None;
    }

    let n_disks = p.disks().len();
    let mut best: Option<OracleSolution> = None;

    for subset in 0u32..(1u32 << faces.len()) {
        // Reject activating both bounds of one variable.
        let mut seen = [false; 64];
        let mut conflict = false;
        let mut active: Vec<usize> = Vec::new();
        for (f, face) in faces.iter().enumerate() {
            if subset & (1 << f) != 0 {
                if let Some(g) = face.conflict {
                    if seen[g % 64] {
                        conflict = true;
                        break;
                    }
                    seen[g % 64] = true;
                }
                active.push(f);
            }
        }
        if conflict || active.len() > n + 2 {
            continue;
        }

        for pattern in 0u32..(1u32 << n_disks) {
            let disk_active: Vec<usize> =
                (0..n_disks).filter(|k| pattern & (1 << k) != 0).collect();
            evaluate_pattern(p, &faces, &active, &disk_active, opts, &mut best);
        }
    }
    best
}

/// Solves the equality-constrained QP for one structural pattern, sweeping
/// angles for active disks, and folds feasible candidates into `best`.
fn evaluate_pattern(
    p: &ConvexProblem,
    faces: &[Face],
    active_faces: &[usize],
    active_disks: &[usize],
    opts: &OracleOptions,
    best: &mut Option<OracleSolution>,
) {
    let n = p.num_vars();
    let n_eq = p.eq_rows().len();
    let g = n_eq + active_faces.len() + 2 * active_disks.len();
    let dim = n + g;
    const DELTA: f64 = 1e-11;

    let mut kkt = na::DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        kkt[(i, i)] += DELTA;
    }
    for &(i, j, v) in p.quad_entries() {
        if i == j {
            kkt[(i, i)] += v;
        } else {
            kkt[(i, j)] += v;
            kkt[(j, i)] += v;
        }
    }
    let put_row = |kkt: &mut na::DMatrix<f64>, gi: usize, terms: &[(usize, f64)]| {
        for &(c, v) in terms {
            kkt[(n + gi, c)] = v;
            kkt[(c, n + gi)] = v;
        }
        kkt[(n + gi, n + gi)] = -DELTA;
    };
    let mut gi = 0;
    for r in 0..n_eq {
        let (cols, vals) = p.eq_rows().row(r);
        let terms: Vec<(usize, f64)> = cols.iter().copied().zip(vals.iter().copied()).collect();
        put_row(&mut kkt, gi, &terms);
        gi += 1;
    }
    for &f in active_faces {
        put_row(&mut kkt, gi, &faces[f].terms);
        gi += 1;
    }
    let disk_row_base = gi;
    for &k in active_disks {
        let d = p.disks()[k];
        put_row(&mut kkt, gi, &[(d.i, 1.0)]);
        put_row(&mut kkt, gi + 1, &[(d.j, 1.0)]);
        gi += 2;
    }

    let lu = na::linalg::LU::new(kkt);
    let mut rhs = na::DVector::<f64>::zeros(dim);
    let mut base_rhs = na::DVector::<f64>::zeros(dim);
    for i in 0..n {
        base_rhs[i] = -p.linear()[i];
    }
    for (r, slot) in (0..n_eq).enumerate() {
        base_rhs[n + slot] = p.eq_rows().rhs(r);
    }
    for (s, &f) in active_faces.iter().enumerate() {
        base_rhs[n + n_eq + s] = faces[f].rhs;
    }

    let mut try_angles = |angles: &[f64], best: &mut Option<OracleSolution>| -> Option<f64> {
        rhs.copy_from_slice(base_rhs.as_slice());
        for (s, &k) in active_disks.iter().enumerate() {
            let r = p.disks()[k].radius;
            rhs[n + disk_row_base + 2 * s] = r * angles[s].cos();
            rhs[n + disk_row_base + 2 * s + 1] = r * angles[s].sin();
        }
        let sol = lu.solve(&rhs)?;
        let x = &sol.as_slice()[..n];
        if p.max_violation(x) <= opts.feas_tol {
            let obj = p.objective(x);
            if best.as_ref().map_or(true, |b| obj < b.objective - 1e-14) {
                *best = Some(OracleSolution {
                    x: x.to_vec(),
                    objective: obj,
                });
            }
            Some(obj)
        } else {
            None
        }
    };

    match active_disks.len() {
        0 => {
            try_angles(&[], best);
        }
        1 => {
            let grid = opts.angle_grid.max(8);
            let mut best_angle = None;
            let mut best_val = f64::INFINITY;
            for s in 0..grid {
                let phi = s as f64 / grid as f64 * std::f64::consts::TAU;
                if let Some(v) = try_angles(&[phi], best) {
                    if v < best_val {
                        best_val = v;
                        best_angle = Some(phi);
                    }
                }
            }
            if let Some(phi) = best_angle {
                let span = std::f64::consts::TAU / grid as f64;
                refine(
                    &mut |a: &[f64], b: &mut Option<OracleSolution>| try_angles(a, b),
                    &mut vec![phi],
                    0,
                    span,
                    opts.refine_iters,
                    best,
                );
            }
        }
        _ => {
            // Coarse joint grid, then cyclic 1-D refinement.
            let grid = (opts.angle_grid as f64).sqrt().ceil() as usize + 8;
            let mut best_angles = None;
            let mut best_val = f64::INFINITY;
            let mut angles = vec![0.0; active_disks.len()];
            let mut idx = vec![0usize; active_disks.len()];
            'outer: loop {
                for (s, &i) in idx.iter().enumerate() {
                    angles[s] = i as f64 / grid as f64 * std::f64::consts::TAU;
                }
                if let Some(v) = try_angles(&angles, best) {
                    if v < best_val {
                        best_val = v;
                        best_angles = Some(angles.clone());
                    }
                }
                let mut d = 0;
                loop {
                    idx[d] += 1;
                    if idx[d] < grid {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                    if d == idx.len() {
                        break 'outer;
                    }
                }
            }
            if let Some(mut a) = best_angles {
                let span = std::f64::consts::TAU / grid as f64;
                for _pass in 0..3 {
                    for s in 0..a.len() {
                        refine(
                            &mut |ang: &[f64], b: &mut Option<OracleSolution>| try_angles(ang, b),
                            &mut a,
                            s,
                            span,
                            opts.refine_iters,
                            best,
                        );
                    }
                }
            }
        }
    }
}

/// Golden-section shrink of angle `s` around its current value; infeasible
/// evaluations count as +∞.
fn refine(
    eval: &mut dyn FnMut(&[f64], &mut Option<OracleSolution>) -> Option<f64>,
    angles: &mut [f64],
    s: usize,
    span: f64,
    iters: usize,
    best: &mut Option<OracleSolution>,
) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let centre = angles[s];
    let (mut lo, mut hi) = (centre - span, centre + span);
    let mut probe = |phi: f64, angles: &mut [f64], best: &mut Option<OracleSolution>| -> f64 {
        angles[s] = phi;
        eval(angles, best).unwrap_or(f64::INFINITY)
    };
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = probe(c, angles, best);
    let mut fd = probe(d, angles, best);
    for _ in 0..iters {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = probe(c, angles, best);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = probe(d, angles, best);
        }
    }
    angles[s] = if fc <= fd { c } else { d };
}
