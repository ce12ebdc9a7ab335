//! Operator-splitting solver for the canonical problem form.
//!
//! The iteration is the standard scaled splitting on
//!     minimize ½xᵀPx + qᵀx   s.t.   Âx = z,  z ∈ C,
//! where C is a product of intervals (equalities, inequalities and variable
//! boxes) and of two-dimensional disks, all with closed-form projections.
//! The x-update solves a fixed normal matrix P + σI + ÂᵀRÂ whose Cholesky
//! factorization is cached and only recomputed when the penalty is rescaled.
//!
//! Two structural optimizations keep the same code path usable from the
//! 2-variable photovoltaic projections up to the day-ahead program with ~10⁵
//! variables: independent variable components are split off and solved
//! separately, and the normal matrix is stored banded whenever the emitter's
//! variable ordering yields a narrow band (time-major layouts do).

use nalgebra as na;

use super::kkt::{kkt_residual, KktResiduals};
use super::problem::{ConvexProblem, LinearRows};
use super::project::{project_box, project_disk};
use super::{nan_max, SolveError};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Absolute feasibility/stationarity tolerance for the iteration.
    pub eps_abs: f64,
    /// Relative tolerance, scaled by iterate magnitudes.
    pub eps_rel: f64,
    /// Residual level below which the final KKT check reports optimality.
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Initial penalty; adapted at runtime unless `adaptive_rho` is off.
    pub rho: f64,
    /// Proximal regularization on the x-update.
    pub sigma: f64,
    pub adaptive_rho: bool,
    /// Active-set refinement of the converged iterate (skipped for very large
    /// problems where the dense KKT solve would dominate).
    pub polish: bool,
    pub warm_x: Option<Vec<f64>>,
    pub warm_duals: Option<DualVariables>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eps_abs: 1e-9,
            eps_rel: 1e-9,
            kkt_tol: 1e-7,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            adaptive_rho: true,
            polish: true,
            warm_x: None,
            warm_duals: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    MaxIterations,
    /// Heuristic: the separation between the affine image and the constraint
    /// product stopped decreasing well above tolerance.
    Infeasible,
}

/// Multipliers in the sign convention of the Lagrangian
/// L = f + y_eqᵀ(Ax−b) + y_inᵀ(Ax−b) + bound and disk terms: inequality duals
/// are ≥ 0 at optimum, bound duals are ≥ 0 when the upper bound is active and
/// ≤ 0 at the lower bound, disk duals point along the outward normal.
#[derive(Debug, Clone, Default)]
pub struct DualVariables {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    /// One entry per variable (zero when no bound is active).
    pub bounds: Vec<f64>,
    pub disks: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct SolverSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub duals: DualVariables,
    pub kkt: KktResiduals,
}

// ---------------------------------------------------------------------------
// sparse helpers

#[derive(Debug, Clone, Default)]
struct Csr {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn new(_n_cols: usize) -> Self {
        Csr {
            starts: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn rows(&self) -> usize {
        self.starts.len() - 1
    }

    fn push_row(&mut self, cols: &[usize], vals: &[f64], scale: f64) {
        for (&c, &v) in cols.iter().zip(vals) {
            self.cols.push(c);
            self.vals.push(v * scale);
        }
        self.starts.push(self.cols.len());
    }

    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.starts[r], self.starts[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.rows() {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            out[r] = acc;
        }
    }

    /// out += Aᵀ w
    fn mul_t_accum(&self, w: &[f64], out: &mut [f64]) {
        for r in 0..self.rows() {
            let wr = w[r];
            if wr != 0.0 {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    out[c] += v * wr;
                }
            }
        }
    }

    /// Symmetric matrix from accumulated (i, j, v) lower entries; mirrors into
    /// a full pattern so row scans cover both triangles.
    fn symmetric_from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Csr {
        let mut full: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len() * 2);
        for &(i, j, v) in entries {
            full.push((i, j, v));
            if i != j {
                full.push((j, i, v));
            }
        }
        full.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut m = Csr::new(n);
        let mut idx = 0;
        for row in 0..n {
            while idx < full.len() && full[idx].0 == row {
                let col = full[idx].1;
                let mut v = 0.0;
                while idx < full.len() && full[idx].0 == row && full[idx].1 == col {
                    v += full[idx].2;
                    idx += 1;
                }
                if v != 0.0 {
                    m.cols.push(col);
                    m.vals.push(v);
                }
            }
            m.starts.push(m.cols.len());
        }
        m
    }
}

// ---------------------------------------------------------------------------
// banded Cholesky

/// Lower-banded symmetric storage: entry (i, j) with 0 ≤ i−j ≤ w lives at
/// data[j·(w+1) + (i−j)].
struct BandMatrix {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, w: usize) -> Self {
        BandMatrix {
            n,
            w,
            data: vec![0.0; n * (w + 1)],
        }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(hi - lo <= self.w);
        self.data[lo * (self.w + 1) + (hi - lo)] += v;
    }

    /// In-place Cholesky; fails on loss of positive definiteness.
    fn factor(&mut self) -> Result<(), SolveError> {
        let (n, w) = (self.n, self.w);
        for j in 0..n {
            let mut d = self.data[j * (w + 1)];
            for k in j.saturating_sub(w)..j {
                let l_jk = self.data[k * (w + 1) + (j - k)];
                d -= l_jk * l_jk;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(SolveError::NumericFailure(
                    "banded factorization lost positive definiteness (non-PSD cost?)".into(),
                ));
            }
            let l_jj = d.sqrt();
            self.data[j * (w + 1)] = l_jj;
            let i_max = (j + w).min(n - 1);
            for i in j + 1..=i_max {
                let mut v = self.data[j * (w + 1) + (i - j)];
                let k_min = i.saturating_sub(w).max(0);
                for k in k_min..j {
                    v -= self.data[k * (w + 1) + (i - k)] * self.data[k * (w + 1) + (j - k)];
                }
                self.data[j * (w + 1) + (i - j)] = v / l_jj;
            }
        }
        Ok(())
    }

    /// Solves L Lᵀ x = b in place (after `factor`).
    fn solve(&self, b: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        for i in 0..n {
            let mut v = b[i];
            for k in i.saturating_sub(w)..i {
                v -= self.data[k * (w + 1) + (i - k)] * b[k];
            }
            b[i] = v / self.data[i * (w + 1)];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            let k_max = (i + w).min(n - 1);
            for k in i + 1..=k_max {
                v -= self.data[i * (w + 1) + (k - i)] * b[k];
            }
            b[i] = v / self.data[i * (w + 1)];
        }
    }
}

enum Factor {
    Dense(na::linalg::Cholesky<f64, na::Dyn>),
    Band(BandMatrix),
}

impl Factor {
    fn solve(&self, rhs: &mut [f64]) {
        match self {
            Factor::Dense(chol) => {
                let mut v = na::DVector::from_column_slice(rhs);
                chol.solve_mut(&mut v);
                rhs.copy_from_slice(v.as_slice());
            }
            Factor::Band(band) => band.solve(rhs),
        }
    }
}

// ---------------------------------------------------------------------------
// constraint stacking

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Eq(usize),
    Ineq(usize),
    BoundOf(usize),
    /// First row of a disk pair, carrying the disk index; the second row is
    /// implicit (the following row).
    DiskLead(usize),
    DiskTrail,
}

struct Stacked {
    a: Csr,
    kind: Vec<RowKind>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    radius: Vec<f64>, // per row, only meaningful on DiskLead
    scale: Vec<f64>,  // row scaling d_r applied to a and to lo/hi
    is_eq_like: Vec<bool>,
}

fn stack_rows(p: &ConvexProblem) -> Stacked {
    let n = p.num_vars();
    let mut st = Stacked {
        a: Csr::new(n),
        kind: Vec::new(),
        lo: Vec::new(),
        hi: Vec::new(),
        radius: Vec::new(),
        scale: Vec::new(),
        is_eq_like: Vec::new(),
    };
    let push_linear = |st: &mut Stacked, rows: &LinearRows, r: usize, eq: bool| {
        let (cols, vals) = rows.row(r);
        let norm = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = if norm > 1e-12 { 1.0 / norm } else { 1.0 };
        st.a.push_row(cols, vals, d);
        let b = rows.rhs(r) * d;
        st.lo.push(if eq { b } else { f64::NEG_INFINITY });
        st.hi.push(b);
        st.radius.push(0.0);
        st.scale.push(d);
        st.is_eq_like.push(eq);
    };
    for r in 0..p.eq_rows().len() {
        push_linear(&mut st, p.eq_rows(), r, true);
        st.kind.push(RowKind::Eq(r));
    }
    for r in 0..p.ineq_rows().len() {
        push_linear(&mut st, p.ineq_rows(), r, false);
        st.kind.push(RowKind::Ineq(r));
    }
    for i in 0..n {
        let (lo, hi) = (p.lower()[i], p.upper()[i]);
        if lo.is_finite() || hi.is_finite() {
            st.a.push_row(&[i], &[1.0], 1.0);
            st.kind.push(RowKind::BoundOf(i));
            st.lo.push(lo);
            st.hi.push(hi);
            st.radius.push(0.0);
            st.scale.push(1.0);
            st.is_eq_like.push(lo == hi);
        }
    }
    for (k, d) in p.disks().iter().enumerate() {
        st.a.push_row(&[d.i], &[1.0], 1.0);
        st.kind.push(RowKind::DiskLead(k));
        st.lo.push(f64::NEG_INFINITY);
        st.hi.push(f64::INFINITY);
        st.radius.push(d.radius);
        st.scale.push(1.0);
        st.is_eq_like.push(false);
        st.a.push_row(&[d.j], &[1.0], 1.0);
        st.kind.push(RowKind::DiskTrail);
        st.lo.push(f64::NEG_INFINITY);
        st.hi.push(f64::INFINITY);
        st.radius.push(0.0);
        st.scale.push(1.0);
        st.is_eq_like.push(false);
    }
    st
}

fn project_set(st: &Stacked, v: &[f64], z: &mut [f64]) {
    let m = st.kind.len();
    let mut r = 0;
    while r < m {
        match st.kind[r] {
            RowKind::DiskLead(_) => {
                let (zp, zq) = project_disk(v[r], v[r + 1], st.radius[r]);
                z[r] = zp;
                z[r + 1] = zq;
                r += 2;
            }
            _ => {
                z[r] = project_box(v[r], st.lo[r], st.hi[r]);
                r += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// component split

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = i;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn components(p: &ConvexProblem) -> Vec<Vec<usize>> {
    let n = p.num_vars();
    let mut uf = UnionFind::new(n);
    for &(i, j, _) in p.quad_entries() {
        uf.union(i, j);
    }
    for rows in [p.eq_rows(), p.ineq_rows()] {
        for r in 0..rows.len() {
            let (cols, _) = rows.row(r);
            for w in cols.windows(2) {
                uf.union(w[0], w[1]);
            }
        }
    }
    for d in p.disks() {
        uf.union(d.i, d.j);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for v in 0..n {
        let r = uf.find(v);
        if root_slot[r] == usize::MAX {
            root_slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_slot[r]].push(v);
    }
    groups
}

// ---------------------------------------------------------------------------
// monolithic solve

/// Bandwidth of the coupling pattern (variables appearing together in any
/// cost or constraint term) under the emitter's variable order.
fn coupling_bandwidth(p: &ConvexProblem) -> usize {
    let mut w = 0usize;
    for &(i, j, _) in p.quad_entries() {
        w = w.max(i.abs_diff(j));
    }
    for rows in [p.eq_rows(), p.ineq_rows()] {
        for r in 0..rows.len() {
            let (cols, _) = rows.row(r);
            if let (Some(&a), Some(&b)) = (cols.iter().min(), cols.iter().max()) {
                w = w.max(b - a);
            }
        }
    }
    for d in p.disks() {
        w = w.max(d.i.abs_diff(d.j));
    }
    w
}

const DENSE_MAX: usize = 1500;

fn build_factor(
    p_mat: &Csr,
    st: &Stacked,
    rho: &[f64],
    sigma: f64,
    n: usize,
    bandwidth: usize,
) -> Result<Factor, SolveError> {
    let banded = n > 192 && bandwidth + 1 < n / 3;
    if !banded && n > DENSE_MAX {
        return Err(SolveError::NumericFailure(format!(
            "problem too large for dense factorization (n = {n}, bandwidth = {bandwidth}); \
             order variables so coupled ones are adjacent"
        )));
    }
    if banded {
        let mut m = BandMatrix::zeros(n, bandwidth);
        for i in 0..n {
            m.add(i, i, sigma);
            let (cols, vals) = p_mat.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c <= i {
                    m.add(i, c, v);
                }
            }
        }
        for r in 0..st.a.rows() {
            let (cols, vals) = st.a.row(r);
            for (a, &ci) in cols.iter().enumerate() {
                for (b, &cj) in cols.iter().enumerate() {
                    if cj <= ci {
                        m.add(ci, cj, rho[r] * vals[a] * vals[b]);
                    }
                }
            }
        }
        m.factor()?;
        Ok(Factor::Band(m))
    } else {
        let mut m = na::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += sigma;
            let (cols, vals) = p_mat.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c)] += v;
            }
        }
        for r in 0..st.a.rows() {
            let (cols, vals) = st.a.row(r);
            for (a, &ci) in cols.iter().enumerate() {
                for (b, &cj) in cols.iter().enumerate() {
                    m[(ci, cj)] += rho[r] * vals[a] * vals[b];
                }
            }
        }
        na::linalg::Cholesky::new(m)
            .map(Factor::Dense)
            .ok_or_else(|| {
                SolveError::NumericFailure(
                    "normal-matrix factorization failed (non-PSD cost?)".into(),
                )
            })
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| nan_max(m, x.abs()))
}

fn solve_monolithic(p: &ConvexProblem, opts: &SolveOptions) -> Result<SolverSolution, SolveError> {
    let n = p.num_vars();
    let st = stack_rows(p);
    let m = st.a.rows();
    let p_mat = Csr::symmetric_from_triplets(n, p.quad_entries());
    let bandwidth = coupling_bandwidth(p);

    // Equality-like rows get a stiffer penalty, as usual for splitting methods.
    let mut rho_base = opts.rho.max(1e-6);
    let rho_row = |base: f64, st: &Stacked, out: &mut [f64]| {
        for r in 0..out.len() {
            out[r] = if st.is_eq_like[r] { base * 10.0 } else { base };
        }
    };
    let mut rho = vec![0.0; m];
    rho_row(rho_base, &st, &mut rho);

    let mut factor = build_factor(&p_mat, &st, &rho, opts.sigma, n, bandwidth)?;

    let mut x = match &opts.warm_x {
        Some(w) if w.len() == n => w.clone(),
        _ => vec![0.0; n],
    };
    let mut y = vec![0.0; m];
    if let Some(wd) = &opts.warm_duals {
        for (r, k) in st.kind.iter().enumerate() {
            y[r] = match *k {
                RowKind::Eq(i) => wd.eq.get(i).copied().unwrap_or(0.0) / st.scale[r],
                RowKind::Ineq(i) => wd.ineq.get(i).copied().unwrap_or(0.0) / st.scale[r],
                RowKind::BoundOf(i) => wd.bounds.get(i).copied().unwrap_or(0.0),
                RowKind::DiskLead(k) => wd.disks.get(k).map(|d| d[0]).unwrap_or(0.0),
                RowKind::DiskTrail => 0.0,
            };
        }
        // second disk components
        for (r, k) in st.kind.iter().enumerate() {
            if let RowKind::DiskLead(k) = *k {
                y[r + 1] = wd.disks.get(k).map(|d| d[1]).unwrap_or(0.0);
            }
        }
    }

    let mut ax = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut rhs = vec![0.0; n];
    let mut px = vec![0.0; n];
    let mut aty = vec![0.0; n];

    st.a.mul(&x, &mut ax);
    project_set(&st, &ax, &mut z);

    let q = p.linear();
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIterations;

    // Stall detector for the infeasibility heuristic.
    const WINDOW: usize = 200;
    let mut window_best = f64::INFINITY;
    let mut prev_window_best = f64::INFINITY;
    let mut stalled_windows = 0usize;

    for it in 1..=opts.max_iter {
        iterations = it;

        // x-update
        for i in 0..n {
            rhs[i] = opts.sigma * x[i] - q[i];
        }
        for r in 0..m {
            v[r] = rho[r] * z[r] - y[r];
        }
        st.a.mul_t_accum(&v, &mut rhs);
        factor.solve(&mut rhs);
        x.copy_from_slice(&rhs);

        // z- and y-updates
        st.a.mul(&x, &mut ax);
        for r in 0..m {
            v[r] = ax[r] + y[r] / rho[r];
        }
        project_set(&st, &v, &mut z);
        for r in 0..m {
            y[r] += rho[r] * (ax[r] - z[r]);
        }

        let check = it % 10 == 0 || it == opts.max_iter;
        if check {
            let mut r_prim = 0.0f64;
            for r in 0..m {
                r_prim = nan_max(r_prim, (ax[r] - z[r]).abs());
            }
            p_mat.mul(&x, &mut px);
            aty.iter_mut().for_each(|v| *v = 0.0);
            st.a.mul_t_accum(&y, &mut aty);
            let mut r_dual = 0.0f64;
            for i in 0..n {
                r_dual = nan_max(r_dual, (px[i] + q[i] + aty[i]).abs());
            }
            let ep = opts.eps_abs + opts.eps_rel * inf_norm(&ax).max(inf_norm(&z));
            let ed = opts.eps_abs
                + opts.eps_rel * inf_norm(&px).max(inf_norm(q)).max(inf_norm(&aty));
            if r_prim <= ep && r_dual <= ed {
                status = SolverStatus::Optimal;
                break;
            }
            // `!(· <= ·)` also trips on NaN, so a corrupted iterate is an
            // error rather than a silently wrong answer.
            if !(inf_norm(&x) <= 1e12) {
                return Err(SolveError::NumericFailure(
                    "iterates diverged or became non-finite (unbounded or badly scaled problem)"
                        .into(),
                ));
            }

            // Infeasibility heuristic: primal separation stalls far from tol.
            window_best = window_best.min(r_prim);
            if it % WINDOW == 0 {
                if window_best > (50.0 * ep).max(1e-8) && window_best > 0.999 * prev_window_best
                {
                    stalled_windows += 1;
                } else {
                    stalled_windows = 0;
                }
                if stalled_windows >= 3 {
                    status = SolverStatus::Infeasible;
                    break;
                }
                prev_window_best = window_best;
                window_best = f64::INFINITY;
            }

            // Penalty rescaling with residual balancing.
            if opts.adaptive_rho && it % 50 == 0 {
                let rp_rel = r_prim / ep.max(1e-30);
                let rd_rel = r_dual / ed.max(1e-30);
                let ratio = (rp_rel / rd_rel.max(1e-30)).sqrt();
                let new_base = (rho_base * ratio).clamp(1e-6, 1e6);
                if new_base / rho_base > 5.0 || new_base / rho_base < 0.2 {
                    rho_base = new_base;
                    rho_row(rho_base, &st, &mut rho);
                    factor = build_factor(&p_mat, &st, &rho, opts.sigma, n, bandwidth)?;
                }
            }
        }
    }

    let mut duals = unstack_duals(p, &st, &y);
    if opts.polish && status == SolverStatus::Optimal && n <= DENSE_MAX {
        polish(p, &st, &ax, &mut x, &mut duals);
    }
    let kkt = kkt_residual(p, &x, &duals);
    Ok(SolverSolution {
        objective: p.objective(&x),
        x,
        status,
        iterations,
        duals,
        kkt,
    })
}

fn unstack_duals(p: &ConvexProblem, st: &Stacked, y: &[f64]) -> DualVariables {
    let mut d = DualVariables {
        eq: vec![0.0; p.eq_rows().len()],
        ineq: vec![0.0; p.ineq_rows().len()],
        bounds: vec![0.0; p.num_vars()],
        disks: vec![[0.0; 2]; p.disks().len()],
    };
    for (r, k) in st.kind.iter().enumerate() {
        match *k {
            RowKind::Eq(i) => d.eq[i] = y[r] * st.scale[r],
            RowKind::Ineq(i) => d.ineq[i] = y[r] * st.scale[r],
            RowKind::BoundOf(i) => d.bounds[i] = y[r],
            RowKind::DiskLead(i) => d.disks[i] = [y[r], y[r + 1]],
            RowKind::DiskTrail => {}
        }
    }
    d
}

/// Equality-constrained refinement on the detected active set.  Accepted only
/// when it does not worsen feasibility and improves the stationarity residual.
fn polish(p: &ConvexProblem, st: &Stacked, ax: &[f64], x: &mut Vec<f64>, duals: &mut DualVariables) {
    let n = p.num_vars();
    let act_tol = |bound: f64| 1e-6 * bound.abs().max(1.0);

    // Gather active rows as (coefficient row, rhs, writeback slot).
    enum Slot {
        Eq(usize),
        Ineq(usize),
        Bound(usize),
        Disk(usize, f64, f64),
    }
    let mut g_rows: Vec<(Vec<(usize, f64)>, f64, Slot)> = Vec::new();
    for r in 0..st.kind.len() {
        match st.kind[r] {
            RowKind::Eq(i) => {
                let (cols, vals) = p.eq_rows().row(i);
                g_rows.push((
                    cols.iter().copied().zip(vals.iter().copied()).collect(),
                    p.eq_rows().rhs(i),
                    Slot::Eq(i),
                ));
            }
            RowKind::Ineq(i) => {
                let slack = st.hi[r] - ax[r];
                if slack.abs() <= act_tol(st.hi[r]) {
                    let (cols, vals) = p.ineq_rows().row(i);
                    g_rows.push((
                        cols.iter().copied().zip(vals.iter().copied()).collect(),
                        p.ineq_rows().rhs(i),
                        Slot::Ineq(i),
                    ));
                }
            }
            RowKind::BoundOf(i) => {
                // Only a finite bound can be an active constraint; comparing
                // against an infinite one would pass an infinite rhs into the
                // KKT system (act_tol(∞) = ∞ makes the test trivially true).
                let v = ax[r];
                if st.lo[r].is_finite() && (v - st.lo[r]).abs() <= act_tol(st.lo[r]) {
                    g_rows.push((vec![(i, 1.0)], st.lo[r], Slot::Bound(i)));
                } else if st.hi[r].is_finite() && (st.hi[r] - v).abs() <= act_tol(st.hi[r]) {
                    g_rows.push((vec![(i, 1.0)], st.hi[r], Slot::Bound(i)));
                }
            }
            RowKind::DiskLead(k) => {
                let d = p.disks()[k];
                let norm = ax[r].hypot(ax[r + 1]);
                if d.radius.is_finite()
                    && d.radius > 0.0
                    && (norm - d.radius).abs() <= act_tol(d.radius)
                    && norm > 0.0
                {
                    let (np_, nq_) = (ax[r] / norm, ax[r + 1] / norm);
                    g_rows.push((
                        vec![(d.i, np_), (d.j, nq_)],
                        d.radius,
                        Slot::Disk(k, np_, nq_),
                    ));
                }
            }
            RowKind::DiskTrail => {}
        }
    }

    let g = g_rows.len();
    if n + g > 2 * DENSE_MAX {
        return;
    }
    const DELTA: f64 = 1e-10;
    let mut kkt = na::DMatrix::<f64>::zeros(n + g, n + g);
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
    for (gi, (row, _, _)) in g_rows.iter().enumerate() {
        for &(c, v) in row {
            kkt[(n + gi, c)] = v;
            kkt[(c, n + gi)] = v;
        }
        kkt[(n + gi, n + gi)] = -DELTA;
    }
    let mut rhs = na::DVector::<f64>::zeros(n + g);
    for i in 0..n {
        rhs[i] = -p.linear()[i];
    }
    for (gi, (_, b, _)) in g_rows.iter().enumerate() {
        rhs[n + gi] = *b;
    }
    let lu = na::linalg::LU::new(kkt);
    let Some(sol) = lu.solve(&rhs) else { return };
    let cand: Vec<f64> = sol.as_slice()[..n].to_vec();

    let viol_before = p.max_violation(x);
    let viol_after = p.max_violation(&cand);
    if !viol_after.is_finite() || viol_after > viol_before.max(1e-9) {
        return;
    }

    let mut cand_duals = DualVariables {
        eq: vec![0.0; p.eq_rows().len()],
        ineq: vec![0.0; p.ineq_rows().len()],
        bounds: vec![0.0; n],
        disks: vec![[0.0; 2]; p.disks().len()],
    };
    for (gi, (_, _, slot)) in g_rows.iter().enumerate() {
        let nu = sol[n + gi];
        match *slot {
            Slot::Eq(i) => cand_duals.eq[i] = nu,
            Slot::Ineq(i) => cand_duals.ineq[i] = nu,
            Slot::Bound(i) => cand_duals.bounds[i] = nu,
            Slot::Disk(k, np_, nq_) => cand_duals.disks[k] = [nu * np_, nu * nq_],
        }
    }
    let before = kkt_residual(p, x, duals);
    let after = kkt_residual(p, &cand, &cand_duals);
    if after.max() < before.max() {
        *x = cand;
        *duals = cand_duals;
    }
}

// ---------------------------------------------------------------------------
// public entry

pub fn solve(p: &ConvexProblem, opts: &SolveOptions) -> Result<SolverSolution, SolveError> {
    p.validate()?;
    let n = p.num_vars();
    if n == 0 {
        return Ok(SolverSolution {
            x: Vec::new(),
            objective: p.constant(),
            status: SolverStatus::Optimal,
            iterations: 0,
            duals: DualVariables::default(),
            kkt: KktResiduals::default(),
        });
    }

    let groups = components(p);
    if groups.len() == 1 {
        return solve_monolithic(p, opts);
    }

    // Assign each variable its component slot, then split the problem.
    let mut slot_of = vec![0usize; n];
    let mut index_in = vec![0usize; n];
    for (gi, vars) in groups.iter().enumerate() {
        for (k, &v) in vars.iter().enumerate() {
            slot_of[v] = gi;
            index_in[v] = k;
        }
    }

    let mut subs: Vec<ConvexProblem> = groups.iter().map(|g| ConvexProblem::new(g.len())).collect();
    let mut eq_origin: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    let mut ineq_origin: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    let mut disk_origin: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];

    for &(i, j, v) in p.quad_entries() {
        let s = slot_of[i];
        if i == j {
            subs[s].add_quadratic(index_in[i], index_in[i], 0.5 * v);
        } else {
            subs[s].add_quadratic(index_in[i], index_in[j], v);
        }
    }
    for (i, &qv) in p.linear().iter().enumerate() {
        if qv != 0.0 {
            subs[slot_of[i]].add_linear(index_in[i], qv);
        }
    }
    for r in 0..p.eq_rows().len() {
        let (cols, vals) = p.eq_rows().row(r);
        let s = slot_of[cols[0]];
        let terms: Vec<(usize, f64)> = cols
            .iter()
            .map(|&c| index_in[c])
            .zip(vals.iter().copied())
            .collect();
        subs[s].push_eq(&terms, p.eq_rows().rhs(r));
        eq_origin[s].push(r);
    }
    for r in 0..p.ineq_rows().len() {
        let (cols, vals) = p.ineq_rows().row(r);
        let s = slot_of[cols[0]];
        let terms: Vec<(usize, f64)> = cols
            .iter()
            .map(|&c| index_in[c])
            .zip(vals.iter().copied())
            .collect();
        subs[s].push_ineq(&terms, p.ineq_rows().rhs(r));
        ineq_origin[s].push(r);
    }
    for i in 0..n {
        subs[slot_of[i]].set_bounds(index_in[i], p.lower()[i], p.upper()[i]);
    }
    for (k, d) in p.disks().iter().enumerate() {
        let s = slot_of[d.i];
        subs[s].add_disk(index_in[d.i], index_in[d.j], d.radius);
        disk_origin[s].push(k);
    }

    let mut x = vec![0.0; n];
    let mut duals = DualVariables {
        eq: vec![0.0; p.eq_rows().len()],
        ineq: vec![0.0; p.ineq_rows().len()],
        bounds: vec![0.0; n],
        disks: vec![[0.0; 2]; p.disks().len()],
    };
    let mut status = SolverStatus::Optimal;
    let mut iterations = 0usize;

    for (gi, sub) in subs.iter().enumerate() {
        let mut sub_opts = opts.clone();
        sub_opts.warm_x = opts
            .warm_x
            .as_ref()
            .filter(|w| w.len() == n)
            .map(|w| groups[gi].iter().map(|&v| w[v]).collect());
        sub_opts.warm_duals = opts.warm_duals.as_ref().map(|wd| DualVariables {
            eq: eq_origin[gi]
                .iter()
                .map(|&r| wd.eq.get(r).copied().unwrap_or(0.0))
                .collect(),
            ineq: ineq_origin[gi]
                .iter()
                .map(|&r| wd.ineq.get(r).copied().unwrap_or(0.0))
                .collect(),
            bounds: groups[gi]
                .iter()
                .map(|&v| wd.bounds.get(v).copied().unwrap_or(0.0))
                .collect(),
            disks: disk_origin[gi]
                .iter()
                .map(|&k| wd.disks.get(k).copied().unwrap_or([0.0; 2]))
                .collect(),
        });
        let sol = solve_monolithic(sub, &sub_opts)?;
        for (k, &v) in groups[gi].iter().enumerate() {
            x[v] = sol.x[k];
            duals.bounds[v] = sol.duals.bounds[k];
        }
        for (k, &r) in eq_origin[gi].iter().enumerate() {
            duals.eq[r] = sol.duals.eq[k];
        }
        for (k, &r) in ineq_origin[gi].iter().enumerate() {
            duals.ineq[r] = sol.duals.ineq[k];
        }
        for (k, &r) in disk_origin[gi].iter().enumerate() {
            duals.disks[r] = sol.duals.disks[k];
        }
        iterations = iterations.max(sol.iterations);
        status = match (status, sol.status) {
            (_, SolverStatus::Infeasible) | (SolverStatus::Infeasible, _) => {
                SolverStatus::Infeasible
            }
            (SolverStatus::MaxIterations, _) | (_, SolverStatus::MaxIterations) => {
                SolverStatus::MaxIterations
            }
            _ => SolverStatus::Optimal,
        };
    }

    let kkt = kkt_residual(p, &x, &duals);
    Ok(SolverSolution {
        objective: p.objective(&x),
        x,
        status,
        iterations,
        duals,
        kkt,
    })
}
