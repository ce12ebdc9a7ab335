//! Canonical container for the small structured programs every other layer
//! emits: convex quadratic cost, linear equalities/inequalities, per-variable
//! boxes and two-variable disk (apparent-power) constraints.
//!
//! Cost convention: f(x) = ½ xᵀ P x + qᵀ x + c with P symmetric PSD.  All
//! builder helpers below produce sums of squares, so PSD holds by
//! construction; `solve` additionally detects indefiniteness through a failed
//! factorization.

use super::{nan_max, SolveError};

/// ‖(x_i, x_j)‖₂ ≤ radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskConstraint {
    pub i: usize,
    pub j: usize,
    pub radius: f64,
}

/// Sparse row block `A x (=|≤) b`, rows stored CSR-style.
#[derive(Debug, Clone, Default)]
pub struct LinearRows {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
}

impl LinearRows {
    pub fn new() -> Self {
        LinearRows {
            starts: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn push(&mut self, terms: &[(usize, f64)], rhs: f64) {
        for &(c, v) in terms {
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.starts.push(self.cols.len());
        self.rhs.push(rhs);
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.starts[r], self.starts[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn rhs(&self, r: usize) -> f64 {
        self.rhs[r]
    }

    pub fn dot(&self, r: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(r);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConvexProblem {
    n: usize,
    /// P entries as (i, j, value) with the symmetric mirror implied; duplicates
    /// accumulate.
    quad: Vec<(usize, usize, f64)>,
    lin: Vec<f64>,
    constant: f64,
    eq: LinearRows,
    ineq: LinearRows,
    lower: Vec<f64>,
    upper: Vec<f64>,
    disks: Vec<DiskConstraint>,
}

impl ConvexProblem {
    pub fn new(n: usize) -> Self {
        ConvexProblem {
            n,
            quad: Vec::new(),
            lin: vec![0.0; n],
            constant: 0.0,
            eq: LinearRows::new(),
            ineq: LinearRows::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            disks: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Adds `coeff · x_i · x_j` to the cost.
    pub fn add_quadratic(&mut self, i: usize, j: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        if i == j {
            // ½ P_ii x² = coeff x² → P_ii += 2 coeff
            self.quad.push((i, i, 2.0 * coeff));
        } else {
            self.quad.push((i.max(j), i.min(j), coeff));
        }
    }

    pub fn add_linear(&mut self, i: usize, coeff: f64) {
        self.lin[i] += coeff;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    /// Adds `weight · (Σ a_k x_k + offset)²` to the cost; the workhorse for
    /// tracking and proximal terms.
    pub fn add_square(&mut self, weight: f64, terms: &[(usize, f64)], offset: f64) {
        if weight == 0.0 {
            return;
        }
        for (idx, &(i, a)) in terms.iter().enumerate() {
            self.add_quadratic(i, i, weight * a * a);
            for &(j, b) in &terms[idx + 1..] {
                if i == j {
                    self.add_quadratic(i, i, 2.0 * weight * a * b);
                } else {
                    self.add_quadratic(i, j, 2.0 * weight * a * b);
                }
            }
            self.add_linear(i, 2.0 * weight * a * offset);
        }
        self.constant += weight * offset * offset;
    }

    pub fn push_eq(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.eq.push(terms, rhs);
    }

    /// a·x ≤ rhs
    pub fn push_ineq(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.ineq.push(terms, rhs);
    }

    pub fn set_lower(&mut self, i: usize, lo: f64) {
        self.lower[i] = lo;
    }

    pub fn set_upper(&mut self, i: usize, hi: f64) {
        self.upper[i] = hi;
    }

    pub fn set_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        self.lower[i] = lo;
        self.upper[i] = hi;
    }

    pub fn add_disk(&mut self, i: usize, j: usize, radius: f64) {
        self.disks.push(DiskConstraint { i, j, radius });
    }

    pub fn eq_rows(&self) -> &LinearRows {
        &self.eq
    }

    pub fn ineq_rows(&self) -> &LinearRows {
        &self.ineq
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn disks(&self) -> &[DiskConstraint] {
        &self.disks
    }

    pub fn quad_entries(&self) -> &[(usize, usize, f64)] {
        &self.quad
    }

    pub fn linear(&self) -> &[f64] {
        &self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for (i, &q) in self.lin.iter().enumerate() {
            v += q * x[i];
        }
        for &(i, j, p) in &self.quad {
            if i == j {
                v += 0.5 * p * x[i] * x[i];
            } else {
                v += p * x[i] * x[j];
            }
        }
        v
    }

    /// Largest constraint violation of `x` over every constraint class.
    /// NaN-propagating: a non-finite `x` yields NaN, never a small value.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.eq.len() {
            worst = nan_max(worst, (self.eq.dot(r, x) - self.eq.rhs(r)).abs());
        }
        for r in 0..self.ineq.len() {
            worst = nan_max(worst, self.ineq.dot(r, x) - self.ineq.rhs(r));
        }
        for i in 0..self.n {
            if !x[i].is_finite() {
                return f64::NAN;
            }
            worst = nan_max(nan_max(worst, self.lower[i] - x[i]), x[i] - self.upper[i]);
        }
        for d in &self.disks {
            worst = nan_max(worst, x[d.i].hypot(x[d.j]) - d.radius);
        }
        worst
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let check_rows = |rows: &LinearRows, what: &str| -> Result<(), SolveError> {
            for r in 0..rows.len() {
                let (cols, vals) = rows.row(r);
                if cols.is_empty() {
                    return Err(SolveError::InvalidData(format!("{what} row {r} is empty")));
                }
                for (&c, &v) in cols.iter().zip(vals) {
                    if c >= self.n {
                        return Err(SolveError::Dimension(format!(
                            "{what} row {r} references variable {c} of {}",
                            self.n
                        )));
                    }
                    if !v.is_finite() {
                        return Err(SolveError::InvalidData(format!(
                            "{what} row {r} has non-finite coefficient"
                        )));
                    }
                }
                if !rows.rhs(r).is_finite() {
                    return Err(SolveError::InvalidData(format!(
                        "{what} row {r} has non-finite rhs"
                    )));
                }
            }
            Ok(())
        };
        check_rows(&self.eq, "equality")?;
        check_rows(&self.ineq, "inequality")?;
        for &(i, j, v) in &self.quad {
            if i >= self.n || j >= self.n {
                return Err(SolveError::Dimension(format!(
                    "quadratic entry ({i},{j}) out of range for n={}",
                    self.n
                )));
            }
            if !v.is_finite() {
                return Err(SolveError::InvalidData(
                    "non-finite quadratic coefficient".into(),
                ));
            }
        }
        if self.lin.iter().any(|v| !v.is_finite()) || !self.constant.is_finite() {
            return Err(SolveError::InvalidData("non-finite cost term".into()));
        }
        for i in 0..self.n {
            if self.lower[i] > self.upper[i] {
                return Err(SolveError::InvalidData(format!(
                    "variable {i}: lower bound {} above upper bound {}",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        for (k, d) in self.disks.iter().enumerate() {
            if d.i >= self.n || d.j >= self.n || d.i == d.j {
                return Err(SolveError::Dimension(format!(
                    "disk {k} has invalid variable pair ({}, {})",
                    d.i, d.j
                )));
            }
            if !(d.radius.is_finite() && d.radius >= 0.0) {
                return Err(SolveError::InvalidData(format!(
                    "disk {k} has invalid radius {}",
                    d.radius
                )));
            }
        }
        Ok(())
    }
}
