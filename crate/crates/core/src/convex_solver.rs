//! Log-barrier interior-point solver for the smooth convex subproblems.
//!
//! The subproblem builders emit programs over four constraint families —
//! linear, convex quadratic, hyperbolic (`x*y >= c` on a nonnegative pair),
//! and inverse-sum (`sum a_j / x_j <= b` on positive variables) — plus
//! variable lower bounds. All of them have analytic gradients and Hessians on
//! the feasible interior, so a primal log-barrier method with damped Newton
//! steps covers the whole catalogue without conic canonicalization.
//!
//! Raw variable magnitudes span ten orders (power fractions near 1, rates
//! near 1e8, inverse-rates near 1e-9), so Newton systems are preconditioned
//! diagonally by builder-supplied characteristic scales; residuals are
//! reported in that scaled space.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

/// One inequality constraint `g(x) <= 0` in one of the four canonical forms.
#[derive(Debug, Clone)]
pub enum ConstraintKind {
    /// `sum coeff * x_idx <= rhs`.
    Linear { terms: Vec<(usize, f64)>, rhs: f64 },
    /// `sum quad_c * x_i * x_j + sum lin_c * x_idx + constant <= 0`, with the
    /// quadratic triplets upper-triangular (`i <= j`, each pair once) and the
    /// implied symmetric matrix PSD.
    Quadratic {
        quad: Vec<(usize, usize, f64)>,
        lin: Vec<(usize, f64)>,
        constant: f64,
    },
    /// `x * y >= bound` with both variables bounded below by 0.
    Hyperbolic { x: usize, y: usize, bound: f64 },
    /// `sum coeff_j / x_j <= rhs` with every referenced variable positive.
    InverseSum { terms: Vec<(usize, f64)>, rhs: f64 },
}

/// Constraint plus bookkeeping: a role tag for diagnostics and the natural
/// magnitude its residual should be normalized by.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub tag: &'static str,
    /// Natural magnitude of `g`; only affects reported residuals and slack
    /// thresholds, never the barrier itself.
    pub scale: f64,
}

impl Constraint {
    pub fn new(kind: ConstraintKind, tag: &'static str) -> Self {
        Constraint { kind, tag, scale: 1.0 }
    }

    pub fn with_scale(kind: ConstraintKind, tag: &'static str, scale: f64) -> Self {
        Constraint { kind, tag, scale }
    }
}

/// Minimize `obj_quad + obj_lin . x + obj_const` over the constraints and
/// lower bounds. `obj_scale` and `var_scales` carry the characteristic
/// magnitudes used for preconditioning and scaled residuals.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    pub n_vars: usize,
    /// Upper-triangular triplets `(i, j, c)` contributing `c * x_i * x_j`.
    pub obj_quad: Vec<(usize, usize, f64)>,
    pub obj_lin: Vec<f64>,
    pub obj_const: f64,
    /// Characteristic objective magnitude; the solver works on `f / obj_scale`.
    pub obj_scale: f64,
    pub constraints: Vec<Constraint>,
    /// Per-variable lower bounds (entered into the barrier).
    pub lower: Vec<Option<f64>>,
    /// Characteristic variable magnitudes for preconditioning.
    pub var_scales: Vec<f64>,
    /// Optional names for the debug dump.
    pub var_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Stationarity / primal feasibility / complementary slackness residuals,
/// all in scaled space (variables divided by `var_scales`, objective by
/// `obj_scale`, constraint values by their `scale`).
#[derive(Debug, Clone, Copy)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct SolverSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt: KktResidual,
    /// Multipliers for every constraint, then for every finite lower bound
    /// (variable order), normalized against the scaled objective.
    pub duals: Vec<f64>,
    /// Total Newton iterations across barrier stages.
    pub iterations: usize,
    /// Objective recorded after each barrier stage (nonincreasing).
    pub stage_objectives: Vec<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Stop when `(#barrier terms) / t <= tol_gap * max(1, |scaled obj|)`.
    pub tol_gap: f64,
    /// Newton decrement threshold `lambda^2 / 2` for the final polishing
    /// stage, whose centering accuracy the reported multipliers inherit.
    pub newton_tol: f64,
    /// Looser decrement threshold for intermediate path stages, which only
    /// need to stay near the central path.
    pub newton_tol_path: f64,
    /// Initial barrier parameter.
    pub t0: f64,
    /// Barrier growth factor per stage.
    pub mu: f64,
    /// Global Newton iteration cap.
    pub max_newton: usize,
    /// Per-stage Newton iteration cap.
    pub max_stage_newton: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_gap: 1e-7,
            newton_tol: 1e-13,
            newton_tol_path: 1e-8,
            t0: 10.0,
            mu: 10.0,
            max_newton: 600,
            max_stage_newton: 60,
        }
    }
}

impl ConvexProgram {
    /// Empty program over `n_vars` variables with unit scales.
    pub fn new(n_vars: usize) -> Self {
        ConvexProgram {
            n_vars,
            obj_quad: Vec::new(),
            obj_lin: vec![0.0; n_vars],
            obj_const: 0.0,
            obj_scale: 1.0,
            constraints: Vec::new(),
            lower: vec![None; n_vars],
            var_scales: vec![1.0; n_vars],
            var_names: None,
        }
    }

    /// Number of dual multipliers `solve` reports (constraints first, then
    /// finite lower bounds in variable order).
    pub fn dual_len(&self) -> usize {
        self.constraints.len() + self.lower.iter().filter(|b| b.is_some()).count()
    }

    /// Raw objective value.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut f = self.obj_const;
        for (i, c) in self.obj_lin.iter().enumerate() {
            f += c * x[i];
        }
        for &(i, j, c) in &self.obj_quad {
            f += c * x[i] * x[j];
        }
        f
    }

    /// Raw constraint value `g(x)` (feasible iff <= 0).
    pub fn constraint_value(&self, kind: &ConstraintKind, x: &[f64]) -> f64 {
        match kind {
            ConstraintKind::Linear { terms, rhs } => {
                terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() - rhs
            }
            ConstraintKind::Quadratic { quad, lin, constant } => {
                quad.iter().map(|&(i, j, c)| c * x[i] * x[j]).sum::<f64>()
                    + lin.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
                    + constant
            }
            ConstraintKind::Hyperbolic { x: xi, y: yi, bound } => bound - x[*xi] * x[*yi],
            ConstraintKind::InverseSum { terms, rhs } => {
                terms.iter().map(|&(i, a)| a / x[i]).sum::<f64>() - rhs
            }
        }
    }

    /// Gradient of `g` appended to `out` as sparse `(index, value)` pairs.
    fn constraint_grad(&self, kind: &ConstraintKind, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match kind {
            ConstraintKind::Linear { terms, .. } => out.extend_from_slice(terms),
            ConstraintKind::Quadratic { quad, lin, .. } => {
                out.extend_from_slice(lin);
                for &(i, j, c) in quad {
                    if i == j {
                        out.push((i, 2.0 * c * x[i]));
                    } else {
                        out.push((i, c * x[j]));
                        out.push((j, c * x[i]));
                    }
                }
            }
            ConstraintKind::Hyperbolic { x: xi, y: yi, .. } => {
                out.push((*xi, -x[*yi]));
                out.push((*yi, -x[*xi]));
            }
            ConstraintKind::InverseSum { terms, .. } => {
                out.extend(terms.iter().map(|&(i, a)| (i, -a / (x[i] * x[i]))));
            }
        }
    }

    /// Structural validation: index ranges, PSD quadratic forms, scales, and
    /// positivity bounds on hyperbolic / inverse-sum variables.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        if self.obj_lin.len() != n || self.lower.len() != n || self.var_scales.len() != n {
            return Err(Error::BadProgram("objective/bounds/scales length mismatch".into()));
        }
        if !(self.obj_scale.is_finite() && self.obj_scale > 0.0) {
            return Err(Error::BadProgram(format!("obj_scale must be positive, got {}", self.obj_scale)));
        }
        if self.var_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::BadProgram("var_scales must be positive".into()));
        }
        self.check_psd(&self.obj_quad, "objective")?;
        for (ci, c) in self.constraints.iter().enumerate() {
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(Error::BadProgram(format!("constraint {ci} ({}) has bad scale", c.tag)));
            }
            let check_idx = |idx: usize| -> Result<()> {
                if idx >= n {
                    return Err(Error::BadProgram(format!(
                        "constraint {ci} ({}) references variable {idx} out of {n}",
                        c.tag
                    )));
                }
                Ok(())
            };
            match &c.kind {
                ConstraintKind::Linear { terms, .. } => {
                    for &(i, _) in terms {
                        check_idx(i)?;
                    }
                }
                ConstraintKind::Quadratic { quad, lin, .. } => {
                    for &(i, j, _) in quad {
                        check_idx(i)?;
                        check_idx(j)?;
                        if i > j {
                            return Err(Error::BadProgram(format!(
                                "constraint {ci} ({}) has lower-triangular triplet",
                                c.tag
                            )));
                        }
                    }
                    for &(i, _) in lin {
                        check_idx(i)?;
                    }
                    self.check_psd(quad, c.tag)?;
                }
                ConstraintKind::Hyperbolic { x, y, bound } => {
                    check_idx(*x)?;
                    check_idx(*y)?;
                    if !(bound.is_finite() && *bound > 0.0) {
                        return Err(Error::BadProgram(format!(
                            "constraint {ci} ({}) needs a positive hyperbolic bound",
                            c.tag
                        )));
                    }
                    for &v in [x, y] {
                        if self.lower[v].is_none_or(|b| b < 0.0) {
                            return Err(Error::BadProgram(format!(
                                "constraint {ci} ({}): hyperbolic variable {v} needs a nonnegative lower bound",
                                c.tag
                            )));
                        }
                    }
                }
                ConstraintKind::InverseSum { terms, .. } => {
                    for &(i, a) in terms {
                        check_idx(i)?;
                        if !(a.is_finite() && a > 0.0) {
                            return Err(Error::BadProgram(format!(
                                "constraint {ci} ({}) needs positive inverse-sum coefficients",
                                c.tag
                            )));
                        }
                        if self.lower[i].is_none_or(|b| b < 0.0) {
                            return Err(Error::BadProgram(format!(
                                "constraint {ci} ({}): inverse-sum variable {i} needs a nonnegative lower bound",
                                c.tag
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// PSD check on an upper-triangular triplet form. Diagonal-only forms are
    /// checked directly; anything else is assembled on its support and passed
    /// through a symmetric eigenvalue test.
    fn check_psd(&self, quad: &[(usize, usize, f64)], tag: &str) -> Result<()> {
        if quad.iter().all(|&(i, j, _)| i == j) {
            if let Some(&(i, _, c)) = quad.iter().find(|&&(_, _, c)| c < 0.0) {
                return Err(Error::BadProgram(format!(
                    "{tag}: negative diagonal quadratic coefficient {c} on variable {i}"
                )));
            }
            return Ok(());
        }
        let mut support: Vec<usize> = quad.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        support.sort_unstable();
        support.dedup();
        let pos = |v: usize| support.binary_search(&v).unwrap();
        let m = support.len();
        let mut dense: DMatrix<f64> = DMatrix::zeros(m, m);
        for &(i, j, c) in quad {
            let (a, b) = (pos(i), pos(j));
            if a == b {
                dense[(a, a)] += c;
            } else {
                dense[(a, b)] += 0.5 * c;
                dense[(b, a)] += 0.5 * c;
            }
        }
        let norm = dense.norm().max(1e-300);
        let min_eig = dense
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 * norm {
            return Err(Error::BadProgram(format!(
                "{tag}: quadratic form is not PSD (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(())
    }

    /// Plain-text listing of the program for offline inspection.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let name = |i: usize| -> String {
            self.var_names
                .as_ref()
                .and_then(|v| v.get(i).cloned())
                .unwrap_or_else(|| format!("x{i}"))
        };
        let mut s = String::new();
        let _ = writeln!(s, "vars: {} (obj_scale {:.3e})", self.n_vars, self.obj_scale);
        for i in 0..self.n_vars {
            let _ = writeln!(
                s,
                "  {} scale {:.3e} lower {}",
                name(i),
                self.var_scales[i],
                self.lower[i].map_or("-inf".into(), |b| format!("{b:.6e}"))
            );
        }
        let _ = writeln!(s, "objective: const {:.6e}", self.obj_const);
        for (i, c) in self.obj_lin.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            let _ = writeln!(s, "  lin {:.6e} * {}", c, name(i));
        }
        for &(i, j, c) in &self.obj_quad {
            let _ = writeln!(s, "  quad {:.6e} * {} * {}", c, name(i), name(j));
        }
        for (ci, c) in self.constraints.iter().enumerate() {
            let _ = write!(s, "c{ci} [{}] scale {:.3e}: ", c.tag, c.scale);
            match &c.kind {
                ConstraintKind::Linear { terms, rhs } => {
                    let body: Vec<String> =
                        terms.iter().map(|&(i, a)| format!("{a:.6e}*{}", name(i))).collect();
                    let _ = writeln!(s, "{} <= {rhs:.6e}", body.join(" + "));
                }
                ConstraintKind::Quadratic { quad, lin, constant } => {
                    let mut body: Vec<String> = quad
                        .iter()
                        .map(|&(i, j, a)| format!("{a:.6e}*{}*{}", name(i), name(j)))
                        .collect();
                    body.extend(lin.iter().map(|&(i, a)| format!("{a:.6e}*{}", name(i))));
                    let _ = writeln!(s, "{} + {constant:.6e} <= 0", body.join(" + "));
                }
                ConstraintKind::Hyperbolic { x, y, bound } => {
                    let _ = writeln!(s, "{} * {} >= {bound:.6e}", name(*x), name(*y));
                }
                ConstraintKind::InverseSum { terms, rhs } => {
                    let body: Vec<String> =
                        terms.iter().map(|&(i, a)| format!("{a:.6e}/{}", name(i))).collect();
                    let _ = writeln!(s, "{} <= {rhs:.6e}", body.join(" + "));
                }
            }
        }
        s
    }
}

/// Internal: slack of every barrier term (constraints then finite bounds).
/// Returns the minimum slack normalized by the term scale; raw slacks go
/// into `slacks`. Any non-positive raw slack makes the point infeasible.
fn all_slacks(p: &ConvexProgram, x: &[f64], slacks: &mut Vec<f64>) -> f64 {
    slacks.clear();
    let mut min_scaled = f64::INFINITY;
    for c in &p.constraints {
        let s = -p.constraint_value(&c.kind, x);
        slacks.push(s);
        min_scaled = min_scaled.min(s / c.scale);
    }
    for (i, b) in p.lower.iter().enumerate() {
        if let Some(lb) = b {
            let s = x[i] - lb;
            slacks.push(s);
            min_scaled = min_scaled.min(s / p.var_scales[i]);
        }
    }
    min_scaled
}

/// Barrier potential `t * f/obj_scale - sum ln(slack)`; +inf outside the
/// strict interior.
fn potential(p: &ConvexProgram, x: &[f64], t: f64, slacks: &mut Vec<f64>) -> f64 {
    let min_s = all_slacks(p, x, slacks);
    if !min_s.is_finite() || slacks.iter().any(|&s| s <= 0.0) {
        return f64::INFINITY;
    }
    t * p.objective(x) / p.obj_scale - slacks.iter().map(|s| s.ln()).sum::<f64>()
}

/// Accumulate gradient and Hessian of the potential at `x` (raw space).
fn potential_derivs(
    p: &ConvexProgram,
    x: &[f64],
    t: f64,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
    scratch: &mut Vec<(usize, f64)>,
) -> bool {
    let n = p.n_vars;
    grad.fill(0.0);
    hess.fill(0.0);
    // Scaled objective part.
    let ts = t / p.obj_scale;
    for (i, c) in p.obj_lin.iter().enumerate() {
        grad[i] += ts * c;
    }
    for &(i, j, c) in &p.obj_quad {
        if i == j {
            grad[i] += ts * 2.0 * c * x[i];
            hess[(i, i)] += ts * 2.0 * c;
        } else {
            grad[i] += ts * c * x[j];
            grad[j] += ts * c * x[i];
            hess[(i, j)] += ts * c;
            hess[(j, i)] += ts * c;
        }
    }
    // Constraint barrier terms.
    for c in &p.constraints {
        let g = p.constraint_value(&c.kind, x);
        let s = -g;
        if s <= 0.0 {
            return false;
        }
        p.constraint_grad(&c.kind, x, scratch);
        // -ln(s): gradient (1/s) grad g, Hessian grad g grad g^T / s^2 +
        // Hess g / s.
        for &(i, gi) in scratch.iter() {
            grad[i] += gi / s;
        }
        for &(i, gi) in scratch.iter() {
            for &(j, gj) in scratch.iter() {
                hess[(i, j)] += gi * gj / (s * s);
            }
        }
        match &c.kind {
            ConstraintKind::Linear { .. } => {}
            ConstraintKind::Quadratic { quad, .. } => {
                for &(i, j, a) in quad {
                    if i == j {
                        hess[(i, i)] += 2.0 * a / s;
                    } else {
                        hess[(i, j)] += a / s;
                        hess[(j, i)] += a / s;
                    }
                }
            }
            ConstraintKind::Hyperbolic { x: xi, y: yi, .. } => {
                // Hess g has -1 on the off-diagonal pair.
                hess[(*xi, *yi)] -= 1.0 / s;
                hess[(*yi, *xi)] -= 1.0 / s;
            }
            ConstraintKind::InverseSum { terms, .. } => {
                for &(i, a) in terms {
                    hess[(i, i)] += 2.0 * a / (x[i] * x[i] * x[i] * s);
                }
            }
        }
    }
    // Bound barrier terms.
    for i in 0..n {
        if let Some(lb) = p.lower[i] {
            let s = x[i] - lb;
            if s <= 0.0 {
                return false;
            }
            grad[i] -= 1.0 / s;
            hess[(i, i)] += 1.0 / (s * s);
        }
    }
    true
}

/// KKT residual triple at `(x, duals)`, in scaled space. The duals are
/// multipliers of the scaled-objective problem, laid out as constraints then
/// finite lower bounds.
pub fn kkt_residual(p: &ConvexProgram, x: &[f64], duals: &[f64]) -> KktResidual {
    let n = p.n_vars;
    let mut r = vec![0.0; n];
    for (i, c) in p.obj_lin.iter().enumerate() {
        r[i] += c / p.obj_scale;
    }
    for &(i, j, c) in &p.obj_quad {
        if i == j {
            r[i] += 2.0 * c * x[i] / p.obj_scale;
        } else {
            r[i] += c * x[j] / p.obj_scale;
            r[j] += c * x[i] / p.obj_scale;
        }
    }
    let mut scratch = Vec::new();
    let mut primal: f64 = 0.0;
    let mut compl: f64 = 0.0;
    let mut di = 0usize;
    for c in &p.constraints {
        let g = p.constraint_value(&c.kind, x);
        primal = primal.max(g / c.scale);
        let lam = duals.get(di).copied().unwrap_or(0.0);
        compl = compl.max((lam * g).abs());
        p.constraint_grad(&c.kind, x, &mut scratch);
        for &(i, gi) in &scratch {
            r[i] += lam * gi;
        }
        di += 1;
    }
    for i in 0..n {
        if let Some(lb) = p.lower[i] {
            let g = lb - x[i];
            primal = primal.max(g / p.var_scales[i]);
            let lam = duals.get(di).copied().unwrap_or(0.0);
            compl = compl.max((lam * g).abs());
            r[i] -= lam;
            di += 1;
        }
    }
    let stationarity = r
        .iter()
        .enumerate()
        .map(|(i, v)| (v * p.var_scales[i]).abs())
        .fold(0.0, f64::max);
    KktResidual { stationarity, primal: primal.max(0.0), complementarity: compl }
}

/// Minimize the program from a strictly feasible `x0`.
pub fn solve(p: &ConvexProgram, x0: &[f64], opts: &SolveOptions) -> Result<SolverSolution> {
    let start = std::time::Instant::now();
    p.validate()?;
    if x0.len() != p.n_vars {
        return Err(Error::ShapeMismatch(format!(
            "x0 has {} entries for {} variables",
            x0.len(),
            p.n_vars
        )));
    }
    let mut slacks = Vec::with_capacity(p.dual_len());
    let min0 = all_slacks(p, x0, &mut slacks);
    if !(min0.is_finite() && min0 > 0.0) || slacks.iter().any(|&s| s <= 0.0) {
        return Err(Error::InfeasibleStart(format!(
            "x0 minimum scaled slack {min0:.3e} (must be positive)"
        )));
    }
    let m_bar = slacks.len() as f64;

    let n = p.n_vars;
    let mut x = DVector::from_column_slice(x0);
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    let d = DVector::from_iterator(n, p.var_scales.iter().cloned());

    let mut t = opts.t0;
    let mut total_newton = 0usize;
    let mut stage_objectives = Vec::new();
    let mut status = SolveStatus::MaxIter;

    enum StageEnd {
        Converged,
        Budget,
        Failure,
    }

    // One centering stage at fixed barrier weight `t`: damped Newton steps
    // until the decrement criterion fires (or stalls at its rounding floor).
    let mut stage = |t: f64, tol: f64, x: &mut DVector<f64>, total_newton: &mut usize| -> StageEnd {
        let mut best = f64::INFINITY;
        let mut stall = 0usize;
        for _ in 0..opts.max_stage_newton {
            if *total_newton >= opts.max_newton {
                return StageEnd::Budget;
            }
            if !potential_derivs(p, x.as_slice(), t, &mut grad, &mut hess, &mut scratch) {
                return StageEnd::Failure;
            }
            // Diagonal preconditioning: solve (D H D) y = -D g, step = D y.
            let mut h_scaled = hess.clone();
            for i in 0..n {
                for j in 0..n {
                    h_scaled[(i, j)] *= d[i] * d[j];
                }
            }
            let g_scaled = grad.component_mul(&d);
            let mut ridge = 0.0f64;
            let step = loop {
                let mut h_try = h_scaled.clone();
                if ridge > 0.0 {
                    for i in 0..n {
                        h_try[(i, i)] += ridge;
                    }
                }
                match Cholesky::new(h_try) {
                    Some(ch) => break Some(ch.solve(&(-&g_scaled))),
                    None => {
                        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
                        let diag_mean =
                            (0..n).map(|i| h_scaled[(i, i)].abs()).sum::<f64>() / n as f64;
                        if ridge > 1e-2 * diag_mean.max(1.0) {
                            break None;
                        }
                    }
                }
            };
            let Some(y) = step else {
                return StageEnd::Failure;
            };
            let decrement = -g_scaled.dot(&y);
            *total_newton += 1;
            // The decrement is computed from gradients, not potential
            // differences, so it stays accurate even when the potential
            // itself sits at 1e10; an absolute threshold keeps the reported
            // dual residuals (which scale with sqrt(decrement)) tight.
            let dec_half = decrement / 2.0;
            if dec_half <= tol {
                return StageEnd::Converged;
            }
            // Quadratic convergence flattens out at the factorization's
            // rounding floor; once progress stops, settle for the loose
            // threshold (or hand the stage back) instead of burning budget.
            if dec_half >= 0.99 * best {
                stall += 1;
                if stall >= 5 {
                    return if best <= 1e4 * tol { StageEnd::Converged } else { StageEnd::Budget };
                }
            } else {
                stall = 0;
            }
            best = best.min(dec_half);
            let dx = y.component_mul(&d);
            // Backtracking: keep strictly feasible and require Armijo decrease
            // (with a roundoff allowance, since psi can sit near 1e10 while
            // meaningful decreases shrink toward machine precision).
            let psi0 = potential(p, x.as_slice(), t, &mut slacks);
            let slope = grad.dot(&dx);
            let fuzz = 4.0 * f64::EPSILON * psi0.abs().max(1.0);
            let mut alpha = 1.0f64;
            let mut accepted = false;
            while alpha > 1e-18 {
                let cand = &*x + alpha * &dx;
                let psi = potential(p, cand.as_slice(), t, &mut slacks);
                if psi.is_finite() && psi <= psi0 + 0.01 * alpha * slope + fuzz {
                    *x = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // An unobtainable decrease with an already-small decrement is
                // stage convergence at roundoff level; otherwise give up.
                if dec_half <= 1e4 * tol {
                    return StageEnd::Converged;
                }
                return StageEnd::Failure;
            }
        }
        StageEnd::Budget
    };

    loop {
        // Intermediate stages only keep the iterate near the central path;
        // the final stage below recenters tightly so the multipliers
        // (lambda = 1 / (t s)) come out accurate.
        let end = stage(t, opts.newton_tol_path, &mut x, &mut total_newton);
        if matches!(end, StageEnd::Failure) {
            status = SolveStatus::NumericalFailure;
            break;
        }
        stage_objectives.push(p.objective(x.as_slice()));
        let f_scaled = (p.objective(x.as_slice()) / p.obj_scale).abs().max(1.0);
        if m_bar / t <= opts.tol_gap * f_scaled {
            match stage(t, opts.newton_tol, &mut x, &mut total_newton) {
                StageEnd::Converged => status = SolveStatus::Optimal,
                StageEnd::Failure => status = SolveStatus::NumericalFailure,
                StageEnd::Budget => {}
            }
            break;
        }
        if total_newton >= opts.max_newton {
            break;
        }
        t *= opts.mu;
    }

    // Barrier multipliers lambda_i = 1 / (t * s_i) against the scaled
    // objective.
    all_slacks(p, x.as_slice(), &mut slacks);
    let duals: Vec<f64> = slacks.iter().map(|&s| if s > 0.0 { 1.0 / (t * s) } else { 0.0 }).collect();
    let kkt = kkt_residual(p, x.as_slice(), &duals);
    Ok(SolverSolution {
        objective: p.objective(x.as_slice()),
        x: x.as_slice().to_vec(),
        status,
        kkt,
        duals,
        iterations: total_newton,
        stage_objectives,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_with_lower_bound_hits_boundary() {
        // minimize x^2 subject to x >= 1.
        let mut p = ConvexProgram::new(1);
        p.obj_quad.push((0, 0, 1.0));
        p.lower[0] = Some(1.0);
        let sol = solve(&p, &[3.0], &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(sol.objective, 1.0, max_relative = 1e-6);
        assert!(sol.objective <= 9.0 + 1e-12);
    }

    #[test]
    fn hyperbolic_corner_solution() {
        // minimize x subject to x*y >= 1, y <= 2, x,y >= 0 -> (1/2, 2).
        let mut p = ConvexProgram::new(2);
        p.obj_lin[0] = 1.0;
        p.lower = vec![Some(0.0), Some(0.0)];
        p.constraints.push(Constraint::new(
            ConstraintKind::Hyperbolic { x: 0, y: 1, bound: 1.0 },
            "hyp",
        ));
        p.constraints.push(Constraint::new(
            ConstraintKind::Linear { terms: vec![(1, 1.0)], rhs: 2.0 },
            "cap",
        ));
        let sol = solve(&p, &[2.0, 1.0], &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 0.5, max_relative = 1e-5);
        assert_relative_eq!(sol.x[1], 2.0, max_relative = 1e-5);
    }

    #[test]
    fn inverse_sum_matches_analytic_optimum() {
        // minimize x + y subject to 1/x + 1/y <= 1, x,y > 0. By symmetry the
        // optimum is x = y = 2.
        let mut p = ConvexProgram::new(2);
        p.obj_lin = vec![1.0, 1.0];
        p.lower = vec![Some(0.0), Some(0.0)];
        p.constraints.push(Constraint::new(
            ConstraintKind::InverseSum { terms: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 },
            "budget",
        ));
        let sol = solve(&p, &[5.0, 5.0], &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 2.0, max_relative = 1e-5);
        assert_relative_eq!(sol.x[1], 2.0, max_relative = 1e-5);
        assert!(sol.kkt.max() < 1e-6, "kkt {:?}", sol.kkt);
    }

    /// Slow projected-gradient reference for box-constrained QPs.
    fn pgd_box_qp(
        quad: &[(usize, usize, f64)],
        lin: &[f64],
        lo: &[f64],
        hi: &[f64],
        iters: usize,
    ) -> Vec<f64> {
        let n = lin.len();
        let mut full = vec![vec![0.0; n]; n];
        for &(i, j, c) in quad {
            if i == j {
                full[i][i] += 2.0 * c;
            } else {
                full[i][j] += c;
                full[j][i] += c;
            }
        }
        // Gershgorin bound on the Hessian spectral radius.
        let l = (0..n)
            .map(|i| full[i].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            .max(1e-9);
        let step = 1.0 / l;
        let mut x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        for _ in 0..iters {
            let mut g = lin.to_vec();
            for i in 0..n {
                for j in 0..n {
                    g[i] += full[i][j] * x[j];
                }
            }
            for i in 0..n {
                x[i] = (x[i] - step * g[i]).clamp(lo[i], hi[i]);
            }
        }
        x
    }

    #[test]
    fn random_qp_matches_projected_gradient_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 20;
        for _ in 0..3 {
            // Random strongly convex diagonal-plus-low-rank quadratic.
            let mut quad: Vec<(usize, usize, f64)> = Vec::new();
            for i in 0..n {
                quad.push((i, i, rng.gen_range(0.5..2.0)));
            }
            // Rank-2 PSD bump via w w^T terms in upper-triangular form.
            for _ in 0..2 {
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for i in 0..n {
                    for j in i..n {
                        let c = if i == j { w[i] * w[j] } else { 2.0 * w[i] * w[j] };
                        quad.push((i, j, 0.3 * c));
                    }
                }
            }
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lo = vec![-1.0; n];
            let hi = vec![2.0; n];

            let mut p = ConvexProgram::new(n);
            p.obj_quad = quad.clone();
            p.obj_lin = lin.clone();
            p.lower = lo.iter().map(|&b| Some(b)).collect();
            for (i, &ub) in hi.iter().enumerate() {
                p.constraints.push(Constraint::new(
                    ConstraintKind::Linear { terms: vec![(i, 1.0)], rhs: ub },
                    "ub",
                ));
            }
            let x0 = vec![0.5; n];
            let sol = solve(&p, &x0, &SolveOptions::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);

            let x_ref = pgd_box_qp(&quad, &lin, &lo, &hi, 200_000);
            let f_ref = p.objective(&x_ref);
            assert_relative_eq!(sol.objective, f_ref, max_relative = 1e-5);
            assert!(sol.objective <= p.objective(&x0) + 1e-12);
        }
    }

    #[test]
    fn kkt_residual_on_analytic_qp() {
        // minimize (x-2)^2 s.t. x <= 1: optimum x = 1, multiplier lambda = 2
        // (gradient 2(x-2) + lambda = 0 at x = 1).
        let mut p = ConvexProgram::new(1);
        p.obj_quad.push((0, 0, 1.0));
        p.obj_lin[0] = -4.0;
        p.obj_const = 4.0;
        p.constraints.push(Constraint::new(
            ConstraintKind::Linear { terms: vec![(0, 1.0)], rhs: 1.0 },
            "cap",
        ));
        let r = kkt_residual(&p, &[1.0], &[2.0]);
        assert!(r.stationarity < 1e-10 && r.primal < 1e-10 && r.complementarity < 1e-10);

        // Perturbing x moves the residual roughly linearly.
        let r1 = kkt_residual(&p, &[1.0 + 1e-4], &[2.0]);
        let r2 = kkt_residual(&p, &[1.0 + 2e-4], &[2.0]);
        assert_relative_eq!(r2.stationarity, 2.0 * r1.stationarity, max_relative = 1e-6);
        assert_relative_eq!(r2.primal, 2.0 * r1.primal, max_relative = 1e-6);
    }

    #[test]
    fn self_consistency_from_two_starts() {
        let mut p = ConvexProgram::new(3);
        p.obj_quad = vec![(0, 0, 1.0), (1, 1, 2.0), (2, 2, 0.5)];
        p.obj_lin = vec![-1.0, 0.3, 0.0];
        p.lower = vec![Some(0.0), Some(0.0), Some(0.1)];
        p.constraints.push(Constraint::new(
            ConstraintKind::Hyperbolic { x: 0, y: 2, bound: 0.2 },
            "hyp",
        ));
        p.constraints.push(Constraint::new(
            ConstraintKind::InverseSum { terms: vec![(1, 0.1), (2, 0.2)], rhs: 3.0 },
            "inv",
        ));
        p.constraints.push(Constraint::new(
            ConstraintKind::Quadratic {
                quad: vec![(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)],
                lin: vec![(2, 0.5)],
                constant: -4.0,
            },
            "quad",
        ));
        let a = solve(&p, &[1.0, 1.0, 1.0], &SolveOptions::default()).unwrap();
        let b = solve(&p, &[0.5, 0.8, 0.5], &SolveOptions::default()).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal);
        assert_relative_eq!(a.objective, b.objective, max_relative = 1e-6);
        // Optimal points satisfy every constraint within the slack tolerance.
        for sol in [&a, &b] {
            for c in &p.constraints {
                assert!(p.constraint_value(&c.kind, &sol.x) <= 1e-8 * c.scale);
            }
        }
    }

    #[test]
    fn stage_objectives_are_nonincreasing() {
        let mut p = ConvexProgram::new(2);
        p.obj_quad = vec![(0, 0, 3.0), (1, 1, 1.0)];
        p.obj_lin = vec![0.1, -2.0];
        p.lower = vec![Some(0.0), Some(0.0)];
        p.constraints.push(Constraint::new(
            ConstraintKind::Linear { terms: vec![(0, 1.0), (1, 1.0)], rhs: 5.0 },
            "sum",
        ));
        let sol = solve(&p, &[2.0, 2.0], &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        for w in sol.stage_objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut p = ConvexProgram::new(1);
        p.obj_quad.push((0, 0, 1.0));
        p.lower[0] = Some(1.0);
        assert!(matches!(
            solve(&p, &[0.5], &SolveOptions::default()),
            Err(Error::InfeasibleStart(_))
        ));
        // Boundary is not strictly feasible either.
        assert!(solve(&p, &[1.0], &SolveOptions::default()).is_err());
    }

    #[test]
    fn validation_catches_malformed_programs() {
        // Indefinite constraint quadratic.
        let mut p = ConvexProgram::new(2);
        p.constraints.push(Constraint::new(
            ConstraintKind::Quadratic {
                quad: vec![(0, 1, 1.0)], // x*y alone is indefinite
                lin: vec![],
                constant: -1.0,
            },
            "bad",
        ));
        p.lower = vec![Some(0.0), Some(0.0)];
        assert!(matches!(p.validate(), Err(Error::BadProgram(_))));

        // Hyperbolic without nonnegative lower bounds.
        let mut p = ConvexProgram::new(2);
        p.constraints.push(Constraint::new(
            ConstraintKind::Hyperbolic { x: 0, y: 1, bound: 1.0 },
            "hyp",
        ));
        assert!(p.validate().is_err());

        // Negative objective curvature.
        let mut p = ConvexProgram::new(1);
        p.obj_quad.push((0, 0, -1.0));
        assert!(p.validate().is_err());

        // Out-of-range index.
        let mut p = ConvexProgram::new(1);
        p.constraints.push(Constraint::new(
            ConstraintKind::Linear { terms: vec![(3, 1.0)], rhs: 0.0 },
            "oob",
        ));
        assert!(p.validate().is_err());
    }

    #[test]
    fn badly_scaled_program_still_solves_with_scales() {
        // Mimics the real magnitudes: one variable ~1e8 (a rate), one ~1e-9
        // (an inverse rate), coupled by a hyperbolic constraint.
        // minimize 1e9 * w + 1e-8 * r s.t. r * w >= 1, r <= 2e8.
        // Substituting w = 1/r: minimize 1e9/r + 1e-8 r -> interior optimum at
        // r = sqrt(1e9/1e-8) ~ 3.16e8 > cap, so r = 2e8, w = 5e-9.
        let mut p = ConvexProgram::new(2);
        p.obj_lin = vec![1e-8, 1e9]; // [r, w]
        p.lower = vec![Some(0.0), Some(0.0)];
        p.var_scales = vec![1e8, 1e-8];
        p.constraints.push(Constraint::with_scale(
            ConstraintKind::Hyperbolic { x: 0, y: 1, bound: 1.0 },
            "link",
            1.0,
        ));
        p.constraints.push(Constraint::with_scale(
            ConstraintKind::Linear { terms: vec![(0, 1.0)], rhs: 2e8 },
            "cap",
            2e8,
        ));
        p.obj_scale = 10.0;
        let sol = solve(&p, &[1e8, 5e-8], &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 2e8, max_relative = 1e-5);
        assert_relative_eq!(sol.x[1], 5e-9, max_relative = 1e-5);
        assert!(sol.kkt.max() < 1e-6, "kkt {:?}", sol.kkt);
    }

    #[test]
    fn dump_lists_program_pieces() {
        let mut p = ConvexProgram::new(2);
        p.obj_lin = vec![1.0, 0.0];
        p.lower = vec![Some(0.0), Some(0.0)];
        p.var_names = Some(vec!["rate".into(), "power".into()]);
        p.constraints.push(Constraint::new(
            ConstraintKind::Hyperbolic { x: 0, y: 1, bound: 2.0 },
            "link_budget",
        ));
        let text = p.dump();
        assert!(text.contains("rate"));
        assert!(text.contains("link_budget"));
        assert!(text.contains(">= 2"));
    }
}
