//! Canonical conic-program form and the solver backend.
//!
//! Every subproblem (EV, aggregator, DSO, centralized) compiles into a
//! `ConicProblem`: a convex quadratic objective over linear equalities,
//! linear inequalities, second-order cones and rotated second-order
//! cones. The backend lowers this form to `Ax + s = b, s in K` and hands
//! it to the Clarabel interior-point solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT,
    SolverStatus, SupportedConeT, ZeroConeT,
};

use crate::error::{Error, Result};

/// An affine expression `sum_i w_i * x_i + offset`.
#[derive(Debug, Clone, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub offset: f64,
}

impl AffineExpr {
    pub fn var(i: usize) -> Self {
        AffineExpr { terms: vec![(i, 1.0)], offset: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        AffineExpr { terms: Vec::new(), offset: c }
    }

    pub fn term(mut self, i: usize, w: f64) -> Self {
        self.terms.push((i, w));
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.offset += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.offset, |a, &(i, w)| a + w * x[i])
    }
}

/// Convex QP with second-order-cone and rotated-cone constraints:
///
/// ```text
/// minimize   (1/2) x' P x + q' x + c
/// subject to expr = 0            for expr in eq
///            expr >= 0           for expr in nonneg
///            ||w|| <= u          for [u, w...] in soc
///            a*b >= ||w||^2      for [a, b, w...] in rsoc (a, b >= 0)
/// ```
#[derive(Debug, Clone)]
pub struct ConicProblem {
    num_vars: usize,
    /// Entries of the symmetric PSD matrix `P`, upper triangle (i <= j).
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    eq: Vec<AffineExpr>,
    nonneg: Vec<AffineExpr>,
    soc: Vec<Vec<AffineExpr>>,
    rsoc: Vec<Vec<AffineExpr>>,
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        ConicProblem {
            num_vars,
            quad: Vec::new(),
            linear: vec![0.0; num_vars],
            constant: 0.0,
            eq: Vec::new(),
            nonneg: Vec::new(),
            soc: Vec::new(),
            rsoc: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Grow the variable space to `n` (new variables start unused).
    pub fn resize_vars(&mut self, n: usize) {
        assert!(n >= self.num_vars);
        self.linear.resize(n, 0.0);
        self.num_vars = n;
    }

    /// Add `v * x_i * x_j` to the quadratic form `(1/2) x' P x`
    /// (i.e. `P[i][j] += v` on the symmetric matrix).
    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.quad.push((a, b, v));
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.linear[i] += v;
    }

    pub fn add_constant(&mut self, v: f64) {
        self.constant += v;
    }

    /// Add the squared-penalty term `(w/2) * (expr)^2` to the objective.
    pub fn add_penalty(&mut self, w: f64, expr: &AffineExpr) {
        for &(i, a) in &expr.terms {
            for &(j, b) in &expr.terms {
                if i <= j {
                    self.add_quad(i, j, if i == j { w * a * b } else { w * a * b });
                }
            }
            self.add_linear(i, w * a * expr.offset);
        }
        self.constant += 0.5 * w * expr.offset * expr.offset;
    }

    pub fn add_eq(&mut self, expr: AffineExpr) {
        self.eq.push(expr);
    }

    pub fn add_nonneg(&mut self, expr: AffineExpr) {
        self.nonneg.push(expr);
    }

    pub fn add_lower_bound(&mut self, i: usize, lb: f64) {
        self.add_nonneg(AffineExpr::var(i).plus(-lb));
    }

    pub fn add_upper_bound(&mut self, i: usize, ub: f64) {
        self.add_nonneg(AffineExpr { terms: vec![(i, -1.0)], offset: ub });
    }

    pub fn add_range(&mut self, i: usize, lb: f64, ub: f64) {
        self.add_lower_bound(i, lb);
        self.add_upper_bound(i, ub);
    }

    /// `||(exprs[1..])|| <= exprs[0]`
    pub fn add_soc(&mut self, exprs: Vec<AffineExpr>) {
        assert!(exprs.len() >= 2);
        self.soc.push(exprs);
    }

    /// `exprs[0] * exprs[1] >= ||exprs[2..]||^2`, with both heads nonnegative.
    pub fn add_rsoc(&mut self, exprs: Vec<AffineExpr>) {
        assert!(exprs.len() >= 3);
        self.rsoc.push(exprs);
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut obj = self.constant;
        for (i, &q) in self.linear.iter().enumerate() {
            obj += q * x[i];
        }
        for &(i, j, v) in &self.quad {
            obj += if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] };
        }
        obj
    }

    /// Worst constraint violation at `x` (equality gap, negative slack,
    /// or cone violation), for external verification of solutions.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v = 0.0f64;
        for e in &self.eq {
            v = v.max(e.eval(x).abs());
        }
        for e in &self.nonneg {
            v = v.max(-e.eval(x));
        }
        for cone in &self.soc {
            let u = cone[0].eval(x);
            let w: f64 = cone[1..].iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
            v = v.max(w - u);
        }
        for cone in &self.rsoc {
            let a = cone[0].eval(x);
            let b = cone[1].eval(x);
            let w2: f64 = cone[2..].iter().map(|e| e.eval(x).powi(2)).sum();
            v = v.max(-a).max(-b).max(w2 - a * b);
        }
        v
    }

    /// Lower to Clarabel data: `(P, q, A, b, cones)` for
    /// `min (1/2)x'Px + q'x  s.t.  Ax + s = b, s in K`.
    fn lower(&self) -> LoweredProblem {
        let n = self.num_vars;
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // expr = 0  ->  a'x = -c
        if !self.eq.is_empty() {
            cones.push(ZeroConeT(self.eq.len()));
            for e in &self.eq {
                rows.push((e.terms.clone(), -e.offset));
            }
        }
        // expr >= 0  ->  s = a'x + c  ->  row -a, rhs c
        if !self.nonneg.is_empty() {
            cones.push(NonnegativeConeT(self.nonneg.len()));
            for e in &self.nonneg {
                rows.push((negate(&e.terms), e.offset));
            }
        }
        for cone in &self.soc {
            cones.push(SecondOrderConeT(cone.len()));
            for e in cone {
                rows.push((negate(&e.terms), e.offset));
            }
        }
        // a*b >= ||w||^2  <=>  ||(a-b, 2w)|| <= a+b
        for cone in &self.rsoc {
            cones.push(SecondOrderConeT(cone.len()));
            let a = &cone[0];
            let b = &cone[1];
            let sum = add_exprs(a, b, 1.0, 1.0);
            let diff = add_exprs(a, b, 1.0, -1.0);
            rows.push((negate(&sum.terms), sum.offset));
            rows.push((negate(&diff.terms), diff.offset));
            for e in &cone[2..] {
                let e2 = AffineExpr {
                    terms: e.terms.iter().map(|&(i, w)| (i, 2.0 * w)).collect(),
                    offset: 2.0 * e.offset,
                };
                rows.push((negate(&e2.terms), e2.offset));
            }
        }

        let m = rows.len();
        let mut a_triplets = Vec::new();
        let mut b = Vec::with_capacity(m);
        for (ri, (terms, rhs)) in rows.iter().enumerate() {
            for &(ci, v) in terms {
                a_triplets.push((ri, ci, v));
            }
            b.push(*rhs);
        }
        let a = csc_from_triplets(m, n, &a_triplets);
        let p = csc_from_triplets(
            n,
            n,
            &self.quad.iter().map(|&(i, j, v)| (i, j, v)).collect::<Vec<_>>(),
        );
        LoweredProblem { p, q: self.linear.clone(), a, a_triplets, b, cones }
    }

    /// Plain-text dump of the canonical form, for external cross-checking.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "vars {}", self.num_vars);
        let _ = writeln!(s, "constant {}", self.constant);
        for (i, &q) in self.linear.iter().enumerate() {
            if q != 0.0 {
                let _ = writeln!(s, "linear {i} {q}");
            }
        }
        for &(i, j, v) in &self.quad {
            let _ = writeln!(s, "quad {i} {j} {v}");
        }
        let fmt_expr = |e: &AffineExpr| {
            let mut t = String::new();
            for &(i, w) in &e.terms {
                let _ = write!(t, "{w}*x{i} + ");
            }
            let _ = write!(t, "{}", e.offset);
            t
        };
        for e in &self.eq {
            let _ = writeln!(s, "eq {} = 0", fmt_expr(e));
        }
        for e in &self.nonneg {
            let _ = writeln!(s, "ge {} >= 0", fmt_expr(e));
        }
        for cone in &self.soc {
            let _ = writeln!(s, "soc {}", cone.iter().map(&fmt_expr).collect::<Vec<_>>().join(" ; "));
        }
        for cone in &self.rsoc {
            let _ = writeln!(s, "rsoc {}", cone.iter().map(&fmt_expr).collect::<Vec<_>>().join(" ; "));
        }
        s
    }
}

struct LoweredProblem {
    p: CscMatrix<f64>,
    q: Vec<f64>,
    a: CscMatrix<f64>,
    a_triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

fn negate(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    terms.iter().map(|&(i, w)| (i, -w)).collect()
}

fn add_exprs(a: &AffineExpr, b: &AffineExpr, wa: f64, wb: f64) -> AffineExpr {
    let mut terms = Vec::with_capacity(a.terms.len() + b.terms.len());
    terms.extend(a.terms.iter().map(|&(i, w)| (i, wa * w)));
    terms.extend(b.terms.iter().map(|&(i, w)| (i, wb * w)));
    AffineExpr { terms, offset: wa * a.offset + wb * b.offset }
}

fn csc_from_triplets(m: usize, n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
    entries.sort_by_key(|&(r, c, _)| (c, r));
    // merge duplicates
    let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
    for (r, c, v) in entries {
        match merged.last_mut() {
            Some(last) if last.0 == r && last.1 == c => last.2 += v,
            _ => merged.push((r, c, v)),
        }
    }
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(merged.len());
    let mut nzval = Vec::with_capacity(merged.len());
    for &(r, c, v) in &merged {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    AlmostOptimal,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    /// Objective value including the constant term.
    pub objective: f64,
    pub status: ConicStatus,
    /// Worst primal/dual residual reported by the backend.
    pub achieved_tol: f64,
    /// Dual variables for the lowered constraint rows.
    pub z: Vec<f64>,
    pub iterations: u32,
}

/// Solve a conic problem to tolerance `tol`.
///
/// `warm_start` is accepted for interface stability but ignored by the
/// interior-point backend.
pub fn solve_conic(
    problem: &ConicProblem,
    tol: f64,
    max_iter: u32,
    warm_start: Option<&[f64]>,
) -> Result<ConicSolution> {
    let _ = warm_start;
    let lowered = problem.lower();
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .max_iter(max_iter)
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("solver settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(
        &lowered.p,
        &lowered.q,
        &lowered.a,
        &lowered.b,
        &lowered.cones,
        settings,
    );
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => ConicStatus::Optimal,
        SolverStatus::AlmostSolved => ConicStatus::AlmostOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::Infeasible("primal infeasible".into()))
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Infeasible("dual infeasible (objective unbounded)".into()))
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => return Err(Error::MaxIterations),
        other => return Err(Error::IllConditioned(format!("solver status {other:?}"))),
    };
    Ok(ConicSolution {
        x: sol.x.clone(),
        objective: sol.obj_val + problem.constant,
        status,
        achieved_tol: sol.r_prim.max(sol.r_dual),
        z: sol.z.clone(),
        iterations: sol.iterations,
    })
}

/// Stationarity and primal-feasibility residuals recomputed from scratch:
/// `(||Px + q + A'z||_inf, max primal violation)`.
pub fn kkt_residuals(problem: &ConicProblem, solution: &ConicSolution) -> (f64, f64) {
    let lowered = problem.lower();
    let x = &solution.x;
    let mut grad = lowered.q.clone();
    for &(i, j, v) in &problem.quad {
        grad[i] += v * x[j];
        if i != j {
            grad[j] += v * x[i];
        }
    }
    for &(r, c, v) in &lowered.a_triplets {
        grad[c] += v * solution.z[r];
    }
    let stat = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    (stat, problem.max_violation(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_qp() {
        // min x^2 s.t. x >= 1
        let mut p = ConicProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.add_lower_bound(0, 1.0);
        let sol = solve_conic(&p, 1e-9, 100, None).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!((sol.objective - 1.0).abs() < 1e-7);
        let (stat, feas) = kkt_residuals(&p, &sol);
        assert!(stat < 1e-6 && feas < 1e-7, "stat {stat} feas {feas}");
    }

    #[test]
    fn cone_projection() {
        // min x + y s.t. ||(x, y)|| <= 1  ->  (-sqrt(2)/2, -sqrt(2)/2)
        let mut p = ConicProblem::new(2);
        p.add_linear(0, 1.0);
        p.add_linear(1, 1.0);
        p.add_soc(vec![AffineExpr::constant(1.0), AffineExpr::var(0), AffineExpr::var(1)]);
        let sol = solve_conic(&p, 1e-9, 100, None).unwrap();
        let e = (2.0f64).sqrt() / 2.0;
        assert!((sol.x[0] + e).abs() < 1e-7);
        assert!((sol.x[1] + e).abs() < 1e-7);
    }

    #[test]
    fn rotated_cone() {
        // min a s.t. a * 1 >= x^2, x = 2  ->  a = 4
        let mut p = ConicProblem::new(2);
        p.add_linear(0, 1.0);
        p.add_eq(AffineExpr::var(1).plus(-2.0));
        p.add_rsoc(vec![
            AffineExpr::var(0),
            AffineExpr::constant(1.0),
            AffineExpr::var(1),
        ]);
        let sol = solve_conic(&p, 1e-9, 100, None).unwrap();
        assert!((sol.x[0] - 4.0).abs() < 1e-6, "a = {}", sol.x[0]);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = ConicProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.add_lower_bound(0, 1.0);
        p.add_upper_bound(0, 0.0);
        assert!(matches!(
            solve_conic(&p, 1e-8, 100, None),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn penalty_expansion_matches_direct_eval() {
        // (w/2)(2x0 - x1 + 3)^2 expanded into P, q, c
        let mut p = ConicProblem::new(2);
        let e = AffineExpr::var(0).term(0, 1.0).term(1, -1.0).plus(3.0);
        p.add_penalty(0.7, &e);
        let x = [1.3, -0.4];
        let direct = 0.5 * 0.7 * e.eval(&x).powi(2);
        assert!((p.objective_at(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn equality_constrained_qp() {
        // min (x-3)^2 + (y-2)^2 s.t. x + y = 4, x,y >= 0  ->  (2.5, 1.5)
        let mut p = ConicProblem::new(2);
        p.add_quad(0, 0, 2.0);
        p.add_quad(1, 1, 2.0);
        p.add_linear(0, -6.0);
        p.add_linear(1, -4.0);
        p.add_constant(13.0);
        p.add_eq(AffineExpr::var(0).term(1, 1.0).plus(-4.0));
        p.add_lower_bound(0, 0.0);
        p.add_lower_bound(1, 0.0);
        let sol = solve_conic(&p, 1e-9, 100, None).unwrap();
        assert!((sol.x[0] - 2.5).abs() < 1e-7);
        assert!((sol.x[1] - 1.5).abs() < 1e-7);
        assert!((sol.objective - 0.5).abs() < 1e-7);
    }
}
