//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 u' H u + f' u
//!     subject to   A u <= b
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time while keeping the iterate dual feasible, so it needs `H` positive
//! definite but no feasible starting point. Every problem built by the planner
//! has `H` positive definite because the control-effort weight is.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric")]
    NotSymmetric,
    #[error("cost matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("problem data contains non-finite values")]
    NonFinite,
}

/// What a row of the stacked inequality system encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    /// Upper workspace bound at horizon step `step` (1-based), axis `axis`.
    PositionMax { step: usize, axis: usize },
    PositionMin { step: usize, axis: usize },
    /// Upper acceleration bound at input index `step` (0-based).
    InputMax { step: usize, axis: usize },
    InputMin { step: usize, axis: usize },
    /// Linearized separation from `neighbor` at horizon step `step`.
    Collision { neighbor: usize, step: usize },
    /// `eps <= 0` for relaxation slot `slot`.
    RelaxUpper { slot: usize },
    /// `-eps <= eps_max` for relaxation slot `slot`.
    RelaxLower { slot: usize },
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub labels: Vec<RowKind>,
}

impl QpProblem {
    /// Problem without labeled rows; convenient for tests and ad-hoc use.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Self {
        let labels = (0..b_in.len())
            .map(|slot| RowKind::RelaxUpper { slot })
            .collect();
        QpProblem {
            hessian,
            linear,
            a_in,
            b_in,
            labels,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn rows(&self) -> usize {
        self.b_in.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u)
    }

    fn check(&self) -> Result<(), QpError> {
        let d = self.linear.len();
        let m = self.b_in.len();
        if self.hessian.shape() != (d, d) {
            return Err(QpError::Dimension(format!(
                "hessian is {:?}, expected {d}x{d}",
                self.hessian.shape()
            )));
        }
        if self.a_in.shape() != (m, d) {
            return Err(QpError::Dimension(format!(
                "constraint matrix is {:?}, expected {m}x{d}",
                self.a_in.shape()
            )));
        }
        if self.labels.len() != m {
            return Err(QpError::Dimension("one label per constraint row".into()));
        }
        let finite = [
            self.hessian.as_slice(),
            self.linear.as_slice(),
            self.a_in.as_slice(),
            self.b_in.as_slice(),
        ]
        .iter()
        .all(|xs| xs.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(QpError::NonFinite);
        }
        let scale = self.hessian.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.hessian[(i, j)] - self.hessian[(j, i)]).abs() > 1e-12 * scale {
                    return Err(QpError::NotSymmetric);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Bound on every KKT residual of a solution reported optimal.
    pub tol: f64,
    /// Bound on the number of active-set changes.
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|| H u + f + A' lambda ||_inf`
    pub stationarity: f64,
    /// `|| max(A u - b, 0) ||_inf`
    pub primal: f64,
    /// `sum_i |lambda_i (A u - b)_i|`
    pub complementarity: f64,
    /// `|| min(lambda, 0) ||_inf`
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    /// Multipliers, one per row; zero for inactive rows.
    pub lambda: DVector<f64>,
    /// Active rows in the order they entered the working set.
    pub active: Vec<usize>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Post-hoc KKT check, independent of the solver internals.
pub fn kkt_residuals(problem: &QpProblem, u: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let grad = &problem.hessian * u + &problem.linear + problem.a_in.tr_mul(lambda);
    let slack = &problem.a_in * u - &problem.b_in;
    KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().fold(0.0, |acc, s| acc.max(*s)),
        complementarity: slack.iter().zip(lambda.iter()).map(|(s, l)| (s * l).abs()).sum(),
        dual: lambda.iter().fold(0.0, |acc, l| acc.max(-l)),
    }
}

/// Inverse Cholesky factor `J = L^-T` of a positive definite Hessian
/// `H = L L'`, so that `J J' = H^-1`.
///
/// Problems sharing a Hessian can share one factor.
#[derive(Debug, Clone)]
pub struct HessianFactor {
    j: DMatrix<f64>,
}

impl HessianFactor {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::Dimension(format!("hessian is {:?}", hessian.shape())));
        }
        if !hessian.iter().all(|x| x.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let chol = hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let lower = chol.l();
        if (0..n).any(|i| !(lower[(i, i)] > 0.0) || !lower[(i, i)].is_finite()) {
            return Err(QpError::NotPositiveDefinite);
        }
        let j = lower
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?
            .transpose();
        Ok(HessianFactor { j })
    }

    /// Factor of `blockdiag(H, diag(extra))`.
    pub fn with_diagonal(&self, extra: &[f64]) -> Result<Self, QpError> {
        if extra.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(QpError::NotPositiveDefinite);
        }
        let n = self.dim();
        let d = n + extra.len();
        let mut j = DMatrix::zeros(d, d);
        j.view_mut((0, 0), (n, n)).copy_from(&self.j);
        for (k, x) in extra.iter().enumerate() {
            j[(n + k, n + k)] = 1.0 / x.sqrt();
        }
        Ok(HessianFactor { j })
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }
}

/// Solves `problem`. Rows listed in `warm_start` are preferred when choosing
/// which violated constraint to add next; any order yields the same optimum.
pub fn solve_qp(
    problem: &QpProblem,
    settings: &SolverSettings,
    warm_start: Option<&[usize]>,
) -> Result<QpSolution, QpError> {
    problem.check()?;
    let factor = HessianFactor::new(&problem.hessian)?;
    solve_qp_factored(problem, &factor, settings, warm_start)
}

/// [`solve_qp`] with a precomputed factor, which must belong to
/// `problem.hessian`.
pub fn solve_qp_factored(
    problem: &QpProblem,
    factor: &HessianFactor,
    settings: &SolverSettings,
    warm_start: Option<&[usize]>,
) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n = problem.dim();
    let m = problem.rows();
    if factor.dim() != n {
        return Err(QpError::Dimension(format!("factor is {0}x{0}, expected {n}x{n}", factor.dim())));
    }
    let j_mat = factor.j.clone();
    let u0 = -(&j_mat * (j_mat.transpose() * &problem.linear));

    let mut preferred = vec![false; m];
    if let Some(rows) = warm_start {
        for &r in rows {
            if r < m {
                preferred[r] = true;
            }
        }
    }
    let mut row_norms = vec![0.0; m];
    for col in problem.a_in.column_iter() {
        for (acc, x) in row_norms.iter_mut().zip(col.iter()) {
            *acc += x * x;
        }
    }
    for x in &mut row_norms {
        *x = x.sqrt();
    }

    let mut ws = Workspace {
        j: j_mat,
        r: DMatrix::zeros(n, n),
        u: u0,
        active: Vec::with_capacity(n),
        mult: Vec::with_capacity(n),
        in_active: vec![false; m],
    };
    let viol_tol = settings.tol * 1e-3;

    let mut iterations = 0;
    // `b - A u`, updated incrementally and refreshed before termination.
    let mut slack = &problem.b_in - &problem.a_in * &ws.u;
    let mut fresh = true;
    let status = 'outer: loop {
        // Step 1: choose a violated constraint.
        let mut pick: Option<(usize, bool, f64)> = None;
        for i in 0..m {
            if ws.in_active[i] || slack[i] >= -viol_tol {
                continue;
            }
            // A violated row with a zero normal can never be satisfied.
            if row_norms[i] == 0.0 {
                break 'outer QpStatus::Infeasible;
            }
            let score = slack[i] / row_norms[i];
            let better = match pick {
                None => true,
                Some((_, pref, best)) => {
                    (preferred[i] && !pref) || (preferred[i] == pref && score < best)
                }
            };
            if better {
                pick = Some((i, preferred[i], score));
            }
        }
        let Some((p, _, _)) = pick else {
            if fresh {
                break QpStatus::Optimal;
            }
            slack = &problem.b_in - &problem.a_in * &ws.u;
            fresh = true;
            continue;
        };
        let normal: DVector<f64> = -problem.a_in.row(p).transpose();
        let mut mult_p = 0.0;

        // Step 2: move toward satisfying row p, dropping blockers as needed.
        loop {
            if iterations >= settings.max_iter {
                break 'outer QpStatus::MaxIter;
            }
            iterations += 1;
            let q = ws.active.len();
            let d = ws.j.tr_mul(&normal);
            let d2 = d.rows(q, n - q);
            let z = ws.j.columns(q, n - q) * d2;
            let d2_sq = d2.norm_squared();
            let r = ws.solve_r(&d);

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            let r_scale = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (k, rk) in r.iter().enumerate() {
                if *rk > f64::EPSILON * r_scale {
                    let ratio = ws.mult[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let full = d2_sq > (1e-11 * d.norm()).powi(2) && d2_sq > 0.0;
            let t2 = if full {
                let s_p = slack[p];
                (-s_p / d2_sq).max(0.0)
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if t.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            for (k, rk) in r.iter().enumerate() {
                ws.mult[k] -= t * rk;
            }
            mult_p += t;
            if !full {
                ws.drop(drop_at.expect("finite partial step has a blocker"));
                continue;
            }
            ws.u += &z * t;
            for (col, zc) in z.iter().enumerate() {
                if *zc != 0.0 {
                    slack.axpy(-t * zc, &problem.a_in.column(col), 1.0);
                }
            }
            fresh = false;
            if t2 <= t1 {
                ws.add(p, mult_p, d);
                continue 'outer;
            }
            ws.drop(drop_at.expect("finite partial step has a blocker"));
        }
    };

    let mut lambda = DVector::zeros(m);
    for (row, mu) in ws.active.iter().zip(&ws.mult) {
        lambda[*row] = mu.max(0.0);
    }
    let u = ws.u;
    let kkt = kkt_residuals(problem, &u, &lambda);
    Ok(QpSolution {
        objective: problem.objective(&u),
        u,
        status,
        lambda,
        active: ws.active,
        kkt,
        iterations,
    })
}

struct Workspace {
    /// Orthogonal-ish basis; the first `q` columns span the active normals.
    j: DMatrix<f64>,
    /// Upper triangular factor of the active normals, top-left `q x q` used.
    r: DMatrix<f64>,
    u: DVector<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
    in_active: Vec<bool>,
}

impl Workspace {
    /// Solves `R r = d[..q]` by back substitution.
    fn solve_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.active.len();
        let mut out = vec![0.0; q];
        for i in (0..q).rev() {
            let acc = (i + 1..q).fold(d[i], |acc, k| acc - self.r[(i, k)] * out[k]);
            out[i] = acc / self.r[(i, i)];
        }
        out
    }

    /// Rotates columns `a < b` of J: `J <- J G'`.
    fn rotate_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        let n = self.j.nrows();
        let (head, tail) = self.j.as_mut_slice().split_at_mut(b * n);
        let col_a = &mut head[a * n..(a + 1) * n];
        let col_b = &mut tail[..n];
        for (x, y) in col_a.iter_mut().zip(col_b.iter_mut()) {
            let (xa, yb) = (*x, *y);
            *x = c * xa + s * yb;
            *y = -s * xa + c * yb;
        }
    }

    /// Appends `row` to the active set. Rotates columns `q+1..` of J into
    /// column `q` so that `d = J' n` has no entries past `q`.
    fn add(&mut self, row: usize, mult: f64, mut d: DVector<f64>) {
        let n = self.j.nrows();
        let q = self.active.len();
        for i in q + 1..n {
            if d[i] == 0.0 {
                continue;
            }
            let h = d[q].hypot(d[i]);
            let c = d[q] / h;
            let s = d[i] / h;
            d[q] = h;
            d[i] = 0.0;
            self.rotate_j(q, i, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(row);
        self.mult.push(mult);
        self.in_active[row] = true;
    }

    fn drop(&mut self, k: usize) {
        let q = self.active.len();
        let row = self.active.remove(k);
        self.mult.remove(k);
        self.in_active[row] = false;
        // Shift columns k+1.. left, leaving an upper Hessenberg block.
        for col in k..q - 1 {
            for i in 0..=col + 1 {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for col in k..q - 1 {
            let a = self.r[(col, col)];
            let b = self.r[(col + 1, col)];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let c = a / h;
            let s = b / h;
            for cc in col..q - 1 {
                let x = self.r[(col, cc)];
                let y = self.r[(col + 1, cc)];
                self.r[(col, cc)] = c * x + s * y;
                self.r[(col + 1, cc)] = -s * x + c * y;
            }
            self.r[(col + 1, col)] = 0.0;
            self.rotate_j(col, col + 1, c, s);
        }
    }
}
