//! Dense convex quadratic programming:
//!
//! ```text
//!     minimize   ½ uᵀH u + fᵀu
//!     subject to A_eq u  = b_eq
//!                A_in u ≤ b_in
//! ```
//!
//! solved with a dual active-set method (Goldfarb–Idnani): start at the
//! unconstrained minimum and add violated constraints one at a time,
//! updating a QR factorization of the active normals. No feasible starting
//! point is needed, the iteration count is bounded, and the method is
//! deterministic: identical inputs produce identical outputs.
//!
//! `H` may be positive semidefinite; a fixed `1e-9·I` regularization is
//! added before factorization, uniformly for every problem. Reported KKT
//! residuals are measured against the original `H`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Residual tolerance below which a solution is reported optimal.
pub const KKT_TOL: f64 = 1e-6;
/// Diagonal regularization applied to `H` before factorization.
pub const REGULARIZATION: f64 = 1e-9;
/// Default cap on active-set changes before giving up.
pub const DEFAULT_MAX_ITER: usize = 200;

const SYM_TOL: f64 = 1e-10;
const EIG_TOL: f64 = -1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("cost matrix is not symmetric within 1e-10")]
    NotSymmetric,
    #[error("cost matrix is indefinite (eigenvalue {0:.3e} below tolerance)")]
    Indefinite(f64),
    #[error("cost matrix could not be factorized")]
    FactorizationFailed,
}

/// Dense QP data. Inequalities are `A_in·u ≤ b_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; constraints can be appended afterwards.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        let p = Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_constraints(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = Self {
            h,
            f,
            a_eq,
            b_eq,
            a_in,
            b_in,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    /// Append variable bounds as inequality rows. `None` leaves a side
    /// unbounded.
    pub fn add_bounds(&mut self, lower: &[Option<f64>], upper: &[Option<f64>]) {
        let n = self.n();
        assert_eq!(lower.len(), n);
        assert_eq!(upper.len(), n);
        let extra = lower.iter().flatten().count() + upper.iter().flatten().count();
        let m0 = self.a_in.nrows();
        let mut a = DMatrix::zeros(m0 + extra, n);
        let mut b = DVector::zeros(m0 + extra);
        a.view_mut((0, 0), (m0, n)).copy_from(&self.a_in);
        b.rows_mut(0, m0).copy_from(&self.b_in);
        let mut r = m0;
        for (i, lo) in lower.iter().enumerate() {
            if let Some(lo) = lo {
                a[(r, i)] = -1.0;
                b[r] = -lo;
                r += 1;
            }
        }
        for (i, hi) in upper.iter().enumerate() {
            if let Some(hi) = hi {
                a[(r, i)] = 1.0;
                b[r] = *hi;
                r += 1;
            }
        }
        self.a_in = a;
        self.b_in = b;
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.h * u)[(0, 0)] + self.f.dot(u)
    }

    fn check_dims(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::DimensionMismatch("H must be n×n"));
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(QpError::DimensionMismatch("A_eq column count"));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::DimensionMismatch("A_eq/b_eq row count"));
        }
        if self.a_in.ncols() != n && self.a_in.nrows() > 0 {
            return Err(QpError::DimensionMismatch("A_in column count"));
        }
        if self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::DimensionMismatch("A_in/b_in row count"));
        }
        Ok(())
    }

    /// Dimension, symmetry and semidefiniteness checks.
    pub fn validate(&self) -> Result<(), QpError> {
        self.check_dims()?;
        let n = self.n();
        let scale = 1.0f64.max(self.h.amax());
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(QpError::NotSymmetric);
                }
            }
        }
        if n > 0 {
            let sym = (&self.h + self.h.transpose()) * 0.5;
            let eig = sym.symmetric_eigenvalues();
            let min = eig.min();
            if min < EIG_TOL * scale {
                return Err(QpError::Indefinite(min));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// KKT residuals of a reported solution, measured against the original H.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
            .max(self.dual)
    }
}

/// Farkas-type certificate for an infeasible problem: a nonnegative
/// combination of the listed constraints (global indices, equalities may
/// carry either sign) admits no feasible point together with `violated`.
#[derive(Debug, Clone)]
pub struct InfeasibilityCertificate {
    pub violated: usize,
    pub combination: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    /// Global constraint indices: equalities `0..m_eq`, inequalities
    /// `m_eq..m_eq+m_in`.
    pub active_set: Vec<usize>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    pub certificate: Option<InfeasibilityCertificate>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
struct ActiveRef {
    /// Global constraint index.
    idx: usize,
    /// Equality added with its normal negated.
    flipped: bool,
}

/// Reusable solver. One instance per control loop; a single instance must
/// not be used from several threads at once.
#[derive(Debug, Default)]
pub struct QpSolver {
    j_mat: DMatrix<f64>,
    r_mat: DMatrix<f64>,
    max_iterations: usize,
}

impl QpSolver {
    pub fn new() -> Self {
        Self {
            j_mat: DMatrix::zeros(0, 0),
            r_mat: DMatrix::zeros(0, 0),
            max_iterations: DEFAULT_MAX_ITER,
        }
    }

    pub fn with_max_iterations(mut self, max: usize) -> Self {
        self.max_iterations = max;
        self
    }

    /// Solve the problem. `warm_start` is an optional set of constraint
    /// indices checked first when hunting for violations; it never changes
    /// the optimum, only the path towards it.
    pub fn solve(
        &mut self,
        prob: &QpProblem,
        warm_start: Option<&[usize]>,
    ) -> Result<QpSolution, QpError> {
        prob.check_dims()?;
        let n = prob.n();
        let m_eq = prob.a_eq.nrows();
        let m_in = prob.a_in.nrows();
        let m = m_eq + m_in;

        // Regularized, symmetrized cost matrix.
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = 0.5 * (prob.h[(i, j)] + prob.h[(j, i)]);
            }
            g[(i, i)] += REGULARIZATION;
        }
        let chol = g.clone().cholesky().ok_or(QpError::FactorizationFailed)?;
        let mut u_vec = chol.solve(&(-&prob.f));

        if self.j_mat.nrows() != n {
            self.j_mat = DMatrix::zeros(n, n);
            self.r_mat = DMatrix::zeros(n, n);
        }
        // J = L⁻ᵀ.
        let lt = chol.l().transpose();
        self.j_mat.fill(0.0);
        self.j_mat.fill_with_identity();
        let j_solved = lt
            .solve_upper_triangular(&self.j_mat)
            .ok_or(QpError::FactorizationFailed)?;
        self.j_mat.copy_from(&j_solved);
        self.r_mat.fill(0.0);

        let b_scale = 1.0 + prob.b_eq.amax().max(prob.b_in.amax());
        let tol = 1e-10 * b_scale;

        // Constraint normals in ≥ form and their norms.
        let normal = |idx: usize, out: &mut DVector<f64>| {
            if idx < m_eq {
                for k in 0..n {
                    out[k] = prob.a_eq[(idx, k)];
                }
            } else {
                for k in 0..n {
                    out[k] = -prob.a_in[(idx - m_eq, k)];
                }
            }
        };
        let mut norms = vec![0.0f64; m];
        {
            let mut tmp = DVector::zeros(n);
            for (idx, ni) in norms.iter_mut().enumerate() {
                normal(idx, &mut tmp);
                *ni = tmp.norm();
            }
        }
        // Slack in ≥ form: n·u − b; equalities want it zero.
        let slack = |idx: usize, u: &DVector<f64>| -> f64 {
            if idx < m_eq {
                prob.a_eq.row(idx).transpose().dot(u) - prob.b_eq[idx]
            } else {
                prob.b_in[idx - m_eq] - prob.a_in.row(idx - m_eq).transpose().dot(u)
            }
        };

        let mut active: Vec<ActiveRef> = Vec::new();
        let mut multipliers: Vec<f64> = Vec::new();
        let mut in_active = vec![false; m];
        let mut iterations = 0usize;

        let mut np = DVector::zeros(n);
        let mut d = DVector::zeros(n);
        let mut z = DVector::zeros(n);

        // A degenerate all-zero row is either trivially satisfied or
        // trivially infeasible.
        for idx in 0..m {
            if norms[idx] < 1e-14 {
                let s = slack(idx, &u_vec);
                let bad = if idx < m_eq { s.abs() > tol } else { s < -tol };
                if bad {
                    return Ok(self.finish(
                        prob,
                        u_vec,
                        QpStatus::Infeasible,
                        &active,
                        &multipliers,
                        iterations,
                        Some(InfeasibilityCertificate {
                            violated: idx,
                            combination: vec![],
                        }),
                    ));
                }
            }
        }

        loop {
            // Most violated constraint, warm-start candidates first.
            let mut pick: Option<(usize, f64)> = None;
            let consider = |idx: usize, pick: &mut Option<(usize, f64)>| {
                if in_active[idx] || norms[idx] < 1e-14 {
                    return;
                }
                let s = slack(idx, &u_vec);
                let v = if idx < m_eq { s.abs() } else { -s };
                let v = v / norms[idx];
                if v > tol && pick.map_or(true, |(_, best)| v > best) {
                    *pick = Some((idx, v));
                }
            };
            if let Some(warm) = warm_start {
                for &idx in warm {
                    if idx < m {
                        consider(idx, &mut pick);
                    }
                }
            }
            if pick.is_none() {
                for idx in 0..m {
                    consider(idx, &mut pick);
                }
            }
            let Some((p_idx, _)) = pick else {
                // All constraints satisfied: optimal.
                return Ok(self.finish(
                    prob,
                    u_vec,
                    QpStatus::Optimal,
                    &active,
                    &multipliers,
                    iterations,
                    None,
                ));
            };

            iterations += 1;
            if iterations > self.max_iterations {
                return Ok(self.finish(
                    prob,
                    u_vec,
                    QpStatus::MaxIterations,
                    &active,
                    &multipliers,
                    iterations,
                    None,
                ));
            }

            let mut s = slack(p_idx, &u_vec);
            let flipped = p_idx < m_eq && s > 0.0;
            normal(p_idx, &mut np);
            if flipped {
                np.neg_mut();
                s = -s;
            }

            let mut u_plus = 0.0f64;
            loop {
                let q = active.len();
                // d = Jᵀ n⁺, z = J₂ d₂, r = R⁻¹ d₁.
                for i in 0..n {
                    d[i] = self.j_mat.column(i).dot(&np);
                }
                z.fill(0.0);
                for i in q..n {
                    let di = d[i];
                    if di != 0.0 {
                        z.axpy(di, &self.j_mat.column(i).clone_owned(), 1.0);
                    }
                }
                let mut r_vec = vec![0.0f64; q];
                for i in (0..q).rev() {
                    let mut acc = d[i];
                    for k in (i + 1)..q {
                        acc -= self.r_mat[(i, k)] * r_vec[k];
                    }
                    r_vec[i] = acc / self.r_mat[(i, i)];
                }

                // Longest dual step before an inequality multiplier hits 0.
                let mut t1 = f64::INFINITY;
                let mut idel: Option<usize> = None;
                for (k, aref) in active.iter().enumerate() {
                    if aref.idx >= m_eq && r_vec[k] > 1e-12 {
                        let ratio = multipliers[k] / r_vec[k];
                        if ratio < t1 {
                            t1 = ratio;
                            idel = Some(k);
                        }
                    }
                }
                // Full primal step to make the constraint feasible.
                let z_norm2 = z.dot(&z);
                let (t2, ztn) = if z_norm2 < 1e-24 {
                    (f64::INFINITY, 0.0)
                } else {
                    let ztn = z.dot(&np);
                    (-s / ztn, ztn)
                };

                if !t1.is_finite() && !t2.is_finite() {
                    // No step restores feasibility: the violated constraint
                    // lies in the span of the active set with conflicting
                    // right-hand sides.
                    let combination: Vec<(usize, f64)> = active
                        .iter()
                        .zip(&r_vec)
                        .map(|(aref, &w)| (aref.idx, if aref.flipped { -w } else { w }))
                        .collect();
                    return Ok(self.finish(
                        prob,
                        u_vec,
                        QpStatus::Infeasible,
                        &active,
                        &multipliers,
                        iterations,
                        Some(InfeasibilityCertificate {
                            violated: p_idx,
                            combination,
                        }),
                    ));
                }

                let step = t1.min(t2);
                if !t2.is_finite() {
                    // Dual-only step: drop the blocking constraint.
                    for (k, rv) in r_vec.iter().enumerate() {
                        multipliers[k] -= step * rv;
                    }
                    u_plus += step;
                    let k = idel.expect("finite t1 implies a blocking constraint");
                    self.qr_delete(k, active.len());
                    in_active[active[k].idx] = false;
                    active.remove(k);
                    multipliers.remove(k);
                    continue;
                }

                u_vec.axpy(step, &z, 1.0);
                u_plus += step;
                for (k, rv) in r_vec.iter().enumerate() {
                    multipliers[k] -= step * rv;
                }
                s += step * ztn;

                if t2 <= t1 {
                    // Full step: admit the constraint into the active set.
                    self.qr_insert(q, &mut d);
                    for i in 0..=q {
                        self.r_mat[(i, q)] = d[i];
                    }
                    active.push(ActiveRef {
                        idx: p_idx,
                        flipped,
                    });
                    multipliers.push(u_plus);
                    in_active[p_idx] = true;
                    break;
                }
                // Partial step: drop the blocking constraint and keep
                // pushing the same violated one.
                let k = idel.expect("t1 < t2 implies a blocking constraint");
                self.qr_delete(k, active.len());
                in_active[active[k].idx] = false;
                active.remove(k);
                multipliers.remove(k);
            }
        }
    }

    /// Fold `d[q+1..n]` into `d[q]` with Givens rotations, applying the
    /// same rotations to the columns of J.
    fn qr_insert(&mut self, q: usize, d: &mut DVector<f64>) {
        let n = d.len();
        for i in ((q + 1)..n).rev() {
            if d[i] == 0.0 {
                continue;
            }
            let (a, b) = (d[i - 1], d[i]);
            let h = a.hypot(b).copysign(if a != 0.0 { a } else { b });
            let c = a / h;
            let s = b / h;
            d[i - 1] = h;
            d[i] = 0.0;
            for r in 0..n {
                let t = c * self.j_mat[(r, i - 1)] + s * self.j_mat[(r, i)];
                self.j_mat[(r, i)] = -s * self.j_mat[(r, i - 1)] + c * self.j_mat[(r, i)];
                self.j_mat[(r, i - 1)] = t;
            }
        }
    }

    /// Remove active column `k` (of `q`) from R and restore the
    /// triangular form, applying matching rotations to J's columns.
    fn qr_delete(&mut self, k: usize, q: usize) {
        let n = self.j_mat.nrows();
        // Shift columns left.
        for col in k..(q - 1) {
            for row in 0..q {
                self.r_mat[(row, col)] = self.r_mat[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r_mat[(row, q - 1)] = 0.0;
        }
        // Chase the subdiagonal.
        for j in k..(q - 1) {
            let a = self.r_mat[(j, j)];
            let b = self.r_mat[(j + 1, j)];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b).copysign(if a != 0.0 { a } else { b });
            let c = a / h;
            let s = b / h;
            for col in j..(q - 1) {
                let t = c * self.r_mat[(j, col)] + s * self.r_mat[(j + 1, col)];
                self.r_mat[(j + 1, col)] =
                    -s * self.r_mat[(j, col)] + c * self.r_mat[(j + 1, col)];
                self.r_mat[(j, col)] = t;
            }
            for r in 0..n {
                let t = c * self.j_mat[(r, j)] + s * self.j_mat[(r, j + 1)];
                self.j_mat[(r, j + 1)] = -s * self.j_mat[(r, j)] + c * self.j_mat[(r, j + 1)];
                self.j_mat[(r, j)] = t;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        prob: &QpProblem,
        u: DVector<f64>,
        status: QpStatus,
        active: &[ActiveRef],
        multipliers: &[f64],
        iterations: usize,
        certificate: Option<InfeasibilityCertificate>,
    ) -> QpSolution {
        let m_eq = prob.a_eq.nrows();
        let m_in = prob.a_in.nrows();
        let mut eq_mult = DVector::zeros(m_eq);
        let mut in_mult = DVector::zeros(m_in);
        for (aref, &mu) in active.iter().zip(multipliers) {
            if aref.idx < m_eq {
                eq_mult[aref.idx] = if aref.flipped { mu } else { -mu };
            } else {
                in_mult[aref.idx - m_eq] = mu;
            }
        }
        let kkt = residuals(prob, &u, &eq_mult, &in_mult);
        // Only report optimal when the KKT system actually checks out.
        let status = if status == QpStatus::Optimal && kkt.max() >= KKT_TOL {
            QpStatus::MaxIterations
        } else {
            status
        };
        let objective = prob.objective(&u);
        QpSolution {
            u,
            status,
            active_set: active.iter().map(|a| a.idx).collect(),
            objective,
            kkt,
            eq_multipliers: eq_mult,
            in_multipliers: in_mult,
            certificate,
            iterations,
        }
    }
}

/// One-shot solve with a fresh workspace and no warm start.
pub fn solve(prob: &QpProblem) -> Result<QpSolution, QpError> {
    QpSolver::new().solve(prob, None)
}

/// KKT residuals of `(u, λ, μ)` for `prob`, against the original H.
pub fn residuals(
    prob: &QpProblem,
    u: &DVector<f64>,
    eq_mult: &DVector<f64>,
    in_mult: &DVector<f64>,
) -> KktResiduals {
    let mut grad = &prob.h * u + &prob.f;
    if prob.a_eq.nrows() > 0 {
        grad += prob.a_eq.transpose() * eq_mult;
    }
    if prob.a_in.nrows() > 0 {
        grad += prob.a_in.transpose() * in_mult;
    }
    let stationarity = grad.amax();
    let primal_eq = if prob.a_eq.nrows() > 0 {
        (&prob.a_eq * u - &prob.b_eq).amax()
    } else {
        0.0
    };
    let mut primal_in = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual = 0.0f64;
    for i in 0..prob.a_in.nrows() {
        let resid = prob.a_in.row(i).transpose().dot(u) - prob.b_in[i];
        primal_in = primal_in.max(resid);
        complementarity = complementarity.max((in_mult[i] * resid).abs());
        dual = dual.max(-in_mult[i]);
    }
    KktResiduals {
        stationarity,
        primal_eq,
        primal_in,
        complementarity,
        dual,
    }
}

/// Exhaustive active-set enumeration for small problems, used as the
/// independent test oracle: every subset of inequalities is pinned as
/// equalities, the KKT system solved directly, and the best feasible
/// candidate returned. Exponential in the constraint count.
pub fn solve_by_enumeration(prob: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = prob.n();
    let m_eq = prob.a_eq.nrows();
    let m_in = prob.a_in.nrows();
    assert!(m_in <= 20, "enumeration oracle is exponential");
    let mut best: Option<(DVector<f64>, f64)> = None;
    let feas_tol = 1e-7;

    for mask in 0u32..(1u32 << m_in) {
        let subset: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        if m_eq + subset.len() > n {
            continue;
        }
        let m = m_eq + subset.len();
        let dim = n + m;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = prob.h[(i, j)] + if i == j { REGULARIZATION } else { 0.0 };
            }
            rhs[i] = -prob.f[i];
        }
        for (r, row) in (0..m_eq).enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = prob.a_eq[(row, c)];
                kkt[(c, n + r)] = prob.a_eq[(row, c)];
            }
            rhs[n + r] = prob.b_eq[row];
        }
        for (r, &row) in subset.iter().enumerate() {
            for c in 0..n {
                kkt[(n + m_eq + r, c)] = prob.a_in[(row, c)];
                kkt[(c, n + m_eq + r)] = prob.a_in[(row, c)];
            }
            rhs[n + m_eq + r] = prob.b_in[row];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let u = sol.rows(0, n).into_owned();
        if !u.iter().all(|v| v.is_finite()) {
            continue;
        }
        // Feasibility of the full constraint set.
        let mut ok = true;
        for i in 0..m_eq {
            if (prob.a_eq.row(i).transpose().dot(&u) - prob.b_eq[i]).abs() > feas_tol {
                ok = false;
                break;
            }
        }
        if ok {
            for i in 0..m_in {
                if prob.a_in.row(i).transpose().dot(&u) - prob.b_in[i] > feas_tol {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let obj = prob.objective(&u);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((u, obj));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_problem(n: usize) -> QpProblem {
        QpProblem::new(DMatrix::identity(n, n), DVector::zeros(n)).unwrap()
    }

    #[test]
    fn unconstrained_identity_gives_zero() {
        let sol = solve(&identity_problem(4)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.u.amax() < 1e-12);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn active_bound_is_respected() {
        // minimize (u − 2)² subject to u ≤ 1 → u* = 1.
        let mut prob = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
        )
        .unwrap();
        prob.add_bounds(&[None], &[Some(1.0)]);
        let sol = solve(&prob).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 1.0, epsilon = 1e-9);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn equality_constraint() {
        // minimize ½‖u‖² subject to u₀ + u₁ = 2 → (1, 1).
        let prob = QpProblem::with_constraints(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 2.0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve(&prob).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.u[1], 1.0, epsilon = 1e-9);
        assert!(sol.kkt.max() < KKT_TOL);
    }

    #[test]
    fn infeasible_problem_is_reported_with_certificate() {
        // u ≥ 1 and u ≤ 0 cannot hold together.
        let prob = QpProblem::with_constraints(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            DVector::from_row_slice(&[-1.0, 0.0]),
        )
        .unwrap();
        let sol = solve(&prob).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let cert = sol.certificate.expect("certificate expected");
        assert!(cert.violated < 2);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            QpProblem::new(h, DVector::zeros(2)),
            Err(QpError::Indefinite(_))
        ));
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert_eq!(
            QpProblem::new(h, DVector::zeros(2)).unwrap_err(),
            QpError::NotSymmetric
        );
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let prob = QpProblem {
            h: DMatrix::identity(2, 2),
            f: DVector::zeros(2),
            a_eq: DMatrix::zeros(1, 3),
            b_eq: DVector::zeros(1),
            a_in: DMatrix::zeros(0, 2),
            b_in: DVector::zeros(0),
        };
        assert!(matches!(
            QpSolver::new().solve(&prob, None),
            Err(QpError::DimensionMismatch(_))
        ));
    }

    /// Random strictly convex QP with a known feasible point.
    pub(crate) fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
        let n = rng.gen_range(1..=8);
        let m_in = rng.gen_range(0..=12usize);
        let m_eq = rng.gen_range(0..=n.min(2));
        let mut mat = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                mat[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let h = &mat * mat.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.5..2.0);
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a_in = DMatrix::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0));
        let b_in = DVector::from_fn(m_in, |i, _| {
            a_in.row(i).transpose().dot(&feas) + rng.gen_range(0.0..1.5)
        });
        let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.gen_range(-1.0..1.0));
        let b_eq = DVector::from_fn(m_eq, |i, _| a_eq.row(i).transpose().dot(&feas));
        QpProblem::with_constraints(h, f, a_eq, b_eq, a_in, b_in).unwrap()
    }

    #[test]
    fn matches_enumeration_oracle_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let prob = random_qp(&mut rng);
            let sol = solve(&prob).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "feasible by construction");
            let (_, obj) = solve_by_enumeration(&prob).expect("oracle found a solution");
            assert_relative_eq!(sol.objective, obj, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut solver = QpSolver::new();
        for _ in 0..30 {
            let prob = random_qp(&mut rng);
            let cold = solver.solve(&prob, None).unwrap();
            let warm = solver.solve(&prob, Some(&cold.active_set)).unwrap();
            assert_eq!(warm.status, QpStatus::Optimal);
            assert!((&warm.u - &cold.u).amax() < 1e-8);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prob = random_qp(&mut rng);
        let a = solve(&prob).unwrap();
        let b = solve(&prob).unwrap();
        assert_eq!(a.u.as_slice(), b.u.as_slice());
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.active_set, b.active_set);
    }

    #[test]
    fn local_optimality_probe() {
        // Perturbing an optimum along random feasible directions never
        // lowers the objective beyond tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let prob = random_qp(&mut rng);
            let sol = solve(&prob).unwrap();
            if sol.status != QpStatus::Optimal {
                continue;
            }
            let n = prob.n();
            let mut tried = 0;
            while tried < 20 {
                let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0f64..1.0));
                let cand = &sol.u + dir * 1e-4;
                // Keep only feasible perturbations.
                let mut feasible = true;
                for i in 0..prob.a_eq.nrows() {
                    if (prob.a_eq.row(i).transpose().dot(&cand) - prob.b_eq[i]).abs() > 1e-9 {
                        feasible = false;
                        break;
                    }
                }
                for i in 0..prob.a_in.nrows() {
                    if prob.a_in.row(i).transpose().dot(&cand) - prob.b_in[i] > 0.0 {
                        feasible = false;
                        break;
                    }
                }
                tried += 1;
                if !feasible {
                    continue;
                }
                assert!(prob.objective(&cand) >= sol.objective - 1e-8);
            }
        }
    }

    #[test]
    fn kkt_residuals_reported_under_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let prob = random_qp(&mut rng);
            let sol = solve(&prob).unwrap();
            assert!(sol.kkt.max() < KKT_TOL, "kkt = {:?}", sol.kkt);
        }
    }
}
