//! Direct-collocation fitting of the walker model to reference vertical
//! CoM data.
//!
//! Five phase segments (alternating single and double support, from the
//! vertical-leg-orientation instant before a two-step window to the one
//! after) are transcribed with compressed Hermite–Simpson collocation.
//! The decision vector is
//!
//! ```text
//!     [k0, k1, k2, D | per phase: 8·N states, 2·N controls | durations]
//! ```
//!
//! so its length is `4 + 10·Σ Nᵢ + 5`; the leading 4 drop out when the
//! spring parameters are frozen. The cost is quadratic: vertical
//! tracking against the reference samples, an actuation penalty, and
//! soft bounds on the phase durations. Constraints are the collocation
//! defects, phase continuity, periodicity at the window boundary (the
//! horizontal position closes up to the recorded stride), zero ground
//! reaction force for the touching and leaving legs at the double
//! support boundaries, nonnegative contact forces at the nodes, and
//! stiffness positivity over a probe grid.
//!
//! The solver is a Gauss-Newton SQP with exact, hand-derived constraint
//! Jacobians, an L1 merit line search, and an active-set treatment of
//! the (rarely active) inequalities. Downstep fits freeze
//! (k0, k1, k2, D) to the flat-ground values bit-for-bit.

use crate::aslip::{LegParams, PhaseTag, NUM_LEGS};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 8;
const CTRL_DIM: usize = NUM_LEGS;
/// Internal scaling of the (k0, k1, k2, D) decision variables; the
/// stiffness coefficients live at ~1e4 N/m and the damping at ~1e2
/// N·s/m, and the SQP needs them at O(1) for sane curvature.
const THETA_SCALE: [f64; 4] = [1e4, 1e4, 1e4, 1e2];

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("linear solve failed in the SQP step")]
    LinearSolve,
    #[error("line search stalled at iteration {0}")]
    LineSearch(usize),
    #[error("maximum iterations reached (kkt {kkt:.2e}, feasibility {feas:.2e})")]
    MaxIterations { kkt: f64, feas: f64 },
    #[error("serialization: {0}")]
    Serde(String),
}

/// The fitted quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub stiffness_coeffs: [f64; 3],
    pub damping: f64,
}

impl FitParams {
    pub fn stiffness(&self, l0: f64) -> f64 {
        let [k0, k1, k2] = self.stiffness_coeffs;
        k0 + k1 * l0 + k2 * l0 * l0
    }
}

/// One phase segment of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub tag: PhaseTag,
    pub contacts: [bool; NUM_LEGS],
    /// Foot anchors, meaningful for contact legs.
    pub feet: [[f64; 2]; NUM_LEGS],
    pub nominal_duration: f64,
    /// Desired vertical CoM at the N collocation nodes (uniform grid in
    /// normalized phase time).
    pub reference: Vec<f64>,
    /// Leg that just touched down: zero force at the first node.
    pub incoming: Option<usize>,
    /// Leg about to lift off: zero force at the last node.
    pub outgoing: Option<usize>,
}

/// The full fitting problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub phases: Vec<PhaseSpec>,
    /// Collocation nodes per phase, ≥ 4.
    pub nodes: usize,
    /// Actuation weight w.
    pub actuation_weight: f64,
    /// Soft-bound weight on the phase durations.
    pub duration_weight: f64,
    /// Hard relative band on duration deviation.
    pub duration_band: f64,
    /// Mass and gravity are fixed; stiffness and damping seed the solve.
    pub params_init: LegParams,
    /// Downstep mode: freeze the spring parameters to these values.
    pub frozen: Option<FitParams>,
    /// Horizontal CoM advance over the window, closing the periodicity.
    pub stride: f64,
    /// Stiffness positivity margin over the probe grid.
    pub k_min: f64,
    /// Known actuation profile per phase and node (simulator-manufactured
    /// references carry the generating L̈); the actuation term then
    /// penalizes the deviation from it. `None` (the human-data case)
    /// penalizes the actuation itself.
    #[serde(default)]
    pub actuation_reference: Option<Vec<Vec<[f64; 2]>>>,
}

impl FitProblem {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.phases.len() != 5 {
            return Err(FitError::InvalidProblem(format!(
                "expected 5 phases, got {}",
                self.phases.len()
            )));
        }
        if self.nodes < 4 {
            return Err(FitError::InvalidProblem("need at least 4 nodes".into()));
        }
        for (i, pair) in self.phases.windows(2).enumerate() {
            if pair[0].tag == pair[1].tag {
                return Err(FitError::InvalidProblem(format!(
                    "phases {i} and {} share a support mode",
                    i + 1
                )));
            }
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.reference.len() != self.nodes {
                return Err(FitError::InvalidProblem(format!(
                    "phase {i}: {} reference samples for {} nodes",
                    p.reference.len(),
                    self.nodes
                )));
            }
            let n_contacts = p.contacts.iter().filter(|c| **c).count();
            let expected = match p.tag {
                PhaseTag::Ssp => 1,
                PhaseTag::Dsp => 2,
            };
            if n_contacts != expected {
                return Err(FitError::InvalidProblem(format!(
                    "phase {i}: {n_contacts} contacts in {:?}",
                    p.tag
                )));
            }
            if p.nominal_duration <= 0.0 {
                return Err(FitError::InvalidProblem(format!(
                    "phase {i}: non-positive duration"
                )));
            }
        }
        Ok(())
    }
}

/// Fit outcome, serializable as the fit artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub params: FitParams,
    /// True when (k0, k1, k2, D) were frozen to a prior flat-ground fit.
    pub frozen: bool,
    pub phase_durations: Vec<f64>,
    /// Per phase, per node packed states.
    pub states: Vec<Vec<[f64; STATE_DIM]>>,
    /// Per phase, per node rest-length accelerations.
    pub controls: Vec<Vec<[f64; CTRL_DIM]>>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Rest-length range visited by the contact legs.
    pub visited_rest_lengths: (f64, f64),
}

impl FitResult {
    pub fn to_json(&self) -> Result<String, FitError> {
        serde_json::to_string_pretty(self).map_err(|e| FitError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, FitError> {
        serde_json::from_str(s).map_err(|e| FitError::Serde(e.to_string()))
    }
}

// ---------------------------------------------------------------------
// Decision-vector layout
// ---------------------------------------------------------------------

/// Offsets into the decision vector; see the module docs for the layout
/// formula.
#[derive(Debug, Clone)]
pub struct Layout {
    pub frozen: bool,
    pub n_phases: usize,
    pub nodes: usize,
    pub theta_len: usize,
    phase_offsets: Vec<usize>,
    pub dur_offset: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(problem: &FitProblem) -> Self {
        let frozen = problem.frozen.is_some();
        let theta_len = if frozen { 0 } else { 4 };
        let n_phases = problem.phases.len();
        let nodes = problem.nodes;
        let per_phase = (STATE_DIM + CTRL_DIM) * nodes;
        let phase_offsets = (0..n_phases).map(|i| theta_len + i * per_phase).collect();
        let dur_offset = theta_len + n_phases * per_phase;
        Self {
            frozen,
            n_phases,
            nodes,
            theta_len,
            phase_offsets,
            dur_offset,
            len: dur_offset + n_phases,
        }
    }

    pub fn state(&self, phase: usize, node: usize) -> usize {
        self.phase_offsets[phase] + node * STATE_DIM
    }

    pub fn control(&self, phase: usize, node: usize) -> usize {
        self.phase_offsets[phase] + self.nodes * STATE_DIM + node * CTRL_DIM
    }

    pub fn duration(&self, phase: usize) -> usize {
        self.dur_offset + phase
    }
}

// ---------------------------------------------------------------------
// Per-phase dynamics with exact derivatives
// ---------------------------------------------------------------------

struct DynEval {
    f: DVector<f64>,
    jx: DMatrix<f64>,
    ju: DMatrix<f64>,
    /// ∂f/∂(k0, k1, k2, D).
    jtheta: DMatrix<f64>,
}

struct PhaseModel<'a> {
    spec: &'a PhaseSpec,
    mass: f64,
    gravity: f64,
}

impl PhaseModel<'_> {
    /// Packed dynamics and Jacobians at `(x, u)` for spring parameters
    /// `theta = (k0, k1, k2, D)`.
    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64; 4]) -> DynEval {
        let m = self.mass;
        let mut f = DVector::zeros(STATE_DIM);
        f[0] = x[2];
        f[1] = x[3];
        f[3] = -self.gravity;
        f[4] = x[5];
        f[5] = u[0];
        f[6] = x[7];
        f[7] = u[1];
        let mut jx = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut ju = DMatrix::zeros(STATE_DIM, CTRL_DIM);
        let mut jtheta = DMatrix::zeros(STATE_DIM, 4);
        jx[(0, 2)] = 1.0;
        jx[(1, 3)] = 1.0;
        jx[(4, 5)] = 1.0;
        jx[(6, 7)] = 1.0;
        ju[(5, 0)] = 1.0;
        ju[(7, 1)] = 1.0;

        let [k0, k1, k2, d] = *theta;
        for leg in 0..NUM_LEGS {
            if !self.spec.contacts[leg] {
                continue;
            }
            let (l0_i, v0_i) = (4 + 2 * leg, 5 + 2 * leg);
            let foot = self.spec.feet[leg];
            let dx = x[0] - foot[0];
            let dz = x[1] - foot[1];
            let len = (dx * dx + dz * dz).sqrt();
            let ux = dx / len;
            let uz = dz / len;
            let ldot = ux * x[2] + uz * x[3];
            let l0 = x[l0_i];
            let v0 = x[v0_i];
            let s = l0 - len;
            let sdot = v0 - ldot;
            let k = k0 + k1 * l0 + k2 * l0 * l0;
            let kp = k1 + 2.0 * k2 * l0;
            let force = k * s + d * sdot;

            f[2] += force * ux / m;
            f[3] += force * uz / m;

            // ∂û/∂p = (I − ûûᵀ)/L, ∂L̇/∂p = vᵀ(I − ûûᵀ)/L.
            let pxx = (1.0 - ux * ux) / len;
            let pxz = -ux * uz / len;
            let pzz = (1.0 - uz * uz) / len;
            let dldot_px = x[2] * pxx + x[3] * pxz;
            let dldot_pz = x[2] * pxz + x[3] * pzz;
            let df_px = -k * ux - d * dldot_px;
            let df_pz = -k * uz - d * dldot_pz;
            let df_vx = -d * ux;
            let df_vz = -d * uz;
            let df_l0 = kp * s + k;
            let df_v0 = d;

            // Rows 2, 3: a = (F/m)·û.
            {
                let mut add = |row: usize, uc: f64, du_px: f64, du_pz: f64| {
                    jx[(row, 0)] += (df_px * uc + force * du_px) / m;
                    jx[(row, 1)] += (df_pz * uc + force * du_pz) / m;
                    jx[(row, 2)] += df_vx * uc / m;
                    jx[(row, 3)] += df_vz * uc / m;
                    jx[(row, l0_i)] += df_l0 * uc / m;
                    jx[(row, v0_i)] += df_v0 * uc / m;
                };
                add(2, ux, pxx, pxz);
                add(3, uz, pxz, pzz);
            }

            let dtheta = [s, l0 * s, l0 * l0 * s, sdot];
            for (t, dt) in dtheta.iter().enumerate() {
                jtheta[(2, t)] += dt * ux / m;
                jtheta[(3, t)] += dt * uz / m;
            }
        }
        DynEval { f, jx, ju, jtheta }
    }

    /// Vertical GRF of `leg` with gradients over the state and θ.
    fn grf(&self, x: &[f64], theta: &[f64; 4], leg: usize) -> (f64, [f64; STATE_DIM], [f64; 4]) {
        let foot = self.spec.feet[leg];
        let dx = x[0] - foot[0];
        let dz = x[1] - foot[1];
        let len = (dx * dx + dz * dz).sqrt();
        let ux = dx / len;
        let uz = dz / len;
        let cos = uz;
        let ldot = ux * x[2] + uz * x[3];
        let (l0_i, v0_i) = (4 + 2 * leg, 5 + 2 * leg);
        let l0 = x[l0_i];
        let v0 = x[v0_i];
        let s = l0 - len;
        let sdot = v0 - ldot;
        let [k0, k1, k2, d] = *theta;
        let k = k0 + k1 * l0 + k2 * l0 * l0;
        let kp = k1 + 2.0 * k2 * l0;
        let force = k * s + d * sdot;
        let fz = force * cos;

        let pxx = (1.0 - ux * ux) / len;
        let pxz = -ux * uz / len;
        let pzz = (1.0 - uz * uz) / len;
        let dldot_px = x[2] * pxx + x[3] * pxz;
        let dldot_pz = x[2] * pxz + x[3] * pzz;
        let df_px = -k * ux - d * dldot_px;
        let df_pz = -k * uz - d * dldot_pz;
        let dcos_px = -cos * ux / len;
        let dcos_pz = (1.0 - cos * uz) / len;

        let mut gx = [0.0; STATE_DIM];
        gx[0] = df_px * cos + force * dcos_px;
        gx[1] = df_pz * cos + force * dcos_pz;
        gx[2] = -d * ux * cos;
        gx[3] = -d * uz * cos;
        gx[l0_i] = (kp * s + k) * cos;
        gx[v0_i] = d * cos;
        let gt = [s * cos, l0 * s * cos, l0 * l0 * s * cos, sdot * cos];
        (fz, gx, gt)
    }
}

// ---------------------------------------------------------------------
// Transcription
// ---------------------------------------------------------------------

/// The transcribed nonlinear program.
pub struct Nlp {
    pub problem: FitProblem,
    pub layout: Layout,
    pub n_eq: usize,
    pub n_in: usize,
    k_grid: Vec<f64>,
}

/// Transcribe the problem: decision layout plus constraint counts.
pub fn build_nlp(problem: FitProblem) -> Result<Nlp, FitError> {
    problem.validate()?;
    let layout = Layout::new(&problem);
    let n = problem.nodes;
    let mut n_eq = 0;
    n_eq += problem.phases.len() * (n - 1) * STATE_DIM; // defects
    n_eq += (problem.phases.len() - 1) * STATE_DIM; // continuity
    n_eq += STATE_DIM; // periodicity
    n_eq += problem
        .phases
        .iter()
        .map(|p| p.incoming.is_some() as usize + p.outgoing.is_some() as usize)
        .sum::<usize>();

    let k_grid: Vec<f64> = if layout.frozen {
        Vec::new()
    } else {
        (0..9).map(|i| 0.6 + 0.075 * i as f64).collect()
    };
    let mut n_in = 0;
    for p in &problem.phases {
        n_in += n * p.contacts.iter().filter(|c| **c).count();
        // Boundary-pinned nodes carry no inequality row.
        n_in -= p.incoming.is_some() as usize + p.outgoing.is_some() as usize;
    }
    if !layout.frozen {
        n_in += k_grid.len() + 1;
    }
    n_in += 2 * problem.phases.len();

    Ok(Nlp {
        problem,
        layout,
        n_eq,
        n_in,
        k_grid,
    })
}

fn seg<'a>(x: &'a DVector<f64>, off: usize, len: usize) -> &'a [f64] {
    &x.as_slice()[off..off + len]
}

impl Nlp {
    fn theta_of(&self, x: &DVector<f64>) -> [f64; 4] {
        match &self.problem.frozen {
            Some(f) => [
                f.stiffness_coeffs[0],
                f.stiffness_coeffs[1],
                f.stiffness_coeffs[2],
                f.damping,
            ],
            None => [
                x[0] * THETA_SCALE[0],
                x[1] * THETA_SCALE[1],
                x[2] * THETA_SCALE[2],
                x[3] * THETA_SCALE[3],
            ],
        }
    }

    fn model(&self, phase: usize) -> PhaseModel<'_> {
        PhaseModel {
            spec: &self.problem.phases[phase],
            mass: self.problem.params_init.mass,
            gravity: self.problem.params_init.gravity,
        }
    }

    /// Quadratic cost with gradient and (constant, diagonal) Hessian.
    pub fn cost(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let lay = &self.layout;
        let mut val = 0.0;
        let mut grad = DVector::zeros(lay.len);
        let mut hess = DVector::zeros(lay.len);
        let w_u = self.problem.actuation_weight;
        let w_t = self.problem.duration_weight;
        for (i, p) in self.problem.phases.iter().enumerate() {
            for k in 0..lay.nodes {
                let zi = lay.state(i, k) + 1;
                let e = x[zi] - p.reference[k];
                val += e * e;
                grad[zi] += 2.0 * e;
                hess[zi] = 2.0;
                for c in 0..CTRL_DIM {
                    let ui = lay.control(i, k) + c;
                    let u_ref = self
                        .problem
                        .actuation_reference
                        .as_ref()
                        .map_or(0.0, |r| r[i][k][c]);
                    let eu = x[ui] - u_ref;
                    val += w_u * eu * eu;
                    grad[ui] += 2.0 * w_u * eu;
                    hess[ui] = 2.0 * w_u;
                }
            }
            let ti = lay.duration(i);
            let e = x[ti] - p.nominal_duration;
            val += w_t * e * e;
            grad[ti] += 2.0 * w_t * e;
            hess[ti] = 2.0 * w_t;
        }
        (val, grad, hess)
    }

    /// Midpoint state of the compressed Hermite–Simpson segment.
    fn midpoint(
        xk: &[f64],
        xk1: &[f64],
        fk: &DVector<f64>,
        fk1: &DVector<f64>,
        h: f64,
    ) -> Vec<f64> {
        (0..STATE_DIM)
            .map(|r| 0.5 * (xk[r] + xk1[r]) + h / 8.0 * (fk[r] - fk1[r]))
            .collect()
    }

    /// Equality constraint values only (used by the merit function).
    pub fn eq_values(&self, x: &DVector<f64>) -> DVector<f64> {
        self.equalities(x, false).0
    }

    /// Equality constraints with an optional Jacobian.
    pub fn equalities(&self, x: &DVector<f64>, with_jac: bool) -> (DVector<f64>, DMatrix<f64>) {
        let lay = &self.layout;
        let n = lay.nodes;
        let theta = self.theta_of(x);
        let mut c = DVector::zeros(self.n_eq);
        let mut jac = DMatrix::zeros(if with_jac { self.n_eq } else { 0 }, lay.len);
        let mut row = 0;

        for i in 0..lay.n_phases {
            let model = self.model(i);
            let t_i = x[lay.duration(i)];
            let h = t_i / (n - 1) as f64;
            let evals: Vec<DynEval> = (0..n)
                .map(|k| {
                    model.eval(
                        seg(x, lay.state(i, k), STATE_DIM),
                        seg(x, lay.control(i, k), CTRL_DIM),
                        &theta,
                    )
                })
                .collect();
            for k in 0..(n - 1) {
                let xk = seg(x, lay.state(i, k), STATE_DIM);
                let xk1 = seg(x, lay.state(i, k + 1), STATE_DIM);
                let uk = seg(x, lay.control(i, k), CTRL_DIM);
                let uk1 = seg(x, lay.control(i, k + 1), CTRL_DIM);
                let um: Vec<f64> = (0..CTRL_DIM).map(|c| 0.5 * (uk[c] + uk1[c])).collect();
                let (ek, ek1) = (&evals[k], &evals[k + 1]);
                let xm = Self::midpoint(xk, xk1, &ek.f, &ek1.f, h);
                let em = model.eval(&xm, &um, &theta);
                for r in 0..STATE_DIM {
                    c[row + r] = xk1[r] - xk[r]
                        - h / 6.0 * (ek.f[r] + 4.0 * em.f[r] + ek1.f[r]);
                }
                if with_jac {
                    // ∂x_m/∂x_k = ½I + (h/8)J_k, ∂x_m/∂x_{k+1} = ½I − (h/8)J_{k+1}.
                    let half = DMatrix::identity(STATE_DIM, STATE_DIM) * 0.5;
                    let dxm_dxk = &half + &ek.jx * (h / 8.0);
                    let dxm_dxk1 = &half - &ek1.jx * (h / 8.0);
                    let ddef_dxk = -DMatrix::identity(STATE_DIM, STATE_DIM)
                        - (&ek.jx + &em.jx * &dxm_dxk * 4.0) * (h / 6.0);
                    let ddef_dxk1 = DMatrix::identity(STATE_DIM, STATE_DIM)
                        - (&ek1.jx + &em.jx * &dxm_dxk1 * 4.0) * (h / 6.0);
                    let ddef_duk =
                        -((&ek.ju + (&em.jx * &ek.ju * (h / 8.0) + &em.ju * 0.5) * 4.0)
                            * (h / 6.0));
                    let ddef_duk1 =
                        -((&ek1.ju + (&em.jx * &ek1.ju * (-h / 8.0) + &em.ju * 0.5) * 4.0)
                            * (h / 6.0));
                    // duration chain: h = T/(n−1).
                    let fsum: DVector<f64> = &ek.f + &em.f * 4.0 + &ek1.f;
                    let fdiff: DVector<f64> = &ek.f - &ek1.f;
                    let ddef_dt =
                        (-(&fsum) / 6.0 - &em.jx * &fdiff * (h / 12.0)) / (n - 1) as f64;

                    for r in 0..STATE_DIM {
                        for cix in 0..STATE_DIM {
                            jac[(row + r, lay.state(i, k) + cix)] += ddef_dxk[(r, cix)];
                            jac[(row + r, lay.state(i, k + 1) + cix)] += ddef_dxk1[(r, cix)];
                        }
                        for cix in 0..CTRL_DIM {
                            jac[(row + r, lay.control(i, k) + cix)] += ddef_duk[(r, cix)];
                            jac[(row + r, lay.control(i, k + 1) + cix)] += ddef_duk1[(r, cix)];
                        }
                        jac[(row + r, lay.duration(i))] += ddef_dt[r];
                    }
                    if !lay.frozen {
                        let dtheta = -((&ek.jtheta
                            + (&em.jx * (&ek.jtheta - &ek1.jtheta) * (h / 8.0) + &em.jtheta)
                                * 4.0
                            + &ek1.jtheta)
                            * (h / 6.0));
                        for r in 0..STATE_DIM {
                            for t in 0..4 {
                                jac[(row + r, t)] += dtheta[(r, t)] * THETA_SCALE[t];
                            }
                        }
                    }
                }
                row += STATE_DIM;
            }
        }

        // Phase continuity.
        for i in 0..(lay.n_phases - 1) {
            let a = lay.state(i, n - 1);
            let b = lay.state(i + 1, 0);
            for r in 0..STATE_DIM {
                c[row + r] = x[b + r] - x[a + r];
                if with_jac {
                    jac[(row + r, b + r)] = 1.0;
                    jac[(row + r, a + r)] = -1.0;
                }
            }
            row += STATE_DIM;
        }

        // Periodicity: start state equals end state shifted back by the
        // stride in the horizontal position.
        {
            let a = lay.state(0, 0);
            let b = lay.state(lay.n_phases - 1, n - 1);
            for r in 0..STATE_DIM {
                let stride = if r == 0 { self.problem.stride } else { 0.0 };
                c[row + r] = x[a + r] + stride - x[b + r];
                if with_jac {
                    jac[(row + r, a + r)] = 1.0;
                    jac[(row + r, b + r)] = -1.0;
                }
            }
            row += STATE_DIM;
        }

        // Touchdown/liftoff force zeros.
        for i in 0..lay.n_phases {
            let model = self.model(i);
            let spec = &self.problem.phases[i];
            let mut push = |row: &mut usize, node: usize, leg: usize, jac: &mut DMatrix<f64>| {
                let off = lay.state(i, node);
                let (fz, gx, gt) = model.grf(seg(x, off, STATE_DIM), &theta, leg);
                c[*row] = fz;
                if with_jac {
                    for (cix, g) in gx.iter().enumerate() {
                        jac[(*row, off + cix)] = *g;
                    }
                    if !lay.frozen {
                        for (t, g) in gt.iter().enumerate() {
                            jac[(*row, t)] = *g * THETA_SCALE[t];
                        }
                    }
                }
                *row += 1;
            };
            if let Some(leg) = spec.incoming {
                push(&mut row, 0, leg, &mut jac);
            }
            if let Some(leg) = spec.outgoing {
                push(&mut row, n - 1, leg, &mut jac);
            }
        }
        debug_assert_eq!(row, self.n_eq);
        (c, jac)
    }

    /// Inequalities g(x) ≤ 0 with an optional Jacobian.
    pub fn inequalities(&self, x: &DVector<f64>, with_jac: bool) -> (DVector<f64>, DMatrix<f64>) {
        let lay = &self.layout;
        let theta = self.theta_of(x);
        let mut g = DVector::zeros(self.n_in);
        let mut jac = DMatrix::zeros(if with_jac { self.n_in } else { 0 }, lay.len);
        let mut row = 0;

        // Contact forces stay nonnegative at the nodes. Nodes whose force
        // is pinned to zero by a boundary equality are skipped: the
        // inequality would duplicate that row and degenerate the KKT
        // system.
        for i in 0..lay.n_phases {
            let model = self.model(i);
            let spec = &self.problem.phases[i];
            for leg in 0..NUM_LEGS {
                if !spec.contacts[leg] {
                    continue;
                }
                for k in 0..lay.nodes {
                    if (k == 0 && spec.incoming == Some(leg))
                        || (k == lay.nodes - 1 && spec.outgoing == Some(leg))
                    {
                        continue;
                    }
                    let off = lay.state(i, k);
                    let (fz, gx, gt) = model.grf(seg(x, off, STATE_DIM), &theta, leg);
                    g[row] = -fz;
                    if with_jac {
                        for (cix, gv) in gx.iter().enumerate() {
                            jac[(row, off + cix)] = -gv;
                        }
                        if !lay.frozen {
                            for (t, gv) in gt.iter().enumerate() {
                                jac[(row, t)] = -gv * THETA_SCALE[t];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        // Stiffness positivity over the probe grid, damping ≥ 0.
        if !lay.frozen {
            for &l in &self.k_grid {
                let k = theta[0] + theta[1] * l + theta[2] * l * l;
                g[row] = self.problem.k_min - k;
                if with_jac {
                    jac[(row, 0)] = -THETA_SCALE[0];
                    jac[(row, 1)] = -l * THETA_SCALE[1];
                    jac[(row, 2)] = -l * l * THETA_SCALE[2];
                }
                row += 1;
            }
            g[row] = -theta[3];
            if with_jac {
                jac[(row, 3)] = -THETA_SCALE[3];
            }
            row += 1;
        }
        // Duration band.
        for i in 0..lay.n_phases {
            let ti = lay.duration(i);
            let nom = self.problem.phases[i].nominal_duration;
            let band = self.problem.duration_band;
            g[row] = x[ti] - nom * (1.0 + band);
            g[row + 1] = nom * (1.0 - band) - x[ti];
            if with_jac {
                jac[(row, ti)] = 1.0;
                jac[(row + 1, ti)] = -1.0;
            }
            row += 2;
        }
        debug_assert_eq!(row, self.n_in);
        (g, jac)
    }

    /// Initial guess per the stated strategy: states interpolate the
    /// reference with a static spring balance, controls zero, durations
    /// nominal.
    pub fn initial_guess(&self) -> DVector<f64> {
        let lay = &self.layout;
        let mut x = DVector::zeros(lay.len);
        let p0 = &self.problem.params_init;
        if !lay.frozen {
            x[0] = p0.stiffness_coeffs[0] / THETA_SCALE[0];
            x[1] = p0.stiffness_coeffs[1] / THETA_SCALE[1];
            x[2] = p0.stiffness_coeffs[2] / THETA_SCALE[2];
            x[3] = p0.damping / THETA_SCALE[3];
        }
        let theta = self.theta_of(&x);
        let stiffness =
            |l0: f64| theta[0] + theta[1] * l0 + theta[2] * l0 * l0;

        let total: f64 = self
            .problem
            .phases
            .iter()
            .map(|p| p.nominal_duration)
            .sum();
        let vx = self.problem.stride / total;
        // The window starts at the vertical leg orientation: the CoM sits
        // above the first stance foot.
        let stance0 = self.problem.phases[0]
            .contacts
            .iter()
            .position(|c| *c)
            .unwrap_or(0);
        let px0 = self.problem.phases[0].feet[stance0][0];
        let mut t_global = 0.0;
        let mut last_l0 = [0.95; NUM_LEGS];
        for (i, p) in self.problem.phases.iter().enumerate() {
            let n = lay.nodes;
            let dt = p.nominal_duration / (n - 1) as f64;
            let n_contacts = p.contacts.iter().filter(|c| **c).count() as f64;
            for k in 0..n {
                let off = lay.state(i, k);
                let z = p.reference[k];
                let zd = match k {
                    0 => (p.reference[1] - p.reference[0]) / dt,
                    k if k == n - 1 => (p.reference[n - 1] - p.reference[n - 2]) / dt,
                    k => (p.reference[k + 1] - p.reference[k - 1]) / (2.0 * dt),
                };
                x[off] = px0 + vx * (t_global + k as f64 * dt);
                x[off + 1] = z;
                x[off + 2] = vx;
                x[off + 3] = zd;
                for leg in 0..NUM_LEGS {
                    let (l0_i, v0_i) = (off + 4 + 2 * leg, off + 5 + 2 * leg);
                    if p.contacts[leg] {
                        let dx = x[off] - p.feet[leg][0];
                        let dz = z - p.feet[leg][1];
                        let len = (dx * dx + dz * dz).sqrt();
                        let cos = (dz / len).max(0.2);
                        let f_ax = p0.mass * p0.gravity / n_contacts / cos;
                        let mut l0 = len + f_ax / stiffness(len);
                        for _ in 0..4 {
                            l0 = len + f_ax / stiffness(l0);
                        }
                        x[l0_i] = l0;
                        x[v0_i] = 0.0;
                        last_l0[leg] = l0;
                    } else {
                        x[l0_i] = last_l0[leg];
                        x[v0_i] = 0.0;
                    }
                }
            }
            x[lay.duration(i)] = p.nominal_duration;
            t_global += p.nominal_duration;
        }
        x
    }
}

// ---------------------------------------------------------------------
// SQP solver
// ---------------------------------------------------------------------

/// Solver options.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    /// Levenberg damping added to the Gauss-Newton Hessian.
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 150,
            kkt_tol: 1e-5,
            feas_tol: 1e-7,
            damping: 1e-4,
        }
    }
}

/// Solve the transcribed program from the built-in initial guess.
pub fn solve_fit(nlp: &Nlp, opts: &SolveOptions) -> Result<FitResult, FitError> {
    let mut x = nlp.initial_guess();
    let lay = &nlp.layout;
    let nv = lay.len;
    let act_tol = 1e-9;

    let mut mu = 10.0f64;
    let mut damping = opts.damping;
    let mut converged = false;
    let mut kkt_res = f64::INFINITY;
    let mut feas = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let (_, grad, hdiag) = nlp.cost(&x);
        let (ceq, aeq) = nlp.equalities(&x, true);
        let (cin, ain) = nlp.inequalities(&x, true);
        feas = ceq.amax().max(cin.iter().fold(0.0f64, |m, &v| m.max(v)));

        // Working set: active or violated inequalities.
        let mut working: Vec<usize> = (0..nlp.n_in).filter(|&i| cin[i] > -act_tol).collect();

        let mut ws_passes = 0usize;
        let (d, lam_eq, lam_in) = loop {
            ws_passes += 1;
            let na = nlp.n_eq + working.len();
            let dim = nv + na;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for i in 0..nv {
                kkt[(i, i)] = hdiag[i] + damping;
                rhs[i] = -grad[i];
            }
            for r in 0..nlp.n_eq {
                for cix in 0..nv {
                    let v = aeq[(r, cix)];
                    if v != 0.0 {
                        kkt[(nv + r, cix)] = v;
                        kkt[(cix, nv + r)] = v;
                    }
                }
                rhs[nv + r] = -ceq[r];
            }
            for (w, &row) in working.iter().enumerate() {
                let rr = nv + nlp.n_eq + w;
                for cix in 0..nv {
                    let v = ain[(row, cix)];
                    if v != 0.0 {
                        kkt[(rr, cix)] = v;
                        kkt[(cix, rr)] = v;
                    }
                }
                rhs[rr] = -cin[row];
            }
            let sol = kkt.lu().solve(&rhs).ok_or(FitError::LinearSolve)?;
            if !sol.iter().all(|v| v.is_finite()) {
                return Err(FitError::LinearSolve);
            }
            let d = sol.rows(0, nv).into_owned();
            let lam_eq = sol.rows(nv, nlp.n_eq).into_owned();
            let lam_in: Vec<f64> = (0..working.len()).map(|w| sol[nv + nlp.n_eq + w]).collect();

            if ws_passes < 30 {
                // Drop the most negative working multiplier, if any.
                if let Some((pos, _)) = lam_in
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l < -1e-9)
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                {
                    working.remove(pos);
                    continue;
                }
                // Add the most violated linearized inequality, if any.
                let mut worst: Option<(usize, f64)> = None;
                for i in 0..nlp.n_in {
                    if working.contains(&i) {
                        continue;
                    }
                    let lin = cin[i] + ain.row(i).transpose().dot(&d);
                    if lin > 1e-8 && worst.map_or(true, |(_, w)| lin > w) {
                        worst = Some((i, lin));
                    }
                }
                if let Some((i, _)) = worst {
                    working.push(i);
                    continue;
                }
            }
            break (d, lam_eq, lam_in);
        };

        // KKT residual: ∇f + A_eqᵀλ + A_inᵀμ at the current point.
        let mut lagr = grad.clone();
        lagr += aeq.transpose() * &lam_eq;
        for (w, &row) in working.iter().enumerate() {
            for cix in 0..nv {
                lagr[cix] += ain[(row, cix)] * lam_in[w];
            }
        }
        let scale = 1.0 + grad.amax();
        kkt_res = lagr.amax();
        if feas < opts.feas_tol && kkt_res < opts.kkt_tol * scale {
            converged = true;
            break;
        }

        // L1 merit line search.
        let lam_max = lam_eq
            .amax()
            .max(lam_in.iter().fold(0.0f64, |m, &v| m.max(v.abs())));
        mu = mu.max(1.5 * lam_max).min(1e8);
        let merit = |x: &DVector<f64>| -> f64 {
            let (f, _, _) = nlp.cost(x);
            let ceq = nlp.eq_values(x);
            let (cin, _) = nlp.inequalities(x, false);
            f + mu * (ceq.iter().map(|v| v.abs()).sum::<f64>()
                + cin.iter().map(|v| v.max(0.0)).sum::<f64>())
        };
        let (f0, _, _) = nlp.cost(&x);
        let m0 = merit(&x);
        let viol0 = (m0 - f0) / mu;
        let ddir = grad.dot(&d) - mu * viol0;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x + &d * alpha;
            if merit(&cand) <= m0 + 1e-4 * alpha * ddir.min(0.0) {
                x = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            damping *= 10.0;
            if damping > 1e4 {
                return Err(FitError::LineSearch(iter));
            }
        } else {
            damping = (damping * 0.5).max(opts.damping);
        }
    }

    let (cost, _, _) = nlp.cost(&x);
    let ceq = nlp.eq_values(&x);
    let (cin, _) = nlp.inequalities(&x, false);
    let max_violation = ceq.amax().max(cin.iter().fold(0.0f64, |m, &v| m.max(v)));

    let theta = nlp.theta_of(&x);
    let lay = &nlp.layout;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut visited = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..lay.n_phases {
        let mut ph_states = Vec::new();
        let mut ph_controls = Vec::new();
        for k in 0..lay.nodes {
            let mut s = [0.0; STATE_DIM];
            s.copy_from_slice(seg(&x, lay.state(i, k), STATE_DIM));
            for leg in 0..NUM_LEGS {
                if nlp.problem.phases[i].contacts[leg] {
                    let l0 = s[4 + 2 * leg];
                    visited.0 = visited.0.min(l0);
                    visited.1 = visited.1.max(l0);
                }
            }
            ph_states.push(s);
            let mut u = [0.0; CTRL_DIM];
            u.copy_from_slice(seg(&x, lay.control(i, k), CTRL_DIM));
            ph_controls.push(u);
        }
        states.push(ph_states);
        controls.push(ph_controls);
    }
    let params = match &nlp.problem.frozen {
        Some(f) => *f,
        None => FitParams {
            stiffness_coeffs: [theta[0], theta[1], theta[2]],
            damping: theta[3],
        },
    };
    Ok(FitResult {
        schema_version: 1,
        params,
        frozen: lay.frozen,
        phase_durations: (0..lay.n_phases).map(|i| x[lay.duration(i)]).collect(),
        states,
        controls,
        cost,
        kkt_residual: kkt_res,
        max_constraint_violation: max_violation,
        iterations,
        converged,
        visited_rest_lengths: visited,
    })
}

// ---------------------------------------------------------------------
// Reference manufacturing from a simulation run
// ---------------------------------------------------------------------

/// Build a [`FitProblem`] from a converged window of a simulated run: a
/// two-step, five-phase stretch from one vertical-leg-orientation
/// instant to the next, with the logged vertical CoM as the reference.
pub fn reference_from_simulation(
    outcome: &crate::sim::SimOutcome,
    cfg: &crate::sim::ScenarioConfig,
    start_step: usize,
    nodes: usize,
    actuation_weight: f64,
) -> Result<FitProblem, FitError> {
    use crate::sim::EventKind;
    let log = &outcome.log;
    let records = &log.records;
    if records.is_empty() {
        return Err(FitError::InvalidProblem("empty log".into()));
    }

    // Linear interpolation over the uniformly ticked records.
    let value_at = |t: f64, f: &dyn Fn(&crate::sim::LogRecord) -> f64| -> f64 {
        let idx = records.partition_point(|r| r.time < t);
        if idx == 0 {
            return f(&records[0]);
        }
        if idx >= records.len() {
            return f(records.last().unwrap());
        }
        let (a, b) = (&records[idx - 1], &records[idx]);
        let w = if b.time > a.time {
            (t - a.time) / (b.time - a.time)
        } else {
            0.0
        };
        f(a) * (1.0 - w) + f(b) * w
    };

    // The vertical-leg-orientation instant inside a step's SSP: the CoM
    // passes over the stance foot.
    let vlo_in = |step: usize| -> Result<f64, FitError> {
        let mut prev: Option<(f64, f64)> = None;
        for r in records.iter().filter(|r| {
            r.step == step && r.phase == PhaseTag::Ssp && r.state.contact_legs().len() == 1
        }) {
            let stance = r.state.stance_leg().map_err(|e| {
                FitError::InvalidProblem(format!("stance lookup failed: {e}"))
            })?;
            let p = r.state.com_pos[0] - r.state.legs[stance].foot[0];
            if let Some((t0, p0)) = prev {
                if p0 < 0.0 && p >= 0.0 {
                    let w = -p0 / (p - p0);
                    return Ok(t0 + w * (r.time - t0));
                }
            }
            prev = Some((r.time, p));
        }
        Err(FitError::InvalidProblem(format!(
            "no vertical leg orientation found in step {step}"
        )))
    };

    let t_vlo1 = vlo_in(start_step)?;
    let t_vlo2 = vlo_in(start_step + 2)?;
    let event_time = |kind: EventKind, step: usize| -> Result<f64, FitError> {
        log.events
            .iter()
            .find(|e| e.kind == kind && e.step == step)
            .map(|e| e.time)
            .ok_or_else(|| FitError::InvalidProblem(format!("missing {kind:?} of step {step}")))
    };
    let td1 = event_time(EventKind::Touchdown, start_step)?;
    let lo1 = event_time(EventKind::Liftoff, start_step)?;
    let td2 = event_time(EventKind::Touchdown, start_step + 1)?;
    let lo2 = event_time(EventKind::Liftoff, start_step + 1)?;
    let bounds = [t_vlo1, td1, lo1, td2, lo2, t_vlo2];

    let record_at = |t: f64| -> &crate::sim::LogRecord {
        let idx = records.partition_point(|r| r.time < t);
        &records[idx.min(records.len() - 1).max(1) - 1]
    };

    let mut phases = Vec::new();
    for w in 0..5 {
        let (t0, t1) = (bounds[w], bounds[w + 1]);
        if t1 <= t0 {
            return Err(FitError::InvalidProblem(format!(
                "degenerate phase {w}: [{t0:.3}, {t1:.3}]"
            )));
        }
        let mid = record_at(0.5 * (t0 + t1));
        let contacts = [mid.state.legs[0].in_contact, mid.state.legs[1].in_contact];
        let feet = [mid.state.legs[0].foot, mid.state.legs[1].foot];
        let tag = if contacts.iter().filter(|c| **c).count() == 2 {
            PhaseTag::Dsp
        } else {
            PhaseTag::Ssp
        };
        let reference: Vec<f64> = (0..nodes)
            .map(|k| {
                let t = t0 + (t1 - t0) * k as f64 / (nodes - 1) as f64;
                value_at(t, &|r| r.state.com_pos[1])
            })
            .collect();
        let (incoming, outgoing) = if tag == PhaseTag::Dsp {
            let inc = log
                .events
                .iter()
                .find(|e| e.kind == EventKind::Touchdown && (e.time - t0).abs() < 1e-6)
                .map(|e| e.leg);
            let out = log
                .events
                .iter()
                .find(|e| e.kind == EventKind::Liftoff && (e.time - t1).abs() < 1e-6)
                .map(|e| e.leg);
            (inc, out)
        } else {
            (None, None)
        };
        phases.push(PhaseSpec {
            tag,
            contacts,
            feet,
            nominal_duration: t1 - t0,
            reference,
            incoming,
            outgoing,
        });
    }

    let stride = value_at(t_vlo2, &|r| r.state.com_pos[0])
        - value_at(t_vlo1, &|r| r.state.com_pos[0]);
    Ok(FitProblem {
        phases,
        nodes,
        actuation_weight,
        duration_weight: 10.0,
        duration_band: 0.2,
        params_init: cfg.leg_params,
        frozen: None,
        stride,
        k_min: 500.0,
        actuation_reference: None,
    })
}

/// Manufacture a fully identifiable round-trip problem: extract a
/// converged window from a simulated run, then replace the reference by
/// the vertical trace of a periodic minimal-actuation trajectory of the
/// *known* model (a collocation "simulation" with known smooth L̈). The
/// true parameters are then the fit's global optimum and recovery is a
/// meaningful test.
pub fn manufacture_round_trip(
    outcome: &crate::sim::SimOutcome,
    cfg: &crate::sim::ScenarioConfig,
    start_step: usize,
    nodes: usize,
    actuation_weight: f64,
) -> Result<FitProblem, FitError> {
    let mut problem =
        reference_from_simulation(outcome, cfg, start_step, nodes, actuation_weight)?;
    let truth = FitParams {
        stiffness_coeffs: cfg.leg_params.stiffness_coeffs,
        damping: cfg.leg_params.damping,
    };
    let mut frozen = problem.clone();
    frozen.frozen = Some(truth);
    let nlp = build_nlp(frozen)?;
    let r = solve_fit(&nlp, &SolveOptions::default())?;
    if !r.converged {
        return Err(FitError::InvalidProblem(format!(
            "manufacturing pass did not converge (kkt {:.2e})",
            r.kkt_residual
        )));
    }
    for (i, ph) in problem.phases.iter_mut().enumerate() {
        ph.reference = r.states[i].iter().map(|s| s[1]).collect();
        ph.nominal_duration = r.phase_durations[i];
    }
    problem.stride = r.states[4][nodes - 1][0] - r.states[0][0][0];
    problem.actuation_reference = Some(r.controls.clone());
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{build_synthetic_surfaces, DownstepShapeSpec, FlatGaitSpec};
    use crate::sim::{run_scenario, ScenarioConfig};
    use approx::assert_relative_eq;

    fn toy_problem(nodes: usize) -> FitProblem {
        let params = LegParams::new([9000.0, 2000.0, 0.0], 120.0, 70.0, 9.81).unwrap();
        let mk = |tag, contacts: [bool; 2], feet: [[f64; 2]; 2], dur: f64, inc, out| PhaseSpec {
            tag,
            contacts,
            feet,
            nominal_duration: dur,
            reference: vec![0.92; nodes],
            incoming: inc,
            outgoing: out,
        };
        FitProblem {
            phases: vec![
                mk(PhaseTag::Ssp, [true, false], [[0.0, 0.0], [0.0, 0.0]], 0.18, None, None),
                mk(
                    PhaseTag::Dsp,
                    [true, true],
                    [[0.0, 0.0], [0.25, 0.0]],
                    0.12,
                    Some(1),
                    Some(0),
                ),
                mk(PhaseTag::Ssp, [false, true], [[0.0, 0.0], [0.25, 0.0]], 0.35, None, None),
                mk(
                    PhaseTag::Dsp,
                    [true, true],
                    [[0.5, 0.0], [0.25, 0.0]],
                    0.12,
                    Some(0),
                    Some(1),
                ),
                mk(PhaseTag::Ssp, [true, false], [[0.5, 0.0], [0.25, 0.0]], 0.18, None, None),
            ],
            nodes,
            actuation_weight: 1e-6,
            duration_weight: 10.0,
            duration_band: 0.2,
            params_init: params,
            frozen: None,
            stride: 0.5,
            k_min: 500.0,
            actuation_reference: None,
        }
    }

    #[test]
    fn decision_vector_length_matches_documented_formula() {
        let nlp = build_nlp(toy_problem(10)).unwrap();
        // 4 + 10·ΣN + 5 with five phases of ten nodes.
        assert_eq!(nlp.layout.len, 4 + 10 * 50 + 5);
        // Periodicity contributes one equality row per state dimension.
        let defects = 5 * 9 * STATE_DIM;
        let continuity = 4 * STATE_DIM;
        let periodicity = STATE_DIM;
        let boundary_zeros = 4;
        assert_eq!(nlp.n_eq, defects + continuity + periodicity + boundary_zeros);
    }

    #[test]
    fn frozen_layout_drops_parameters() {
        let mut p = toy_problem(6);
        p.frozen = Some(FitParams {
            stiffness_coeffs: [9000.0, 2000.0, 0.0],
            damping: 120.0,
        });
        let nlp = build_nlp(p).unwrap();
        assert_eq!(nlp.layout.len, 10 * 30 + 5);
    }

    #[test]
    fn validation_rejects_bad_problems() {
        let mut p = toy_problem(6);
        p.nodes = 3;
        assert!(build_nlp(p).is_err());
        let mut p = toy_problem(6);
        p.phases[1].tag = PhaseTag::Ssp;
        assert!(build_nlp(p).is_err());
    }

    /// RK4-integrate one phase of the model and check that the inserted
    /// trajectory satisfies the transcription defects.
    #[test]
    fn defects_vanish_on_integrated_trajectory() {
        let problem = toy_problem(16);
        let nlp = build_nlp(problem).unwrap();
        let lay = &nlp.layout;
        let mut x = nlp.initial_guess();
        // Integrate phase 2 (the full single support) from its guessed
        // start state under a smooth control.
        let i = 2;
        let t_phase = nlp.problem.phases[i].nominal_duration;
        let model = nlp.model(i);
        let theta = nlp.theta_of(&x);
        let u_of = |t: f64| [0.3 * (5.0 * t).sin(), -0.2 * (3.0 * t).cos()];
        let f = |t: f64, s: &[f64; STATE_DIM]| -> [f64; STATE_DIM] {
            let e = model.eval(s, &u_of(t), &theta);
            let mut out = [0.0; STATE_DIM];
            for r in 0..STATE_DIM {
                out[r] = e.f[r];
            }
            out
        };
        let mut s = [0.0; STATE_DIM];
        s.copy_from_slice(seg(&x, lay.state(i, 0), STATE_DIM));
        // Make the start state dynamically reasonable.
        s[2] = 0.4;
        let n = lay.nodes;
        let h_node = t_phase / (n - 1) as f64;
        let fine = 200usize;
        for k in 0..n {
            for (r, v) in s.iter().enumerate() {
                x[lay.state(i, k) + r] = *v;
            }
            let u = u_of(k as f64 * h_node);
            x[lay.control(i, k)] = u[0];
            x[lay.control(i, k) + 1] = u[1];
            if k + 1 < n {
                let dt = h_node / fine as f64;
                let mut t = k as f64 * h_node;
                for _ in 0..fine {
                    s = crate::sim::rk4_step(&f, t, &s, dt);
                    t += dt;
                }
            }
        }
        let (c, _) = nlp.equalities(&x, false);
        // Only inspect phase 2's defect rows.
        let row0 = i * (n - 1) * STATE_DIM;
        let mut max_defect = 0.0f64;
        for r in row0..row0 + (n - 1) * STATE_DIM {
            max_defect = max_defect.max(c[r].abs());
        }
        assert!(max_defect < 1e-5, "max defect {max_defect:e}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let nlp = build_nlp(toy_problem(5)).unwrap();
        let mut x = nlp.initial_guess();
        // Perturb away from symmetry.
        for (i, v) in x.iter_mut().enumerate() {
            *v += 1e-3 * ((i * 2654435761) % 97) as f64 / 97.0;
        }
        let (c0, jac) = nlp.equalities(&x, true);
        let (g0, jin) = nlp.inequalities(&x, true);
        let h = 1e-7;
        for probe in [0usize, 1, 3, 4, 9, 40, 120, nlp.layout.dur_offset, nlp.layout.len - 1] {
            let mut xp = x.clone();
            xp[probe] += h;
            let cp = nlp.eq_values(&xp);
            let (gp, _) = nlp.inequalities(&xp, false);
            for r in 0..nlp.n_eq {
                let fd = (cp[r] - c0[r]) / h;
                let an = jac[(r, probe)];
                assert!(
                    (fd - an).abs() < 2e-4 * (1.0 + fd.abs().max(an.abs())),
                    "eq jac mismatch row {r} col {probe}: fd {fd} vs {an}"
                );
            }
            for r in 0..nlp.n_in {
                let fd = (gp[r] - g0[r]) / h;
                let an = jin[(r, probe)];
                assert!(
                    (fd - an).abs() < 2e-4 * (1.0 + fd.abs().max(an.abs())),
                    "ineq jac mismatch row {r} col {probe}: fd {fd} vs {an}"
                );
            }
        }
    }

    fn surfaces() -> crate::profiles::SurfaceSet {
        build_synthetic_surfaces(&FlatGaitSpec::default(), &DownstepShapeSpec::default()).unwrap()
    }

    #[test]
    fn round_trip_recovers_stiffness_and_damping() {
        // Manufacture references by simulating a walker with known
        // parameters, then fit starting from a perturbed seed.
        let cfg = ScenarioConfig::flat(14);
        let out = run_scenario(&cfg, &surfaces()).unwrap();
        let truth = cfg.leg_params;
        let mut problem = manufacture_round_trip(&out, &cfg, 9, 10, 1e-4).unwrap();
        problem.params_init =
            LegParams::new([12_000.0, 500.0, 0.0], 90.0, truth.mass, truth.gravity).unwrap();
        let nlp = build_nlp(problem).unwrap();
        let result = solve_fit(&nlp, &SolveOptions::default()).unwrap();
        assert!(result.converged, "kkt {:.2e}", result.kkt_residual);
        assert!(result.max_constraint_violation < 1e-6);

        let (lo, hi) = result.visited_rest_lengths;
        assert!(hi > lo);
        let truth_k = |l: f64| truth.stiffness(l);
        for i in 0..=10 {
            let l = lo + (hi - lo) * i as f64 / 10.0;
            let rel = (result.params.stiffness(l) - truth_k(l)).abs() / truth_k(l);
            assert!(rel < 0.02, "stiffness off by {:.3}% at L0 = {l:.3}", rel * 100.0);
        }
        let d_rel = (result.params.damping - truth.damping).abs() / truth.damping;
        assert!(d_rel < 0.05, "damping off by {:.3}%", d_rel * 100.0);
    }

    #[test]
    fn huge_actuation_weight_pushes_toward_passive() {
        // Identifiable (frozen-parameter) fits with the pure actuation
        // regularizer: a huge weight drives the actuation toward zero.
        let cfg = ScenarioConfig::flat(14);
        let out = run_scenario(&cfg, &surfaces()).unwrap();
        let base = reference_from_simulation(&out, &cfg, 9, 8, 1.0).unwrap();
        let frozen = FitParams {
            stiffness_coeffs: cfg.leg_params.stiffness_coeffs,
            damping: cfg.leg_params.damping,
        };

        let mut small = base.clone();
        small.actuation_weight = 1.0;
        small.frozen = Some(frozen);
        let r_small = solve_fit(&build_nlp(small).unwrap(), &SolveOptions::default()).unwrap();
        let mut large = base;
        large.actuation_weight = 1e6;
        large.frozen = Some(frozen);
        let r_large = solve_fit(&build_nlp(large).unwrap(), &SolveOptions::default()).unwrap();

        let norm = |r: &FitResult| -> f64 {
            r.controls
                .iter()
                .flatten()
                .flat_map(|u| u.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let (ns, nl) = (norm(&r_small), norm(&r_large));
        assert!(
            nl < 1e-3 * ns.max(1e-9) + 1e-6,
            "actuation norm did not vanish: {nl:e} vs {ns:e}"
        );
    }

    #[test]
    fn periodicity_residual_is_enforced() {
        let cfg = ScenarioConfig::flat(14);
        let out = run_scenario(&cfg, &surfaces()).unwrap();
        let mut problem = reference_from_simulation(&out, &cfg, 9, 8, 1e-4).unwrap();
        problem.frozen = Some(FitParams {
            stiffness_coeffs: cfg.leg_params.stiffness_coeffs,
            damping: cfg.leg_params.damping,
        });
        let nlp = build_nlp(problem).unwrap();
        let result = solve_fit(&nlp, &SolveOptions::default()).unwrap();
        assert!(result.converged);
        // Rebuild the decision vector's periodicity residual from the
        // result.
        let first = result.states[0][0];
        let last = result.states[4][nlp.layout.nodes - 1];
        for r in 0..STATE_DIM {
            let stride = if r == 0 { nlp.problem.stride } else { 0.0 };
            assert!(
                (first[r] + stride - last[r]).abs() < 1e-6,
                "periodicity residual at {r}"
            );
        }
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let cfg = ScenarioConfig::flat(14);
        let out = run_scenario(&cfg, &surfaces()).unwrap();
        let mut problem = reference_from_simulation(&out, &cfg, 9, 6, 1e-6).unwrap();
        let frozen = FitParams {
            stiffness_coeffs: [9123.456789, 1987.654321, 12.3456789],
            damping: 118.7654321,
        };
        problem.frozen = Some(frozen);
        let nlp = build_nlp(problem).unwrap();
        let result = solve_fit(&nlp, &SolveOptions::default()).unwrap();
        for i in 0..3 {
            assert_eq!(
                result.params.stiffness_coeffs[i].to_bits(),
                frozen.stiffness_coeffs[i].to_bits()
            );
        }
        assert_eq!(result.params.damping.to_bits(), frozen.damping.to_bits());
        assert!(result.frozen);
    }

    #[test]
    fn fit_result_serializes() {
        let r = FitResult {
            schema_version: 1,
            params: FitParams {
                stiffness_coeffs: [1.0, 2.0, 3.0],
                damping: 4.0,
            },
            frozen: false,
            phase_durations: vec![0.1; 5],
            states: vec![vec![[0.0; STATE_DIM]; 2]; 5],
            controls: vec![vec![[0.0; CTRL_DIM]; 2]; 5],
            cost: 0.5,
            kkt_residual: 1e-6,
            max_constraint_violation: 1e-8,
            iterations: 10,
            converged: true,
            visited_rest_lengths: (0.9, 1.0),
        };
        let json = r.to_json().unwrap();
        let back = FitResult::from_json(&json).unwrap();
        assert_relative_eq!(back.cost, r.cost);
        assert_eq!(back.params.stiffness_coeffs, r.params.stiffness_coeffs);
    }
}
