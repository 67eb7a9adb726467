//! Backstepping-barrier controller for the vertical state.
//!
//! The vertical tracking error η = (z − zᵈ, ż − żᵈ) sees the net vertical
//! GRF through η̇ = f_η + g_η·F_z, and the GRF itself is driven by the
//! rest-length acceleration through Ḟ_z = f_z + g_z·L̈0. The cascade is in
//! strict-feedback form, so a backstepping Lyapunov function
//!
//! ```text
//!     V(η, F_z) = ηᵀPη + ½(F_z − F̄_z)²
//! ```
//!
//! with the virtual force F̄_z = m(g + z̈ᵈ) − m·K_η·η yields a tracking
//! row affine in the input, enforced softly (slack-penalized). Barrier
//! rows keep each contact leg's GRF inside the relaxed tube
//!
//! ```text
//!     (1−c)·Fᵈ + Δ_F ≤ F_z ≤ (1+c)·Fᵈ − Δ_F
//! ```
//!
//! and are enforced hard. The input enters Ḟ_z only through the damping
//! term (g_z = D·cosθ), so the controller requires D > 0; with D = 0 the
//! force state is uncontrollable at this relative degree.

use crate::aslip::{self, AslipState, LegParams, ModelError, Phase, NUM_LEGS};
use crate::qp::{QpProblem, QpSolution, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector, Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BbfError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
    #[error("controller requires strictly positive leg damping")]
    ZeroDamping,
    #[error("empty GRF tube on leg {leg}: bounds [{lower:.2}, {upper:.2}] N")]
    EmptyTube { leg: usize, lower: f64, upper: f64 },
    #[error("QP {status:?}: tracking/tube rows are inconsistent at this state")]
    QpFailed {
        status: QpStatus,
        diagnostics: Box<BbfDiagnostics>,
    },
    #[error("qp error: {0}")]
    Qp(#[from] crate::qp::QpError),
}

/// Tracking output: η and the current net vertical force state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalOutput {
    pub eta: Vector2<f64>,
    pub f_z: f64,
}

/// Reference triple (plus jerk) of the desired vertical CoM position.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComRef {
    pub z: f64,
    pub zd: f64,
    pub zdd: f64,
    pub zddd: f64,
}

/// Desired GRF sample of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrfRef {
    pub value: f64,
    pub rate: f64,
}

/// Per-tick references: CoM triple and, per leg, the desired GRF when
/// that leg's tube should be enforced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BbfReferences {
    pub com: ComRef,
    pub grf: [Option<GrfRef>; NUM_LEGS],
}

/// Controller gains.
///
/// Defaults follow the design: K_η from an LQR on the η double
/// integrator, P from the matching Lyapunov equation, c = 0.3,
/// Δ_F = 0.05·m·g, α = 50 /s, γ = 20 /s. All tunable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbfGains {
    /// Lyapunov matrix P of the η subsystem.
    pub p_lyap: Matrix2<f64>,
    /// Virtual-force feedback on η.
    pub k_eta: RowVector2<f64>,
    /// CLF decay rate γ, 1/s.
    pub gamma: f64,
    /// CBF class-K slope α, 1/s.
    pub alpha: f64,
    /// Tube relaxation c ∈ (0, 1).
    pub tube_c: f64,
    /// Tube shrink Δ_F, N.
    pub tube_delta: f64,
    /// Slack penalty ρ on the CLF row.
    pub slack_weight: f64,
    /// Input regularization weight.
    pub input_weight: f64,
    /// Rest-length acceleration bound, m/s².
    pub u_max: f64,
}

impl BbfGains {
    /// LQR design on η̈ = v with weights (q_pos, q_vel, r), then P from
    /// A_clᵀP + P·A_cl = −Q_lyap.
    #[allow(clippy::too_many_arguments)]
    pub fn design(
        q_pos: f64,
        q_vel: f64,
        r: f64,
        q_lyap: [f64; 2],
        gamma: f64,
        alpha: f64,
        tube_c: f64,
        tube_delta: f64,
    ) -> Result<Self, BbfError> {
        if !(q_pos > 0.0 && q_vel >= 0.0 && r > 0.0) {
            return Err(BbfError::InvalidGains("LQR weights must be positive"));
        }
        if !(0.0 < tube_c && tube_c < 1.0) {
            return Err(BbfError::InvalidGains("c must lie in (0, 1)"));
        }
        if !(tube_delta >= 0.0) {
            return Err(BbfError::InvalidGains("tube delta must be >= 0"));
        }
        if !(gamma > 0.0 && alpha > 0.0) {
            return Err(BbfError::InvalidGains("rates must be positive"));
        }
        // Closed-form CARE solution for the double integrator.
        let k1 = (q_pos / r).sqrt();
        let k2 = (q_vel / r + 2.0 * k1).sqrt();
        let k_eta = RowVector2::new(k1, k2);
        // Closed-form Lyapunov solution for A_cl = [[0, 1], [−k1, −k2]].
        let (q1, q2) = (q_lyap[0], q_lyap[1]);
        let p2 = q1 / (2.0 * k1);
        let p3 = (2.0 * p2 + q2) / (2.0 * k2);
        let p1 = k2 * p2 + k1 * p3;
        let p_lyap = Matrix2::new(p1, p2, p2, p3);
        if p_lyap.determinant() <= 0.0 || p1 <= 0.0 {
            return Err(BbfError::InvalidGains("Lyapunov solution not PD"));
        }
        Ok(Self {
            p_lyap,
            k_eta,
            gamma,
            alpha,
            tube_c,
            tube_delta,
            slack_weight: 1e4,
            input_weight: 1.0,
            u_max: 400.0,
        })
    }

    /// Spec defaults sized for the walker's weight.
    pub fn default_for(params: &LegParams) -> Self {
        Self::design(
            1.6e5,
            1.6e3,
            1.0,
            [100.0, 10.0],
            20.0,
            50.0,
            0.3,
            0.05 * params.weight(),
        )
        .expect("default gains are valid")
    }

    /// Closed-loop η matrix.
    pub fn a_cl(&self) -> Matrix2<f64> {
        Matrix2::new(0.0, 1.0, -self.k_eta[0], -self.k_eta[1])
    }

    /// Smallest desired force for which the tube is nonempty:
    /// (1−c)F + Δ ≤ (1+c)F − Δ ⟺ F ≥ Δ/c.
    pub fn tube_min_force(&self) -> f64 {
        self.tube_delta / self.tube_c
    }

    /// Check tube consistency against the smallest desired force used in
    /// stance interiors.
    pub fn validate_tube(&self, min_fd_stance: f64) -> Result<(), BbfError> {
        if min_fd_stance < self.tube_min_force() {
            return Err(BbfError::InvalidGains(
                "tube empty at the minimum stance-interior desired force",
            ));
        }
        Ok(())
    }
}

/// η from the current state and reference.
pub fn eta(state: &AslipState, com: &ComRef) -> Vector2<f64> {
    Vector2::new(state.com_pos[1] - com.z, state.com_vel[1] - com.zd)
}

/// Affine output dynamics η̇ = f_η + g_η·F_z.
pub fn output_dynamics(
    state: &AslipState,
    params: &LegParams,
    com: &ComRef,
) -> (Vector2<f64>, Vector2<f64>) {
    let f = Vector2::new(
        state.com_vel[1] - com.zd,
        -params.gravity - com.zdd,
    );
    let g = Vector2::new(0.0, 1.0 / params.mass);
    (f, g)
}

/// Force dynamics of one contact leg: current vertical GRF, its drift,
/// and its input gain: Ḟ_z,j = drift + gain·L̈0_j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegForceDyn {
    pub f_z: f64,
    pub drift: f64,
    pub gain: f64,
}

/// Net force state dynamics: Ḟ_z = drift + g·u summed over contact legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceDynamics {
    pub f_z: f64,
    pub drift: f64,
    /// ∂Ḟ_z/∂L̈0 per leg (zero for swing legs).
    pub g: [f64; NUM_LEGS],
    pub legs: [Option<LegForceDyn>; NUM_LEGS],
}

/// Differentiate the vertical GRF of every contact leg with respect to
/// time, splitting off the affine dependence on the rest-length
/// acceleration.
pub fn force_state_dynamics(
    state: &AslipState,
    phase: &Phase,
    params: &LegParams,
) -> Result<ForceDynamics, ModelError> {
    state.check_contacts(phase.tag)?;
    // CoM acceleration at the current state (input-independent).
    let accel = {
        let d = aslip::dynamics(state, phase, params, &[0.0, 0.0])?;
        d.com_acc
    };
    let mut out = ForceDynamics {
        f_z: 0.0,
        drift: 0.0,
        g: [0.0; NUM_LEGS],
        legs: [None; NUM_LEGS],
    };
    for j in 0..NUM_LEGS {
        if !state.legs[j].in_contact {
            continue;
        }
        let geom = state.leg_geometry(j)?;
        let leg = &state.legs[j];
        let l0 = leg.rest_length;
        let l0dot = leg.rest_length_rate;
        let s = l0 - geom.length;
        let s_dot = l0dot - geom.length_rate;
        let k = params.stiffness(l0);
        let f_ax = k * s + params.damping * s_dot;
        let cos = geom.cos_angle;
        // L̈ of the physical length under the current forces.
        let v2 = state.com_vel[0] * state.com_vel[0] + state.com_vel[1] * state.com_vel[1];
        let l_ddot = (v2 - geom.length_rate * geom.length_rate) / geom.length
            + geom.axis[0] * accel[0]
            + geom.axis[1] * accel[1];
        // d/dt cos θ = (ż − cosθ·L̇)/L.
        let cos_dot = (state.com_vel[1] - cos * geom.length_rate) / geom.length;
        let f_ax_dot_drift = params.stiffness_slope(l0) * l0dot * s + k * s_dot
            - params.damping * l_ddot;
        let drift = f_ax_dot_drift * cos + f_ax * cos_dot;
        let gain = params.damping * cos;
        out.f_z += f_ax * cos;
        out.drift += drift;
        out.g[j] = gain;
        out.legs[j] = Some(LegForceDyn {
            f_z: f_ax * cos,
            drift,
            gain,
        });
    }
    Ok(out)
}

/// CLF row: `coeffs·u ≤ rhs + slack` enforces V̇ ≤ −γV + slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfRow {
    pub coeffs: [f64; NUM_LEGS],
    pub rhs: f64,
    /// Virtual backstepping force and its derivative used in the row.
    pub f_bar: f64,
    pub f_bar_dot: f64,
    pub v: f64,
    /// V̇ at u = 0.
    pub v_drift: f64,
}

/// Assemble the backstepping CLF row from the strict-feedback pieces.
pub fn backstepping_clf_constraint(
    out: &VerticalOutput,
    force: &ForceDynamics,
    com: &ComRef,
    params: &LegParams,
    gains: &BbfGains,
) -> ClfRow {
    let m = params.mass;
    let eta = out.eta;
    let f_bar = m * (params.gravity + com.zdd) - m * (gains.k_eta * eta)[(0, 0)];
    let e = out.f_z - f_bar;
    let a_cl = gains.a_cl();
    // η̇ = A_cl·η + (0, e/m).
    let eta_dot = a_cl * eta + Vector2::new(0.0, e / m);
    let f_bar_dot = m * com.zddd - m * (gains.k_eta * eta_dot)[(0, 0)];
    let p = gains.p_lyap;
    let v = (eta.transpose() * p * eta)[(0, 0)] + 0.5 * e * e;
    let q_form = a_cl.transpose() * p + p * a_cl;
    let v_drift = (eta.transpose() * q_form * eta)[(0, 0)]
        + 2.0 * (e / m) * (p.row(1) * eta)[(0, 0)]
        + e * (force.drift - f_bar_dot);
    let coeffs = [e * force.g[0], e * force.g[1]];
    let rhs = -gains.gamma * v - v_drift;
    ClfRow {
        coeffs,
        rhs,
        f_bar,
        f_bar_dot,
        v,
        v_drift,
    }
}

/// Tube state of one leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeMargin {
    pub lower: f64,
    pub upper: f64,
    /// Barrier values h_lo = F_z − lower, h_up = upper − F_z.
    pub h_lo: f64,
    pub h_up: f64,
}

/// Hard barrier rows for every tube-active contact leg.
#[derive(Debug, Clone, Default)]
pub struct TubeConstraints {
    /// (coefficients over legs, rhs): row·u ≤ rhs.
    pub rows: Vec<([f64; NUM_LEGS], f64)>,
    pub legs: [Option<TubeMargin>; NUM_LEGS],
}

/// Barrier rows rendering the per-leg force tube forward-invariant via
/// ḣ + α·h ≥ 0. Legs without a reference are skipped; an empty tube
/// (lower > upper) is a hard error, never silently dropped.
pub fn grf_tube_cbf_constraints(
    force: &ForceDynamics,
    grf_refs: &[Option<GrfRef>; NUM_LEGS],
    gains: &BbfGains,
) -> Result<TubeConstraints, BbfError> {
    let mut out = TubeConstraints::default();
    for j in 0..NUM_LEGS {
        let (Some(leg), Some(r)) = (force.legs[j], grf_refs[j]) else {
            continue;
        };
        let lower = (1.0 - gains.tube_c) * r.value + gains.tube_delta;
        let upper = (1.0 + gains.tube_c) * r.value - gains.tube_delta;
        if lower > upper {
            return Err(BbfError::EmptyTube {
                leg: j,
                lower,
                upper,
            });
        }
        let h_lo = leg.f_z - lower;
        let h_up = upper - leg.f_z;
        // ḣ_lo + α·h_lo ≥ 0  ⟺  −g·u ≤ drift − (1−c)·Ḟᵈ + α·h_lo
        let mut row_lo = [0.0; NUM_LEGS];
        row_lo[j] = -leg.gain;
        out.rows.push((
            row_lo,
            leg.drift - (1.0 - gains.tube_c) * r.rate + gains.alpha * h_lo,
        ));
        // ḣ_up + α·h_up ≥ 0  ⟺  g·u ≤ (1+c)·Ḟᵈ − drift + α·h_up
        let mut row_up = [0.0; NUM_LEGS];
        row_up[j] = leg.gain;
        out.rows.push((
            row_up,
            (1.0 + gains.tube_c) * r.rate - leg.drift + gains.alpha * h_up,
        ));
        out.legs[j] = Some(TubeMargin {
            lower,
            upper,
            h_lo,
            h_up,
        });
    }
    Ok(out)
}

/// Per-tick diagnostics streamed into the trajectory log.
#[derive(Debug, Clone, PartialEq)]
pub struct BbfDiagnostics {
    pub eta: Vector2<f64>,
    pub f_z: f64,
    pub f_bar: f64,
    pub v: f64,
    /// V̇ at the returned input.
    pub v_dot: f64,
    pub slack: f64,
    pub tube: [Option<TubeMargin>; NUM_LEGS],
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
}

/// Rest-length acceleration command; swing-leg entries are zero and are
/// owned by the swing policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BbfCommand {
    pub u: [f64; NUM_LEGS],
    pub diag: BbfDiagnostics,
}

/// The controller: gains plus a reusable QP workspace, one instance per
/// walker.
#[derive(Debug)]
pub struct BbfController {
    pub gains: BbfGains,
    solver: QpSolver,
    warm: Vec<usize>,
}

impl BbfController {
    pub fn new(gains: BbfGains) -> Self {
        Self {
            gains,
            solver: QpSolver::new(),
            warm: Vec::new(),
        }
    }

    /// One control tick: assemble the CLF row (soft, slack-penalized),
    /// the CBF rows (hard), and the input regularization; solve for the
    /// rest-length accelerations of the contact legs.
    ///
    /// Tube rows are included for every leg whose reference is provided;
    /// the caller withholds references where the desired force is too
    /// small for a nonempty tube (near DSP boundaries).
    pub fn tick(
        &mut self,
        state: &AslipState,
        phase: &Phase,
        refs: &BbfReferences,
        params: &LegParams,
    ) -> Result<BbfCommand, BbfError> {
        if params.damping <= 0.0 {
            return Err(BbfError::ZeroDamping);
        }
        let force = force_state_dynamics(state, phase, params)?;
        let out = VerticalOutput {
            eta: eta(state, &refs.com),
            f_z: force.f_z,
        };
        let clf = backstepping_clf_constraint(&out, &force, &refs.com, params, &self.gains);
        let tube = grf_tube_cbf_constraints(&force, &refs.grf, &self.gains)?;

        // Decision vector: contact-leg inputs then the CLF slack.
        let contact: Vec<usize> = state.contact_legs();
        let nc = contact.len();
        let n = nc + 1;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..nc {
            h[(i, i)] = 2.0 * self.gains.input_weight;
        }
        h[(nc, nc)] = 2.0 * self.gains.slack_weight;
        let f = DVector::zeros(n);

        let m_in = 1 + tube.rows.len();
        let mut a_in = DMatrix::zeros(m_in, n);
        let mut b_in = DVector::zeros(m_in);
        // CLF row with slack: coeffs·u − δ ≤ rhs.
        for (i, &leg) in contact.iter().enumerate() {
            a_in[(0, i)] = clf.coeffs[leg];
        }
        a_in[(0, nc)] = -1.0;
        b_in[0] = clf.rhs;
        for (r, (row, rhs)) in tube.rows.iter().enumerate() {
            for (i, &leg) in contact.iter().enumerate() {
                a_in[(r + 1, i)] = row[leg];
            }
            b_in[r + 1] = *rhs;
        }

        let mut prob = QpProblem::with_constraints(
            h,
            f,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            a_in,
            b_in,
        )?;
        let mut lower = vec![Some(-self.gains.u_max); nc];
        let mut upper = vec![Some(self.gains.u_max); nc];
        lower.push(Some(0.0)); // slack ≥ 0
        upper.push(None);
        prob.add_bounds(&lower, &upper);

        let sol = self.solver.solve(&prob, Some(&self.warm))?;
        let diag = self.diagnostics(&sol, &contact, &clf, &tube, &out, &force);
        if sol.status != QpStatus::Optimal {
            return Err(BbfError::QpFailed {
                status: sol.status,
                diagnostics: Box::new(diag),
            });
        }
        self.warm = sol.active_set.clone();
        let mut u = [0.0; NUM_LEGS];
        for (i, &leg) in contact.iter().enumerate() {
            u[leg] = sol.u[i];
        }
        Ok(BbfCommand { u, diag })
    }

    fn diagnostics(
        &self,
        sol: &QpSolution,
        contact: &[usize],
        clf: &ClfRow,
        tube: &TubeConstraints,
        out: &VerticalOutput,
        force: &ForceDynamics,
    ) -> BbfDiagnostics {
        let nc = contact.len();
        let mut v_dot = clf.v_drift;
        for (i, &leg) in contact.iter().enumerate() {
            v_dot += (out.f_z - clf.f_bar) * force.g[leg] * sol.u[i];
        }
        BbfDiagnostics {
            eta: out.eta,
            f_z: out.f_z,
            f_bar: clf.f_bar,
            v: clf.v,
            v_dot,
            slack: if sol.u.len() > nc { sol.u[nc] } else { 0.0 },
            tube: tube.legs,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aslip::{dynamics_packed, pack_state, unpack_state, LegState, PhaseTag};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn test_params() -> LegParams {
        LegParams::new([9000.0, 2000.0, 0.0], 120.0, 70.0, 9.81).unwrap()
    }

    fn ssp_state(com: [f64; 2], vel: [f64; 2], l0: f64, l0dot: f64) -> AslipState {
        AslipState {
            com_pos: com,
            com_vel: vel,
            legs: [
                LegState {
                    rest_length: l0,
                    rest_length_rate: l0dot,
                    foot: [0.0, 0.0],
                    in_contact: true,
                },
                LegState {
                    rest_length: 0.95,
                    rest_length_rate: 0.0,
                    foot: [0.3, 0.2],
                    in_contact: false,
                },
            ],
        }
    }

    fn rk4(
        x: &[f64; 8],
        template: &AslipState,
        phase: &Phase,
        params: &LegParams,
        u: &[f64; 2],
        dt: f64,
    ) -> [f64; 8] {
        let f = |x: &[f64; 8]| dynamics_packed(x, template, phase, params, u).unwrap();
        let add = |x: &[f64; 8], k: &[f64; 8], h: f64| {
            let mut y = *x;
            for i in 0..8 {
                y[i] += h * k[i];
            }
            y
        };
        let k1 = f(x);
        let k2 = f(&add(x, &k1, dt / 2.0));
        let k3 = f(&add(x, &k2, dt / 2.0));
        let k4 = f(&add(x, &k3, dt));
        let mut y = *x;
        for i in 0..8 {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        y
    }

    #[test]
    fn g_eta_is_inverse_mass() {
        let p = test_params();
        let st = ssp_state([0.0, 0.95], [0.0, 0.0], 1.0, 0.0);
        let (_, g) = output_dynamics(&st, &p, &ComRef::default());
        assert_abs_diff_eq!(g[0], 0.0);
        assert_relative_eq!(g[1], 1.0 / 70.0, epsilon = 1e-15);
    }

    #[test]
    fn hover_equilibrium_has_zero_eta_dot() {
        let p = test_params();
        let st = ssp_state([0.0, 0.95], [0.0, 0.0], 1.0, 0.0);
        let com = ComRef {
            z: 0.95,
            zd: 0.0,
            zdd: 0.0,
            zddd: 0.0,
        };
        let (f, g) = output_dynamics(&st, &p, &com);
        let eta_dot = f + g * p.weight();
        assert!(eta_dot.amax() < 1e-12);
    }

    #[test]
    fn eta_dot_matches_rollout_finite_difference() {
        let p = test_params();
        let st = ssp_state([0.04, 0.93], [0.35, -0.12], 0.98, 0.1);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        // A quadratic reference so its derivatives are exact.
        let com_at = |t: f64| ComRef {
            z: 0.95 - 0.3 * t * t,
            zd: -0.6 * t,
            zdd: -0.6,
            zddd: 0.0,
        };
        let fz = aslip::grf_vertical_net(&st, &p).unwrap();
        let (f, g) = output_dynamics(&st, &p, &com_at(0.0));
        let eta_dot = f + g * fz;

        let x0 = pack_state(&st);
        let dt = 1e-6;
        let u = [0.0, 0.0];
        let xm = rk4(&x0, &st, &phase, &p, &u, -dt);
        let xp = rk4(&x0, &st, &phase, &p, &u, dt);
        let eta_of = |x: &[f64; 8], t: f64| {
            let s = unpack_state(x, &st);
            eta(&s, &com_at(t))
        };
        let fd = (eta_of(&xp, dt) - eta_of(&xm, -dt)) / (2.0 * dt);
        assert!((eta_dot - fd).amax() < 1e-5, "{eta_dot:?} vs {fd:?}");
    }

    #[test]
    fn zero_damping_removes_input_authority() {
        let p = LegParams::new([9000.0, 2000.0, 0.0], 0.0, 70.0, 9.81).unwrap();
        let st = ssp_state([0.02, 0.94], [0.3, -0.1], 0.99, 0.05);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let fd = force_state_dynamics(&st, &phase, &p).unwrap();
        assert_abs_diff_eq!(fd.g[0], 0.0);
        assert_abs_diff_eq!(fd.g[1], 0.0);
    }

    #[test]
    fn frozen_geometry_reduces_to_rest_length_rate_term() {
        // D = 0, vertical stance leg, zero CoM velocity: the drift is
        // K'(L0)·L̇0·s + K(L0)·L̇0.
        let p = LegParams::new([9000.0, 2000.0, 0.0], 0.0, 70.0, 9.81).unwrap();
        let st = ssp_state([0.0, 0.93], [0.0, 0.0], 0.98, 0.2);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let fd = force_state_dynamics(&st, &phase, &p).unwrap();
        let s = 0.98 - 0.93;
        let expect = p.stiffness_slope(0.98) * 0.2 * s + p.stiffness(0.98) * 0.2;
        assert_relative_eq!(fd.drift, expect, epsilon = 1e-10);
    }

    #[test]
    fn force_dynamics_match_rollout_finite_difference() {
        let p = test_params();
        let st = ssp_state([0.05, 0.92], [0.4, -0.15], 0.99, 0.1);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let u = [3.0, 0.0];
        let fd = force_state_dynamics(&st, &phase, &p).unwrap();
        let predicted = fd.drift + fd.g[0] * u[0];

        let x0 = pack_state(&st);
        let dt = 1e-6;
        let xm = rk4(&x0, &st, &phase, &p, &u, -dt);
        let xp = rk4(&x0, &st, &phase, &p, &u, dt);
        let f_of = |x: &[f64; 8]| {
            aslip::grf_vertical_ssp(&unpack_state(x, &st), &p).unwrap()
        };
        let numeric = (f_of(&xp) - f_of(&xm)) / (2.0 * dt);
        assert_relative_eq!(predicted, numeric, max_relative = 1e-4);
    }

    #[test]
    fn clf_origin_is_satisfied_by_zero_input() {
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let st = ssp_state([0.0, 0.93], [0.0, 0.0], 0.98, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        // Reference engineered so η = 0 and F_z = F̄_z.
        let com = ComRef {
            z: 0.93,
            zd: 0.0,
            zdd: force.f_z / p.mass - p.gravity,
            zddd: 0.0,
        };
        let out = VerticalOutput {
            eta: eta(&st, &com),
            f_z: force.f_z,
        };
        assert!(out.eta.amax() < 1e-12);
        let clf = backstepping_clf_constraint(&out, &force, &com, &p, &gains);
        assert!(clf.v < 1e-12);
        assert!(clf.rhs >= -1e-9, "u = 0 must satisfy the row: {}", clf.rhs);
    }

    #[test]
    fn eta_subsystem_decay_is_negative_definite() {
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let q = -(gains.a_cl().transpose() * gains.p_lyap + gains.p_lyap * gains.a_cl());
        let eig = q.symmetric_eigenvalues();
        assert!(eig.min() > 0.0, "Q_lyap eigenvalues {eig:?}");
        // ηᵀ(PA + AᵀP)η < 0 on a few samples.
        for k in 0..8 {
            let ang = k as f64;
            let e = Vector2::new(ang.cos(), ang.sin());
            let val = (e.transpose() * (-q) * e)[(0, 0)];
            assert!(val < 0.0);
        }
    }

    #[test]
    fn analytic_v_dot_matches_rollout() {
        // Integrate the closed-loop state a short way with constant u and
        // compare the finite difference of V with the analytic V̇.
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let st = ssp_state([0.03, 0.94], [0.3, -0.08], 0.99, 0.05);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let com_at = |t: f64| ComRef {
            z: 0.93 - 0.05 * t,
            zd: -0.05,
            zdd: 0.0,
            zddd: 0.0,
        };
        let u = [2.0, 0.0];
        let v_of = |x: &[f64; 8], t: f64| {
            let s = unpack_state(x, &st);
            let com = com_at(t);
            let force = force_state_dynamics(&s, &phase, &p).unwrap();
            let e = eta(&s, &com);
            let f_bar = p.mass * (p.gravity + com.zdd) - p.mass * (gains.k_eta * e)[(0, 0)];
            (e.transpose() * gains.p_lyap * e)[(0, 0)] + 0.5 * (force.f_z - f_bar).powi(2)
        };
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        let out = VerticalOutput {
            eta: eta(&st, &com_at(0.0)),
            f_z: force.f_z,
        };
        let clf = backstepping_clf_constraint(&out, &force, &com_at(0.0), &p, &gains);
        let analytic = clf.v_drift + (out.f_z - clf.f_bar) * force.g[0] * u[0];

        let x0 = pack_state(&st);
        let dt = 1e-6;
        let xm = rk4(&x0, &st, &phase, &p, &u, -dt);
        let xp = rk4(&x0, &st, &phase, &p, &u, dt);
        let numeric = (v_of(&xp, dt) - v_of(&xm, -dt)) / (2.0 * dt);
        assert_relative_eq!(analytic, numeric, max_relative = 1e-3);
    }

    #[test]
    fn tube_interior_point_has_positive_margins() {
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let st = ssp_state([0.0, 0.935], [0.0, 0.0], 1.0, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        // Static reference centred on the current force.
        let refs = [
            Some(GrfRef {
                value: force.f_z,
                rate: 0.0,
            }),
            None,
        ];
        let tube = grf_tube_cbf_constraints(&force, &refs, &gains).unwrap();
        let m = tube.legs[0].unwrap();
        assert!(m.h_lo > 0.0 && m.h_up > 0.0);
        // Both rows satisfied at u = 0 with margin.
        for (row, rhs) in &tube.rows {
            assert!(row[1] == 0.0);
            assert!(*rhs > 0.0, "rhs {rhs}");
        }
    }

    #[test]
    fn tube_boundary_reduces_to_h_dot_condition() {
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let st = ssp_state([0.0, 0.935], [0.0, 0.0], 1.0, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        // Choose Fᵈ so the lower bound sits exactly at the current force.
        let fd_ref = (force.f_z - gains.tube_delta) / (1.0 - gains.tube_c);
        let refs = [
            Some(GrfRef {
                value: fd_ref,
                rate: 0.0,
            }),
            None,
        ];
        let tube = grf_tube_cbf_constraints(&force, &refs, &gains).unwrap();
        let m = tube.legs[0].unwrap();
        assert_abs_diff_eq!(m.h_lo, 0.0, epsilon = 1e-9);
        // With h_lo = 0 the lower row is exactly ḣ_lo ≥ 0.
        let (_, rhs) = tube.rows[0];
        assert_relative_eq!(rhs, force.legs[0].unwrap().drift, epsilon = 1e-9);
    }

    #[test]
    fn empty_tube_is_a_distinct_error() {
        let p = test_params();
        let gains = BbfGains::default_for(&p);
        let st = ssp_state([0.0, 0.935], [0.0, 0.0], 1.0, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        let refs = [
            Some(GrfRef {
                value: 0.5 * gains.tube_min_force(),
                rate: 0.0,
            }),
            None,
        ];
        assert!(matches!(
            grf_tube_cbf_constraints(&force, &refs, &gains),
            Err(BbfError::EmptyTube { leg: 0, .. })
        ));
    }

    #[test]
    fn perfect_tracking_needs_no_correction() {
        let p = test_params();
        let mut ctrl = BbfController::new(BbfGains::default_for(&p));
        let st = ssp_state([0.0, 0.93], [0.0, 0.0], 0.98, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        let refs = BbfReferences {
            com: ComRef {
                z: 0.93,
                zd: 0.0,
                zdd: force.f_z / p.mass - p.gravity,
                zddd: 0.0,
            },
            grf: [
                Some(GrfRef {
                    value: force.f_z,
                    rate: force.drift,
                }),
                None,
            ],
        };
        let cmd = ctrl.tick(&st, &phase, &refs, &p).unwrap();
        assert!(cmd.u[0].abs() < 1e-6, "u = {:?}", cmd.u);
        assert!(cmd.diag.slack < 1e-6);
        assert_eq!(cmd.diag.qp_status, QpStatus::Optimal);
    }

    #[test]
    fn optimal_zero_slack_implies_clf_decay() {
        let p = test_params();
        let mut ctrl = BbfController::new(BbfGains::default_for(&p));
        let st = ssp_state([0.01, 0.945], [0.25, -0.05], 0.995, 0.02);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        let force = force_state_dynamics(&st, &phase, &p).unwrap();
        let refs = BbfReferences {
            com: ComRef {
                z: 0.93,
                zd: 0.0,
                zdd: 0.0,
                zddd: 0.0,
            },
            grf: [
                Some(GrfRef {
                    value: force.f_z.max(ctrl.gains.tube_min_force() * 1.5),
                    rate: 0.0,
                }),
                None,
            ],
        };
        let cmd = ctrl.tick(&st, &phase, &refs, &p).unwrap();
        if cmd.diag.slack < 1e-9 {
            assert!(
                cmd.diag.v_dot <= -ctrl.gains.gamma * cmd.diag.v + 1e-8,
                "V̇ = {}, −γV = {}",
                cmd.diag.v_dot,
                -ctrl.gains.gamma * cmd.diag.v
            );
        }
    }

    #[test]
    fn controller_rejects_zero_damping() {
        let p = LegParams::new([9000.0, 0.0, 0.0], 0.0, 70.0, 9.81).unwrap();
        let mut ctrl = BbfController::new(BbfGains::default_for(&p));
        let st = ssp_state([0.0, 0.93], [0.0, 0.0], 0.98, 0.0);
        let phase = Phase::new(PhaseTag::Ssp, 0.0, 0);
        assert!(matches!(
            ctrl.tick(&st, &phase, &BbfReferences::default(), &p),
            Err(BbfError::ZeroDamping)
        ));
    }

    #[test]
    fn gains_validation() {
        assert!(BbfGains::design(1.0, 1.0, 1.0, [1.0, 1.0], 20.0, 50.0, 1.5, 30.0).is_err());
        assert!(BbfGains::design(-1.0, 1.0, 1.0, [1.0, 1.0], 20.0, 50.0, 0.3, 30.0).is_err());
        let p = test_params();
        let g = BbfGains::default_for(&p);
        assert!(g.validate_tube(0.8 * p.weight()).is_ok());
        assert!(g.validate_tube(0.05 * p.weight()).is_err());
    }
}
