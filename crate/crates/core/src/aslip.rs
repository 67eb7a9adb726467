//! The actuated SLIP walker: a planar point mass on two massless
//! spring-damper legs whose rest lengths are controlled through a double
//! integrator.
//!
//! Sign conventions, used everywhere in this crate:
//!
//! - spring deformation `s = L0 - L` (compression positive),
//! - axial leg force `F = K(L0)·s + D·ṡ` with `ṡ = L̇0 - L̇`, positive
//!   pushing the mass away from the foot,
//! - GRF positive upward,
//! - angular momentum positive counterclockwise (x right, z up).
//!
//! The stiffness polynomial is evaluated at the rest length `L0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a leg; the walker has exactly two.
pub const NUM_LEGS: usize = 2;

/// Default operating range of leg lengths, metres.
pub const LEG_RANGE: (f64, f64) = (0.5, 1.3);

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("leg {0} has zero or negative length")]
    ZeroLegLength(usize),
    #[error("no leg in contact")]
    NoContact,
    #[error("contact flags inconsistent with phase {0:?}")]
    ContactMismatch(PhaseTag),
    #[error("invalid parameter: {0}")]
    InvalidParam(&'static str),
}

/// Leg spring-damper and mass parameters.
///
/// `K(L) = k0 + k1·L + k2·L²` must stay positive on [`LEG_RANGE`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegParams {
    /// Stiffness polynomial coefficients (k0, k1, k2), N/m, N/m², N/m³.
    pub stiffness_coeffs: [f64; 3],
    /// Damping, N·s/m.
    pub damping: f64,
    /// Point mass, kg.
    pub mass: f64,
    /// Gravity, m/s².
    pub gravity: f64,
}

impl LegParams {
    pub fn new(
        stiffness_coeffs: [f64; 3],
        damping: f64,
        mass: f64,
        gravity: f64,
    ) -> Result<Self, ModelError> {
        let p = Self {
            stiffness_coeffs,
            damping,
            mass,
            gravity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.stiffness_coeffs.iter().all(|c| c.is_finite())
            && self.damping.is_finite()
            && self.mass.is_finite()
            && self.gravity.is_finite())
        {
            return Err(ModelError::NonFinite("LegParams"));
        }
        if self.damping < 0.0 {
            return Err(ModelError::InvalidParam("damping must be >= 0"));
        }
        if self.mass <= 0.0 {
            return Err(ModelError::InvalidParam("mass must be > 0"));
        }
        if self.gravity <= 0.0 {
            return Err(ModelError::InvalidParam("gravity must be > 0"));
        }
        // K(L) > 0 over the operating range; the parabola is checked at the
        // endpoints and at its vertex when that lies inside the range.
        let k = |l: f64| self.stiffness(l);
        let (lo, hi) = LEG_RANGE;
        let mut min_k = k(lo).min(k(hi));
        let [_, k1, k2] = self.stiffness_coeffs;
        if k2.abs() > 0.0 {
            let vertex = -k1 / (2.0 * k2);
            if vertex > lo && vertex < hi {
                min_k = min_k.min(k(vertex));
            }
        }
        if min_k <= 0.0 {
            return Err(ModelError::InvalidParam(
                "stiffness must be positive on the operating range",
            ));
        }
        Ok(())
    }

    /// K evaluated at rest length `l0`, N/m.
    pub fn stiffness(&self, l0: f64) -> f64 {
        let [k0, k1, k2] = self.stiffness_coeffs;
        k0 + k1 * l0 + k2 * l0 * l0
    }

    /// dK/dL at rest length `l0`, N/m².
    pub fn stiffness_slope(&self, l0: f64) -> f64 {
        let [_, k1, k2] = self.stiffness_coeffs;
        k1 + 2.0 * k2 * l0
    }

    /// Body weight, N.
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// Support mode of the walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseTag {
    /// Single support: exactly one leg in contact.
    Ssp,
    /// Double support: both legs in contact.
    Dsp,
}

/// Phase bookkeeping: which support mode, how long we have been in it, and
/// which step of the run this is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub tag: PhaseTag,
    /// Seconds since the phase started; never negative.
    pub time_in_phase: f64,
    pub step_index: usize,
}

impl Phase {
    pub fn new(tag: PhaseTag, time_in_phase: f64, step_index: usize) -> Self {
        assert!(time_in_phase >= 0.0, "time_in_phase must be >= 0");
        Self {
            tag,
            time_in_phase,
            step_index,
        }
    }
}

/// Continuous per-leg state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegState {
    /// Actuated rest length L0, m.
    pub rest_length: f64,
    /// Rest-length rate L̇0, m/s.
    pub rest_length_rate: f64,
    /// Foot anchor (x, z), m. Meaningful while in contact; for the swing
    /// leg it tracks the kinematic foot position.
    pub foot: [f64; 2],
    pub in_contact: bool,
}

/// Full continuous state of the walker.
///
/// In SSP exactly one contact flag is set, in DSP both. The physical leg
/// length of a contact leg is the distance from the CoM to its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslipState {
    /// CoM position (x, z), m.
    pub com_pos: [f64; 2],
    /// CoM velocity (ẋ, ż), m/s.
    pub com_vel: [f64; 2],
    pub legs: [LegState; NUM_LEGS],
}

/// Time derivative of the continuous state. Foot anchors and contact flags
/// only change at hybrid events, so they carry no derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AslipDerivative {
    pub com_vel: [f64; 2],
    pub com_acc: [f64; 2],
    /// (L̇0, L̈0) per leg.
    pub leg_rates: [[f64; 2]; NUM_LEGS],
}

/// Geometry of one contact leg at the current state.
#[derive(Debug, Clone, Copy)]
pub struct LegGeometry {
    /// Physical length L = ‖com − foot‖, m.
    pub length: f64,
    /// Unit vector from foot to CoM.
    pub axis: [f64; 2],
    /// L̇ = axis · com_vel (contact foot is stationary), m/s.
    pub length_rate: f64,
    /// cos of the leg angle from vertical, (z − z_f)/L.
    pub cos_angle: f64,
}

impl AslipState {
    /// Geometry of leg `j`, valid while its foot anchor is meaningful.
    pub fn leg_geometry(&self, j: usize) -> Result<LegGeometry, ModelError> {
        let dx = self.com_pos[0] - self.legs[j].foot[0];
        let dz = self.com_pos[1] - self.legs[j].foot[1];
        let length = (dx * dx + dz * dz).sqrt();
        if !(length.is_finite()) {
            return Err(ModelError::NonFinite("leg geometry"));
        }
        if length <= 1e-12 {
            return Err(ModelError::ZeroLegLength(j));
        }
        let axis = [dx / length, dz / length];
        let length_rate = axis[0] * self.com_vel[0] + axis[1] * self.com_vel[1];
        Ok(LegGeometry {
            length,
            axis,
            length_rate,
            cos_angle: dz / length,
        })
    }

    pub fn contact_legs(&self) -> Vec<usize> {
        (0..NUM_LEGS).filter(|&j| self.legs[j].in_contact).collect()
    }

    /// The single stance leg in SSP.
    pub fn stance_leg(&self) -> Result<usize, ModelError> {
        let c = self.contact_legs();
        match c.as_slice() {
            [j] => Ok(*j),
            [] => Err(ModelError::NoContact),
            _ => Err(ModelError::ContactMismatch(PhaseTag::Ssp)),
        }
    }

    pub fn check_contacts(&self, tag: PhaseTag) -> Result<(), ModelError> {
        let n = self.contact_legs().len();
        match (tag, n) {
            (PhaseTag::Ssp, 1) | (PhaseTag::Dsp, 2) => Ok(()),
            (_, 0) => Err(ModelError::NoContact),
            (tag, _) => Err(ModelError::ContactMismatch(tag)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.com_pos.iter().all(|v| v.is_finite())
            && self.com_vel.iter().all(|v| v.is_finite())
            && self.legs.iter().all(|l| {
                l.rest_length.is_finite()
                    && l.rest_length_rate.is_finite()
                    && l.foot.iter().all(|v| v.is_finite())
            })
    }
}

/// Axial spring-damper force of one leg, N.
///
/// `F = K(L0)·s + D·ṡ` with `s = L0 − L`, `ṡ = L̇0 − L̇`; positive force
/// pushes the mass away from the foot, so an undeformed resting spring
/// returns exactly zero.
pub fn leg_force(
    params: &LegParams,
    length: f64,
    rest_length: f64,
    length_rate: f64,
    rest_length_rate: f64,
) -> Result<f64, ModelError> {
    if !(length.is_finite()
        && rest_length.is_finite()
        && length_rate.is_finite()
        && rest_length_rate.is_finite())
    {
        return Err(ModelError::NonFinite("leg_force input"));
    }
    if length <= 0.0 {
        return Err(ModelError::ZeroLegLength(0));
    }
    let s = rest_length - length;
    let s_dot = rest_length_rate - length_rate;
    Ok(params.stiffness(rest_length) * s + params.damping * s_dot)
}

/// Axial force of contact leg `j` from the current state.
pub fn leg_force_at(state: &AslipState, params: &LegParams, j: usize) -> Result<f64, ModelError> {
    let geom = state.leg_geometry(j)?;
    leg_force(
        params,
        geom.length,
        state.legs[j].rest_length,
        geom.length_rate,
        state.legs[j].rest_length_rate,
    )
}

/// Vertical GRF of contact leg `j`: axial force times the cosine of the
/// leg angle from vertical.
pub fn grf_vertical_leg(
    state: &AslipState,
    params: &LegParams,
    j: usize,
) -> Result<f64, ModelError> {
    let geom = state.leg_geometry(j)?;
    let f = leg_force(
        params,
        geom.length,
        state.legs[j].rest_length,
        geom.length_rate,
        state.legs[j].rest_length_rate,
    )?;
    Ok(f * geom.cos_angle)
}

/// Vertical GRF in single support: the stance leg's axial force times
/// cos(θ_st). Equals the axial force when the leg is vertical.
pub fn grf_vertical_ssp(state: &AslipState, params: &LegParams) -> Result<f64, ModelError> {
    let j = state.stance_leg()?;
    grf_vertical_leg(state, params, j)
}

/// Net vertical GRF over all contact legs.
pub fn grf_vertical_net(state: &AslipState, params: &LegParams) -> Result<f64, ModelError> {
    let contact = state.contact_legs();
    if contact.is_empty() {
        return Err(ModelError::NoContact);
    }
    let mut total = 0.0;
    for j in contact {
        total += grf_vertical_leg(state, params, j)?;
    }
    Ok(total)
}

/// Continuous dynamics: point-mass EOM under the contact legs' axial
/// forces and gravity, plus the rest-length double integrators
/// `L̈0_j = u[j]`.
///
/// Every contact leg contributes its force along the foot→CoM axis; in DSP
/// both do. Swing legs contribute no force but their rest-length states
/// still integrate.
pub fn dynamics(
    state: &AslipState,
    phase: &Phase,
    params: &LegParams,
    u: &[f64; NUM_LEGS],
) -> Result<AslipDerivative, ModelError> {
    if !state.is_finite() || !u.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("dynamics input"));
    }
    state.check_contacts(phase.tag)?;
    let m = params.mass;
    let mut acc = [0.0, -params.gravity];
    for j in 0..NUM_LEGS {
        if !state.legs[j].in_contact {
            continue;
        }
        let geom = state.leg_geometry(j)?;
        let f = leg_force(
            params,
            geom.length,
            state.legs[j].rest_length,
            geom.length_rate,
            state.legs[j].rest_length_rate,
        )?;
        acc[0] += f * geom.axis[0] / m;
        acc[1] += f * geom.axis[1] / m;
    }
    Ok(AslipDerivative {
        com_vel: state.com_vel,
        com_acc: acc,
        leg_rates: [
            [state.legs[0].rest_length_rate, u[0]],
            [state.legs[1].rest_length_rate, u[1]],
        ],
    })
}

/// Point-mass angular momentum about the stance foot, kg·m²/s, positive
/// counterclockwise: `m·(r_x·v_z − r_z·v_x)` with `r = com − foot`.
///
/// With more than one contact the first contact leg is used as the pivot;
/// pass a leg index via [`angular_momentum_about_foot`] to choose.
pub fn angular_momentum_about_stance(
    state: &AslipState,
    params: &LegParams,
) -> Result<f64, ModelError> {
    let contact = state.contact_legs();
    let j = *contact.first().ok_or(ModelError::NoContact)?;
    angular_momentum_about_foot(state, params, j)
}

/// Angular momentum about the foot of leg `j`.
pub fn angular_momentum_about_foot(
    state: &AslipState,
    params: &LegParams,
    j: usize,
) -> Result<f64, ModelError> {
    let rx = state.com_pos[0] - state.legs[j].foot[0];
    let rz = state.com_pos[1] - state.legs[j].foot[1];
    Ok(params.mass * (rx * state.com_vel[1] - rz * state.com_vel[0]))
}

/// Total mechanical energy: kinetic + gravitational + spring potential of
/// the contact legs (½·K(L0)·s²), J.
pub fn total_energy(state: &AslipState, params: &LegParams) -> Result<f64, ModelError> {
    let m = params.mass;
    let v2 = state.com_vel[0] * state.com_vel[0] + state.com_vel[1] * state.com_vel[1];
    let mut e = 0.5 * m * v2 + m * params.gravity * state.com_pos[1];
    for j in 0..NUM_LEGS {
        if !state.legs[j].in_contact {
            continue;
        }
        let geom = state.leg_geometry(j)?;
        let s = state.legs[j].rest_length - geom.length;
        e += 0.5 * params.stiffness(state.legs[j].rest_length) * s * s;
    }
    Ok(e)
}

/// Instantaneous power bookkeeping for the energy audit.
#[derive(Debug, Clone, Copy, Default)]
pub struct PowerBalance {
    /// Power injected by the rest-length actuators, W.
    pub actuation: f64,
    /// Power dissipated by the dampers (non-negative), W.
    pub dissipation: f64,
}

/// Actuator and damper power at the current state.
///
/// With s = L0 − L the stored energy ½K(L0)s² changes both through the
/// deformation and through the stiffness slope, so the actuator power of a
/// contact leg is `(K·s + D·ṡ)·L̇0 + ½·K'(L0)·L̇0·s²`; the damper
/// dissipates `D·ṡ²`. Along any continuous arc,
/// dE/dt = actuation − dissipation.
pub fn power_balance(state: &AslipState, params: &LegParams) -> Result<PowerBalance, ModelError> {
    let mut bal = PowerBalance::default();
    for j in 0..NUM_LEGS {
        if !state.legs[j].in_contact {
            continue;
        }
        let geom = state.leg_geometry(j)?;
        let l0 = state.legs[j].rest_length;
        let l0dot = state.legs[j].rest_length_rate;
        let s = l0 - geom.length;
        let s_dot = l0dot - geom.length_rate;
        let f = params.stiffness(l0) * s + params.damping * s_dot;
        bal.actuation += f * l0dot + 0.5 * params.stiffness_slope(l0) * l0dot * s * s;
        bal.dissipation += params.damping * s_dot * s_dot;
    }
    Ok(bal)
}

/// Flatten the continuous state into the 8-vector
/// `[x, z, ẋ, ż, L0_1, L̇0_1, L0_2, L̇0_2]` used by the integrator and the
/// collocation transcription.
pub fn pack_state(state: &AslipState) -> [f64; 8] {
    [
        state.com_pos[0],
        state.com_pos[1],
        state.com_vel[0],
        state.com_vel[1],
        state.legs[0].rest_length,
        state.legs[0].rest_length_rate,
        state.legs[1].rest_length,
        state.legs[1].rest_length_rate,
    ]
}

/// Inverse of [`pack_state`]; foot anchors and contact flags are copied
/// from `template`.
pub fn unpack_state(x: &[f64; 8], template: &AslipState) -> AslipState {
    let mut s = *template;
    s.com_pos = [x[0], x[1]];
    s.com_vel = [x[2], x[3]];
    s.legs[0].rest_length = x[4];
    s.legs[0].rest_length_rate = x[5];
    s.legs[1].rest_length = x[6];
    s.legs[1].rest_length_rate = x[7];
    s
}

/// Packed-vector form of [`dynamics`] for integrators and the collocation
/// transcription.
pub fn dynamics_packed(
    x: &[f64; 8],
    template: &AslipState,
    phase: &Phase,
    params: &LegParams,
    u: &[f64; NUM_LEGS],
) -> Result<[f64; 8], ModelError> {
    let s = unpack_state(x, template);
    let d = dynamics(&s, phase, params, u)?;
    Ok([
        d.com_vel[0],
        d.com_vel[1],
        d.com_acc[0],
        d.com_acc[1],
        d.leg_rates[0][0],
        d.leg_rates[0][1],
        d.leg_rates[1][0],
        d.leg_rates[1][1],
    ])
}
