//! Hybrid linear inverted pendulum (H-LIP) step-to-step stabilization.
//!
//! The pendulum keeps a constant height `z0`; in single support the
//! horizontal CoM state obeys `p̈ = λ²p` with `λ = √(g/z0)`, in double
//! support the velocity is constant. The resulting step-to-step map of
//! the pre-impact state `x = (p, ṗ)` is linear in the step size, and a
//! deadbeat gain (nilpotent closed loop) removes any error in two steps.
//!
//! `p` is the CoM position relative to the current stance foot; the `−u`
//! column in the input matrix re-expresses it relative to the new stance
//! foot at the step transition.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HlipError {
    #[error("invalid parameter: {0}")]
    InvalidParam(&'static str),
}

/// Pendulum and gait parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HlipParams {
    /// Nominal height, m.
    pub z0: f64,
    pub gravity: f64,
    pub t_ssp: f64,
    pub t_dsp: f64,
    /// Desired average forward velocity, m/s.
    pub v_desired: f64,
}

impl HlipParams {
    pub fn new(
        z0: f64,
        gravity: f64,
        t_ssp: f64,
        t_dsp: f64,
        v_desired: f64,
    ) -> Result<Self, HlipError> {
        if !(z0 > 0.0) {
            return Err(HlipError::InvalidParam("z0 must be > 0"));
        }
        if !(gravity > 0.0) {
            return Err(HlipError::InvalidParam("gravity must be > 0"));
        }
        if !(t_ssp >= 0.0 && t_dsp >= 0.0) {
            return Err(HlipError::InvalidParam("durations must be >= 0"));
        }
        Ok(Self {
            z0,
            gravity,
            t_ssp,
            t_dsp,
            v_desired,
        })
    }

    /// λ = √(g/z0), 1/s.
    pub fn lambda(&self) -> f64 {
        (self.gravity / self.z0).sqrt()
    }
}

/// Step-to-step matrices `x⁻_{k+1} = A·x⁻_k + B·u_k` and the deadbeat
/// gain with `(A + B·K_db)² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2sMatrices {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub k_db: RowVector2<f64>,
}

/// Closed-form `exp(A_SSP·t)` for `A_SSP = [[0, 1], [λ², 0]]`.
pub fn expm_ssp(lambda: f64, t: f64) -> Matrix2<f64> {
    let lt = lambda * t;
    let (ch, sh) = (lt.cosh(), lt.sinh());
    Matrix2::new(ch, sh / lambda, lambda * sh, ch)
}

/// Build the S2S matrices for the given parameters.
pub fn s2s_matrices(params: &HlipParams) -> S2sMatrices {
    let lambda = params.lambda();
    let e = expm_ssp(lambda, params.t_ssp);
    let dsp = Matrix2::new(1.0, params.t_dsp, 0.0, 1.0);
    let a = e * dsp;
    let b = e * Vector2::new(-1.0, 0.0);
    let k_db = deadbeat_gain(&a, &b);
    S2sMatrices { a, b, k_db }
}

/// Deadbeat gain: `(A + B·K)² = 0` holds for a 2×2 matrix exactly when
/// both trace and determinant of `A + B·K` vanish, which is linear in K:
///
/// ```text
///     Bᵀ·Kᵀ           = −tr A
///     (adj(A)·B)ᵀ·Kᵀ  = −det A
/// ```
///
/// The 2×2 system is solved directly and falls back to least squares if
/// it degenerates (it does not for λ, T > 0).
pub fn deadbeat_gain(a: &Matrix2<f64>, b: &Vector2<f64>) -> RowVector2<f64> {
    let adj = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]);
    let adj_b = adj * b;
    let m = Matrix2::new(b[0], b[1], adj_b[0], adj_b[1]);
    let rhs = Vector2::new(-(a[(0, 0)] + a[(1, 1)]), -a.determinant());
    match m.try_inverse() {
        Some(inv) => (inv * rhs).transpose(),
        None => {
            let sol = m.svd(true, true).solve(&rhs, 1e-14).unwrap_or_default();
            sol.transpose()
        }
    }
}

/// Nominal Period-1 orbit: the fixed point `x* = A·x* + B·u*` whose step
/// size realizes the commanded average velocity,
/// `u* = v_desired·(T_SSP + T_DSP)`.
pub fn p1_orbit(params: &HlipParams, s2s: &S2sMatrices) -> (Vector2<f64>, f64) {
    let u_star = params.v_desired * (params.t_ssp + params.t_dsp);
    let eye = Matrix2::identity();
    let x_star = match (eye - s2s.a).try_inverse() {
        Some(inv) => inv * s2s.b * u_star,
        // Zero-time map: A = I; the only periodic solution is at rest.
        None => Vector2::zeros(),
    };
    (x_star, u_star)
}

/// Deadbeat stepping law `u = u* + K_db·(x − x*)`.
pub fn step_size_command(
    x_walker: &Vector2<f64>,
    x_orbit: &Vector2<f64>,
    u_star: f64,
    k_db: &RowVector2<f64>,
) -> f64 {
    u_star + (k_db * (x_walker - x_orbit))[(0, 0)]
}

/// One step of the exact S2S plant, for analysis and tests.
pub fn s2s_step(s2s: &S2sMatrices, x: &Vector2<f64>, u: f64) -> Vector2<f64> {
    s2s.a * x + s2s.b * u
}

/// Walking-surface slope handling for downsteps. Downhill slopes are
/// positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeTarget {
    /// Surface slope, rad.
    pub theta: f64,
    /// Feedforward step-size adjustment added to the nominal step, m.
    pub step_offset: f64,
}

/// Scenario flag for [`slope_adapted_target`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeMode {
    /// Height known in advance: slope fixed from the previous step size
    /// at the VLO before the downstep.
    Planned { height: f64 },
    /// Height discovered on the fly: slope follows the swing foot's
    /// penetration below the believed ground.
    Unplanned { penetration: f64 },
    /// Stepping back up: the height was measured at landing, for both
    /// scenarios.
    Recovery { measured_height: f64 },
}

/// Slope of the walking surface over the coming step and the step-size
/// feedforward it implies. `step_gain` converts height change to extra
/// step length; the stabilizing work stays with the deadbeat feedback.
pub fn slope_adapted_target(mode: SlopeMode, prev_step_size: f64, step_gain: f64) -> SlopeTarget {
    let step = prev_step_size.abs().max(1e-6);
    let (height, sign) = match mode {
        SlopeMode::Planned { height } => (height, 1.0),
        SlopeMode::Unplanned { penetration } => (penetration.max(0.0), 1.0),
        SlopeMode::Recovery { measured_height } => (measured_height, -1.0),
    };
    let theta = sign * (height / step).atan();
    SlopeTarget {
        theta,
        step_offset: sign * step_gain * height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(z0: f64, t_ssp: f64, t_dsp: f64, v: f64) -> HlipParams {
        HlipParams::new(z0, 9.81, t_ssp, t_dsp, v).unwrap()
    }

    /// Numeric matrix exponential by scaling and squaring with a Taylor
    /// core, independent of the closed form.
    fn expm_numeric(m: &Matrix2<f64>) -> Matrix2<f64> {
        let norm = m.amax();
        let scalings = (norm.log2().ceil().max(0.0) as u32) + 6;
        let scaled = m / 2f64.powi(scalings as i32);
        let mut term = Matrix2::identity();
        let mut sum = Matrix2::identity();
        for k in 1..24 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..scalings {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn zero_time_map_is_identity() {
        let p = params(0.9, 0.0, 0.0, 0.0);
        let s2s = s2s_matrices(&p);
        assert!((s2s.a - Matrix2::identity()).amax() < 1e-14);
        assert!((s2s.b - Vector2::new(-1.0, 0.0)).amax() < 1e-14);
    }

    #[test]
    fn small_time_matches_first_order_series() {
        // A ≈ (I + A_SSP·T)·[[1, T_DSP], [0, 1]] to first order.
        let p = params(1.0, 1e-4, 5e-5, 0.0);
        let s2s = s2s_matrices(&p);
        let lam2 = p.lambda() * p.lambda();
        let first_order =
            (Matrix2::identity() + Matrix2::new(0.0, 1.0, lam2, 0.0) * p.t_ssp)
                * Matrix2::new(1.0, p.t_dsp, 0.0, 1.0);
        assert!((s2s.a - first_order).amax() < 1e-7);
    }

    #[test]
    fn closed_form_matches_numeric_expm_and_nilpotency() {
        let p = params(0.9, 0.4, 0.1, 0.5);
        let lam = p.lambda();
        let a_ssp = Matrix2::new(0.0, 1.0, lam * lam, 0.0);
        let closed = expm_ssp(lam, p.t_ssp);
        let numeric = expm_numeric(&(a_ssp * p.t_ssp));
        assert!((closed - numeric).amax() < 1e-12 * numeric.amax());

        let s2s = s2s_matrices(&p);
        let m = s2s.a + s2s.b * s2s.k_db;
        assert!((m * m).amax() < 1e-10, "nilpotency: {:?}", m * m);
    }

    #[test]
    fn nilpotency_over_parameter_grid() {
        for &z0 in &[0.5, 0.675, 0.85, 1.025, 1.2] {
            for &t_ssp in &[0.2, 0.3, 0.4, 0.5, 0.6] {
                for &t_dsp in &[0.0, 0.1, 0.2] {
                    let p = params(z0, t_ssp, t_dsp, 0.3);
                    let s2s = s2s_matrices(&p);
                    let m = s2s.a + s2s.b * s2s.k_db;
                    let norm = (m * m).amax();
                    assert!(norm < 1e-10, "z0={z0} t_ssp={t_ssp} t_dsp={t_dsp}: {norm:e}");
                }
            }
        }
    }

    #[test]
    fn standing_orbit_is_at_rest() {
        let p = params(0.9, 0.4, 0.1, 0.0);
        let s2s = s2s_matrices(&p);
        let (x_star, u_star) = p1_orbit(&p, &s2s);
        assert_abs_diff_eq!(u_star, 0.0);
        assert!(x_star.amax() < 1e-12);
    }

    #[test]
    fn orbit_is_a_fixed_point() {
        let p = params(0.95, 0.35, 0.15, 0.5);
        let s2s = s2s_matrices(&p);
        let (x_star, u_star) = p1_orbit(&p, &s2s);
        let next = s2s_step(&s2s, &x_star, u_star);
        assert!((next - x_star).amax() < 1e-12);
    }

    #[test]
    fn orbit_step_size_matches_velocity_times_period() {
        let p = params(0.9, 0.4, 0.1, 0.5);
        let s2s = s2s_matrices(&p);
        let (_, u_star) = p1_orbit(&p, &s2s);
        assert_relative_eq!(u_star, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn on_orbit_command_is_nominal() {
        let p = params(0.9, 0.4, 0.1, 0.5);
        let s2s = s2s_matrices(&p);
        let (x_star, u_star) = p1_orbit(&p, &s2s);
        let u = step_size_command(&x_star, &x_star, u_star, &s2s.k_db);
        assert_relative_eq!(u, u_star, epsilon = 1e-12);
    }

    #[test]
    fn deadbeat_removes_error_in_two_steps_on_exact_plant() {
        let p = params(0.9, 0.4, 0.1, 0.5);
        let s2s = s2s_matrices(&p);
        let (x_star, u_star) = p1_orbit(&p, &s2s);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let mut x = x_star
                + Vector2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5));
            for _ in 0..2 {
                let u = step_size_command(&x, &x_star, u_star, &s2s.k_db);
                x = s2s_step(&s2s, &x, u);
            }
            assert!((x - x_star).amax() < 1e-9, "residual {:e}", (x - x_star).amax());
        }
    }

    #[test]
    fn flat_ground_slope_is_zero() {
        let t = slope_adapted_target(SlopeMode::Planned { height: 0.0 }, 0.4, 0.5);
        assert_abs_diff_eq!(t.theta, 0.0);
        assert_abs_diff_eq!(t.step_offset, 0.0);
    }

    #[test]
    fn planned_slope_matches_arctangent() {
        let t = slope_adapted_target(SlopeMode::Planned { height: 0.10 }, 0.40, 0.5);
        assert_relative_eq!(t.theta, 0.25f64.atan(), epsilon = 1e-12);
        assert_relative_eq!(t.theta.to_degrees(), 14.036, epsilon = 1e-2);
    }

    #[test]
    fn unplanned_slope_grows_monotonically_with_penetration() {
        let mut prev = -1.0;
        for k in 0..=20 {
            let pen = 0.10 * k as f64 / 20.0;
            let t = slope_adapted_target(SlopeMode::Unplanned { penetration: pen }, 0.4, 0.5);
            assert!(t.theta >= prev);
            prev = t.theta;
        }
    }

    #[test]
    fn recovery_uses_measured_height_uphill() {
        let t = slope_adapted_target(
            SlopeMode::Recovery {
                measured_height: 0.10,
            },
            0.4,
            0.5,
        );
        assert!(t.theta < 0.0);
        assert!(t.step_offset < 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(HlipParams::new(0.0, 9.81, 0.4, 0.1, 0.0).is_err());
        assert!(HlipParams::new(0.9, -1.0, 0.4, 0.1, 0.0).is_err());
    }
}
