//! Reference surfaces over phase time and downstep height.
//!
//! A [`ReferenceSurface`] stores, per height knot, a piecewise polynomial
//! in phase time (each piece of degree ≤ 5) and interpolates linearly in
//! height between knots. The synthetic builder constructs every knot as
//! `base(t) + h·deviation(t)`, so the family is affine in height: the
//! h = 0 knot reduces exactly to the flat-ground profile and the sampled
//! C¹ checks hold with margin.
//!
//! Desired forces are derived from the desired CoM motion,
//! `F_net(t) = m·(g + z̈ᵈ(t))`, and split between the two legs in double
//! support with a smoothstep ramp. The two per-leg surfaces therefore sum
//! exactly to the net force that tracking the CoM surface requires, and
//! they vanish at swing-leg touchdown start and stance-leg liftoff end.
//!
//! Phase time is zero at the support change (touchdown for DSP, liftoff
//! for SSP).

use crate::aslip::PhaseTag;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Downstep heights used for the height knots, m.
pub const DEFAULT_HEIGHT_KNOTS: [f64; 5] = [0.0, 0.025, 0.05, 0.075, 0.10];

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("NaN query")]
    NanQuery,
    #[error("infeasible shape parameters: {0}")]
    InfeasibleShape(String),
    #[error("surface validation failed: {check} on {surface}: {detail}")]
    Validation {
        check: &'static str,
        surface: String,
        detail: String,
    },
    #[error("no surface for the requested key: {0}")]
    MissingSurface(String),
    #[error("invalid timings: {0}")]
    InvalidTimings(&'static str),
    #[error("serialization: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceKind {
    VerticalCom,
    VerticalGrf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Planned,
    Unplanned,
}

/// Which leg a GRF surface describes. The downstep leg is the one that
/// lands on the lowered platform; CoM surfaces carry `DownstepLeg` by
/// convention but do not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LegRole {
    DownstepLeg,
    OtherLeg,
}

impl LegRole {
    pub fn other(self) -> Self {
        match self {
            LegRole::DownstepLeg => LegRole::OtherLeg,
            LegRole::OtherLeg => LegRole::DownstepLeg,
        }
    }
}

/// Step position relative to the downstep. `Nominal` is the flat cycle;
/// `Approach` swings onto the platform, `Platform` walks on it and steps
/// back up, `Recovery` settles back to the nominal gait.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepStage {
    Nominal,
    Approach,
    Platform,
    Recovery,
}

/// Phase durations of the gait, with the approach-step override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitTimings {
    pub t_ssp: f64,
    pub t_dsp: f64,
    /// Extra single-support time budgeted for the approach step, covering
    /// the swing foot's descent below the nominal ground level.
    pub approach_ssp_extension: f64,
}

impl GaitTimings {
    pub fn new(t_ssp: f64, t_dsp: f64, approach_ssp_extension: f64) -> Result<Self, ProfileError> {
        if !(t_ssp > 0.0) {
            return Err(ProfileError::InvalidTimings("t_ssp must be > 0"));
        }
        if !(t_dsp >= 0.0) {
            return Err(ProfileError::InvalidTimings("t_dsp must be >= 0"));
        }
        if !(approach_ssp_extension >= 0.0) {
            return Err(ProfileError::InvalidTimings("extension must be >= 0"));
        }
        Ok(Self {
            t_ssp,
            t_dsp,
            approach_ssp_extension,
        })
    }

    pub fn step_period(&self) -> f64 {
        self.t_ssp + self.t_dsp
    }

    /// Duration of a phase in a given stage.
    pub fn duration(&self, stage: StepStage, phase: PhaseTag) -> f64 {
        match (stage, phase) {
            (StepStage::Approach, PhaseTag::Ssp) => self.t_ssp + self.approach_ssp_extension,
            (_, PhaseTag::Ssp) => self.t_ssp,
            (_, PhaseTag::Dsp) => self.t_dsp,
        }
    }
}

/// Piecewise polynomial in time; each segment has degree ≤ 5 and is
/// evaluated in local time relative to its left breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePoly {
    /// Breakpoints, ascending, starting at 0.
    pub breaks: Vec<f64>,
    /// One coefficient row (c0..c5) per segment.
    pub coeffs: Vec<[f64; 6]>,
}

impl PiecewisePoly {
    pub fn duration(&self) -> f64 {
        *self.breaks.last().expect("non-empty breaks")
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let n = self.coeffs.len();
        for i in 0..n {
            if t < self.breaks[i + 1] || i == n - 1 {
                return (i, t - self.breaks[i]);
            }
        }
        unreachable!()
    }

    /// Value and first two time derivatives at `t` (assumed in-domain).
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (i, tau) = self.segment(t);
        let c = &self.coeffs[i];
        let mut v = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for k in (0..6).rev() {
            v = v * tau + c[k];
            if k >= 1 {
                d1 = d1 * tau + k as f64 * c[k];
            }
            if k >= 2 {
                d2 = d2 * tau + (k * (k - 1)) as f64 * c[k];
            }
        }
        (v, d1, d2)
    }

    /// `self + scale · other`; both must share breakpoints.
    fn add_scaled(&self, other: &PiecewisePoly, scale: f64) -> PiecewisePoly {
        assert_eq!(self.breaks, other.breaks, "aligned breakpoints required");
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| {
                let mut c = [0.0; 6];
                for k in 0..6 {
                    c[k] = a[k] + scale * b[k];
                }
                c
            })
            .collect();
        PiecewisePoly {
            breaks: self.breaks.clone(),
            coeffs,
        }
    }

    /// Exact polynomial of `m·(g + z̈)` for a CoM piece `z`.
    fn net_force(&self, mass: f64, gravity: f64) -> PiecewisePoly {
        let coeffs = self
            .coeffs
            .iter()
            .map(|c| {
                [
                    mass * (gravity + 2.0 * c[2]),
                    mass * 6.0 * c[3],
                    mass * 12.0 * c[4],
                    mass * 20.0 * c[5],
                    0.0,
                    0.0,
                ]
            })
            .collect();
        PiecewisePoly {
            breaks: self.breaks.clone(),
            coeffs,
        }
    }
}

/// One height knot: the time profile of the quantity at that downstep
/// height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceKnot {
    pub height: f64,
    pub poly: PiecewisePoly,
}

/// Evaluation result: a self-consistent (value, ∂/∂t, ∂²/∂t²) triple plus
/// a flag set when the query point fell outside the domain and was
/// clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub clamped: bool,
}

/// C¹ surface `f(t, h)` for one quantity of one phase of one step stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSurface {
    pub kind: SurfaceKind,
    pub scenario: Scenario,
    pub stage: StepStage,
    pub phase: PhaseTag,
    pub role: LegRole,
    pub knots: Vec<SurfaceKnot>,
}

impl ReferenceSurface {
    pub fn duration(&self) -> f64 {
        self.knots[0].poly.duration()
    }

    pub fn height_range(&self) -> (f64, f64) {
        (
            self.knots.first().unwrap().height,
            self.knots.last().unwrap().height,
        )
    }

    /// Bracketing knot index and interpolation weight for height `h`
    /// (already clamped to the knot range).
    pub fn h_weights(&self, h: f64) -> (usize, f64) {
        let n = self.knots.len();
        if n == 1 {
            return (0, 0.0);
        }
        for i in 0..(n - 1) {
            if h <= self.knots[i + 1].height || i == n - 2 {
                let span = self.knots[i + 1].height - self.knots[i].height;
                let w = if span > 0.0 {
                    (h - self.knots[i].height) / span
                } else {
                    0.0
                };
                return (i, w.clamp(0.0, 1.0));
            }
        }
        unreachable!()
    }

    /// Evaluate at phase time `t` and downstep height `h`. Out-of-domain
    /// queries are clamped and flagged.
    pub fn eval(&self, t: f64, h: f64) -> Result<SurfaceSample, ProfileError> {
        if t.is_nan() || h.is_nan() {
            return Err(ProfileError::NanQuery);
        }
        let dur = self.duration();
        let (h_lo, h_hi) = self.height_range();
        let tc = t.clamp(0.0, dur);
        let hc = h.clamp(h_lo, h_hi);
        let clamped = tc != t || hc != h;
        let (i, w) = self.h_weights(hc);
        let (v0, d10, d20) = self.knots[i].poly.eval(tc);
        let sample = if w == 0.0 {
            SurfaceSample {
                value: v0,
                d1: d10,
                d2: d20,
                clamped,
            }
        } else {
            let (v1, d11, d21) = self.knots[i + 1].poly.eval(tc);
            SurfaceSample {
                value: v0 + w * (v1 - v0),
                d1: d10 + w * (d11 - d10),
                d2: d20 + w * (d21 - d20),
                clamped,
            }
        };
        Ok(sample)
    }

    fn label(&self) -> String {
        format!(
            "{:?}/{:?}/{:?}/{:?}/{:?}",
            self.kind, self.scenario, self.stage, self.phase, self.role
        )
    }
}

/// Quintic Hermite segment matching (value, slope, accel) at both ends.
pub fn quintic_hermite(p0: [f64; 3], p1: [f64; 3], dur: f64) -> [f64; 6] {
    let t = dur;
    let c0 = p0[0];
    let c1 = p0[1];
    let c2 = p0[2] / 2.0;
    let r0 = p1[0] - (c0 + c1 * t + c2 * t * t);
    let r1 = p1[1] - (c1 + 2.0 * c2 * t);
    let r2 = p1[2] - 2.0 * c2;
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    let c3 = (10.0 * r0 - 4.0 * r1 * t + 0.5 * r2 * t2) / t3;
    let c4 = (-15.0 * r0 + 7.0 * r1 * t - r2 * t2) / t4;
    let c5 = (6.0 * r0 - 3.0 * r1 * t + 0.5 * r2 * t2) / t5;
    [c0, c1, c2, c3, c4, c5]
}

/// Flat-ground gait shape: a closed C² two-segment cycle of the vertical
/// CoM with symmetric oscillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatGaitSpec {
    /// CoM height at the support transitions, m.
    pub z_nominal: f64,
    /// Vertical CoM speed at the support transitions, m/s: the CoM rises
    /// into single support and falls into double support.
    pub osc_velocity: f64,
    pub mass: f64,
    pub gravity: f64,
    pub timings: GaitTimings,
}

impl Default for FlatGaitSpec {
    fn default() -> Self {
        Self {
            z_nominal: 0.92,
            osc_velocity: 0.08,
            mass: 70.0,
            gravity: 9.81,
            timings: GaitTimings {
                t_ssp: 0.35,
                t_dsp: 0.12,
                approach_ssp_extension: 0.23,
            },
        }
    }
}

/// Deviation targets for a downstep, per metre of downstep height:
/// (value, slope, accel) of the CoM deviation from the flat profile at
/// each phase boundary of the two-step downstep window. The recovery step
/// ends back at zero deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationTargets {
    /// End of the approach single support (touchdown on the platform).
    pub touchdown: [f64; 3],
    /// End of the approach double support.
    pub dsp_end: [f64; 3],
    /// End of the platform single support.
    pub platform_end: [f64; 3],
    /// End of the platform double support (back on the upper ground).
    pub platform_dsp_end: [f64; 3],
}

/// Qualitative shape parameters of the synthetic downstep family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstepShapeSpec {
    pub height_knots: Vec<f64>,
    /// Early, gentle lowering with a reduced impact.
    pub planned: DeviationTargets,
    /// Flat until the nominal touchdown time, then a pendular drop with a
    /// hard arrest and an elevated force peak.
    pub unplanned: DeviationTargets,
}

impl Default for DownstepShapeSpec {
    fn default() -> Self {
        Self {
            height_knots: DEFAULT_HEIGHT_KNOTS.to_vec(),
            planned: DeviationTargets {
                touchdown: [-0.55, -1.2, 0.0],
                dsp_end: [-0.80, -0.5, 2.0],
                platform_end: [-0.55, 0.9, 0.0],
                platform_dsp_end: [-0.28, 1.1, 0.0],
            },
            unplanned: DeviationTargets {
                touchdown: [-0.35, -2.6, 0.0],
                dsp_end: [-0.72, -0.4, 8.0],
                platform_end: [-0.52, 0.9, 0.0],
                platform_dsp_end: [-0.26, 1.1, 0.0],
            },
        }
    }
}

/// The full surface family for one walker: flat cycle plus planned and
/// unplanned downstep windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSet {
    pub schema_version: u32,
    pub flat: FlatGaitSpec,
    pub surfaces: Vec<ReferenceSurface>,
}

/// Role of a leg within a double-support phase of a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DspRamp {
    /// Just touched down; force ramps up from zero.
    Incoming,
    /// About to lift off; force ramps down to zero.
    Outgoing,
}

/// Which leg role is the stance leg during the SSP of a stage.
pub fn stance_role(stage: StepStage) -> LegRole {
    match stage {
        StepStage::Platform => LegRole::DownstepLeg,
        _ => LegRole::OtherLeg,
    }
}

/// Which leg role touches down at the start of the DSP of a stage.
pub fn incoming_role(stage: StepStage) -> LegRole {
    match stage {
        // Approach DSP: the downstep leg lands on the platform.
        StepStage::Approach => LegRole::DownstepLeg,
        // Platform DSP: the other leg lands on the upper ground.
        StepStage::Platform => LegRole::OtherLeg,
        // Nominal/recovery cycle keeps the alternation of the window.
        _ => LegRole::DownstepLeg,
    }
}

/// Ramp direction of `role` within the DSP of `stage`.
pub fn dsp_ramp(stage: StepStage, role: LegRole) -> DspRamp {
    if role == incoming_role(stage) {
        DspRamp::Incoming
    } else {
        DspRamp::Outgoing
    }
}

impl SurfaceSet {
    /// Look up the CoM surface of a stage and phase. The nominal cycle is
    /// scenario-independent and stored once.
    pub fn com(
        &self,
        scenario: Scenario,
        stage: StepStage,
        phase: PhaseTag,
    ) -> Result<&ReferenceSurface, ProfileError> {
        let scenario = normalize(scenario, stage);
        self.surfaces
            .iter()
            .find(|s| {
                s.kind == SurfaceKind::VerticalCom
                    && s.scenario == scenario
                    && s.stage == stage
                    && s.phase == phase
            })
            .ok_or_else(|| {
                ProfileError::MissingSurface(format!("com {scenario:?}/{stage:?}/{phase:?}"))
            })
    }

    /// Look up the GRF surface of a leg role in a stage and phase.
    pub fn grf(
        &self,
        scenario: Scenario,
        stage: StepStage,
        phase: PhaseTag,
        role: LegRole,
    ) -> Result<&ReferenceSurface, ProfileError> {
        let scenario = normalize(scenario, stage);
        self.surfaces
            .iter()
            .find(|s| {
                s.kind == SurfaceKind::VerticalGrf
                    && s.scenario == scenario
                    && s.stage == stage
                    && s.phase == phase
                    && s.role == role
            })
            .ok_or_else(|| {
                ProfileError::MissingSurface(format!(
                    "grf {scenario:?}/{stage:?}/{phase:?}/{role:?}"
                ))
            })
    }

    pub fn to_json(&self) -> Result<String, ProfileError> {
        serde_json::to_string_pretty(self).map_err(|e| ProfileError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        serde_json::from_str(s).map_err(|e| ProfileError::Serde(e.to_string()))
    }

    /// Run every surface through the full validator battery.
    pub fn validate(&self) -> Result<(), ProfileError> {
        for s in &self.surfaces {
            check_c1(s)?;
            if s.kind == SurfaceKind::VerticalGrf {
                check_grf_nonnegative(s)?;
                check_grf_boundary_zeros(s)?;
            }
        }
        check_flat_periodicity(self)?;
        Ok(())
    }
}

fn normalize(scenario: Scenario, stage: StepStage) -> Scenario {
    if stage == StepStage::Nominal {
        Scenario::Planned
    } else {
        scenario
    }
}

// ---------------------------------------------------------------------
// Synthetic builder
// ---------------------------------------------------------------------

/// Build the synthetic surface family.
///
/// Every invariant of [`ReferenceSurface`] is validated before returning,
/// along with the qualitative downstep features: the planned CoM is
/// lowered before touchdown, the unplanned CoM holds the flat profile
/// until the nominal touchdown time, and the unplanned peak GRF at the
/// deepest knot exceeds the planned one.
pub fn build_synthetic_surfaces(
    base: &FlatGaitSpec,
    shape: &DownstepShapeSpec,
) -> Result<SurfaceSet, ProfileError> {
    if !(base.z_nominal > 0.0 && base.mass > 0.0 && base.gravity > 0.0) {
        return Err(ProfileError::InfeasibleShape(
            "z_nominal, mass and gravity must be positive".into(),
        ));
    }
    if shape.height_knots.len() < 2
        || shape.height_knots[0] != 0.0
        || shape.height_knots.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(ProfileError::InfeasibleShape(
            "height knots must start at 0 and increase".into(),
        ));
    }
    let t = base.timings;
    let ts = t.t_ssp;
    let td = t.t_dsp;
    let ext = t.approach_ssp_extension;
    let z = base.z_nominal;
    let v1 = base.osc_velocity;

    // Flat cycle: rise through single support, dip through double support.
    let base_ssp = PiecewisePoly {
        breaks: vec![0.0, ts],
        coeffs: vec![quintic_hermite([z, v1, 0.0], [z, -v1, 0.0], ts)],
    };
    let base_dsp = PiecewisePoly {
        breaks: vec![0.0, td],
        coeffs: vec![quintic_hermite([z, -v1, 0.0], [z, v1, 0.0], td)],
    };
    if ext <= 0.0 {
        return Err(ProfileError::InvalidTimings(
            "approach_ssp_extension must be > 0 to build downstep surfaces",
        ));
    }
    // Approach single support continues past the nominal end while the
    // swing foot hunts for the ground. The extension carries the base
    // profile's end jerk and tapers it to zero, keeping the CoM C³ at the
    // breakpoint so the derived force surface stays C¹ there.
    let jerk_end = {
        let c = &base_ssp.coeffs[0];
        6.0 * c[3] + 24.0 * c[4] * ts + 60.0 * c[5] * ts * ts
    };
    let base_app = PiecewisePoly {
        breaks: vec![0.0, ts, ts + ext],
        coeffs: vec![
            base_ssp.coeffs[0],
            [
                z,
                -v1,
                0.0,
                jerk_end / 6.0,
                -jerk_end / (6.0 * ext),
                jerk_end / (20.0 * ext * ext),
            ],
        ],
    };
    let zero_on = |breaks: &[f64]| PiecewisePoly {
        breaks: breaks.to_vec(),
        coeffs: vec![[0.0; 6]; breaks.len() - 1],
    };

    // Unit-height deviation chains for each scenario.
    let chains = |scn: Scenario,
                  tg: &DeviationTargets|
     -> Vec<(StepStage, PhaseTag, PiecewisePoly, PiecewisePoly)> {
        let app_dev = match scn {
            Scenario::Planned => {
                // One smooth segment over the whole extended phase, split
                // at the nominal boundary to share breakpoints.
                let full = quintic_hermite([0.0; 3], tg.touchdown, ts + ext);
                let second = shift_poly(&full, ts);
                PiecewisePoly {
                    breaks: vec![0.0, ts, ts + ext],
                    coeffs: vec![full, second],
                }
            }
            Scenario::Unplanned => {
                // The deviation must leave the flat profile with zero
                // value, slope, acceleration and jerk, so the free shape
                // is c4·τ⁴ + c5·τ⁵ pinned to the touchdown value and
                // slope; the touchdown acceleration is implied.
                let (v, s) = (tg.touchdown[0], tg.touchdown[1]);
                let c4 = (5.0 * v - s * ext) / ext.powi(4);
                let c5 = (s * ext - 4.0 * v) / ext.powi(5);
                PiecewisePoly {
                    breaks: vec![0.0, ts, ts + ext],
                    coeffs: vec![[0.0; 6], [0.0, 0.0, 0.0, 0.0, c4, c5]],
                }
            }
        };
        // Deviation state actually reached at touchdown (the unplanned
        // family overrides the requested acceleration).
        let touchdown_state = {
            let (v, d1, d2) = app_dev.eval(ts + ext);
            [v, d1, d2]
        };
        vec![
            (StepStage::Approach, PhaseTag::Ssp, base_app.clone(), app_dev),
            (
                StepStage::Approach,
                PhaseTag::Dsp,
                base_dsp.clone(),
                PiecewisePoly {
                    breaks: vec![0.0, td],
                    coeffs: vec![quintic_hermite(touchdown_state, tg.dsp_end, td)],
                },
            ),
            (
                StepStage::Platform,
                PhaseTag::Ssp,
                base_ssp.clone(),
                PiecewisePoly {
                    breaks: vec![0.0, ts],
                    coeffs: vec![quintic_hermite(tg.dsp_end, tg.platform_end, ts)],
                },
            ),
            (
                StepStage::Platform,
                PhaseTag::Dsp,
                base_dsp.clone(),
                PiecewisePoly {
                    breaks: vec![0.0, td],
                    coeffs: vec![quintic_hermite(tg.platform_end, tg.platform_dsp_end, td)],
                },
            ),
            (
                StepStage::Recovery,
                PhaseTag::Ssp,
                base_ssp.clone(),
                PiecewisePoly {
                    breaks: vec![0.0, ts],
                    coeffs: vec![quintic_hermite(tg.platform_dsp_end, [0.0; 3], ts)],
                },
            ),
            (
                StepStage::Recovery,
                PhaseTag::Dsp,
                base_dsp.clone(),
                zero_on(&[0.0, td]),
            ),
        ]
    };

    let mut surfaces = Vec::new();

    // Nominal cycle, single zero-height knot.
    let nominal = [(PhaseTag::Ssp, &base_ssp), (PhaseTag::Dsp, &base_dsp)];
    for (phase, poly) in nominal {
        surfaces.push(ReferenceSurface {
            kind: SurfaceKind::VerticalCom,
            scenario: Scenario::Planned,
            stage: StepStage::Nominal,
            phase,
            role: LegRole::DownstepLeg,
            knots: vec![SurfaceKnot {
                height: 0.0,
                poly: poly.clone(),
            }],
        });
        push_grf_surfaces(
            &mut surfaces,
            base,
            Scenario::Planned,
            StepStage::Nominal,
            phase,
            &[(0.0, poly.clone())],
        );
    }

    for scn in [Scenario::Planned, Scenario::Unplanned] {
        let targets = match scn {
            Scenario::Planned => &shape.planned,
            Scenario::Unplanned => &shape.unplanned,
        };
        for (stage, phase, base_poly, dev) in chains(scn, targets) {
            let knots: Vec<(f64, PiecewisePoly)> = shape
                .height_knots
                .iter()
                .map(|&h| (h, base_poly.add_scaled(&dev, h)))
                .collect();
            surfaces.push(ReferenceSurface {
                kind: SurfaceKind::VerticalCom,
                scenario: scn,
                stage,
                phase,
                role: LegRole::DownstepLeg,
                knots: knots
                    .iter()
                    .map(|(h, p)| SurfaceKnot {
                        height: *h,
                        poly: p.clone(),
                    })
                    .collect(),
            });
            push_grf_surfaces(&mut surfaces, base, scn, stage, phase, &knots);
        }
    }

    let set = SurfaceSet {
        schema_version: 1,
        flat: *base,
        surfaces,
    };
    set.validate()?;
    check_downstep_features(&set)?;
    Ok(set)
}

/// Taylor-shift polynomial coefficients to a new origin `at`.
fn shift_poly(c: &[f64; 6], at: f64) -> [f64; 6] {
    let mut out = [0.0; 6];
    // out[k] = p^(k)(at) / k!
    for (k, o) in out.iter_mut().enumerate() {
        let mut v = 0.0;
        for j in (k..6).rev() {
            v = v * at + c[j] * binomial(j, k);
        }
        *o = v;
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Smoothstep `6τ⁵ − 15τ⁴ + 10τ³` and its first two derivatives in τ.
fn smoothstep(tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let t3 = t2 * tau;
    (
        t3 * (6.0 * t2 - 15.0 * tau + 10.0),
        30.0 * t2 * (t2 - 2.0 * tau + 1.0),
        60.0 * tau * (2.0 * t2 - 3.0 * tau + 1.0),
    )
}

/// Derive the GRF surfaces of one (scenario, stage, phase) from the CoM
/// knot polynomials.
fn push_grf_surfaces(
    surfaces: &mut Vec<ReferenceSurface>,
    base: &FlatGaitSpec,
    scenario: Scenario,
    stage: StepStage,
    phase: PhaseTag,
    com_knots: &[(f64, PiecewisePoly)],
) {
    match phase {
        PhaseTag::Ssp => {
            let role = stance_role(stage);
            let knots = com_knots
                .iter()
                .map(|(h, poly)| SurfaceKnot {
                    height: *h,
                    poly: poly.net_force(base.mass, base.gravity),
                })
                .collect();
            surfaces.push(ReferenceSurface {
                kind: SurfaceKind::VerticalGrf,
                scenario,
                stage,
                phase,
                role,
                knots,
            });
        }
        PhaseTag::Dsp => {
            for ramp in [DspRamp::Incoming, DspRamp::Outgoing] {
                let role = match ramp {
                    DspRamp::Incoming => incoming_role(stage),
                    DspRamp::Outgoing => incoming_role(stage).other(),
                };
                let knots = com_knots
                    .iter()
                    .map(|(h, poly)| {
                        let f = poly.net_force(base.mass, base.gravity);
                        SurfaceKnot {
                            height: *h,
                            poly: resample_ramped(&f, ramp, 6),
                        }
                    })
                    .collect();
                surfaces.push(ReferenceSurface {
                    kind: SurfaceKind::VerticalGrf,
                    scenario,
                    stage,
                    phase,
                    role,
                    knots,
                });
            }
        }
    }
}

/// Piecewise-quintic Hermite resampling of `ramp(τ)·F(t)` (incoming) or
/// `(1 − ramp(τ))·F(t)` (outgoing). Because Hermite sampling is linear in
/// the sampled data, the two resampled legs sum exactly to the resampled
/// net force.
fn resample_ramped(force: &PiecewisePoly, ramp: DspRamp, sub: usize) -> PiecewisePoly {
    let dur = force.duration();
    let eval = |t: f64| -> [f64; 3] {
        let (f, f1, f2) = force.eval(t.min(dur));
        let tau = t / dur;
        let (s, s1, s2) = smoothstep(tau);
        let (s, s1, s2) = match ramp {
            DspRamp::Incoming => (s, s1 / dur, s2 / (dur * dur)),
            DspRamp::Outgoing => (1.0 - s, -s1 / dur, -s2 / (dur * dur)),
        };
        [s * f, s1 * f + s * f1, s2 * f + 2.0 * s1 * f1 + s * f2]
    };
    let mut breaks = Vec::new();
    let mut coeffs = Vec::new();
    for seg in 0..force.coeffs.len() {
        let (t0, t1) = (force.breaks[seg], force.breaks[seg + 1]);
        for k in 0..sub {
            let a = t0 + (t1 - t0) * k as f64 / sub as f64;
            let b = t0 + (t1 - t0) * (k + 1) as f64 / sub as f64;
            breaks.push(a);
            coeffs.push(quintic_hermite(eval(a), eval(b), b - a));
        }
    }
    breaks.push(dur);
    PiecewisePoly { breaks, coeffs }
}

// ---------------------------------------------------------------------
// Validators
// ---------------------------------------------------------------------

const GRID_T: usize = 200;
const GRID_H: usize = 20;

/// Sampled C¹ check: one-sided finite differences agree across every
/// interior time breakpoint and height knot within 1e-5 relative.
pub fn check_c1(s: &ReferenceSurface) -> Result<(), ProfileError> {
    let dur = s.duration();
    let (h_lo, h_hi) = s.height_range();
    let scale = surface_scale(s);
    // Small enough that dt·f″ stays well below the 1e-5 relative gate,
    // large enough that f64 cancellation noise does too.
    let dt = 1e-8 * dur.max(1e-3);
    // Time direction, across interior breakpoints at sampled heights.
    for ih in 0..GRID_H {
        let h = h_lo + (h_hi - h_lo) * ih as f64 / (GRID_H - 1).max(1) as f64;
        for b in &s.knots[0].poly.breaks {
            let b = *b;
            if b <= dt || b >= dur - dt {
                continue;
            }
            let f = |t: f64| s.eval(t, h).unwrap().value;
            let left = (f(b) - f(b - dt)) / dt;
            let right = (f(b + dt) - f(b)) / dt;
            let denom = left.abs().max(right.abs()).max(scale);
            if (left - right).abs() > 1e-5 * denom {
                return Err(ProfileError::Validation {
                    check: "c1-time",
                    surface: s.label(),
                    detail: format!("break {b:.4}, h {h:.4}: {left:.6} vs {right:.6}"),
                });
            }
        }
    }
    // Height direction, across interior knots at sampled times.
    if s.knots.len() > 2 {
        let dh = 1e-7 * (h_hi - h_lo).max(1e-3);
        for it in 0..GRID_T {
            let t = dur * it as f64 / (GRID_T - 1) as f64;
            for knot in &s.knots[1..s.knots.len() - 1] {
                let hk = knot.height;
                let f = |h: f64| s.eval(t, h).unwrap().value;
                let left = (f(hk) - f(hk - dh)) / dh;
                let right = (f(hk + dh) - f(hk)) / dh;
                let denom = left.abs().max(right.abs()).max(scale);
                if (left - right).abs() > 1e-5 * denom {
                    return Err(ProfileError::Validation {
                        check: "c1-height",
                        surface: s.label(),
                        detail: format!("t {t:.4}, knot {hk:.4}: {left:.6} vs {right:.6}"),
                    });
                }
            }
        }
    }
    Ok(())
}

fn surface_scale(s: &ReferenceSurface) -> f64 {
    let mut m = 1.0f64;
    for k in &s.knots {
        for c in &k.poly.coeffs {
            m = m.max(c[0].abs());
        }
    }
    m
}

/// GRF sampled nonnegativity over the (t, h) grid.
pub fn check_grf_nonnegative(s: &ReferenceSurface) -> Result<(), ProfileError> {
    let dur = s.duration();
    let (h_lo, h_hi) = s.height_range();
    for ih in 0..GRID_H {
        let h = h_lo + (h_hi - h_lo) * ih as f64 / (GRID_H - 1).max(1) as f64;
        for it in 0..GRID_T {
            let t = dur * it as f64 / (GRID_T - 1) as f64;
            let v = s.eval(t, h)?.value;
            if v < -1e-9 {
                return Err(ProfileError::Validation {
                    check: "grf-nonnegative",
                    surface: s.label(),
                    detail: format!("f({t:.4}, {h:.4}) = {v:.6}"),
                });
            }
        }
    }
    Ok(())
}

/// Incoming DSP force starts at zero; outgoing DSP force ends at zero.
pub fn check_grf_boundary_zeros(s: &ReferenceSurface) -> Result<(), ProfileError> {
    if s.phase != PhaseTag::Dsp {
        return Ok(());
    }
    let dur = s.duration();
    let scale = surface_scale(s);
    let ramp = dsp_ramp(s.stage, s.role);
    let (h_lo, h_hi) = s.height_range();
    for ih in 0..GRID_H {
        let h = h_lo + (h_hi - h_lo) * ih as f64 / (GRID_H - 1).max(1) as f64;
        let t = match ramp {
            DspRamp::Incoming => 0.0,
            DspRamp::Outgoing => dur,
        };
        let v = s.eval(t, h)?.value;
        if v.abs() > 1e-9 * scale {
            return Err(ProfileError::Validation {
                check: "grf-boundary-zero",
                surface: s.label(),
                detail: format!("|f({t:.4}, {h:.4})| = {v:.3e}"),
            });
        }
    }
    Ok(())
}

/// Flat-cycle closure: value and slope at each phase start equal those at
/// the end of the preceding phase.
pub fn check_flat_periodicity(set: &SurfaceSet) -> Result<(), ProfileError> {
    let ssp = set.com(Scenario::Planned, StepStage::Nominal, PhaseTag::Ssp)?;
    let dsp = set.com(Scenario::Planned, StepStage::Nominal, PhaseTag::Dsp)?;
    let end_ssp = ssp.eval(ssp.duration(), 0.0)?;
    let start_dsp = dsp.eval(0.0, 0.0)?;
    let end_dsp = dsp.eval(dsp.duration(), 0.0)?;
    let start_ssp = ssp.eval(0.0, 0.0)?;
    let pairs = [
        (end_ssp, start_dsp, "ssp→dsp"),
        (end_dsp, start_ssp, "dsp→ssp"),
    ];
    for (a, b, junction) in pairs {
        if (a.value - b.value).abs() > 1e-9 || (a.d1 - b.d1).abs() > 1e-9 {
            return Err(ProfileError::Validation {
                check: "flat-periodicity",
                surface: junction.into(),
                detail: format!(
                    "value {:.6} vs {:.6}, slope {:.6} vs {:.6}",
                    a.value, b.value, a.d1, b.d1
                ),
            });
        }
    }
    Ok(())
}

/// Qualitative downstep features the builder must reproduce.
fn check_downstep_features(set: &SurfaceSet) -> Result<(), ProfileError> {
    let h = set
        .surfaces
        .iter()
        .filter(|s| s.stage != StepStage::Nominal)
        .map(|s| s.height_range().1)
        .fold(0.0f64, f64::max);
    let ts = set.flat.timings.t_ssp;

    // Planned CoM lowered at (and before) the nominal touchdown time.
    let planned = set.com(Scenario::Planned, StepStage::Approach, PhaseTag::Ssp)?;
    let flat = set.com(Scenario::Planned, StepStage::Nominal, PhaseTag::Ssp)?;
    let z_planned = planned.eval(ts, h)?.value;
    let z_flat = flat.eval(ts, 0.0)?.value;
    if z_planned >= z_flat {
        return Err(ProfileError::InfeasibleShape(format!(
            "planned CoM not lowered pre-impact: {z_planned:.4} vs flat {z_flat:.4}"
        )));
    }
    // Unplanned CoM holds the flat profile until the nominal touchdown.
    let unplanned = set.com(Scenario::Unplanned, StepStage::Approach, PhaseTag::Ssp)?;
    for k in 0..8 {
        let t = ts * k as f64 / 7.0;
        let a = unplanned.eval(t, h)?.value;
        let b = flat.eval(t, 0.0)?.value;
        if (a - b).abs() > 1e-12 {
            return Err(ProfileError::InfeasibleShape(format!(
                "unplanned CoM deviates before nominal touchdown at t = {t:.3}"
            )));
        }
    }
    // Peak-force ordering at the deepest knot.
    let peak = |scenario: Scenario| -> Result<f64, ProfileError> {
        let mut peak = 0.0f64;
        for s in set.surfaces.iter().filter(|s| {
            s.kind == SurfaceKind::VerticalGrf
                && s.scenario == scenario
                && s.stage != StepStage::Nominal
        }) {
            let dur = s.duration();
            for i in 0..400 {
                let t = dur * i as f64 / 399.0;
                peak = peak.max(s.eval(t, h)?.value);
            }
        }
        Ok(peak)
    };
    let planned_peak = peak(Scenario::Planned)?;
    let unplanned_peak = peak(Scenario::Unplanned)?;
    if unplanned_peak <= planned_peak {
        return Err(ProfileError::InfeasibleShape(format!(
            "unplanned peak GRF {unplanned_peak:.1} N does not exceed planned {planned_peak:.1} N"
        )));
    }
    Ok(())
}
