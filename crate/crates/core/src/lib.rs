//! Planar walking toolkit built around the actuated spring-loaded inverted
//! pendulum (aSLIP): a point mass on two massless spring-damper legs whose
//! rest lengths are actuated through a double integrator.
//!
//! The crate covers the full pipeline for flat-ground walking and for
//! planned/unplanned downsteps:
//!
//! - [`aslip`] — model parameters, hybrid state, continuous dynamics.
//! - [`profiles`] — C¹ reference surfaces over phase time and downstep
//!   height for the vertical CoM position and the vertical ground reaction
//!   force, plus the synthetic surface builder.
//! - [`qp`] — a dense convex QP solver shared by both controllers.
//! - [`bbf`] — vertical-state controller: backstepping CLF tracking with
//!   barrier rows that confine the GRF to a tube around its reference.
//! - [`hlip`] — step-to-step matrices, deadbeat stepping, orbit targets,
//!   and slope adaptation for downsteps.
//! - [`fit`] — direct-collocation fitting of leg stiffness, damping, and
//!   rest-length actuation to reference CoM data.
//! - [`sim`] — event-driven hybrid simulator with scenario logic,
//!   trajectory logging, and summary metrics.
//! - [`transfer`] — morphology scaling of gait quantities and whole
//!   surface sets between walkers of different size and mass.
//! - [`tsc`] — task-space controller QP with the GRF tube as a hard
//!   constraint, exercised on a bundled planar toy rigid model.
//! - [`cli`] — config formats and the command implementations behind the
//!   `downstep` binary.
//!
//! Run `cargo run --example flat_walking` (or any other example) for a
//! guided tour of each capability.

pub mod aslip;
pub mod bbf;
pub mod cli;
pub mod fit;
pub mod hlip;
pub mod profiles;
pub mod qp;
pub mod sim;
pub mod transfer;
pub mod tsc;
