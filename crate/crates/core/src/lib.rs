//! Training-free trajectory guidance for diffusion and flow samplers.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedule`], [`oracle`], [`sampler`]: noise schedules, analytic
//!   denoisers and the DDIM / flow-Euler samplers.
//! * [`camera`], [`scene`], [`warp`], [`trajectory`]: pinhole cameras,
//!   procedural scenes with exact depth, forward depth warping and camera
//!   paths.
//! * [`flow`]: dense optical flow and the masked flow-error score used to
//!   gate latent channels.
//! * [`guidance`]: recursive refinement, flow-gated fusion and dual-path
//!   correction, combined into a guided sampling loop.
//! * [`traj_eval`]: Sim(3) alignment, ATE and RPE.
//! * [`harness`]: config-driven experiment runs.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod harness;
pub mod io;
pub mod mask;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod tensor;
pub mod traj_eval;
pub mod trajectory;
pub mod warp;

pub use error::{Error, Result};
pub use mask::ValidityMask;
pub use oracle::{Convention, DenoiserOracle};
pub use schedule::NoiseSchedule;
pub use tensor::LatentTensor;
