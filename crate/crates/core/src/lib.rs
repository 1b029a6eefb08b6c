//! Treatment-policy learning for ICU sepsis trajectories.
//!
//! The pipeline bins raw events into 4-hour timesteps ([`cohort`]), clusters
//! timesteps into discrete states ([`statespace`]), estimates an MDP over a
//! 5×5 fluid/vasopressor grid and solves it by policy iteration ([`mdp`]),
//! evaluates policies off-policy ([`ope`]), explains states ([`explain`]),
//! assembles recommendation payloads ([`recommend`]) and analyses human
//! decisions collected under different visualization conditions ([`study`]).
//! [`simgen`] generates cohorts from a known MDP for end-to-end checks.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what persisted models use.

pub mod cohort;
pub mod explain;
pub mod linalg;
pub mod mdp;
pub mod ope;
pub mod quantile;
pub mod recommend;
pub mod scalar;
pub mod seeding;
pub mod simgen;
pub mod statespace;
pub mod study;

pub use scalar::Scalar;

pub type Real = f64;
pub type Mdp = mdp::MdpModel<Real>;
pub type States = statespace::StateModel<Real>;
