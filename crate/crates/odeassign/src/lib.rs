//! odeassign: a label-assignment engine built around two ideas that are
//! usually kept apart.
//!
//! An exact integer-linear-program solver defines *what* the right answer is:
//! given per-node label scores and pairwise co-occurrence scores, it finds the
//! jointly optimal assignment. A pair of neural-ODE classifiers then learns to
//! *imitate* that solver from raw features alone, amortizing the combinatorial
//! search into a fixed-cost forward integration. The synthetic task generator
//! plants scenes where greedy per-node decisions are provably wrong, so the
//! gap between "greedy" and "ILP-optimal" is measurable and the ODE layer's
//! contribution can be isolated.
//!
//! Module map:
//!
//! * [`tensor`] — dense f64 tensors with a scoped reverse-mode tape.
//! * [`odesolve`] — adaptive Dormand–Prince 5(4) integrator.
//! * [`nodelayer`] — MLP vector fields plus the two gradient paths through
//!   the solver (continuous adjoint and backprop-through-the-steps).
//! * [`ilp`] — exact and greedy solvers for the assignment ILP, and recall@K.
//! * [`taskgen`] — deterministic synthetic scene generator with ILP oracles.
//! * [`pipeline`] — the two-stage object/predicate classifier, training loop,
//!   evaluation protocols, and the t_end sweep / trajectory probe analyses.
//! * [`diag`] — self-check routines (solver order, gradient agreement, solver
//!   equivalence) shared by the `check` subcommand and the test suite.
//! * [`runcfg`] — flat key/value run configuration with CLI overrides.

pub mod diag;
pub mod ilp;
pub mod nodelayer;
pub mod odesolve;
pub mod pipeline;
pub mod runcfg;
pub mod taskgen;
pub mod tensor;

mod error;

pub use error::{Error, Result};
