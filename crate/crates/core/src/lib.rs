//! Nonlinear (g-)evaluations on discrete Brownian lattices: exact backward
//! BSDE induction, evaluation calculus and axiom checks, Doob-Meyer style
//! decompositions, and driver recovery from black-box evaluations.

pub mod bsde;
pub mod drivers;
pub mod error;
pub mod evaluation;
pub mod lattice;
pub mod martingale;
pub mod representation;

pub use bsde::{
    evaluate, evaluate_at, picard_solve, solve_bsde, BsdeSolution, Diagnostics, Dividend,
    PredictableProcess, Scheme, SolverConfig,
};
pub use drivers::{builtin, reflect, shift_by_dividend, Driver, TabulatedDriver};
pub use error::{GevalError, Result};
pub use evaluation::{axiom_suite, AxiomReport, DividendStream, Evaluation, OneStepFn};
pub use representation::{
    probe_constant_z, probe_infinitesimal, reconstruct_driver, solve_bsde_under_e,
    verify_roundtrip, FixedPointTrace, ProbeGrid, ProbeResult, Reconstruction, RecoveryMethod,
    RoundTripReport,
};

pub use martingale::{
    classify, doob_meyer_direct, doob_meyer_penalized, extract_representation,
    optional_stopping_check, upcrossing_check, ClassifyReport, Decomposition, MartingaleClass,
    PenalizationTrace, RepresentationPair, UpcrossReport,
};

pub use lattice::{
    cond_expect, expect, is_f_tau_measurable, is_stopping_time, stopped_value, AdaptedProcess,
    Lattice, LatticeSpec, RandomVariable, StoppingTime, Topology,
};
