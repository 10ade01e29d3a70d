//! Simulation and optimal control of Bragg-pulse atom interferometers on a
//! truncated momentum ladder.

pub mod error;
pub mod krotov;
pub mod ladder;
pub mod nelder_mead;
pub mod propagate;
pub mod pulses;
pub mod robustness;
pub mod scheme;

pub use error::{Error, Result};
pub use ladder::{energy, sample_hamiltonian, HamiltonianSample, LadderParams, StateVector, C64};
pub use propagate::{propagate, step, Evolver, PropagationConfig, Trajectory};
pub use pulses::{
    blackman_envelope, calibration_sweep, rabi_pulse, rap_pulse, tune_rap, Calibration,
    ControlPulse, PulseFile, RabiKind, RapParams,
};
pub use scheme::{
    build_oct_scheme, build_rabi_scheme, build_rap_scheme, contrast, fringe_scan, run_scheme,
    FringeResult, KickResponse, PhaseKick, PulseSequence, SchemeConfig, SchemeKind, Segment,
};
pub use robustness::{
    improvement_map, sample_point, scan_landscape, ContrastLandscape, ImprovementMap,
    LandscapeConfig, LandscapePoint, Method, SampleStats,
};
pub use krotov::{
    evaluate_gate, evaluate_jpop, krotov_iterate, optimize, sample_ensemble, ControlConstraints,
    EnsemblePoint, EnsembleSpec, Functional, FunctionalKind, OptimizationRecord, Schedule, Target,
};
