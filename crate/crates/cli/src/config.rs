use std::path::PathBuf;

use bragg_core::krotov::Target;
use bragg_core::robustness::Method;
use bragg_core::SchemeKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "bragg", version, about = "Bragg-pulse atom interferometer simulations")]
pub struct Cli {
    /// Worker threads for parallel scans and ensemble propagation.
    #[arg(long, global = true, env = "BRAGG_THREADS")]
    pub threads: Option<usize>,

    /// Annotate printed results with Rb-87 (780 nm) units.
    #[arg(long, global = true)]
    pub si: bool,

    /// Run the configuration stored in this JSON file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Write the effective configuration to this JSON file before running.
    #[arg(long, global = true, value_name = "FILE")]
    pub save_config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<RunConfig>,
}

/// One subcommand with all of its settings; this is what config files hold.
#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum RunConfig {
    /// Propagate a scheme (or a single pulse file) and write the trajectory.
    Simulate(SimulateArgs),
    /// Scan the kick phase and write the fringe.
    Fringe(FringeArgs),
    /// Expected contrast over the (μ, Δβ) grid.
    Scan(ScanArgs),
    /// Contrast difference between two landscapes.
    Diff(DiffArgs),
    /// Ensemble-optimise a split, swap or transfer pulse.
    Optimize(OptimizeArgs),
    /// Tune the RAP timing and peak for the 2 → 10 transfer.
    TuneRap(TuneRapArgs),
    /// Sweep the Rabi amplitude correction factor.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SchemeArgs {
    /// rabi, rap or oct.
    #[arg(long, default_value = "rabi")]
    pub scheme: SchemeKind,
    /// Optimised split pulse (required for oct).
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Optimised swap pulse (required for oct).
    #[arg(long, value_name = "FILE")]
    pub swap: Option<PathBuf>,
    /// Amplitude correction applied to the Rabi π/2 and π pulses.
    #[arg(long, default_value_t = 1.01)]
    pub correction: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scheme: SchemeArgs,
    /// Simulate this pulse file alone instead of a scheme.
    #[arg(long, value_name = "FILE")]
    pub pulse: Option<PathBuf>,
    /// Initial level when simulating a single pulse.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub initial_level: i32,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// Kick phase φ.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Record every n-th step.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long, default_value = "trajectory.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FringeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// Number of phases spread over [0, π).
    #[arg(long, default_value_t = 32)]
    pub phases: usize,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value = "fringe.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scheme: SchemeArgs,
    /// Monte-Carlo samples per grid point.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
    /// mc or quadrature.
    #[arg(long, default_value = "mc")]
    pub method: Method,
    #[arg(long, default_value_t = 0.90)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 1.10)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 0.02)]
    pub mu_step: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dbeta_min: f64,
    #[arg(long, default_value_t = 0.40)]
    pub dbeta_max: f64,
    #[arg(long, default_value_t = 0.02)]
    pub dbeta_step: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dt: f64,
    #[arg(long, default_value = "landscape.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DiffArgs {
    /// Reference landscape (e.g. rabi).
    #[arg(long, value_name = "CSV")]
    pub base: PathBuf,
    /// Landscape compared against the reference (e.g. rap).
    #[arg(long, value_name = "CSV")]
    pub candidate: PathBuf,
    #[arg(long, default_value = "diff.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// split, swap, amplify or deamplify.
    #[arg(long)]
    pub target: Target,
    /// Standard deviation of μ and β in the ensemble.
    #[arg(long, default_value_t = 0.025)]
    pub ensemble_sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub batches: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters_per_batch: usize,
    /// Upper bound on passes over all batches.
    #[arg(long, default_value_t = 10)]
    pub passes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.5)]
    pub omega_max: f64,
    #[arg(long, default_value_t = 10.0)]
    pub spectral_width: f64,
    /// Fixed Krotov step parameter; scaled automatically when omitted.
    #[arg(long)]
    pub lambda_a: Option<f64>,
    /// Sampling step of the optimised pulse.
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    /// Starting pulse; defaults to the analytic pulse for the target.
    #[arg(long, value_name = "FILE")]
    pub guess: Option<PathBuf>,
    #[arg(long, default_value = "pulse.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "optimization_record.csv")]
    pub record: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TuneRapArgs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Starting t_c.
    #[arg(long, default_value_t = 6.0)]
    pub t_c: f64,
    /// Starting t_r.
    #[arg(long, default_value_t = 20.0)]
    pub t_r: f64,
    /// Starting peak amplitude.
    #[arg(long, default_value_t = 0.7)]
    pub peak: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 400)]
    pub max_evaluations: usize,
    /// Write the tuned pulse here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 0.97)]
    pub min: f64,
    #[arg(long, default_value_t = 1.05)]
    pub max: f64,
    #[arg(long, default_value_t = 0.005)]
    pub step: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value = "calibration.csv")]
    pub out: PathBuf,
}
