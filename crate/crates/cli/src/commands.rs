use std::f64::consts::PI;
use std::path::Path;

use bragg_core::krotov::{
    self, ensemble_value, sample_ensemble, ControlConstraints, EnsembleSpec, Schedule,
};
use bragg_core::nelder_mead::NelderMeadOptions;
use bragg_core::pulses::{rap_pulse_default, tune_rap};
use bragg_core::robustness::{
    crossing, improvement_map, linear_grid, scan_landscape, ContrastLandscape, LandscapeConfig,
};
use bragg_core::scheme::{phase_grid, N_SEPARATION};
use bragg_core::{
    build_oct_scheme, build_rabi_scheme, build_rap_scheme, calibration_sweep, fringe_scan,
    run_scheme, ControlPulse, Error, LadderParams, PropagationConfig, PulseSequence, RapParams,
    SchemeConfig, SchemeKind, StateVector,
};

use crate::config::*;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericalFailure(_)
            | Error::NonMonotonic { .. }
            | Error::UndefinedContrast
            | Error::OutOfRange { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Rb-87 at 780 nm: ω_k = 2π·15.1 kHz.
const OMEGA_K_HZ: f64 = 15.1e3;
/// 2ħk/m in mm/s.
const RECOIL_VELOCITY_MM_S: f64 = 11.77;
/// m·(2ħk/m)²/k_B in µK.
const RECOIL_TEMPERATURE_UK: f64 = 1.448;

fn time_us(t: f64) -> f64 {
    t / (2.0 * PI * OMEGA_K_HZ) * 1e6
}

pub fn dispatch(cfg: &RunConfig, si: bool) -> Result<()> {
    match cfg {
        RunConfig::Simulate(a) => simulate(a, si),
        RunConfig::Fringe(a) => fringe(a, si),
        RunConfig::Scan(a) => scan(a, si),
        RunConfig::Diff(a) => diff(a),
        RunConfig::Optimize(a) => optimize(a, si),
        RunConfig::TuneRap(a) => tune(a, si),
        RunConfig::Calibrate(a) => calibrate(a),
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {x}")))
    }
}

fn build_scheme(a: &SchemeArgs, dt: f64) -> Result<PulseSequence> {
    check_positive("correction", a.correction)?;
    let cfg = SchemeConfig {
        dt,
        correction: a.correction,
        ..Default::default()
    };
    Ok(match a.scheme {
        SchemeKind::Rabi => build_rabi_scheme(&cfg)?,
        SchemeKind::Rap => build_rap_scheme(&cfg)?,
        SchemeKind::Oct => {
            let (Some(split), Some(swap)) = (&a.split, &a.swap) else {
                return Err(CliError::Usage(
                    "--scheme oct needs --split and --swap pulse files".into(),
                ));
            };
            build_oct_scheme(&load_pulse(split)?, &load_pulse(swap)?, &cfg)?
        }
        SchemeKind::Custom => {
            return Err(CliError::Usage(
                "use --pulse to simulate a custom pulse".into(),
            ))
        }
    })
}

fn load_pulse(path: &Path) -> Result<ControlPulse> {
    ControlPulse::load_json(path)
        .map_err(|e| CliError::Usage(format!("cannot read pulse {}: {e}", path.display())))
}

fn ladder(mu: f64, beta: f64) -> Result<LadderParams> {
    check_positive("mu", mu)?;
    if !beta.is_finite() {
        return Err(CliError::Usage("--beta must be finite".into()));
    }
    Ok(LadderParams::with(mu, beta))
}

fn simulate(a: &SimulateArgs, si: bool) -> Result<()> {
    check_positive("dt", a.dt)?;
    let params = ladder(a.mu, a.beta)?;
    let config = PropagationConfig {
        dt: a.dt,
        stride: a.stride,
        ..Default::default()
    }
    .recording();
    let (traj, duration) = match &a.pulse {
        Some(path) => {
            let p = load_pulse(path)?;
            let seq = PulseSequence::new(SchemeKind::Custom).pulse(p);
            let init = StateVector::basis(&params, a.initial_level)?;
            let t = bragg_core::scheme::run_scheme_from(&seq, &params, a.phi, &config, &init)?;
            (t, seq.duration())
        }
        None => {
            let seq = build_scheme(&a.scheme, a.dt)?;
            (run_scheme(&seq, &params, a.phi, &config)?, seq.duration())
        }
    };
    traj.save_csv(&a.out)?;
    let s = &traj.final_state;
    let norm_err = (s.norm() - 1.0).abs();
    let best = (s.n_min..=s.n_max())
        .max_by(|x, y| s.population(*x).total_cmp(&s.population(*y)))
        .unwrap_or(0);
    println!(
        "T={duration:.3} P0={:.6} P1={:.6} peak_level={best} P_peak={:.6} guard={:.2e} norm_err={norm_err:.1e}{}",
        s.population(0),
        s.population(1),
        s.population(best),
        traj.max_guard_population,
        if traj.leaked { " LEAKED" } else { "" }
    );
    if si {
        println!("T = {:.1} us (Rb-87, 780 nm)", time_us(duration));
    }
    Ok(())
}

fn fringe(a: &FringeArgs, si: bool) -> Result<()> {
    check_positive("dt", a.dt)?;
    if a.phases < 4 {
        return Err(CliError::Usage("--phases must be at least 4".into()));
    }
    let params = ladder(a.mu, a.beta)?;
    let seq = build_scheme(&a.scheme, a.dt)?;
    let phis = phase_grid(a.phases, PI);
    let fr = fringe_scan(&seq, &params, &phis, a.dt)?;
    fr.save_csv(&a.out)?;
    let fit = fr.fit()?;
    let kr = bragg_core::KickResponse::new(&seq, &params, a.dt)?;
    let (pmax, pmin) = (kr.p0(0.0), kr.p0(PI / 2.0));
    let c = bragg_core::contrast(pmax, pmin)?;
    println!(
        "scheme={} P0(0)={pmax:.6} P0(pi/2)={pmin:.6} contrast={c:.6} fit_r2={:.8}",
        seq.name, fit.r_squared
    );
    if si {
        println!(
            "T = {:.1} us, kicks at {:?} us (Rb-87, 780 nm)",
            time_us(seq.duration()),
            seq.kick_times()
                .iter()
                .map(|t| (time_us(*t) * 10.0).round() / 10.0)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}

fn grid(name: &str, min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= min) || !min.is_finite() || !max.is_finite() {
        return Err(CliError::Usage(format!(
            "invalid {name} grid: min {min}, max {max}, step {step}"
        )));
    }
    Ok(linear_grid(min, max, step))
}

fn scan(a: &ScanArgs, si: bool) -> Result<()> {
    check_positive("dt", a.dt)?;
    let config = LandscapeConfig {
        mu_grid: grid("mu", a.mu_min, a.mu_max, a.mu_step)?,
        dbeta_grid: grid("dbeta", a.dbeta_min, a.dbeta_max, a.dbeta_step)?,
        n_samples: a.samples,
        seed: a.seed,
        dt: a.dt,
        method: a.method,
        ..Default::default()
    };
    config.validate()?;
    let seq = build_scheme(&a.scheme, a.dt)?;
    let land = scan_landscape(&seq, &config)?;
    land.save_csv(&a.out)?;
    let invalid = land.points.iter().filter(|p| !p.is_valid()).count();
    let p = land.nearest(1.0, a.dbeta_min);
    let half = crossing(&land.row(1.0), 0.5);
    println!(
        "scheme={} points={} invalid={invalid} c_bar(mu={:.2},dbeta={:.2})={:.6} dbeta_half={}",
        land.scheme,
        land.points.len(),
        p.mu,
        p.dbeta,
        p.c_bar,
        half.map_or("none".to_string(), |x| format!("{x:.4}"))
    );
    if si {
        let dmax = a.dbeta_max;
        println!(
            "dbeta_max = {dmax} -> velocity spread {:.2} mm/s, temperature {:.3} uK (Rb-87, 780 nm)",
            dmax * RECOIL_VELOCITY_MM_S,
            dmax * dmax * RECOIL_TEMPERATURE_UK
        );
    }
    Ok(())
}

fn diff(a: &DiffArgs) -> Result<()> {
    let read = |p: &Path| {
        ContrastLandscape::load_csv(p, &p.display().to_string())
            .map_err(|e| CliError::Usage(format!("cannot read landscape {}: {e}", p.display())))
    };
    let base = read(&a.base)?;
    let cand = read(&a.candidate)?;
    let map = improvement_map(&base, &cand)?;
    let f = std::fs::File::create(&a.out).map_err(Error::from)?;
    map.write_csv(std::io::BufWriter::new(f))?;
    let fmt = |d: Option<bragg_core::robustness::Difference>| {
        d.map_or("none".to_string(), |d| {
            format!("{:.4} at (mu={:.2}, dbeta={:.2})", d.delta_c, d.mu, d.dbeta)
        })
    };
    println!("max_gain={} max_loss={}", fmt(map.max_gain), fmt(map.max_loss));
    Ok(())
}

fn optimize(a: &OptimizeArgs, si: bool) -> Result<()> {
    check_positive("dt", a.dt)?;
    let spec = EnsembleSpec {
        batch_size: a.batch_size,
        n_batches: a.batches,
        sigma_mu: a.ensemble_sigma,
        sigma_beta: a.ensemble_sigma,
        seed: a.seed,
    };
    let constraints = ControlConstraints {
        omega_max: a.omega_max,
        spectral_width: a.spectral_width,
        lambda_a: a.lambda_a,
        ..Default::default()
    };
    let schedule = Schedule {
        iters_per_batch: a.iters_per_batch,
        max_passes: a.passes,
        ..Default::default()
    };
    let functional = a.target.functional(N_SEPARATION);
    let guess = match &a.guess {
        Some(p) => load_pulse(p)?,
        None => a.target.initial_guess(&RapParams::tuned(), N_SEPARATION, a.dt)?,
    };
    let (pulse, record) = krotov::optimize(&guess, &spec, &functional, &constraints, &schedule)?;
    let pulse = pulse
        .with_meta("target", format!("{:?}", a.target).to_lowercase())
        .with_meta("ensemble_sigma", a.ensemble_sigma);
    pulse.save_json(&a.out)?;
    record.save_csv(&a.record)?;
    // Fresh ensemble, disjoint seed.
    let fresh = sample_ensemble(&EnsembleSpec {
        seed: a.seed.wrapping_add(0x5EED),
        ..spec
    })?;
    let points: Vec<_> = fresh.into_iter().flatten().collect();
    let j = ensemble_value(&pulse, &points, &functional)?;
    let j_guess = ensemble_value(&guess, &points, &functional)?;
    println!(
        "target={:?} J_fresh={j:.4e} J_guess={j_guess:.4e} max_omega={:.4} iterations={} converged={}",
        a.target,
        pulse.max_amplitude(),
        record.rows.len(),
        record.converged
    );
    if si {
        println!(
            "T = {:.1} us, max Rabi frequency {:.2} kHz (Rb-87, 780 nm)",
            time_us(pulse.duration()),
            pulse.max_amplitude() * OMEGA_K_HZ / 1e3
        );
    }
    Ok(())
}

fn tune(a: &TuneRapArgs, si: bool) -> Result<()> {
    check_positive("dt", a.dt)?;
    let initial = RapParams {
        alpha: a.alpha,
        t_c: a.t_c,
        t_r: a.t_r,
        peak: a.peak,
        n_start: 2,
        n_end: N_SEPARATION,
    };
    let opts = NelderMeadOptions {
        max_evaluations: a.max_evaluations,
        ..Default::default()
    };
    let r = tune_rap(&initial, &LadderParams::default(), a.dt, &opts)?;
    if let Some(out) = &a.out {
        rap_pulse_default(&r.params, a.dt)?.save_json(out)?;
    }
    let p = r.params;
    println!(
        "fidelity={:.6} alpha={} t_c={:.4} t_r={:.4} peak={:.4} evaluations={} converged={}",
        r.fidelity, p.alpha, p.t_c, p.t_r, p.peak, r.evaluations, r.converged
    );
    if si {
        println!(
            "duration {:.1} us, peak {:.2} kHz (Rb-87, 780 nm)",
            time_us(p.duration()),
            p.peak * OMEGA_K_HZ / 1e3
        );
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    check_positive("dt", a.dt)?;
    let scales = grid("scale", a.min, a.max, a.step)?;
    let cal = calibration_sweep(&scales, a.dt)?;
    let f = std::fs::File::create(&a.out).map_err(Error::from)?;
    cal.write_csv(std::io::BufWriter::new(f))?;
    println!("best_scale={:.4} error={:.3e}", cal.best_scale, cal.best_error);
    Ok(())
}
