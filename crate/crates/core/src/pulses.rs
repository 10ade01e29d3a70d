//! Control waveforms: Blackman Rabi pulses, chirped RAP pulses and sampled
//! complex pulses produced by the optimizer.
//!
//! A [`ControlPulse`] is piecewise constant on a uniform grid: sample `j`
//! holds Ω and φ̇ at the midpoint of the interval `[j·dt, (j+1)·dt]`.
//!
//! Pulse areas follow the Rabi-angle convention of the ladder Hamiltonian,
//! whose coupling is μΩ rather than μΩ/2: a resonant pulse with
//! ∫Ω dt = θ rotates |n₀⟩ into cos θ|n₀⟩ + i sin θ|n₀+1⟩. A "π/2 pulse"
//! (50/50 splitter) therefore has ∫Ω dt = π/4 and a "π pulse" ∫Ω dt = π/2.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderParams, StateVector, C64};
use crate::nelder_mead::{self, NelderMeadOptions};
use crate::propagate::{fmt_f64, propagate, PropagationConfig};
use crate::scheme::{self, SchemeConfig};

/// Duration of every Rabi pulse, in 1/ω_k.
pub const T_RABI: f64 = 15.0;
/// Amplitude correction compensating the shift from the neighbouring levels.
pub const DEFAULT_CORRECTION: f64 = 1.01;

/// Exact Blackman coefficients.
const A0: f64 = 0.42;
const A1: f64 = 0.5;
const A2: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPulse {
    pub dt: f64,
    pub omega: Vec<C64>,
    pub phidot: Vec<f64>,
    /// Declared bound on |Ω|, when the pulse carries one.
    pub amplitude_bound: Option<f64>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ControlPulse {
    /// Samples `f(t) -> (Ω, φ̇)` at interval midpoints. The grid step is
    /// adjusted so that an integer number of steps spans `duration`.
    pub fn from_fn<F>(duration: f64, dt: f64, f: F) -> Result<Self>
    where
        F: Fn(f64) -> (C64, f64),
    {
        if !(duration > 0.0) || !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "duration ({duration}) and dt ({dt}) must be positive"
            )));
        }
        let n = (duration / dt).round().max(1.0) as usize;
        let h = duration / n as f64;
        let (omega, phidot) = (0..n).map(|j| f((j as f64 + 0.5) * h)).unzip();
        Ok(Self {
            dt: h,
            omega,
            phidot,
            amplitude_bound: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn constant(omega: C64, phidot: f64, duration: f64, dt: f64) -> Result<Self> {
        Self::from_fn(duration, dt, |_| (omega, phidot))
    }

    pub fn from_samples(dt: f64, omega: Vec<C64>, phidot: Vec<f64>) -> Result<Self> {
        if omega.len() != phidot.len() || omega.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "omega ({}) and phidot ({}) must have the same nonzero length",
                omega.len(),
                phidot.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            dt,
            omega,
            phidot,
            amplitude_bound: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn n_steps(&self) -> usize {
        self.omega.len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.omega.len() as f64
    }

    /// Interval index containing `t`; `t = T` maps to the last interval.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let duration = self.duration();
        let tol = 1e-9 * duration.max(1.0);
        if !(t >= -tol && t <= duration + tol) {
            return Err(Error::OutOfRange { t, duration });
        }
        Ok(((t / self.dt).floor().max(0.0) as usize).min(self.n_steps() - 1))
    }

    pub fn omega_at(&self, t: f64) -> Result<C64> {
        Ok(self.omega[self.index_at(t)?])
    }

    pub fn phidot_at(&self, t: f64) -> Result<f64> {
        Ok(self.phidot[self.index_at(t)?])
    }

    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_steps()).map(move |j| (j as f64 + 0.5) * self.dt)
    }

    pub fn max_amplitude(&self) -> f64 {
        self.omega.iter().map(|w| w.norm()).fold(0.0, f64::max)
    }

    /// ∫Ω dt (the Rabi angle for a resonant real pulse).
    pub fn area(&self) -> C64 {
        self.omega.iter().sum::<C64>() * self.dt
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.omega.iter_mut().for_each(|w| *w *= factor);
        p
    }

    /// Time-reversed pulse.
    pub fn reversed(&self) -> Self {
        let mut p = self.clone();
        p.omega.reverse();
        p.phidot.reverse();
        p
    }

    /// Laser phase φ(t) = ∫φ̇ at the grid nodes (length n_steps + 1).
    pub fn phase(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.n_steps() + 1);
        out.push(0.0);
        for pd in &self.phidot {
            acc += pd * self.dt;
            out.push(acc);
        }
        out
    }

    pub fn same_grid(&self, other: &ControlPulse) -> bool {
        self.n_steps() == other.n_steps() && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }

    pub fn to_file(&self) -> PulseFile {
        let mut meta = self.meta.clone();
        if let Some(b) = self.amplitude_bound {
            meta.insert("amplitude_bound".into(), b.into());
        }
        PulseFile {
            dt: self.dt,
            omega_re: self.omega.iter().map(|w| w.re).collect(),
            omega_im: self.omega.iter().map(|w| w.im).collect(),
            phidot: self.phidot.clone(),
            meta,
        }
    }

    pub fn from_file(file: PulseFile) -> Result<Self> {
        if file.omega_re.len() != file.omega_im.len() {
            return Err(Error::InvalidParameter(
                "omega_re and omega_im differ in length".into(),
            ));
        }
        let omega = file
            .omega_re
            .iter()
            .zip(&file.omega_im)
            .map(|(r, i)| C64::new(*r, *i))
            .collect();
        let mut p = Self::from_samples(file.dt, omega, file.phidot)?;
        p.amplitude_bound = file.meta.get("amplitude_bound").and_then(|v| v.as_f64());
        p.meta = file.meta;
        p.meta.remove("amplitude_bound");
        Ok(p)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.to_file())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let file: PulseFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_file(file)
    }
}

/// Exchange format for pulses. Samples are per-interval (midpoint) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseFile {
    pub dt: f64,
    pub omega_re: Vec<f64>,
    pub omega_im: Vec<f64>,
    pub phidot: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Blackman window of length `duration` scaled to maximum `peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlackmanEnvelope {
    pub duration: f64,
    pub peak: f64,
}

impl BlackmanEnvelope {
    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.duration {
            return 0.0;
        }
        let x = 2.0 * PI * t / self.duration;
        self.peak * (A0 - A1 * x.cos() + A2 * (2.0 * x).cos())
    }

    /// ∫₀ᵀ B dt; the cosine terms integrate to zero over the window.
    pub fn area(&self) -> f64 {
        A0 * self.peak * self.duration
    }

    /// Peak amplitude giving the requested area.
    pub fn peak_for_area(duration: f64, area: f64) -> f64 {
        area / (A0 * duration)
    }
}

pub fn blackman_envelope(duration: f64, peak: f64) -> Result<BlackmanEnvelope> {
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration must be positive, got {duration}"
        )));
    }
    Ok(BlackmanEnvelope { duration, peak })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RabiKind {
    HalfPi,
    Pi,
}

impl RabiKind {
    /// ∫Ω dt of the uncorrected two-level pulse.
    pub fn rabi_angle(self) -> f64 {
        match self {
            RabiKind::HalfPi => PI / 4.0,
            RabiKind::Pi => PI / 2.0,
        }
    }
}

/// Resonant laser frequency for the |n₀⟩ ↔ |n₀+1⟩ transition.
pub fn resonant_phidot(n0: i32) -> f64 {
    -(2 * n0 + 1) as f64
}

/// Blackman π/2 or π pulse on |n₀⟩ ↔ |n₀+1⟩ of duration [`T_RABI`], with the
/// two-level amplitude multiplied by `correction`.
pub fn rabi_pulse(kind: RabiKind, n0: i32, correction: f64, dt: f64) -> Result<ControlPulse> {
    if !(correction > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "correction must be positive, got {correction}"
        )));
    }
    let peak = BlackmanEnvelope::peak_for_area(T_RABI, kind.rabi_angle()) * correction;
    let env = blackman_envelope(T_RABI, peak)?;
    let phidot = resonant_phidot(n0);
    let pulse = ControlPulse::from_fn(T_RABI, dt, |t| (C64::new(env.value(t), 0.0), phidot))?;
    let label = match kind {
        RabiKind::HalfPi => "half_pi",
        RabiKind::Pi => "pi",
    };
    Ok(pulse
        .with_meta("kind", label)
        .with_meta("n0", n0)
        .with_meta("correction", correction)
        .with_meta("peak", peak))
}

/// Linearly chirped rapid-adiabatic-passage pulse.
///
/// The laser frequency is φ̇(t) = −2·n_start − α(t − t_c), so in the frame of
/// the starting level the ladder energies read (n′² − n′α(t − t_c)) with
/// n′ = n − n_start. Adjacent levels cross every τ_B = 2/|α|; the first
/// crossing happens at t_c + τ_B/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapParams {
    /// Chirp rate; positive for upward transfer.
    pub alpha: f64,
    pub t_c: f64,
    pub t_r: f64,
    pub peak: f64,
    pub n_start: i32,
    pub n_end: i32,
}

impl RapParams {
    /// Tuned |2⟩ → |10⟩ transfer at α = 0.1.
    pub fn tuned() -> Self {
        Self {
            alpha: 0.1,
            t_c: 5.927,
            t_r: 19.252,
            peak: 0.7,
            n_start: 2,
            n_end: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter("chirp rate must be nonzero".into()));
        }
        if !(self.t_r > 0.0) || !(self.peak > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "t_r ({}) and peak ({}) must be positive",
                self.t_r, self.peak
            )));
        }
        if self.n_end == self.n_start {
            return Err(Error::InvalidParameter("n_start equals n_end".into()));
        }
        if (self.n_end > self.n_start) != (self.alpha > 0.0) {
            return Err(Error::InvalidParameter(
                "chirp sign must point from n_start towards n_end".into(),
            ));
        }
        Ok(())
    }

    pub fn crossing_interval(&self) -> f64 {
        2.0 / self.alpha.abs()
    }

    pub fn crossings(&self) -> u32 {
        self.n_end.abs_diff(self.n_start)
    }

    /// Time for all crossings plus half an interval of margin before the
    /// first and after the last, offset by t_c at both ends.
    pub fn duration(&self) -> f64 {
        self.crossings() as f64 * self.crossing_interval() + 2.0 * self.t_c
    }

    /// The same transfer run backwards in time: n_start and n_end swapped,
    /// chirp reversed.
    pub fn reversed(&self) -> Self {
        Self {
            alpha: -self.alpha,
            n_start: self.n_end,
            n_end: self.n_start,
            ..*self
        }
    }

    /// Same switch-on parameters, different endpoints.
    pub fn between(&self, n_start: i32, n_end: i32) -> Self {
        let alpha = self.alpha.abs() * if n_end > n_start { 1.0 } else { -1.0 };
        Self {
            alpha,
            n_start,
            n_end,
            ..*self
        }
    }

    pub fn envelope(&self, duration: f64, t: f64) -> f64 {
        let ramp = BlackmanEnvelope {
            duration: 2.0 * self.t_r,
            peak: self.peak,
        };
        if t <= 0.0 || t >= duration {
            0.0
        } else if t < self.t_r {
            ramp.value(t)
        } else if t > duration - self.t_r {
            ramp.value(t - (duration - 2.0 * self.t_r))
        } else {
            self.peak
        }
    }

    pub fn phidot(&self, t: f64) -> f64 {
        -2.0 * self.n_start as f64 - self.alpha * (t - self.t_c)
    }
}

/// Samples a RAP pulse of total length `duration`.
pub fn rap_pulse(params: &RapParams, duration: f64, dt: f64) -> Result<ControlPulse> {
    params.validate()?;
    if duration < 2.0 * params.t_r {
        return Err(Error::InvalidParameter(format!(
            "duration {duration} shorter than switch-on plus switch-off {}",
            2.0 * params.t_r
        )));
    }
    let p = *params;
    let pulse = ControlPulse::from_fn(duration, dt, move |t| {
        (C64::new(p.envelope(duration, t), 0.0), p.phidot(t))
    })?;
    Ok(pulse
        .with_meta("kind", "rap")
        .with_meta("alpha", p.alpha)
        .with_meta("t_c", p.t_c)
        .with_meta("t_r", p.t_r)
        .with_meta("peak", p.peak)
        .with_meta("n_start", p.n_start)
        .with_meta("n_end", p.n_end))
}

/// RAP pulse with its natural duration [`RapParams::duration`].
pub fn rap_pulse_default(params: &RapParams, dt: f64) -> Result<ControlPulse> {
    rap_pulse(params, params.duration(), dt)
}

/// Population arriving in `n_end` when starting in `n_start`.
pub fn rap_fidelity(params: &RapParams, ladder: &LadderParams, dt: f64) -> Result<f64> {
    let pulse = rap_pulse_default(params, dt)?;
    let psi0 = StateVector::basis(ladder, params.n_start)?;
    let config = PropagationConfig {
        dt,
        ..Default::default()
    };
    let tr = propagate(&psi0, ladder, &pulse, &config)?;
    Ok(tr.final_state.population(params.n_end))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub scale: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub points: Vec<CalibrationPoint>,
    pub best_scale: f64,
    pub best_error: f64,
}

impl Calibration {
    /// CSV with columns `scale,error`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "error"])?;
        for p in &self.points {
            w.write_record([fmt_f64(p.scale), fmt_f64(p.error)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ground-state error 1 − P₀(T) of the full π/2–π train with every
/// amplitude multiplied by `scale`, on the full ladder with β = 0.
pub fn calibration_error(scale: f64, dt: f64) -> Result<f64> {
    let cfg = SchemeConfig {
        dt,
        correction: scale,
        ..Default::default()
    };
    let seq = scheme::build_rabi_scheme(&cfg)?;
    let (p0, _) = scheme::fringe_extrema(&seq, &LadderParams::default(), dt)?;
    Ok(1.0 - p0)
}

pub fn calibration_sweep(scales: &[f64], dt: f64) -> Result<Calibration> {
    if scales.is_empty() {
        return Err(Error::InvalidParameter("no scales given".into()));
    }
    use rayon::prelude::*;
    let points = scales
        .par_iter()
        .map(|&s| Ok(CalibrationPoint { scale: s, error: calibration_error(s, dt)? }))
        .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .min_by(|a, b| a.error.total_cmp(&b.error))
        .expect("nonempty");
    Ok(Calibration {
        best_scale: best.scale,
        best_error: best.error,
        points,
    })
}

#[derive(Debug, Clone)]
pub struct RapTuning {
    pub params: RapParams,
    pub fidelity: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Best infidelity after each simplex iteration.
    pub history: Vec<f64>,
}

/// Nelder–Mead search over (t_c, t_r, peak) at fixed chirp rate, minimizing
/// the single-transfer infidelity 1 − P_{n_end}(T).
pub fn tune_rap(
    initial: &RapParams,
    ladder: &LadderParams,
    dt: f64,
    opts: &NelderMeadOptions,
) -> Result<RapTuning> {
    initial.validate()?;
    let scale = [initial.t_c.abs().max(1.0), initial.t_r, initial.peak];
    let to_params = |x: &[f64]| RapParams {
        t_c: x[0] * scale[0],
        t_r: x[1] * scale[1],
        peak: x[2] * scale[2],
        ..*initial
    };
    let objective = |x: &[f64]| {
        let p = to_params(x);
        if p.t_r <= 0.0 || p.peak <= 0.0 || p.duration() < 2.0 * p.t_r {
            return 2.0;
        }
        match rap_fidelity(&p, ladder, dt) {
            Ok(f) => 1.0 - f,
            Err(_) => 2.0,
        }
    };
    let x0 = [initial.t_c / scale[0], 1.0, 1.0];
    let r = nelder_mead::minimize(objective, &x0, &[0.1, 0.05, 0.05], opts);
    let params = to_params(&r.x);
    Ok(RapTuning {
        params,
        fidelity: 1.0 - r.value,
        evaluations: r.evaluations,
        converged: r.converged,
        history: r.history,
    })
}
