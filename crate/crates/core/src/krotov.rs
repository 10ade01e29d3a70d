//! Ensemble optimal control with Krotov's method.
//!
//! The control is the complex envelope Ω(t) of a piecewise-constant pulse;
//! φ̇(t) stays fixed. Writing Ω = u + iv, the Hamiltonian depends linearly
//! on both quadratures, with ∂H/∂u = −μ(A + A†) and ∂H/∂v = −iμ(A − A†)
//! where A = Σ|n⟩⟨n+1|. One iteration propagates co-states backwards under
//! the old pulse, then sweeps forward and updates each interval
//!
//!   Δu(t) = S(t)/λ_a · Σ_m Im⟨χ_m(t)|∂H/∂u|ψ_m(t)⟩
//!
//! (likewise for v) before stepping the states with the new value.
//! Constraints are enforced by projection after the sweep: clip |Ω|, low-pass
//! the complex field, and rescale if the filter pushed |Ω| back over the bound.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderParams, C64, DEFAULT_N_MAX, DEFAULT_N_MIN};
use crate::propagate::{fmt_f64, Evolver};
use crate::pulses::{rabi_pulse, rap_pulse_default, ControlPulse, RabiKind, RapParams, T_RABI};

/// Monotonicity tolerance on the ensemble functional.
pub const MONOTONIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub batch_size: usize,
    pub n_batches: usize,
    pub sigma_mu: f64,
    pub sigma_beta: f64,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            batch_size: 16,
            n_batches: 64,
            sigma_mu: 0.025,
            sigma_beta: 0.025,
            seed: 1,
        }
    }
}

impl EnsembleSpec {
    pub fn n_points(&self) -> usize {
        self.batch_size * self.n_batches
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_batches == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and n_batches must be positive".into(),
            ));
        }
        if !(self.sigma_mu >= 0.0) || !(self.sigma_beta >= 0.0) {
            return Err(Error::InvalidParameter("ensemble sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub mu: f64,
    pub beta: f64,
}

impl EnsemblePoint {
    pub const CENTER: EnsemblePoint = EnsemblePoint { mu: 1.0, beta: 0.0 };
}

/// Draws `n_points` (μ, β) pairs around (1, 0) and splits them into batches.
pub fn sample_ensemble(spec: &EnsembleSpec) -> Result<Vec<Vec<EnsemblePoint>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nm = Normal::new(1.0, spec.sigma_mu)
        .map_err(|e| Error::InvalidParameter(format!("sigma_mu: {e}")))?;
    let nb = Normal::new(0.0, spec.sigma_beta)
        .map_err(|e| Error::InvalidParameter(format!("sigma_beta: {e}")))?;
    Ok((0..spec.n_batches)
        .map(|_| {
            (0..spec.batch_size)
                .map(|_| EnsemblePoint {
                    mu: nm.sample(&mut rng),
                    beta: nb.sample(&mut rng),
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalKind {
    /// Start in `initial`, match the population vector `target` (level, P).
    PopulationTarget { initial: i32, target: Vec<(i32, f64)> },
    /// `target[k]` is the desired image of `|levels[k]⟩`, written in the
    /// basis `{|levels[0]⟩, |levels[1]⟩}`.
    SquareModulusGate { levels: [i32; 2], target: [[C64; 2]; 2] },
}

/// Final-time functional to be minimised, together with the level window
/// the ensemble is simulated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    pub kind: FunctionalKind,
    pub n_min: i32,
    pub n_max: i32,
}

impl Functional {
    /// |0⟩ → (|0⟩ + i|1⟩)/√2, |1⟩ → (i|0⟩ + |1⟩)/√2.
    pub fn split() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self::gate(
            [0, 1],
            [
                [C64::new(s, 0.0), C64::new(0.0, s)],
                [C64::new(0.0, s), C64::new(s, 0.0)],
            ],
        )
    }

    /// |0⟩ → |1⟩, |1⟩ → |0⟩.
    pub fn swap() -> Self {
        let (o, z) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
        Self::gate([0, 1], [[z, o], [o, z]])
    }

    pub fn gate(levels: [i32; 2], target: [[C64; 2]; 2]) -> Self {
        Self {
            kind: FunctionalKind::SquareModulusGate { levels, target },
            n_min: -4,
            n_max: 6,
        }
    }

    /// Full transfer `from` → `to` on the default window.
    pub fn transfer(from: i32, to: i32) -> Self {
        Self {
            kind: FunctionalKind::PopulationTarget {
                initial: from,
                target: vec![(to, 1.0)],
            },
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
        }
    }

    pub fn with_window(mut self, n_min: i32, n_max: i32) -> Self {
        self.n_min = n_min;
        self.n_max = n_max;
        self
    }

    pub fn ladder(&self, p: EnsemblePoint) -> LadderParams {
        LadderParams {
            n_min: self.n_min,
            n_max: self.n_max,
            mu: p.mu,
            beta: p.beta,
        }
    }

    fn index(&self, level: i32) -> Result<usize> {
        self.ladder(EnsemblePoint::CENTER)
            .index(level)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "level {level} outside window [{}, {}]",
                    self.n_min, self.n_max
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.ladder(EnsemblePoint::CENTER).validate()?;
        match &self.kind {
            FunctionalKind::PopulationTarget { initial, target } => {
                self.index(*initial)?;
                for (n, _) in target {
                    self.index(*n)?;
                }
                let sum: f64 = target.iter().map(|(_, p)| p).sum();
                if (sum - 1.0).abs() > 1e-9 || target.iter().any(|(_, p)| *p < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "target populations must be non-negative and sum to 1, got {sum}"
                    )));
                }
            }
            FunctionalKind::SquareModulusGate { levels, .. } => {
                self.index(levels[0])?;
                self.index(levels[1])?;
                if levels[0] == levels[1] {
                    return Err(Error::InvalidParameter("gate levels must differ".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        match self.kind {
            FunctionalKind::PopulationTarget { .. } => 1,
            FunctionalKind::SquareModulusGate { .. } => 2,
        }
    }

    fn dim(&self) -> usize {
        (self.n_max - self.n_min + 1) as usize
    }

    pub fn initial_states(&self) -> Result<Vec<Vec<C64>>> {
        let basis = |level: i32| -> Result<Vec<C64>> {
            let mut v = vec![C64::new(0.0, 0.0); self.dim()];
            v[self.index(level)?] = C64::new(1.0, 0.0);
            Ok(v)
        };
        match &self.kind {
            FunctionalKind::PopulationTarget { initial, .. } => Ok(vec![basis(*initial)?]),
            FunctionalKind::SquareModulusGate { levels, .. } => {
                Ok(vec![basis(levels[0])?, basis(levels[1])?])
            }
        }
    }

    fn target_vector(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.dim()];
        if let FunctionalKind::PopulationTarget { target, .. } = &self.kind {
            for (n, p) in target {
                t[(n - self.n_min) as usize] += p;
            }
        }
        t
    }

    /// τ = ½ Σ_k ⟨target_k|ψ_k⟩ for the gate functional.
    fn tau(&self, finals: &[Vec<C64>]) -> C64 {
        match &self.kind {
            FunctionalKind::SquareModulusGate { levels, target } => {
                let i0 = (levels[0] - self.n_min) as usize;
                let i1 = (levels[1] - self.n_min) as usize;
                let mut tau = C64::new(0.0, 0.0);
                for (k, psi) in finals.iter().enumerate() {
                    tau += target[k][0].conj() * psi[i0] + target[k][1].conj() * psi[i1];
                }
                tau * 0.5
            }
            _ => C64::new(0.0, 0.0),
        }
    }

    /// The quantity minimised: ½‖P − P^tgt‖², or 1 − F for a gate.
    pub fn value(&self, finals: &[Vec<C64>]) -> f64 {
        match &self.kind {
            FunctionalKind::PopulationTarget { .. } => {
                let t = self.target_vector();
                0.5 * finals[0]
                    .iter()
                    .zip(&t)
                    .map(|(a, t)| (a.norm_sqr() - t).powi(2))
                    .sum::<f64>()
            }
            FunctionalKind::SquareModulusGate { .. } => 1.0 - self.tau(finals).norm_sqr(),
        }
    }

    /// χ_k(T) = −∂J/∂⟨ψ_k(T)|.
    pub fn costates(&self, finals: &[Vec<C64>]) -> Vec<Vec<C64>> {
        match &self.kind {
            FunctionalKind::PopulationTarget { .. } => {
                let t = self.target_vector();
                vec![finals[0]
                    .iter()
                    .zip(&t)
                    .map(|(a, t)| -(a.norm_sqr() - t) * a)
                    .collect()]
            }
            FunctionalKind::SquareModulusGate { levels, target } => {
                let tau = self.tau(finals);
                let i0 = (levels[0] - self.n_min) as usize;
                let i1 = (levels[1] - self.n_min) as usize;
                (0..2)
                    .map(|k| {
                        let mut chi = vec![C64::new(0.0, 0.0); self.dim()];
                        chi[i0] = tau * 0.5 * target[k][0];
                        chi[i1] = tau * 0.5 * target[k][1];
                        chi
                    })
                    .collect()
            }
        }
    }
}

/// J_pop = 1 − ½‖P(ψ) − P^tgt‖², with `target` indexed like the state.
pub fn evaluate_jpop(populations: &[f64], target: &[f64]) -> f64 {
    1.0 - 0.5
        * populations
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
}

/// F = |½ Σ_k ⟨target_k|ψ_k⟩|², both written on the two gate levels.
pub fn evaluate_gate(finals: [[C64; 2]; 2], target: [[C64; 2]; 2]) -> f64 {
    let mut tau = C64::new(0.0, 0.0);
    for k in 0..2 {
        tau += target[k][0].conj() * finals[k][0] + target[k][1].conj() * finals[k][1];
    }
    (tau * 0.5).norm_sqr()
}

/// Update shape S(t): sin² ramps over `rise`·T at both ends, 1 in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateShape {
    pub rise: f64,
}

impl UpdateShape {
    /// `s` is the fraction of the pulse duration.
    pub fn value(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        let edge = s.min(1.0 - s);
        if edge >= self.rise {
            1.0
        } else {
            (0.5 * PI * edge / self.rise).sin().powi(2)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConstraints {
    pub omega_max: f64,
    /// Total width of the allowed band, centred on zero.
    pub spectral_width: f64,
    /// `None` scales λ_a so that the first update changes |Ω| by at most
    /// `auto_fraction`·omega_max.
    pub lambda_a: Option<f64>,
    pub auto_fraction: f64,
    pub update_shape: UpdateShape,
}

impl Default for ControlConstraints {
    fn default() -> Self {
        Self {
            omega_max: 1.5,
            spectral_width: 10.0,
            lambda_a: None,
            auto_fraction: 0.05,
            update_shape: UpdateShape { rise: 0.1 },
        }
    }
}

impl ControlConstraints {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_max > 0.0) || !(self.spectral_width > 0.0) {
            return Err(Error::InvalidParameter(
                "omega_max and spectral_width must be positive".into(),
            ));
        }
        if let Some(l) = self.lambda_a {
            if !(l > 0.0) {
                return Err(Error::InvalidParameter(format!("lambda_a must be positive, got {l}")));
            }
        }
        if !(self.update_shape.rise > 0.0 && self.update_shape.rise <= 0.5) {
            return Err(Error::InvalidParameter("update_shape.rise must be in (0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Clips |Ω| to `omega_max`, keeping the phase. Returns whether anything changed.
pub fn clip_amplitude(omega: &mut [C64], omega_max: f64) -> bool {
    let mut clipped = false;
    for w in omega.iter_mut() {
        let a = w.norm();
        if a > omega_max {
            *w *= omega_max / a;
            clipped = true;
        }
    }
    clipped
}

fn angular_frequencies(n: usize, dt: f64) -> impl Iterator<Item = f64> {
    let dw = 2.0 * PI / (n as f64 * dt);
    (0..n).map(move |k| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k * dw
    })
}

/// Removes every Fourier component with |ω| > `cutoff`; the last bin inside
/// the band is tapered linearly.
pub fn low_pass(omega: &mut [C64], dt: f64, cutoff: f64) {
    let n = omega.len();
    if n < 2 {
        return;
    }
    let mut planner = FftPlanner::new();
    let mut buf = omega.to_vec();
    planner.plan_fft_forward(n).process(&mut buf);
    let dw = 2.0 * PI / (n as f64 * dt);
    for (b, w) in buf.iter_mut().zip(angular_frequencies(n, dt)) {
        let weight = ((cutoff - w.abs()) / dw).clamp(0.0, 1.0);
        *b *= weight;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    for (o, b) in omega.iter_mut().zip(buf) {
        *o = b * scale;
    }
}

/// Peak in-band power over peak power at |ω| > `cutoff`, in dB. The signal is
/// zero-padded by `padding` to resolve the spectrum between grid bins.
pub fn spectral_suppression_db(pulse: &ControlPulse, cutoff: f64, padding: usize) -> f64 {
    let n = pulse.omega.len() * padding.max(1);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    buf[..pulse.omega.len()].copy_from_slice(&pulse.omega);
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for (b, w) in buf.iter().zip(angular_frequencies(n, pulse.dt)) {
        if w.abs() <= cutoff {
            inside = inside.max(b.norm_sqr());
        } else {
            outside = outside.max(b.norm_sqr());
        }
    }
    if outside == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (inside / outside).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Projection {
    pub clipped: bool,
    pub rescaled: bool,
}

/// Clip, low-pass, then rescale so that both constraints hold.
pub fn project(omega: &mut [C64], dt: f64, c: &ControlConstraints) -> Projection {
    let clipped = clip_amplitude(omega, c.omega_max);
    low_pass(omega, dt, 0.5 * c.spectral_width);
    let peak = omega.iter().map(|w| w.norm()).fold(0.0, f64::max);
    let rescaled = peak > c.omega_max;
    if rescaled {
        let s = c.omega_max / peak;
        omega.iter_mut().for_each(|w| *w *= s);
    }
    Projection { clipped, rescaled }
}

/// ∂H/∂u·ψ and ∂H/∂v·ψ accumulated against χ: returns
/// (Im⟨χ|∂H/∂u|ψ⟩, Im⟨χ|∂H/∂v|ψ⟩).
fn coupling_gradient(mu: f64, chi: &[C64], psi: &[C64]) -> (f64, f64) {
    // ⟨χ|A|ψ⟩ = Σ χ*_n ψ_{n+1}, ⟨χ|A†|ψ⟩ = Σ χ*_{n+1} ψ_n.
    let mut a = C64::new(0.0, 0.0);
    let mut ad = C64::new(0.0, 0.0);
    for n in 0..psi.len() - 1 {
        a += chi[n].conj() * psi[n + 1];
        ad += chi[n + 1].conj() * psi[n];
    }
    let du = -mu * (a + ad);
    let dv = C64::new(0.0, -mu) * (a - ad);
    (du.im, dv.im)
}

struct Member {
    point: EnsemblePoint,
    evolver: Evolver,
}

impl Member {
    fn new(functional: &Functional, point: EnsemblePoint) -> Self {
        Self {
            point,
            evolver: Evolver::new(functional.ladder(point)),
        }
    }

    fn forward(&mut self, pulse: &ControlPulse, states: &mut [Vec<C64>]) {
        for (om, pd) in pulse.omega.iter().zip(&pulse.phidot) {
            for psi in states.iter_mut() {
                self.evolver.step_interval(psi, *om, *pd, pulse.dt);
            }
        }
    }

    /// Co-states at every grid time t_0..t_n, propagated backwards under `pulse`.
    fn backward(&mut self, pulse: &ControlPulse, chi_t: Vec<Vec<C64>>) -> Vec<Vec<Vec<C64>>> {
        let n = pulse.n_steps();
        let mut out = vec![Vec::new(); n + 1];
        let mut chi = chi_t;
        out[n] = chi.clone();
        for j in (0..n).rev() {
            for c in chi.iter_mut() {
                self.evolver
                    .step_interval(c, pulse.omega[j], pulse.phidot[j], -pulse.dt);
            }
            out[j] = chi.clone();
        }
        out
    }
}

/// Ensemble-average functional of `pulse` over `points`.
pub fn ensemble_value(
    pulse: &ControlPulse,
    points: &[EnsemblePoint],
    functional: &Functional,
) -> Result<f64> {
    functional.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    let init = functional.initial_states()?;
    let values: Vec<f64> = points
        .par_iter()
        .map(|&p| {
            let mut m = Member::new(functional, p);
            let mut states = init.clone();
            m.forward(pulse, &mut states);
            functional.value(&states)
        })
        .collect();
    let total: f64 = values.iter().sum();
    let v = total / points.len() as f64;
    if !v.is_finite() {
        return Err(Error::NumericalFailure("non-finite functional".into()));
    }
    Ok(v)
}

/// Raw first-order gradient g(t_j) = Σ_m Im⟨χ_m|∂H|ψ_m⟩ / M on the old pulse,
/// before the update shape and λ_a. Returns (g_u, g_v) per interval.
pub fn krotov_gradient(
    pulse: &ControlPulse,
    points: &[EnsemblePoint],
    functional: &Functional,
) -> Result<Vec<(f64, f64)>> {
    functional.validate()?;
    let init = functional.initial_states()?;
    let m_inv = 1.0 / points.len() as f64;
    let per_member: Vec<Vec<(f64, f64)>> = points
        .par_iter()
        .map(|&p| {
            let mut m = Member::new(functional, p);
            let mut fin = init.clone();
            m.forward(pulse, &mut fin);
            let chis = m.backward(pulse, functional.costates(&fin));
            let mut states = init.clone();
            let mut g = Vec::with_capacity(pulse.n_steps());
            for j in 0..pulse.n_steps() {
                let (mut gu, mut gv) = (0.0, 0.0);
                for (chi, psi) in chis[j].iter().zip(&states) {
                    let (a, b) = coupling_gradient(p.mu, chi, psi);
                    gu += a;
                    gv += b;
                }
                g.push((gu, gv));
                for psi in states.iter_mut() {
                    m.evolver
                        .step_interval(psi, pulse.omega[j], pulse.phidot[j], pulse.dt);
                }
            }
            g
        })
        .collect();
    let n = pulse.n_steps();
    Ok((0..n)
        .map(|j| {
            per_member.iter().fold((0.0, 0.0), |acc, g| {
                (acc.0 + g[j].0 * m_inv, acc.1 + g[j].1 * m_inv)
            })
        })
        .collect())
}

/// λ_a such that the first update's largest |ΔΩ| equals
/// `auto_fraction`·omega_max.
pub fn auto_lambda(
    pulse: &ControlPulse,
    points: &[EnsemblePoint],
    functional: &Functional,
    constraints: &ControlConstraints,
) -> Result<f64> {
    let g = krotov_gradient(pulse, points, functional)?;
    let dur = pulse.duration();
    let peak = g
        .iter()
        .enumerate()
        .map(|(j, (u, v))| {
            let s = constraints
                .update_shape
                .value((j as f64 + 0.5) * pulse.dt / dur);
            s * u.hypot(*v)
        })
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::NumericalFailure(
            "vanishing gradient; the guess has no overlap with the target dynamics".into(),
        ));
    }
    Ok(peak / (constraints.auto_fraction * constraints.omega_max))
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    /// Pulse after projection onto the constraints.
    pub pulse: ControlPulse,
    /// Functional of the input pulse.
    pub j_before: f64,
    /// Functional after the sweep, before projection.
    pub j_after: f64,
    pub max_update: f64,
    pub lambda_a: f64,
    pub projection: Projection,
}

/// One Krotov iteration over a batch. Fails with [`Error::NonMonotonic`] if
/// the unprojected update raises the functional by more than 1e-12.
pub fn krotov_iterate(
    pulse: &ControlPulse,
    batch: &[EnsemblePoint],
    functional: &Functional,
    constraints: &ControlConstraints,
) -> Result<IterationResult> {
    functional.validate()?;
    constraints.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let lambda = match constraints.lambda_a {
        Some(l) => l,
        None => auto_lambda(pulse, batch, functional, constraints)?,
    };
    let init = functional.initial_states()?;
    let m_inv = 1.0 / batch.len() as f64;

    // Old-pulse forward to the final time, then co-states backwards.
    let prepared: Vec<(Member, f64, Vec<Vec<Vec<C64>>>)> = batch
        .par_iter()
        .map(|&p| {
            let mut m = Member::new(functional, p);
            let mut fin = init.clone();
            m.forward(pulse, &mut fin);
            let j = functional.value(&fin);
            let mut chi_t = functional.costates(&fin);
            for c in chi_t.iter_mut() {
                c.iter_mut().for_each(|x| *x *= m_inv);
            }
            let chis = m.backward(pulse, chi_t);
            (m, j, chis)
        })
        .collect();
    let j_before = prepared.iter().map(|(_, j, _)| j).sum::<f64>() * m_inv;

    let mut members: Vec<(Member, Vec<Vec<Vec<C64>>>, Vec<Vec<C64>>)> = prepared
        .into_iter()
        .map(|(m, _, chis)| (m, chis, init.clone()))
        .collect();
    let mut new = pulse.clone();
    let dur = pulse.duration();
    let mut max_update = 0.0f64;
    for j in 0..pulse.n_steps() {
        let (mut gu, mut gv) = (0.0, 0.0);
        for (m, chis, states) in &members {
            for (chi, psi) in chis[j].iter().zip(states) {
                let (a, b) = coupling_gradient(m.point.mu, chi, psi);
                gu += a;
                gv += b;
            }
        }
        let s = constraints
            .update_shape
            .value((j as f64 + 0.5) * pulse.dt / dur)
            / lambda;
        let delta = C64::new(s * gu, s * gv);
        max_update = max_update.max(delta.norm());
        new.omega[j] += delta;
        for (m, _, states) in members.iter_mut() {
            for psi in states.iter_mut() {
                m.evolver.step_interval(psi, new.omega[j], new.phidot[j], new.dt);
            }
        }
    }
    let j_after = members
        .iter()
        .map(|(_, _, states)| functional.value(states))
        .sum::<f64>()
        * m_inv;
    if !j_after.is_finite() || new.omega.iter().any(|w| !w.is_finite()) {
        return Err(Error::NumericalFailure("non-finite pulse after update".into()));
    }
    if j_after > j_before + MONOTONIC_TOL {
        return Err(Error::NonMonotonic {
            before: j_before,
            after: j_after,
            lambda_a: lambda,
        });
    }
    let projection = project(&mut new.omega, new.dt, constraints);
    new.amplitude_bound = Some(constraints.omega_max);
    Ok(IterationResult {
        pulse: new,
        j_before,
        j_after,
        max_update,
        lambda_a: lambda,
        projection,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters_per_batch: usize,
    /// Upper bound on passes over all batches.
    pub max_passes: usize,
    /// Stop once a pass improves the full-ensemble functional by less than
    /// this fraction.
    pub rel_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iters_per_batch: 1000,
            max_passes: 10,
            rel_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iteration: usize,
    pub pass: usize,
    pub batch: usize,
    pub batch_iteration: usize,
    pub j_before: f64,
    pub j_after: f64,
    pub lambda_a: f64,
    pub max_update: f64,
    pub wall_time: f64,
    pub clipped: bool,
    pub rescaled: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRecord {
    pub rows: Vec<RecordRow>,
    /// Full-ensemble functional after each pass, starting with the guess.
    pub pass_values: Vec<f64>,
    pub converged: bool,
    /// λ_a doublings forced by non-monotonic steps.
    pub lambda_increases: usize,
}

impl OptimizationRecord {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "pass",
            "batch",
            "batch_iteration",
            "j_before",
            "j_after",
            "lambda_a",
            "max_update",
            "wall_time",
            "clipped",
            "rescaled",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.pass.to_string(),
                r.batch.to_string(),
                r.batch_iteration.to_string(),
                fmt_f64(r.j_before),
                fmt_f64(r.j_after),
                fmt_f64(r.lambda_a),
                fmt_f64(r.max_update),
                fmt_f64(r.wall_time),
                r.clipped.to_string(),
                r.rescaled.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Rows where the pre-projection functional went up by more than `tol`.
    pub fn monotonicity_violations(&self, tol: f64) -> usize {
        self.rows
            .iter()
            .filter(|r| r.j_after > r.j_before + tol)
            .count()
    }
}

/// Loops over the batches of `spec`, running `iters_per_batch` iterations on
/// each, until a full pass stops improving. Returns the best pulse seen at
/// the end of a pass.
pub fn optimize(
    initial: &ControlPulse,
    spec: &EnsembleSpec,
    functional: &Functional,
    constraints: &ControlConstraints,
    schedule: &Schedule,
) -> Result<(ControlPulse, OptimizationRecord)> {
    optimize_with(initial, spec, functional, constraints, schedule, |_| {})
}

/// As [`optimize`], calling `progress` after every iteration.
pub fn optimize_with<F: FnMut(&RecordRow)>(
    initial: &ControlPulse,
    spec: &EnsembleSpec,
    functional: &Functional,
    constraints: &ControlConstraints,
    schedule: &Schedule,
    mut progress: F,
) -> Result<(ControlPulse, OptimizationRecord)> {
    functional.validate()?;
    constraints.validate()?;
    if schedule.iters_per_batch == 0 || schedule.max_passes == 0 {
        return Err(Error::InvalidParameter(
            "iters_per_batch and max_passes must be positive".into(),
        ));
    }
    let batches = sample_ensemble(spec)?;
    let all: Vec<EnsemblePoint> = batches.iter().flatten().copied().collect();
    let start = Instant::now();

    let mut pulse = initial.clone();
    let mut c = *constraints;
    if c.lambda_a.is_none() {
        c.lambda_a = Some(auto_lambda(&pulse, &batches[0], functional, constraints)?);
    }
    let mut record = OptimizationRecord::default();
    let mut best = pulse.clone();
    let mut best_value = ensemble_value(&pulse, &all, functional)?;
    record.pass_values.push(best_value);
    let mut iteration = 0;

    for pass in 0..schedule.max_passes {
        for (b, batch) in batches.iter().enumerate() {
            for k in 0..schedule.iters_per_batch {
                let res = loop {
                    match krotov_iterate(&pulse, batch, functional, &c) {
                        Ok(r) => break r,
                        Err(Error::NonMonotonic { lambda_a, .. })
                            if record.lambda_increases < 60 =>
                        {
                            c.lambda_a = Some(2.0 * lambda_a);
                            record.lambda_increases += 1;
                        }
                        Err(e) => return Err(e),
                    }
                };
                iteration += 1;
                let row = RecordRow {
                    iteration,
                    pass,
                    batch: b,
                    batch_iteration: k,
                    j_before: res.j_before,
                    j_after: res.j_after,
                    lambda_a: res.lambda_a,
                    max_update: res.max_update,
                    wall_time: start.elapsed().as_secs_f64(),
                    clipped: res.projection.clipped,
                    rescaled: res.projection.rescaled,
                };
                progress(&row);
                record.rows.push(row);
                pulse = res.pulse;
            }
        }
        let value = ensemble_value(&pulse, &all, functional)?;
        let prev = *record.pass_values.last().unwrap_or(&value);
        record.pass_values.push(value);
        if value < best_value {
            best_value = value;
            best = pulse.clone();
        }
        if prev > 0.0 && (prev - value) / prev < schedule.rel_tol {
            record.converged = true;
            break;
        }
    }
    Ok((best, record))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub index: usize,
    /// Krotov update direction (∝ −∂J/∂u, −∂J/∂v).
    pub krotov: (f64, f64),
    /// Central finite differences of −J.
    pub finite_difference: (f64, f64),
}

impl GradientSample {
    /// Sign agreement of both quadratures; finite differences smaller than
    /// `floor` in magnitude are treated as zero and always agree.
    pub fn signs_agree(&self, floor: f64) -> bool {
        let same = |a: f64, b: f64| b.abs() < floor || a * b > 0.0;
        same(self.krotov.0, self.finite_difference.0) && same(self.krotov.1, self.finite_difference.1)
    }
}

/// Compares the first-iteration Krotov direction with finite differences of
/// the functional at the given pulse intervals, for a single ensemble member.
pub fn gradient_check(
    pulse: &ControlPulse,
    point: EnsemblePoint,
    functional: &Functional,
    indices: &[usize],
    eps: f64,
) -> Result<Vec<GradientSample>> {
    let g = krotov_gradient(pulse, &[point], functional)?;
    let points = [point];
    indices
        .iter()
        .map(|&j| {
            if j >= pulse.n_steps() {
                return Err(Error::InvalidParameter(format!("index {j} out of range")));
            }
            let fd = |d: C64| -> Result<f64> {
                let mut p = pulse.clone();
                p.omega[j] += d;
                let plus = ensemble_value(&p, &points, functional)?;
                p.omega[j] -= d * 2.0;
                let minus = ensemble_value(&p, &points, functional)?;
                Ok(-(plus - minus) / (2.0 * eps))
            };
            Ok(GradientSample {
                index: j,
                krotov: g[j],
                finite_difference: (fd(C64::new(eps, 0.0))?, fd(C64::new(0.0, eps))?),
            })
        })
        .collect()
}

/// Pulses that can be optimised from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Split,
    Swap,
    Amplify,
    Deamplify,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Target::Split),
            "swap" => Ok(Target::Swap),
            "amplify" => Ok(Target::Amplify),
            "deamplify" => Ok(Target::Deamplify),
            other => Err(Error::InvalidParameter(format!("unknown target '{other}'"))),
        }
    }
}

impl Target {
    pub fn functional(self, kick_level: i32) -> Functional {
        match self {
            Target::Split => Functional::split(),
            Target::Swap => Functional::swap(),
            Target::Amplify => Functional::transfer(1, kick_level),
            Target::Deamplify => Functional::transfer(kick_level, 1),
        }
    }

    /// Analytic starting point: Blackman π/2 or π pulse on 0 ↔ 1, or the RAP
    /// transfer between 1 and `kick_level`.
    pub fn initial_guess(self, rap: &RapParams, kick_level: i32, dt: f64) -> Result<ControlPulse> {
        match self {
            Target::Split => rabi_pulse(RabiKind::HalfPi, 0, 1.0, dt),
            Target::Swap => rabi_pulse(RabiKind::Pi, 0, 1.0, dt),
            Target::Amplify => rap_pulse_default(&rap.between(1, kick_level), dt),
            Target::Deamplify => rap_pulse_default(&rap.between(kick_level, 1), dt),
        }
    }
}

/// Duration of the optimised split and swap pulses.
pub const GATE_DURATION: f64 = T_RABI;
