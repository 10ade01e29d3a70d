//! Norm-preserving propagation on the truncated ladder.
//!
//! Each step applies exp(−iH·dt) for a piecewise-constant tridiagonal H,
//! evaluated with a Chebyshev expansion whose truncation error is kept
//! below 1e-15. Controls are sampled at interval midpoints (see
//! [`ControlPulse`]), which makes the scheme second-order accurate in dt.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{tridiag_apply, HamiltonianSample, LadderParams, StateVector, C64};
use crate::pulses::ControlPulse;

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_LEAKAGE_TOL: f64 = 1e-3;

const CHEB_TAIL: f64 = 1e-17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Largest integrator step; pulses sampled more coarsely are sub-stepped.
    pub dt: f64,
    /// Largest population tolerated in the two outermost levels.
    pub leakage_tol: f64,
    pub store_trajectory: bool,
    /// Record every `stride`-th step when storing a trajectory.
    pub stride: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            leakage_tol: DEFAULT_LEAKAGE_TOL,
            store_trajectory: false,
            stride: 1,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.leakage_tol > 0.0 && self.leakage_tol < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "leakage_tol must lie in (0, 1), got {}",
                self.leakage_tol
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn recording(mut self) -> Self {
        self.store_trajectory = true;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub n_min: i32,
    pub times: Vec<f64>,
    /// One row of |amplitude|² per recorded time.
    pub populations: Vec<Vec<f64>>,
    pub final_state: StateVector,
    /// Largest population seen in the two outermost levels.
    pub max_guard_population: f64,
    /// Set when `max_guard_population` exceeded the configured tolerance.
    pub leaked: bool,
}

impl Trajectory {
    /// CSV with columns `t,P_{n_min},…,P_{n_max}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.final_state.dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..dim).map(|i| format!("P_{}", self.n_min + i as i32)));
        w.write_record(&header)?;
        for (t, row) in self.times.iter().zip(&self.populations) {
            let mut rec = vec![fmt_f64(*t)];
            rec.extend(row.iter().map(|p| fmt_f64(*p)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Floats are written with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Chebyshev evaluator of exp(−iH·dt)·ψ for tridiagonal Hermitian H.
///
/// Holds scratch buffers and a cache of expansion coefficients keyed by the
/// (quantized) spectral radius, so repeated steps with similar H skip the
/// Bessel evaluation.
#[derive(Debug, Clone)]
pub struct Stepper {
    dim: usize,
    prev: Vec<C64>,
    cur: Vec<C64>,
    next: Vec<C64>,
    acc: Vec<C64>,
    shifted: Vec<f64>,
    cache: HashMap<u64, Vec<f64>>,
}

impl Stepper {
    pub fn new(dim: usize) -> Self {
        let z = C64::new(0.0, 0.0);
        Self {
            dim,
            prev: vec![z; dim],
            cur: vec![z; dim],
            next: vec![z; dim],
            acc: vec![z; dim],
            shifted: vec![0.0; dim],
            cache: HashMap::new(),
        }
    }

    /// ψ ← exp(−i·H·dt)·ψ with H = diag + coupling band. `dt` may be negative.
    pub fn step(&mut self, psi: &mut [C64], diag: &[f64], coupling: C64, dt: f64) {
        debug_assert_eq!(psi.len(), self.dim);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &d in diag {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let center = 0.5 * (lo + hi);
        // Gershgorin radius, rounded up so that nearby steps share coefficients.
        let radius = 0.5 * (hi - lo) + 2.0 * coupling.norm();
        let radius = ((radius * 64.0).ceil() + 1.0) / 64.0;
        let z = radius * dt.abs();
        let key = z.to_bits();
        if !self.cache.contains_key(&key) {
            if self.cache.len() > 4096 {
                self.cache.clear();
            }
            self.cache.insert(key, bessel_series(z));
        }
        let coeffs = &self.cache[&key];

        for (s, &d) in self.shifted.iter_mut().zip(diag) {
            *s = (d - center) / radius;
        }
        let c = coupling / radius;
        // Chebyshev recursion on X = (H − center)/radius.
        // exp(−i z s X) = J0 + 2 Σ (−i s)^k J_k(z) T_k(X), s = sign(dt)
        let phase_unit = if dt >= 0.0 {
            C64::new(0.0, -1.0)
        } else {
            C64::new(0.0, 1.0)
        };
        self.prev.copy_from_slice(psi);
        tridiag_apply(&self.shifted, c, &self.prev, &mut self.cur);
        let c0 = coeffs[0];
        let mut ph = phase_unit;
        let c1 = ph * (2.0 * coeffs.get(1).copied().unwrap_or(0.0));
        for i in 0..self.dim {
            self.acc[i] = self.prev[i] * c0 + self.cur[i] * c1;
        }
        for &jk in coeffs.iter().skip(2) {
            ph *= phase_unit;
            let ck = ph * (2.0 * jk);
            // next = 2 X cur − prev
            tridiag_apply(&self.shifted, c, &self.cur, &mut self.next);
            for i in 0..self.dim {
                let v = self.next[i] * 2.0 - self.prev[i];
                self.next[i] = v;
                self.acc[i] += v * ck;
            }
            std::mem::swap(&mut self.prev, &mut self.cur);
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        let global = C64::from_polar(1.0, -center * dt);
        for (p, a) in psi.iter_mut().zip(&self.acc) {
            *p = a * global;
        }
    }
}

/// J_0(z)..J_K(z) with K chosen so that the neglected tail is negligible.
fn bessel_series(z: f64) -> Vec<f64> {
    if z == 0.0 {
        return vec![1.0];
    }
    // Miller's backward recurrence, normalized with J0 + 2ΣJ_{2m} = 1.
    let start = (z + 20.0 + 8.0 * z.sqrt()).ceil() as usize;
    let start = start + start % 2;
    let mut j = vec![0.0f64; start + 2];
    j[start] = 1e-300;
    for k in (1..=start).rev() {
        j[k - 1] = (2.0 * k as f64 / z) * j[k] - j[k + 1];
        if j[k - 1].abs() > 1e250 {
            for v in j.iter_mut().skip(k - 1) {
                *v *= 1e-250;
            }
        }
    }
    let norm: f64 = j[0] + 2.0 * j.iter().skip(2).step_by(2).sum::<f64>();
    for v in j.iter_mut() {
        *v /= norm;
    }
    let mut k_max = j.len() - 1;
    while k_max > 1 && (k_max as f64) > z && j[k_max].abs() < CHEB_TAIL {
        k_max -= 1;
    }
    j.truncate(k_max + 1);
    j
}

/// Reusable propagation workspace for one set of ladder parameters.
#[derive(Debug, Clone)]
pub struct Evolver {
    params: LadderParams,
    stepper: Stepper,
    n_sq: Vec<f64>,
    n_lin: Vec<f64>,
    diag: Vec<f64>,
}

impl Evolver {
    pub fn new(params: LadderParams) -> Self {
        let dim = params.dim();
        let n_lin: Vec<f64> = params.levels().map(|n| n as f64).collect();
        Self {
            params,
            stepper: Stepper::new(dim),
            n_sq: n_lin.iter().map(|n| n * n).collect(),
            n_lin,
            diag: vec![0.0; dim],
        }
    }

    pub fn params(&self) -> &LadderParams {
        &self.params
    }

    /// One interval of constant control.
    #[inline]
    pub fn step_interval(&mut self, psi: &mut [C64], omega: C64, phidot: f64, dt: f64) {
        let shift = 2.0 * self.params.beta + phidot;
        for ((d, n2), n) in self.diag.iter_mut().zip(&self.n_sq).zip(&self.n_lin) {
            *d = n2 + n * shift;
        }
        let coupling = -self.params.mu * omega;
        self.stepper.step(psi, &self.diag, coupling, dt);
    }

    /// Propagates through the whole pulse, calling `monitor(i, psi)` after
    /// step `i` (i counts integrator steps, starting at 1).
    pub fn forward<F: FnMut(usize, &[C64])>(
        &mut self,
        psi: &mut [C64],
        pulse: &ControlPulse,
        max_dt: f64,
        mut monitor: F,
    ) {
        let sub = substeps(pulse.dt, max_dt);
        let h = pulse.dt / sub as f64;
        let mut count = 0;
        for (om, pd) in pulse.omega.iter().zip(&pulse.phidot) {
            for _ in 0..sub {
                self.step_interval(psi, *om, *pd, h);
                count += 1;
                monitor(count, psi);
            }
        }
    }

    /// ψ ← U(T, 0)†·ψ, i.e. propagation backwards from the pulse end to its start.
    pub fn backward(&mut self, psi: &mut [C64], pulse: &ControlPulse, max_dt: f64) {
        let sub = substeps(pulse.dt, max_dt);
        let h = pulse.dt / sub as f64;
        for (om, pd) in pulse.omega.iter().zip(&pulse.phidot).rev() {
            for _ in 0..sub {
                self.step_interval(psi, *om, *pd, -h);
            }
        }
    }
}

pub(crate) fn substeps(pulse_dt: f64, max_dt: f64) -> usize {
    ((pulse_dt / max_dt) - 1e-9).ceil().max(1.0) as usize
}

pub(crate) fn guard_population(psi: &[C64]) -> f64 {
    let last = psi.len() - 1;
    psi[0].norm_sqr() + if last > 0 { psi[last].norm_sqr() } else { 0.0 }
}

/// exp(−i·H·dt)·state for a single piecewise-constant interval.
pub fn step(state: &StateVector, h: &HamiltonianSample, dt: f64) -> Result<StateVector> {
    if state.dim() != h.dim() {
        return Err(Error::InvalidParameter(format!(
            "state has {} levels, Hamiltonian {}",
            state.dim(),
            h.dim()
        )));
    }
    if !state.is_finite() || !dt.is_finite() {
        return Err(Error::NumericalFailure("non-finite input to step".into()));
    }
    let mut out = state.clone();
    Stepper::new(state.dim()).step(&mut out.amplitudes, &h.diag, h.coupling, dt);
    if !out.is_finite() {
        return Err(Error::NumericalFailure("non-finite amplitudes after step".into()));
    }
    Ok(out)
}

/// Propagates `state` through `pulse` under the ladder Hamiltonian.
///
/// Leakage into the outermost levels is flagged in the result rather than
/// treated as an error.
pub fn propagate(
    state: &StateVector,
    params: &LadderParams,
    pulse: &ControlPulse,
    config: &PropagationConfig,
) -> Result<Trajectory> {
    params.validate()?;
    config.validate()?;
    if state.dim() != params.dim() || state.n_min != params.n_min {
        return Err(Error::InvalidParameter(
            "state does not match the ladder window".into(),
        ));
    }
    let norm = state.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "state must be normalized, |ψ| = {norm}"
        )));
    }
    let mut evolver = Evolver::new(*params);
    let mut psi = state.amplitudes.clone();
    let sub = substeps(pulse.dt, config.dt);
    let h = pulse.dt / sub as f64;
    let mut times = Vec::new();
    let mut populations = Vec::new();
    if config.store_trajectory {
        times.push(0.0);
        populations.push(state.populations());
    }
    let mut max_guard = guard_population(&psi);
    let stride = config.stride;
    let record = config.store_trajectory;
    evolver.forward(&mut psi, pulse, config.dt, |i, p| {
        let g = guard_population(p);
        if g > max_guard {
            max_guard = g;
        }
        if record && i % stride == 0 {
            times.push(i as f64 * h);
            populations.push(p.iter().map(|a| a.norm_sqr()).collect());
        }
    });
    let final_state = StateVector::from_amplitudes(params.n_min, psi);
    if !final_state.is_finite() {
        return Err(Error::NumericalFailure(
            "non-finite amplitudes during propagation".into(),
        ));
    }
    Ok(Trajectory {
        n_min: params.n_min,
        times,
        populations,
        final_state,
        max_guard_population: max_guard,
        leaked: max_guard > config.leakage_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::energy;
    use std::f64::consts::PI;

    fn dense_expm_times(h: &HamiltonianSample, dt: f64, psi: &[C64]) -> Vec<C64> {
        // Independent route: Taylor series with scaling and squaring on the dense matrix.
        let m = h.to_dense();
        let d = m.len();
        let s = 12;
        let scale = dt / (1 << s) as f64;
        let a: Vec<Vec<C64>> = m
            .iter()
            .map(|r| r.iter().map(|x| x * C64::new(0.0, -scale)).collect())
            .collect();
        let mut e = vec![vec![C64::new(0.0, 0.0); d]; d];
        let mut term = e.clone();
        for i in 0..d {
            e[i][i] = C64::new(1.0, 0.0);
            term[i][i] = C64::new(1.0, 0.0);
        }
        let matmul = |x: &Vec<Vec<C64>>, y: &Vec<Vec<C64>>| {
            let mut r = vec![vec![C64::new(0.0, 0.0); d]; d];
            for i in 0..d {
                for k in 0..d {
                    let xik = x[i][k];
                    for j in 0..d {
                        r[i][j] += xik * y[k][j];
                    }
                }
            }
            r
        };
        for k in 1..20 {
            term = matmul(&term, &a);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= k as f64;
                }
            }
            for i in 0..d {
                for j in 0..d {
                    e[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            e = matmul(&e, &e);
        }
        (0..d)
            .map(|i| (0..d).map(|j| e[i][j] * psi[j]).sum())
            .collect()
    }

    #[test]
    fn bessel_series_matches_known_values() {
        let j = bessel_series(1.0);
        assert!((j[0] - 0.765_197_686_557_966_6).abs() < 1e-15);
        assert!((j[1] - 0.440_050_585_744_933_5).abs() < 1e-15);
        assert!((j[2] - 0.114_903_484_931_900_5).abs() < 1e-15);
        let j = bessel_series(10.0);
        assert!((j[0] + 0.245_935_764_451_348_3).abs() < 1e-14);
        assert!((j[5] + 0.234_061_528_186_793_7).abs() < 1e-14);
    }

    #[test]
    fn zero_hamiltonian_leaves_state_unchanged() {
        let params = LadderParams::default();
        let mut s = StateVector::basis(&params, 3).unwrap();
        s.amplitudes[8] = C64::new(0.0, 1.0);
        let h = HamiltonianSample {
            n_min: params.n_min,
            diag: vec![0.0; params.dim()],
            coupling: C64::new(0.0, 0.0),
        };
        let out = step(&s, &h, 0.37).unwrap();
        for (a, b) in out.amplitudes.iter().zip(&s.amplitudes) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn diagonal_hamiltonian_gives_phase_only() {
        let params = LadderParams::with(1.0, 0.13);
        let h = HamiltonianSample::new(&params, C64::new(0.0, 0.0), -3.0);
        for level in [-4, 0, 5, 14] {
            let s = StateVector::basis(&params, level).unwrap();
            let dt = 0.05;
            let out = step(&s, &h, dt).unwrap();
            let expected = C64::from_polar(1.0, -energy(level, 0.13, -3.0) * dt);
            assert!((out.amplitude(level) - expected).norm() < 1e-13);
            assert!((out.population(level) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn chebyshev_step_matches_dense_exponential() {
        let params = LadderParams::with(1.07, 0.21);
        let h = HamiltonianSample::new(&params, C64::new(0.6, -0.4), -7.3);
        let mut s = StateVector::basis(&params, 2).unwrap();
        s.amplitudes[5] = C64::new(0.3, 0.4);
        let n = s.norm();
        s.amplitudes.iter_mut().for_each(|a| *a /= n);
        for dt in [0.01, 0.1, -0.05] {
            let ours = step(&s, &h, dt).unwrap();
            let reference = dense_expm_times(&h, dt, &s.amplitudes);
            for (a, b) in ours.amplitudes.iter().zip(&reference) {
                assert!((a - b).norm() < 1e-11, "dt={dt}: {a} vs {b}");
            }
            assert!((ours.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let params = LadderParams::default();
        let mut s = StateVector::basis(&params, 0).unwrap();
        s.amplitudes[1] = C64::new(f64::NAN, 0.0);
        let h = HamiltonianSample::new(&params, C64::new(0.1, 0.0), -1.0);
        assert!(matches!(step(&s, &h, 0.01), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn resonant_pi_transfer_on_two_levels() {
        // Restricted ladder {0, 1}: P1(t) = sin²(∫Ω); area π/2 is a full transfer.
        let params = LadderParams::new(0, 1, 1.0, 0.0).unwrap();
        let duration = 10.0;
        let omega = PI / 2.0 / duration;
        let pulse = ControlPulse::constant(C64::new(omega, 0.0), -1.0, duration, 0.01).unwrap();
        let s = StateVector::basis(&params, 0).unwrap();
        let tr = propagate(&s, &params, &pulse, &PropagationConfig::default()).unwrap();
        assert!((tr.final_state.population(1) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_pulse_keeps_populations() {
        let params = LadderParams::default();
        let pulse = ControlPulse::constant(C64::new(0.0, 0.0), -1.0, 7.0, 0.01).unwrap();
        let s = StateVector::basis(&params, 0).unwrap();
        let tr = propagate(&s, &params, &pulse, &PropagationConfig::default().recording()).unwrap();
        let err = (tr.final_state.population(0) - 1.0).abs();
        assert!(err < 1e-12, "{err}");
        assert_eq!(tr.times.len(), pulse.n_steps() + 1);
        assert!(!tr.leaked);
    }

    #[test]
    fn leakage_is_flagged_not_fatal() {
        let params = LadderParams::new(-1, 2, 1.0, 0.0).unwrap();
        let pulse = ControlPulse::constant(C64::new(0.5, 0.0), -1.0, 5.0, 0.01).unwrap();
        let s = StateVector::basis(&params, 0).unwrap();
        let tr = propagate(&s, &params, &pulse, &PropagationConfig::default()).unwrap();
        assert!(tr.leaked);
        assert!((tr.final_state.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_state_is_rejected() {
        let params = LadderParams::default();
        let mut s = StateVector::basis(&params, 0).unwrap();
        s.amplitudes[0] = C64::new(2.0, 0.0);
        let pulse = ControlPulse::constant(C64::new(0.0, 0.0), 0.0, 1.0, 0.01).unwrap();
        assert!(propagate(&s, &params, &pulse, &PropagationConfig::default()).is_err());
    }

    #[test]
    fn trajectory_csv_has_level_columns() {
        let params = LadderParams::new(-1, 1, 1.0, 0.0).unwrap();
        let pulse = ControlPulse::constant(C64::new(0.1, 0.0), -1.0, 0.05, 0.01).unwrap();
        let s = StateVector::basis(&params, 0).unwrap();
        let tr = propagate(&s, &params, &pulse, &PropagationConfig::default().recording()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,P_-1,P_0,P_1");
        assert_eq!(text.lines().count(), 1 + pulse.n_steps() + 1);
    }
}
