//! Momentum-ladder Hamiltonian in dimensionless units.
//!
//! Energies are measured in units of the two-photon recoil frequency ω_k
//! (ħ = 1) and times in 1/ω_k. Level `n` is the momentum state
//! p₀ + n·2ħk. The retained window `[n_min, n_max]` truncates the
//! otherwise infinite ladder.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pulses::ControlPulse;

pub type C64 = Complex64;

/// Default truncation for the N = 10 schemes: physical levels 0..=10 plus
/// four guard levels on each side.
pub const DEFAULT_N_MIN: i32 = -4;
pub const DEFAULT_N_MAX: i32 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderParams {
    pub n_min: i32,
    pub n_max: i32,
    /// Amplitude scaling μ applied to every coupling.
    pub mu: f64,
    /// Initial momentum β = p₀/2ħk.
    pub beta: f64,
}

impl Default for LadderParams {
    fn default() -> Self {
        Self {
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
            mu: 1.0,
            beta: 0.0,
        }
    }
}

impl LadderParams {
    pub fn new(n_min: i32, n_max: i32, mu: f64, beta: f64) -> Result<Self> {
        let p = Self {
            n_min,
            n_max,
            mu,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Default window with the given μ and β.
    pub fn with(mu: f64, beta: f64) -> Self {
        Self {
            mu,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min >= self.n_max {
            return Err(Error::InvalidParameter(format!(
                "n_min ({}) must be below n_max ({})",
                self.n_min, self.n_max
            )));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidParameter("beta must be finite".into()));
        }
        Ok(())
    }

    /// Checks that `lo..=hi` sits inside the window with at least `guards`
    /// spare levels on each side.
    pub fn check_guards(&self, lo: i32, hi: i32, guards: i32) -> Result<()> {
        if lo - guards < self.n_min || hi + guards > self.n_max {
            return Err(Error::InvalidParameter(format!(
                "levels {lo}..={hi} need {guards} guard levels inside [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        (self.n_max - self.n_min + 1) as usize
    }

    pub fn levels(&self) -> impl Iterator<Item = i32> {
        self.n_min..=self.n_max
    }

    pub fn index(&self, level: i32) -> Option<usize> {
        (self.n_min..=self.n_max)
            .contains(&level)
            .then(|| (level - self.n_min) as usize)
    }
}

/// Approximate level energy n² + 2nβ + nφ̇ (the β² term and the common
/// light shift only contribute a global phase and are dropped).
pub fn energy(n: i32, beta: f64, phidot: f64) -> f64 {
    let n = n as f64;
    n * n + 2.0 * n * beta + n * phidot
}

/// Complex amplitudes over the levels `n_min..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub n_min: i32,
    pub amplitudes: Vec<C64>,
}

impl StateVector {
    /// The momentum eigenstate |level⟩.
    pub fn basis(params: &LadderParams, level: i32) -> Result<Self> {
        let idx = params.index(level).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "level {level} outside window [{}, {}]",
                params.n_min, params.n_max
            ))
        })?;
        let mut amplitudes = vec![C64::new(0.0, 0.0); params.dim()];
        amplitudes[idx] = C64::new(1.0, 0.0);
        Ok(Self {
            n_min: params.n_min,
            amplitudes,
        })
    }

    pub fn from_amplitudes(n_min: i32, amplitudes: Vec<C64>) -> Self {
        Self { n_min, amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn n_max(&self) -> i32 {
        self.n_min + self.amplitudes.len() as i32 - 1
    }

    pub fn amplitude(&self, level: i32) -> C64 {
        let i = level - self.n_min;
        if i < 0 || i as usize >= self.amplitudes.len() {
            C64::new(0.0, 0.0)
        } else {
            self.amplitudes[i as usize]
        }
    }

    pub fn population(&self, level: i32) -> f64 {
        self.amplitude(level).norm_sqr()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|a| a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes
            .iter()
            .all(|a| a.re.is_finite() && a.im.is_finite())
    }
}

/// Tridiagonal Hamiltonian at one instant: `diag` on the main diagonal,
/// `coupling` on the ⟨n|H|n+1⟩ band and its conjugate on ⟨n+1|H|n⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSample {
    pub n_min: i32,
    pub diag: Vec<f64>,
    pub coupling: C64,
}

impl HamiltonianSample {
    pub fn new(params: &LadderParams, omega: C64, phidot: f64) -> Self {
        let diag = params
            .levels()
            .map(|n| energy(n, params.beta, phidot))
            .collect();
        Self {
            n_min: params.n_min,
            diag,
            coupling: -params.mu * omega,
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// out = H·psi
    pub fn apply(&self, psi: &[C64], out: &mut [C64]) {
        tridiag_apply(&self.diag, self.coupling, psi, out);
    }

    /// Dense row-major matrix, for inspection and tests.
    pub fn to_dense(&self) -> Vec<Vec<C64>> {
        let d = self.dim();
        let mut m = vec![vec![C64::new(0.0, 0.0); d]; d];
        for i in 0..d {
            m[i][i] = C64::new(self.diag[i], 0.0);
            if i + 1 < d {
                m[i][i + 1] = self.coupling;
                m[i + 1][i] = self.coupling.conj();
            }
        }
        m
    }
}

/// Samples the Hamiltonian of `pulse` at time `t`.
pub fn sample_hamiltonian(
    params: &LadderParams,
    pulse: &ControlPulse,
    t: f64,
) -> Result<HamiltonianSample> {
    let i = pulse.index_at(t)?;
    Ok(HamiltonianSample::new(params, pulse.omega[i], pulse.phidot[i]))
}

#[inline]
pub(crate) fn tridiag_apply(diag: &[f64], c: C64, psi: &[C64], out: &mut [C64]) {
    let d = diag.len();
    let cc = c.conj();
    if d == 1 {
        out[0] = psi[0] * diag[0];
        return;
    }
    out[0] = psi[0] * diag[0] + c * psi[1];
    for i in 1..d - 1 {
        out[i] = psi[i] * diag[i] + c * psi[i + 1] + cc * psi[i - 1];
    }
    out[d - 1] = psi[d - 1] * diag[d - 1] + cc * psi[d - 2];
}
