//! Full interferometer sequences: splitting, amplification, kick slots for the
//! free-flight phase, central swap, de-amplification and recombination.
//!
//! Free flight is not simulated. Each kick slot multiplies the amplitude of
//! the maximally separated level by e^{i·w·φ}. The two slots see opposite
//! arms at that level (the central swap exchanges them), so the default
//! weights +1 and −1 build up a differential phase of 2φ and the ideal
//! fringe reads P₀(φ) = cos²(φ), with its minimum at φ = π/2.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderParams, StateVector, C64};
use crate::propagate::{
    fmt_f64, guard_population, substeps, Evolver, PropagationConfig, Trajectory, DEFAULT_DT,
};
use crate::pulses::{
    rabi_pulse, rap_pulse_default, ControlPulse, RabiKind, RapParams, DEFAULT_CORRECTION,
};

/// Highest level reached by the schemes.
pub const N_SEPARATION: i32 = 10;
/// Kick angle at which P_min is evaluated.
pub const P_MIN_PHASE: f64 = PI / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Rabi,
    Rap,
    Oct,
    Custom,
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchemeKind::Rabi => "rabi",
            SchemeKind::Rap => "rap",
            SchemeKind::Oct => "oct",
            SchemeKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rabi" => Ok(SchemeKind::Rabi),
            "rap" => Ok(SchemeKind::Rap),
            "oct" => Ok(SchemeKind::Oct),
            "custom" => Ok(SchemeKind::Custom),
            other => Err(Error::InvalidParameter(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Kick slot: `amplitude[level] *= exp(i·weight·φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseKick {
    pub level: i32,
    pub weight: f64,
}

impl PhaseKick {
    pub fn apply(&self, psi: &mut StateVector, phi: f64) {
        let i = self.level - psi.n_min;
        if i >= 0 && (i as usize) < psi.dim() {
            psi.amplitudes[i as usize] *= C64::from_polar(1.0, self.weight * phi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Pulse(ControlPulse),
    Kick(PhaseKick),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pub name: SchemeKind,
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn new(name: SchemeKind) -> Self {
        Self {
            name,
            segments: Vec::new(),
        }
    }

    pub fn pulse(mut self, p: ControlPulse) -> Self {
        self.segments.push(Segment::Pulse(p));
        self
    }

    pub fn pulses(mut self, ps: impl IntoIterator<Item = ControlPulse>) -> Self {
        self.segments.extend(ps.into_iter().map(Segment::Pulse));
        self
    }

    pub fn kick(mut self, level: i32, weight: f64) -> Self {
        self.segments.push(Segment::Kick(PhaseKick { level, weight }));
        self
    }

    /// Kicks take no time.
    pub fn duration(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Pulse(p) => p.duration(),
                Segment::Kick(_) => 0.0,
            })
            .sum()
    }

    pub fn n_pulses(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Pulse(_)))
            .count()
    }

    pub fn kicks(&self) -> Vec<PhaseKick> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Kick(k) => Some(*k),
                Segment::Pulse(_) => None,
            })
            .collect()
    }

    /// Start times of the kick slots.
    pub fn kick_times(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::new();
        for s in &self.segments {
            match s {
                Segment::Pulse(p) => t += p.duration(),
                Segment::Kick(_) => out.push(t),
            }
        }
        out
    }

    /// Differential phase between the arms per unit kick angle, assuming
    /// successive slots act on alternating arms.
    pub fn phase_factor(&self) -> f64 {
        self.kicks()
            .iter()
            .enumerate()
            .map(|(j, k)| if j % 2 == 0 { k.weight } else { -k.weight })
            .sum::<f64>()
            .abs()
    }

    pub fn max_amplitude(&self) -> f64 {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Pulse(p) => Some(p.max_amplitude()),
                Segment::Kick(_) => None,
            })
            .fold(0.0, f64::max)
    }
}

/// Settings shared by the scheme builders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub dt: f64,
    /// Amplitude factor for π/2 and π pulses relative to the two-level value.
    pub correction: f64,
    /// RAP parameters; only the switch-on and chirp magnitude are used, the
    /// endpoints are set per pulse.
    pub rap: RapParams,
    pub kick_level: i32,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            correction: DEFAULT_CORRECTION,
            rap: RapParams::tuned(),
            kick_level: N_SEPARATION,
        }
    }
}

fn rabi_train(
    kind: RabiKind,
    levels: impl IntoIterator<Item = i32>,
    cfg: &SchemeConfig,
) -> Result<Vec<ControlPulse>> {
    levels
        .into_iter()
        .map(|n0| rabi_pulse(kind, n0, cfg.correction, cfg.dt))
        .collect()
}

/// π/2 and π pulses only: split, climb to |10⟩ (kick), descend, swap |0⟩ ↔ |1⟩,
/// climb again (kick), descend, recombine. 39 pulses of 15/ω_k.
pub fn build_rabi_scheme(cfg: &SchemeConfig) -> Result<PulseSequence> {
    let n = cfg.kick_level;
    let up = || rabi_train(RabiKind::Pi, 1..n, cfg);
    let down = || rabi_train(RabiKind::Pi, (1..n).rev(), cfg);
    let half = || rabi_pulse(RabiKind::HalfPi, 0, cfg.correction, cfg.dt);
    Ok(PulseSequence::new(SchemeKind::Rabi)
        .pulse(half()?)
        .pulses(up()?)
        .kick(n, 1.0)
        .pulses(down()?)
        .pulse(rabi_pulse(RabiKind::Pi, 0, cfg.correction, cfg.dt)?)
        .pulses(up()?)
        .kick(n, -1.0)
        .pulses(down()?)
        .pulse(half()?))
}

/// π/2 and π pulses for splitting and the central swap, RAP between |2⟩ and
/// |10⟩ for the large momentum transfer.
pub fn build_rap_scheme(cfg: &SchemeConfig) -> Result<PulseSequence> {
    let n = cfg.kick_level;
    let pi = |n0| rabi_pulse(RabiKind::Pi, n0, cfg.correction, cfg.dt);
    let half = || rabi_pulse(RabiKind::HalfPi, 0, cfg.correction, cfg.dt);
    let up = || rap_pulse_default(&cfg.rap.between(2, n), cfg.dt);
    let down = || rap_pulse_default(&cfg.rap.between(n, 2), cfg.dt);
    Ok(PulseSequence::new(SchemeKind::Rap)
        .pulse(half()?)
        .pulse(pi(1)?)
        .pulse(up()?)
        .kick(n, 1.0)
        .pulse(down()?)
        .pulse(pi(1)?)
        .pulse(pi(0)?)
        .pulse(pi(1)?)
        .pulse(up()?)
        .kick(n, -1.0)
        .pulse(down()?)
        .pulse(pi(1)?)
        .pulse(half()?))
}

/// Optimized `split` (|0⟩ → (|0⟩ + i|1⟩)/√2, also used to recombine) and
/// `swap` (|0⟩ ↔ |1⟩) pulses around RAP between |1⟩ and |10⟩.
pub fn build_oct_scheme(
    split: &ControlPulse,
    swap: &ControlPulse,
    cfg: &SchemeConfig,
) -> Result<PulseSequence> {
    if (split.dt - swap.dt).abs() > 1e-12 * split.dt.max(swap.dt) {
        return Err(Error::IncompatiblePulses(format!(
            "split dt {} differs from swap dt {}",
            split.dt, swap.dt
        )));
    }
    let n = cfg.kick_level;
    let up = || rap_pulse_default(&cfg.rap.between(1, n), cfg.dt);
    let down = || rap_pulse_default(&cfg.rap.between(n, 1), cfg.dt);
    Ok(PulseSequence::new(SchemeKind::Oct)
        .pulse(split.clone())
        .pulse(up()?)
        .kick(n, 1.0)
        .pulse(down()?)
        .pulse(swap.clone())
        .pulse(up()?)
        .kick(n, -1.0)
        .pulse(down()?)
        .pulse(split.clone()))
}

/// Propagates |0⟩ through every segment, applying `weight·phi` at each kick.
/// The returned trajectory spans the whole sequence.
pub fn run_scheme(
    seq: &PulseSequence,
    params: &LadderParams,
    phi: f64,
    config: &PropagationConfig,
) -> Result<Trajectory> {
    run_scheme_from(seq, params, phi, config, &StateVector::basis(params, 0)?)
}

pub fn run_scheme_from(
    seq: &PulseSequence,
    params: &LadderParams,
    phi: f64,
    config: &PropagationConfig,
    initial: &StateVector,
) -> Result<Trajectory> {
    params.validate()?;
    config.validate()?;
    if initial.dim() != params.dim() || initial.n_min != params.n_min {
        return Err(Error::InvalidParameter(
            "initial state does not match the ladder window".into(),
        ));
    }
    let mut evolver = Evolver::new(*params);
    let mut psi = initial.clone();
    let mut t0 = 0.0;
    let mut times = Vec::new();
    let mut populations = Vec::new();
    if config.store_trajectory {
        times.push(0.0);
        populations.push(psi.populations());
    }
    let mut max_guard = guard_population(&psi.amplitudes);
    let mut count = 0usize;
    for seg in &seq.segments {
        match seg {
            Segment::Kick(k) => k.apply(&mut psi, phi),
            Segment::Pulse(p) => {
                let sub = substeps(p.dt, config.dt);
                let h = p.dt / sub as f64;
                evolver.forward(&mut psi.amplitudes, p, config.dt, |i, a| {
                    max_guard = max_guard.max(guard_population(a));
                    if config.store_trajectory && (count + i) % config.stride == 0 {
                        times.push(t0 + i as f64 * h);
                        populations.push(a.iter().map(|x| x.norm_sqr()).collect());
                    }
                });
                count += p.n_steps() * sub;
                t0 += p.duration();
            }
        }
    }
    if !psi.is_finite() {
        return Err(Error::NumericalFailure(
            "non-finite amplitudes during scheme propagation".into(),
        ));
    }
    Ok(Trajectory {
        n_min: params.n_min,
        times,
        populations,
        final_state: psi,
        max_guard_population: max_guard,
        leaked: max_guard > config.leakage_tol,
    })
}

/// Final |0⟩ and |1⟩ amplitudes as polynomials in z_j = e^{i·w_j·φ} − 1.
///
/// The kicks are diagonal rank-one perturbations of the identity, so the
/// final amplitudes are multilinear in the z_j. Propagating the branch
/// vectors once gives P₀(φ) for every φ at roughly the cost of two scheme
/// runs.
#[derive(Debug, Clone)]
pub struct KickResponse {
    weights: Vec<f64>,
    /// (mask of kicks, coefficient) for ⟨0| and ⟨1|.
    c0: Vec<(u32, C64)>,
    c1: Vec<(u32, C64)>,
}

impl KickResponse {
    pub fn new(seq: &PulseSequence, params: &LadderParams, dt: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let mut blocks: Vec<Vec<&ControlPulse>> = vec![Vec::new()];
        let mut kicks = Vec::new();
        for seg in &seq.segments {
            match seg {
                Segment::Pulse(p) => blocks.last_mut().unwrap().push(p),
                Segment::Kick(k) => {
                    kicks.push(*k);
                    blocks.push(Vec::new());
                }
            }
        }
        if kicks.len() > 16 {
            return Err(Error::InvalidParameter("too many kick slots".into()));
        }
        let mut evolver = Evolver::new(*params);
        let mut branches = vec![(0u32, StateVector::basis(params, 0)?.amplitudes)];
        let last = blocks.len() - 1;
        for (b, block) in blocks.iter().enumerate().take(last) {
            for (_, v) in branches.iter_mut() {
                for p in block {
                    evolver.forward(v, p, dt, |_, _| {});
                }
            }
            let k = kicks[b];
            let idx = params.index(k.level).ok_or_else(|| {
                Error::InvalidParameter(format!("kick level {} outside window", k.level))
            })?;
            let new: Vec<(u32, Vec<C64>)> = branches
                .iter()
                .map(|(m, v)| {
                    let mut e = vec![C64::new(0.0, 0.0); v.len()];
                    e[idx] = v[idx];
                    (m | (1 << b), e)
                })
                .collect();
            branches.extend(new);
        }
        let bra = |level: i32, evolver: &mut Evolver| -> Result<Vec<C64>> {
            let mut v = StateVector::basis(params, level)?.amplitudes;
            for p in blocks[last].iter().rev() {
                evolver.backward(&mut v, p, dt);
            }
            Ok(v)
        };
        let b0 = bra(0, &mut evolver)?;
        let b1 = if params.index(1).is_some() {
            bra(1, &mut evolver)?
        } else {
            vec![C64::new(0.0, 0.0); params.dim()]
        };
        let dot = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C64>();
        let c0 = branches.iter().map(|(m, v)| (*m, dot(&b0, v))).collect();
        let c1 = branches.iter().map(|(m, v)| (*m, dot(&b1, v))).collect();
        if !branches.iter().all(|(_, v)| v.iter().all(|x| x.re.is_finite() && x.im.is_finite())) {
            return Err(Error::NumericalFailure("non-finite branch amplitudes".into()));
        }
        Ok(Self {
            weights: kicks.iter().map(|k| k.weight).collect(),
            c0,
            c1,
        })
    }

    fn eval(&self, coeffs: &[(u32, C64)], phi: f64) -> C64 {
        let z: Vec<C64> = self
            .weights
            .iter()
            .map(|w| C64::from_polar(1.0, w * phi) - 1.0)
            .collect();
        coeffs
            .iter()
            .map(|(m, c)| {
                (0..z.len())
                    .filter(|j| m & (1 << j) != 0)
                    .fold(*c, |acc, j| acc * z[j])
            })
            .sum()
    }

    pub fn amplitude0(&self, phi: f64) -> C64 {
        self.eval(&self.c0, phi)
    }

    pub fn p0(&self, phi: f64) -> f64 {
        self.amplitude0(phi).norm_sqr()
    }

    pub fn p1(&self, phi: f64) -> f64 {
        self.eval(&self.c1, phi).norm_sqr()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeResult {
    pub phis: Vec<f64>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    /// Population outside {|0⟩, |1⟩}.
    pub leakage: Vec<f64>,
    /// Differential phase per unit kick angle.
    pub phase_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    /// P₀ ≈ offset + amplitude·cos Φ, with Φ the accumulated differential phase.
    pub offset: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    /// Largest |P₀ − cos²(Φ/2)|.
    pub max_deviation: f64,
}

impl FringeResult {
    pub fn accumulated_phases(&self) -> Vec<f64> {
        self.phis.iter().map(|p| p * self.phase_factor).collect()
    }

    /// Least-squares fit of P₀ to offset + amplitude·cos Φ.
    pub fn fit(&self) -> Result<FringeFit> {
        let n = self.phis.len();
        if n < 3 {
            return Err(Error::InvalidParameter("need at least three phases to fit".into()));
        }
        let big_phi = self.accumulated_phases();
        let c: Vec<f64> = big_phi.iter().map(|p| p.cos()).collect();
        let nf = n as f64;
        let (sc, scc) = (c.iter().sum::<f64>(), c.iter().map(|x| x * x).sum::<f64>());
        let sy = self.p0.iter().sum::<f64>();
        let scy = c.iter().zip(&self.p0).map(|(x, y)| x * y).sum::<f64>();
        let det = nf * scc - sc * sc;
        if det.abs() < 1e-12 {
            return Err(Error::NumericalFailure("degenerate phase sampling".into()));
        }
        let amplitude = (nf * scy - sc * sy) / det;
        let offset = (sy - amplitude * sc) / nf;
        let mean = sy / nf;
        let ss_tot: f64 = self.p0.iter().map(|y| (y - mean).powi(2)).sum();
        let ss_res: f64 = c
            .iter()
            .zip(&self.p0)
            .map(|(x, y)| (y - offset - amplitude * x).powi(2))
            .sum();
        let max_deviation = big_phi
            .iter()
            .zip(&self.p0)
            .map(|(p, y)| (y - (p / 2.0).cos().powi(2)).abs())
            .fold(0.0, f64::max);
        Ok(FringeFit {
            offset,
            amplitude,
            r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
            max_deviation,
        })
    }

    /// CSV with columns `phi,p0,p1,leakage`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phi", "p0", "p1", "leakage"])?;
        for i in 0..self.phis.len() {
            w.write_record([
                fmt_f64(self.phis[i]),
                fmt_f64(self.p0[i]),
                fmt_f64(self.p1[i]),
                fmt_f64(self.leakage[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// `n` kick angles evenly spaced over [0, span).
pub fn phase_grid(n: usize, span: f64) -> Vec<f64> {
    (0..n).map(|i| span * i as f64 / n as f64).collect()
}

/// Final populations for each kick angle.
pub fn fringe_scan(
    seq: &PulseSequence,
    params: &LadderParams,
    phis: &[f64],
    dt: f64,
) -> Result<FringeResult> {
    let resp = KickResponse::new(seq, params, dt)?;
    let (p0, p1): (Vec<f64>, Vec<f64>) = phis
        .par_iter()
        .map(|&phi| (resp.p0(phi), resp.p1(phi)))
        .unzip();
    let leakage = p0.iter().zip(&p1).map(|(a, b)| (1.0 - a - b).max(0.0)).collect();
    Ok(FringeResult {
        phis: phis.to_vec(),
        p0,
        p1,
        leakage,
        phase_factor: seq.phase_factor(),
    })
}

/// (P_max − P_min)/(P_max + P_min).
pub fn contrast(p_max: f64, p_min: f64) -> Result<f64> {
    if p_max < 0.0 || p_min < 0.0 || !p_max.is_finite() || !p_min.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "populations must be non-negative, got {p_max} and {p_min}"
        )));
    }
    let s = p_max + p_min;
    if s == 0.0 {
        return Err(Error::UndefinedContrast);
    }
    Ok((p_max - p_min) / s)
}

/// P₀ at φ = 0 and φ = π/2 for one parameter set.
pub fn fringe_extrema(seq: &PulseSequence, params: &LadderParams, dt: f64) -> Result<(f64, f64)> {
    let r = KickResponse::new(seq, params, dt)?;
    Ok((r.p0(0.0), r.p0(P_MIN_PHASE)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> SchemeConfig {
        SchemeConfig::default()
    }

    #[test]
    fn rabi_layout() {
        let s = build_rabi_scheme(&cfg()).unwrap();
        assert_eq!(s.n_pulses(), 39);
        assert_abs_diff_eq!(s.duration(), 585.0, epsilon = 1e-9);
        let k = s.kick_times();
        assert_abs_diff_eq!(k[0], 150.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k[1], 435.0, epsilon = 1e-9);
        assert_eq!(s.phase_factor(), 2.0);
    }

    #[test]
    fn rap_layout() {
        let s = build_rap_scheme(&cfg()).unwrap();
        assert_abs_diff_eq!(s.duration(), 792.4, epsilon = 0.05);
        let k = s.kick_times();
        assert_abs_diff_eq!(k[0], 201.8, epsilon = 0.06);
        assert_abs_diff_eq!(k[1], 590.6, epsilon = 0.06);
    }

    #[test]
    fn oct_layout_and_grid_check() {
        let split = rabi_pulse(RabiKind::HalfPi, 0, 1.0, 0.01).unwrap();
        let swap = rabi_pulse(RabiKind::Pi, 0, 1.0, 0.01).unwrap();
        let s = build_oct_scheme(&split, &swap, &cfg()).unwrap();
        let k = s.kick_times();
        assert_abs_diff_eq!(k[0], 206.8, epsilon = 0.06);
        assert_abs_diff_eq!(k[1], 605.6, epsilon = 0.06);
        let coarse = rabi_pulse(RabiKind::Pi, 0, 1.0, 0.05).unwrap();
        assert!(matches!(
            build_oct_scheme(&split, &coarse, &cfg()),
            Err(Error::IncompatiblePulses(_))
        ));
    }

    #[test]
    fn contrast_values() {
        assert_eq!(contrast(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(contrast(0.5, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(contrast(0.934, 0.001).unwrap(), 0.933 / 0.935, epsilon = 1e-15);
        assert!(matches!(contrast(0.0, 0.0), Err(Error::UndefinedContrast)));
        assert!(contrast(-0.1, 0.2).is_err());
    }

    #[test]
    fn kick_is_unitary_and_periodic() {
        let p = LadderParams::default();
        let mut psi = StateVector::from_amplitudes(
            p.n_min,
            (0..p.dim()).map(|i| C64::new(i as f64, 1.0)).collect(),
        );
        let norm = psi.norm();
        let orig = psi.clone();
        let k = PhaseKick { level: 10, weight: 1.0 };
        k.apply(&mut psi, 0.7);
        assert_abs_diff_eq!(psi.norm(), norm, epsilon = 1e-12);
        let mut q = orig.clone();
        k.apply(&mut q, 2.0 * PI);
        for (a, b) in q.amplitudes.iter().zip(&orig.amplitudes) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn kick_response_matches_direct_runs() {
        // Short two-kick sequence on a small window; cheap but exercises all branches.
        let params = LadderParams::new(-2, 5, 1.0, 0.07).unwrap();
        let c = SchemeConfig { dt: 0.02, ..cfg() };
        let half = rabi_pulse(RabiKind::HalfPi, 0, 1.0, c.dt).unwrap();
        let pi1 = rabi_pulse(RabiKind::Pi, 1, 1.0, c.dt).unwrap();
        let pi0 = rabi_pulse(RabiKind::Pi, 0, 1.0, c.dt).unwrap();
        let seq = PulseSequence::new(SchemeKind::Custom)
            .pulse(half.clone())
            .pulse(pi1.clone())
            .kick(2, 1.0)
            .pulse(pi1.clone())
            .pulse(pi0)
            .pulse(pi1.clone())
            .kick(2, -1.0)
            .pulse(pi1)
            .pulse(half);
        let resp = KickResponse::new(&seq, &params, c.dt).unwrap();
        let config = PropagationConfig { dt: c.dt, ..Default::default() };
        for phi in [0.0, 0.4, 1.3, PI / 2.0, 2.9] {
            let direct = run_scheme(&seq, &params, phi, &config).unwrap();
            assert_abs_diff_eq!(resp.p0(phi), direct.final_state.population(0), epsilon = 1e-11);
            assert_abs_diff_eq!(resp.p1(phi), direct.final_state.population(1), epsilon = 1e-11);
        }
    }

    #[test]
    fn fit_recovers_ideal_fringe() {
        let phis = phase_grid(32, PI);
        let p0: Vec<f64> = phis.iter().map(|p| p.cos().powi(2)).collect();
        let n = phis.len();
        let f = FringeResult {
            phis,
            p0,
            p1: vec![0.0; n],
            leakage: vec![0.0; n],
            phase_factor: 2.0,
        };
        let fit = f.fit().unwrap();
        assert_abs_diff_eq!(fit.offset, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.amplitude, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        assert!(fit.max_deviation < 1e-12);
    }

    #[test]
    fn fringe_csv_header() {
        let f = FringeResult {
            phis: vec![0.0],
            p0: vec![1.0],
            p1: vec![0.0],
            leakage: vec![0.0],
            phase_factor: 2.0,
        };
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("phi,p0,p1,leakage\n"));
    }

    #[test]
    fn scheme_name_round_trip() {
        for k in [SchemeKind::Rabi, SchemeKind::Rap, SchemeKind::Oct, SchemeKind::Custom] {
            assert_eq!(k.to_string().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("foo".parse::<SchemeKind>().is_err());
    }
}
