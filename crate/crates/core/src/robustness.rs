//! Expected contrast over amplitude errors μ and thermal momentum spread Δβ.
//!
//! For each grid point the ground-state populations P₀(φ = 0) and
//! P₀(φ = π/2) are averaged over β ~ Normal(0, Δβ) and combined into
//! C̄ = (P̄_max − P̄_min)/(P̄_max + P̄_min).
//!
//! Two estimators are available. [`Method::MonteCarlo`] draws β samples,
//! paired across the two kick angles. [`Method::Quadrature`] tabulates
//! P₀(β) once per μ on a uniform β grid and integrates it against each
//! Gaussian. P₀(β) is band-limited in β, with bandwidth set by the largest
//! difference of ∫n dt between interfering paths (≤ 2·(N+1)·T). A grid finer
//! than the Nyquist spacing for that bandwidth makes the trapezoidal sum
//! spectrally accurate, and one table serves every Δβ.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderParams, DEFAULT_N_MAX, DEFAULT_N_MIN};
use crate::propagate::fmt_f64;
use crate::scheme::{contrast, KickResponse, PulseSequence, P_MIN_PHASE};

/// Gaussian tails beyond this many standard deviations are dropped.
const TAIL_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonteCarlo,
    Quadrature,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" | "monte_carlo" | "monte-carlo" => Ok(Method::MonteCarlo),
            "quadrature" | "quad" => Ok(Method::Quadrature),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

/// Whether the φ = 0 and φ = π/2 runs share their β draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Paired,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    pub mu_grid: Vec<f64>,
    pub dbeta_grid: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Largest propagation step.
    pub dt: f64,
    pub method: Method,
    /// β spacing for [`Method::Quadrature`]; derived from the sequence when unset.
    pub quad_step: Option<f64>,
    pub n_min: i32,
    pub n_max: i32,
}

/// `start, start + step, …` up to and including `stop` (within rounding).
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            mu_grid: linear_grid(0.90, 1.10, 0.02),
            dbeta_grid: linear_grid(0.0, 0.40, 0.02),
            n_samples: 2000,
            seed: 20_240_601,
            dt: 0.2,
            method: Method::MonteCarlo,
            quad_step: None,
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu_grid.is_empty() || self.dbeta_grid.is_empty() {
            return Err(Error::InvalidParameter("grids must be non-empty".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
        }
        if self.mu_grid.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidParameter("mu values must be positive".into()));
        }
        if self.dbeta_grid.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter("dbeta values must be non-negative".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(h) = self.quad_step {
            if !(h > 0.0) {
                return Err(Error::InvalidParameter("quad_step must be positive".into()));
            }
        }
        LadderParams::new(self.n_min, self.n_max, 1.0, 0.0)?;
        Ok(())
    }

    fn ladder(&self, mu: f64, beta: f64) -> LadderParams {
        LadderParams {
            n_min: self.n_min,
            n_max: self.n_max,
            mu,
            beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub mu: f64,
    pub dbeta: f64,
    pub p_max_bar: f64,
    pub p_min_bar: f64,
    pub c_bar: f64,
    /// Monte-Carlo standard error, or the quadrature error estimate.
    pub stderr_c: f64,
}

impl LandscapePoint {
    pub fn is_valid(&self) -> bool {
        self.c_bar.is_finite()
    }

    fn invalid(mu: f64, dbeta: f64) -> Self {
        Self {
            mu,
            dbeta,
            p_max_bar: f64::NAN,
            p_min_bar: f64::NAN,
            c_bar: f64::NAN,
            stderr_c: f64::NAN,
        }
    }
}

/// Running sums for paired (P_max, P_min) samples. Merging is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    sum_a: f64,
    sum_b: f64,
    sum_aa: f64,
    sum_bb: f64,
    sum_ab: f64,
}

impl SampleStats {
    pub fn push(&mut self, a: f64, b: f64) {
        self.n += 1;
        self.sum_a += a;
        self.sum_b += b;
        self.sum_aa += a * a;
        self.sum_bb += b * b;
        self.sum_ab += a * b;
    }

    pub fn merge(mut self, o: SampleStats) -> SampleStats {
        self.n += o.n;
        self.sum_a += o.sum_a;
        self.sum_b += o.sum_b;
        self.sum_aa += o.sum_aa;
        self.sum_bb += o.sum_bb;
        self.sum_ab += o.sum_ab;
        self
    }

    pub fn mean_max(&self) -> f64 {
        self.sum_a / self.n as f64
    }

    pub fn mean_min(&self) -> f64 {
        self.sum_b / self.n as f64
    }

    /// Delta-method standard error of C̄.
    pub fn stderr_contrast(&self) -> f64 {
        let n = self.n as f64;
        if self.n < 2 {
            return 0.0;
        }
        let (a, b) = (self.mean_max(), self.mean_min());
        let var_a = (self.sum_aa / n - a * a).max(0.0) * n / (n - 1.0);
        let var_b = (self.sum_bb / n - b * b).max(0.0) * n / (n - 1.0);
        let cov = (self.sum_ab / n - a * b) * n / (n - 1.0);
        let s = a + b;
        if s <= 0.0 {
            return f64::NAN;
        }
        let ga = 2.0 * b / (s * s);
        let gb = -2.0 * a / (s * s);
        ((ga * ga * var_a + gb * gb * var_b + 2.0 * ga * gb * cov) / n)
            .max(0.0)
            .sqrt()
    }

    pub fn point(&self, mu: f64, dbeta: f64) -> LandscapePoint {
        let (a, b) = (self.mean_max(), self.mean_min());
        match contrast(a, b) {
            Ok(c) => LandscapePoint {
                mu,
                dbeta,
                p_max_bar: a,
                p_min_bar: b,
                c_bar: c,
                stderr_c: self.stderr_contrast(),
            },
            Err(_) => LandscapePoint::invalid(mu, dbeta),
        }
    }
}

// Sequential so that results do not depend on the thread count.
fn accumulate(pairs: &[(f64, f64)]) -> SampleStats {
    let mut s = SampleStats::default();
    pairs.iter().for_each(|(a, b)| s.push(*a, *b));
    s
}

/// Standard-normal draws shared by every grid point (common random numbers).
pub fn normal_draws(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// P₀ at φ = 0 and φ = π/2 for one (μ, β).
pub fn fringe_pair(seq: &PulseSequence, params: &LadderParams, dt: f64) -> Result<(f64, f64)> {
    let r = KickResponse::new(seq, params, dt)?;
    Ok((r.p0(0.0), r.p0(P_MIN_PHASE)))
}

/// Monte-Carlo estimate of (P̄_max, P̄_min) at one grid point with β = Δβ·z.
pub fn sample_point(
    seq: &PulseSequence,
    mu: f64,
    dbeta: f64,
    n: usize,
    seed: u64,
    config: &LandscapeConfig,
) -> Result<SampleStats> {
    sample_point_with(seq, mu, dbeta, n, seed, config, Pairing::Paired)
}

pub fn sample_point_with(
    seq: &PulseSequence,
    mu: f64,
    dbeta: f64,
    n: usize,
    seed: u64,
    config: &LandscapeConfig,
    pairing: Pairing,
) -> Result<SampleStats> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let z = normal_draws(seed, n);
    let stats = match pairing {
        Pairing::Paired => {
            if dbeta == 0.0 {
                // Every draw gives β = 0.
                let (a, b) = fringe_pair(seq, &config.ladder(mu, 0.0), config.dt)?;
                let mut s = SampleStats::default();
                (0..n).for_each(|_| s.push(a, b));
                s
            } else {
                let pairs: Vec<(f64, f64)> = z
                    .par_iter()
                    .map(|zi| fringe_pair(seq, &config.ladder(mu, dbeta * zi), config.dt))
                    .collect::<Result<_>>()?;
                accumulate(&pairs)
            }
        }
        Pairing::Independent => {
            let z2 = normal_draws(seed ^ 0x9E37_79B9_7F4A_7C15, n);
            z.par_iter()
                .zip(z2.par_iter())
                .map(|(z1, z2)| {
                    let a = KickResponse::new(seq, &config.ladder(mu, dbeta * z1), config.dt)?
                        .p0(0.0);
                    let b = KickResponse::new(seq, &config.ladder(mu, dbeta * z2), config.dt)?
                        .p0(P_MIN_PHASE);
                    Ok((a, b))
                })
                .collect::<Result<Vec<_>>>()
                .map(|pairs| accumulate(&pairs))?
        }
    };
    Ok(stats)
}

/// Default β spacing for the quadrature: Nyquist spacing for the band limit
/// 2·(N+1)·T plus the width of the narrowest Gaussian's spectrum.
pub fn default_quad_step(seq: &PulseSequence, dbeta_min: f64) -> f64 {
    let n = seq
        .kicks()
        .iter()
        .map(|k| k.level.abs())
        .max()
        .unwrap_or(10) as f64;
    let bandwidth = 2.0 * (n + 1.0) * seq.duration();
    2.0 * PI / (bandwidth + 8.0 / dbeta_min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastLandscape {
    pub scheme: String,
    pub mu_grid: Vec<f64>,
    pub dbeta_grid: Vec<f64>,
    /// Row-major: index = i_mu · len(dbeta_grid) + i_dbeta.
    pub points: Vec<LandscapePoint>,
}

impl ContrastLandscape {
    pub fn get(&self, i_mu: usize, i_dbeta: usize) -> &LandscapePoint {
        &self.points[i_mu * self.dbeta_grid.len() + i_dbeta]
    }

    /// Point closest to (mu, dbeta).
    pub fn nearest(&self, mu: f64, dbeta: f64) -> &LandscapePoint {
        let i = nearest_index(&self.mu_grid, mu);
        let j = nearest_index(&self.dbeta_grid, dbeta);
        self.get(i, j)
    }

    /// C̄ versus Δβ at the grid μ closest to `mu`.
    pub fn row(&self, mu: f64) -> Vec<LandscapePoint> {
        let i = nearest_index(&self.mu_grid, mu);
        (0..self.dbeta_grid.len()).map(|j| *self.get(i, j)).collect()
    }

    /// CSV with columns `mu,dbeta,p_max_bar,p_min_bar,c_bar,stderr_c`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mu", "dbeta", "p_max_bar", "p_min_bar", "c_bar", "stderr_c"])?;
        for p in &self.points {
            w.write_record([
                fmt_f64(p.mu),
                fmt_f64(p.dbeta),
                fmt_f64(p.p_max_bar),
                fmt_f64(p.p_min_bar),
                fmt_f64(p.c_bar),
                fmt_f64(p.stderr_c),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads a landscape CSV; the grids are recovered from the rows.
    pub fn read_csv<R: Read>(input: R, scheme: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let expected = ["mu", "dbeta", "p_max_bar", "p_min_bar", "c_bar", "stderr_c"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::InvalidParameter(format!(
                "unexpected landscape header: {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| {
                        Error::InvalidParameter(format!("bad number '{s}' in landscape: {e}"))
                    })
                })
                .collect::<Result<_>>()?;
            points.push(LandscapePoint {
                mu: v[0],
                dbeta: v[1],
                p_max_bar: v[2],
                p_min_bar: v[3],
                c_bar: v[4],
                stderr_c: v[5],
            });
        }
        let mut mu_grid: Vec<f64> = Vec::new();
        let mut dbeta_grid: Vec<f64> = Vec::new();
        for p in &points {
            if !mu_grid.contains(&p.mu) {
                mu_grid.push(p.mu);
            }
            if !dbeta_grid.contains(&p.dbeta) {
                dbeta_grid.push(p.dbeta);
            }
        }
        if mu_grid.len() * dbeta_grid.len() != points.len() {
            return Err(Error::GridMismatch("landscape rows do not form a full grid".into()));
        }
        Ok(Self {
            scheme: scheme.to_string(),
            mu_grid,
            dbeta_grid,
            points,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, scheme: &str) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), scheme)
    }
}

fn nearest_index(grid: &[f64], x: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Evaluates the expected contrast on the full (μ, Δβ) grid.
pub fn scan_landscape(seq: &PulseSequence, config: &LandscapeConfig) -> Result<ContrastLandscape> {
    config.validate()?;
    let mut points = Vec::with_capacity(config.mu_grid.len() * config.dbeta_grid.len());
    for &mu in &config.mu_grid {
        match config.method {
            Method::MonteCarlo => {
                for &db in &config.dbeta_grid {
                    let p = sample_point(seq, mu, db, config.n_samples, config.seed, config)
                        .map(|s| s.point(mu, db))
                        .unwrap_or_else(|_| LandscapePoint::invalid(mu, db));
                    points.push(p);
                }
            }
            Method::Quadrature => match quadrature_row(seq, mu, config) {
                Ok(row) => points.extend(row),
                Err(_) => points.extend(
                    config
                        .dbeta_grid
                        .iter()
                        .map(|&db| LandscapePoint::invalid(mu, db)),
                ),
            },
        }
    }
    Ok(ContrastLandscape {
        scheme: seq.name.to_string(),
        mu_grid: config.mu_grid.clone(),
        dbeta_grid: config.dbeta_grid.clone(),
        points,
    })
}

/// Tabulates P₀(β) at both kick angles for one μ and integrates it against
/// every Δβ of the grid. The reported error is |C̄(h) − C̄(2h)|.
pub fn quadrature_row(
    seq: &PulseSequence,
    mu: f64,
    config: &LandscapeConfig,
) -> Result<Vec<LandscapePoint>> {
    let max_db = config.dbeta_grid.iter().copied().fold(0.0, f64::max);
    let min_db = config
        .dbeta_grid
        .iter()
        .copied()
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let h = config
        .quad_step
        .unwrap_or_else(|| default_quad_step(seq, if min_db.is_finite() { min_db } else { 1.0 }));
    let k_max = if max_db > 0.0 {
        (TAIL_SIGMAS * max_db / h).ceil() as i64
    } else {
        0
    };
    let nodes: Vec<f64> = (-k_max..=k_max).map(|k| k as f64 * h).collect();
    let table: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|&b| fringe_pair(seq, &config.ladder(mu, b), config.dt))
        .collect::<Result<_>>()?;
    let center = k_max as usize;

    let integrate = |db: f64, stride: usize| -> (f64, f64) {
        let reach = ((TAIL_SIGMAS * db / h).ceil() as usize).min(center);
        let reach = reach - reach % stride;
        let (mut wa, mut wb, mut ws) = (0.0, 0.0, 0.0);
        let mut k = center - reach;
        while k <= center + reach {
            let x = nodes[k] / db;
            let w = (-0.5 * x * x).exp();
            wa += w * table[k].0;
            wb += w * table[k].1;
            ws += w;
            k += stride;
        }
        (wa / ws, wb / ws)
    };

    Ok(config
        .dbeta_grid
        .iter()
        .map(|&db| {
            if db == 0.0 {
                let (a, b) = table[center];
                return match contrast(a, b) {
                    Ok(c) => LandscapePoint {
                        mu,
                        dbeta: db,
                        p_max_bar: a,
                        p_min_bar: b,
                        c_bar: c,
                        stderr_c: 0.0,
                    },
                    Err(_) => LandscapePoint::invalid(mu, db),
                };
            }
            let (a, b) = integrate(db, 1);
            let (a2, b2) = integrate(db, 2);
            match (contrast(a, b), contrast(a2, b2)) {
                (Ok(c), Ok(c2)) => LandscapePoint {
                    mu,
                    dbeta: db,
                    p_max_bar: a,
                    p_min_bar: b,
                    c_bar: c,
                    stderr_c: (c - c2).abs(),
                },
                _ => LandscapePoint::invalid(mu, db),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub mu: f64,
    pub dbeta: f64,
    pub delta_c: f64,
    /// Combined uncertainty of the two landscapes.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementMap {
    pub points: Vec<Difference>,
    /// Largest gain C̄(b) − C̄(a).
    pub max_gain: Option<Difference>,
    /// Most negative difference, when there is one.
    pub max_loss: Option<Difference>,
}

impl ImprovementMap {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mu", "dbeta", "delta_c", "stderr"])?;
        for d in &self.points {
            w.write_record([
                fmt_f64(d.mu),
                fmt_f64(d.dbeta),
                fmt_f64(d.delta_c),
                fmt_f64(d.stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Losses larger than `tol + k·stderr`.
    pub fn significant_losses(&self, tol: f64, k: f64) -> Vec<Difference> {
        self.points
            .iter()
            .filter(|d| d.delta_c < 0.0 && -d.delta_c >= tol + k * d.stderr)
            .copied()
            .collect()
    }
}

/// ΔC = C̄(b) − C̄(a) per grid point; invalid points are skipped.
pub fn improvement_map(a: &ContrastLandscape, b: &ContrastLandscape) -> Result<ImprovementMap> {
    let same = |x: &[f64], y: &[f64]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9)
    };
    if !same(&a.mu_grid, &b.mu_grid) || !same(&a.dbeta_grid, &b.dbeta_grid) {
        return Err(Error::GridMismatch(format!(
            "landscapes '{}' and '{}' use different grids",
            a.scheme, b.scheme
        )));
    }
    let points: Vec<Difference> = a
        .points
        .iter()
        .zip(&b.points)
        .filter(|(p, q)| p.is_valid() && q.is_valid())
        .map(|(p, q)| Difference {
            mu: p.mu,
            dbeta: p.dbeta,
            delta_c: q.c_bar - p.c_bar,
            stderr: p.stderr_c.hypot(q.stderr_c),
        })
        .collect();
    let max_gain = points
        .iter()
        .copied()
        .max_by(|x, y| x.delta_c.total_cmp(&y.delta_c));
    let max_loss = points
        .iter()
        .copied()
        .filter(|d| d.delta_c < 0.0)
        .min_by(|x, y| x.delta_c.total_cmp(&y.delta_c));
    Ok(ImprovementMap {
        points,
        max_gain,
        max_loss,
    })
}

/// Linear-interpolated Δβ at which C̄ first drops below `level`.
pub fn crossing(row: &[LandscapePoint], level: f64) -> Option<f64> {
    row.windows(2).find_map(|w| {
        let (p, q) = (w[0], w[1]);
        if p.c_bar >= level && q.c_bar < level {
            let t = (p.c_bar - level) / (p.c_bar - q.c_bar);
            Some(p.dbeta + t * (q.dbeta - p.dbeta))
        } else {
            None
        }
    })
}
