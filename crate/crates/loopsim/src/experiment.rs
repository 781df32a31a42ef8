//! Experiment driver: configuration, parallel sample farms, β scans,
//! moment tables, critical-point bisection, partition dumps, and
//! Poisson-Dirichlet cross-checks.
//!
//! Reproducibility contract: sample `i` of job `j` draws from the random
//! stream `(j << 32) | i` of the master seed, so results are bit-identical
//! for a given configuration regardless of worker count or scheduling.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{BoundaryCondition, Lattice, LatticeError};
use crate::looptracer::{trace_loops, TraceError};
use crate::observables::{
    m_from_second_moment, m_pair, m_single, MomentEstimate, ObservableError, PartitionSample,
};
use crate::poisson_dirichlet::{pd_moment_exact_scaled, PdError};
use crate::realisation::{Realisation, RealisationError};
use crate::rng::stream_rng;

/// Desk-scale target standard error on `E[Σ f²]`; adaptive sample farms
/// double the sample count until they reach it or hit the configured cap.
pub const TARGET_S2_STDERR: f64 = 1e-3;

/// Highest power sum collected per sample; pair moments up to (5,5) need
/// `Σ f^{10}`.
pub const MAX_POWER: u32 = 10;

/// Single exponents reported by the moments mode.
pub const SINGLE_EXPONENTS: Range<u32> = 2..6;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Realisation(#[from] RealisationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error(transparent)]
    Pd(#[from] PdError),
    #[error("bracketing failure: {0}")]
    Bracketing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Scan,
    Moments,
    Betac,
    PartitionDump,
    PdCheck,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scan" => Ok(Mode::Scan),
            "moments" => Ok(Mode::Moments),
            "betac" => Ok(Mode::Betac),
            "partition-dump" => Ok(Mode::PartitionDump),
            "pd-check" => Ok(Mode::PdCheck),
            other => Err(format!(
                "unknown mode `{other}` (expected scan|moments|betac|partition-dump|pd-check)"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Scan => "scan",
            Mode::Moments => "moments",
            Mode::Betac => "betac",
            Mode::PartitionDump => "partition-dump",
            Mode::PdCheck => "pd-check",
        };
        write!(f, "{s}")
    }
}

/// Which θ the mass estimators are evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaChoice {
    /// θ = 1 for u ∈ {0, 1}, θ = ½ for u ∈ (0, 1).
    Auto,
    /// A fixed value.
    Fixed(f64),
    /// Evaluate both ½ and 1 (discrimination runs).
    Both,
}

impl ThetaChoice {
    /// The θ values to evaluate for parameter `u`.
    pub fn resolve(&self, u: f64) -> Vec<f64> {
        match *self {
            ThetaChoice::Auto => vec![conjectured_theta(u)],
            ThetaChoice::Fixed(t) => vec![t],
            ThetaChoice::Both => vec![0.5, 1.0],
        }
    }
}

impl FromStr for ThetaChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(ThetaChoice::Auto),
            "both" => Ok(ThetaChoice::Both),
            other => match other.parse::<f64>() {
                Ok(t) if t > 0.0 => Ok(ThetaChoice::Fixed(t)),
                _ => Err(format!("theta must be auto, both, or a positive number, got `{other}`")),
            },
        }
    }
}

/// θ conjectured for the loop model at cross weight `u`: 1 at the
/// endpoints, ½ in the mixed regime.
pub fn conjectured_theta(u: f64) -> f64 {
    if u == 0.0 || u == 1.0 {
        1.0
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Single(f64),
    Grid { min: f64, max: f64, steps: usize },
}

impl BetaSpec {
    pub fn grid_points(&self) -> Vec<f64> {
        match *self {
            BetaSpec::Single(b) => vec![b],
            BetaSpec::Grid { min, max, steps } => (0..steps)
                .map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub size: usize,
    pub bc: BoundaryCondition,
    pub u: f64,
    pub beta: BetaSpec,
    pub theta: ThetaChoice,
    /// Sample-count cap per job.
    pub samples: usize,
    /// Adaptive floor: farms start here and double until the stderr
    /// target is met or the cap is reached. Set equal to `samples` for a
    /// fixed count.
    pub min_samples: usize,
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    /// Exponent of the `L^x` factor in the β_c crossing criterion.
    pub crossing_exponent: f64,
    /// Bracket width at which the β_c bisection stops.
    pub betac_tol: f64,
    /// N of the Kingman construction in pd-check reports.
    pub kingman_n: usize,
    /// Also emit `L_j/(β|Λ|)` fractions in partition dumps.
    pub dump_lengths: bool,
    /// Keep per-sample `Σ f²` values in scan reports.
    pub scatter: bool,
}

impl ExperimentConfig {
    pub fn new(mode: Mode, size: usize, u: f64, beta: BetaSpec) -> Self {
        ExperimentConfig {
            mode,
            size,
            bc: BoundaryCondition::Periodic,
            u,
            beta,
            theta: ThetaChoice::Auto,
            samples: 1024,
            min_samples: 256,
            seed: 1,
            workers: 0,
            crossing_exponent: 0.75,
            betac_tol: 0.02,
            kingman_n: 10_000,
            dump_lengths: false,
            scatter: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |msg: String| Err(ExperimentError::Config(msg));
        if self.size == 0 {
            return err("size must be at least 1".into());
        }
        if self.bc == BoundaryCondition::Periodic && self.size < 3 {
            return err(format!("periodic boundaries require size >= 3, got {}", self.size));
        }
        if !(0.0..=1.0).contains(&self.u) {
            return err(format!("u must lie in [0, 1], got {}", self.u));
        }
        match self.beta {
            BetaSpec::Single(b) => {
                if !b.is_finite() || b <= 0.0 {
                    return err(format!("beta must be positive, got {b}"));
                }
                if self.mode == Mode::Scan || self.mode == Mode::Betac {
                    return err(format!(
                        "mode {} needs a beta grid (beta-min/beta-max/beta-steps)",
                        self.mode
                    ));
                }
            }
            BetaSpec::Grid { min, max, steps } => {
                if !min.is_finite() || !max.is_finite() || min <= 0.0 || max <= min {
                    return err(format!("beta grid needs 0 < min < max, got [{min}, {max}]"));
                }
                if steps < 2 {
                    return err(format!("beta grid needs at least 2 steps, got {steps}"));
                }
                if !matches!(self.mode, Mode::Scan | Mode::Betac) {
                    return err(format!("mode {} needs a single beta", self.mode));
                }
            }
        }
        if self.samples == 0 || self.min_samples == 0 {
            return err("sample counts must be at least 1".into());
        }
        if self.min_samples > self.samples {
            return err(format!(
                "min-samples {} exceeds samples cap {}",
                self.min_samples, self.samples
            ));
        }
        if self.samples as u64 >= u64::from(u32::MAX) {
            return err("samples cap must fit in 32 bits".into());
        }
        if !self.crossing_exponent.is_finite() || self.crossing_exponent <= 0.0 {
            return err(format!(
                "crossing exponent must be positive, got {}",
                self.crossing_exponent
            ));
        }
        if !self.betac_tol.is_finite() || self.betac_tol <= 0.0 {
            return err(format!("betac tolerance must be positive, got {}", self.betac_tol));
        }
        if self.kingman_n == 0 {
            return err("kingman-n must be at least 1".into());
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool, ExperimentError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))
    }
}

/// Everything extracted from one realisation by the moment farms.
#[derive(Debug, Clone, Copy)]
pub struct SampleMoments {
    /// `Σ f^n` of the shadow partition for `n = 2..=MAX_POWER`.
    pub power_sums: [f64; (MAX_POWER - 1) as usize],
    /// Whether the two antipodal probe sites share a loop at time 0.
    pub antipodal_connected: bool,
    pub loop_count: usize,
}

impl SampleMoments {
    pub fn power_sum(&self, n: u32) -> f64 {
        self.power_sums[(n - 2) as usize]
    }

    /// Per-sample distinct pair moment via the inclusion-exclusion
    /// identity `S(n₁)S(n₂) − S(n₁+n₂)`, exact per partition.
    pub fn pair_moment(&self, n1: u32, n2: u32) -> f64 {
        self.power_sum(n1) * self.power_sum(n2) - self.power_sum(n1 + n2)
    }
}

/// Sites at maximal separation under periodic boundaries.
pub fn antipodal_pair(lattice: &Lattice) -> (usize, usize) {
    let l = lattice.side();
    let h = l / 2;
    (lattice.site_index(0, 0, 0), lattice.site_index(h, h, h))
}

fn sample_one(
    lattice: &Lattice,
    beta: f64,
    u: f64,
    seed: u64,
    job: u64,
    index: u64,
    pair: (usize, usize),
) -> Result<SampleMoments, ExperimentError> {
    let mut rng = stream_rng(seed, (job << 32) | index);
    let real = Realisation::sample(lattice, beta, u, &mut rng)?;
    let loops = trace_loops(&real)?;
    let partition = PartitionSample::from_shadows(&loops);
    let sums = partition.power_sums_upto(MAX_POWER);
    let mut power_sums = [0.0; (MAX_POWER - 1) as usize];
    power_sums.copy_from_slice(&sums);
    Ok(SampleMoments {
        power_sums,
        antipodal_connected: loops.same_loop_at_time_zero(pair.0, pair.1),
        loop_count: loops.loop_count(),
    })
}

/// Farm the sample indices `range` of job `job` across the worker pool.
/// The result vector is ordered by sample index, so any later reduction is
/// independent of scheduling.
pub fn sample_moments_farm(
    lattice: &Lattice,
    beta: f64,
    u: f64,
    seed: u64,
    job: u64,
    range: Range<u64>,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SampleMoments>, ExperimentError> {
    let pair = antipodal_pair(lattice);
    pool.install(|| {
        range
            .into_par_iter()
            .map(|i| sample_one(lattice, beta, u, seed, job, i, pair))
            .collect()
    })
}

/// Extend `acc` by adaptive doubling until the stderr of `E[Σ f²]` drops
/// to [`TARGET_S2_STDERR`] or the cap is reached.
fn adaptive_farm(
    lattice: &Lattice,
    beta: f64,
    cfg: &ExperimentConfig,
    job: u64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SampleMoments>, ExperimentError> {
    let mut acc = sample_moments_farm(
        lattice,
        beta,
        cfg.u,
        cfg.seed,
        job,
        0..cfg.min_samples as u64,
        pool,
    )?;
    loop {
        let s2: Vec<f64> = acc.iter().map(|m| m.power_sum(2)).collect();
        let est = MomentEstimate::from_samples("s2", &s2)?;
        if (est.stderr <= TARGET_S2_STDERR && acc.len() >= cfg.min_samples)
            || acc.len() >= cfg.samples
        {
            return Ok(acc);
        }
        let next = (acc.len() * 2).min(cfg.samples);
        let more = sample_moments_farm(
            lattice,
            beta,
            cfg.u,
            cfg.seed,
            job,
            acc.len() as u64..next as u64,
            pool,
        )?;
        acc.extend(more);
    }
}

fn estimate_of(samples: &[SampleMoments], label: &str, f: impl Fn(&SampleMoments) -> f64) -> MomentEstimate {
    let xs: Vec<f64> = samples.iter().map(f).collect();
    MomentEstimate::from_samples(label, &xs).expect("non-empty sample set")
}

// ---------------------------------------------------------------------------
// scan

#[derive(Debug, Clone, Serialize)]
pub struct ScanRow {
    pub beta: f64,
    /// `E[Σ (ℓ_j/|Λ|)²]`.
    pub second_moment: MomentEstimate,
    pub theta: f64,
    /// `m(β)` from the second moment.
    pub m: f64,
    pub m_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub provenance: Provenance,
    pub rows: Vec<ScanRow>,
    /// Per-sample `Σ f²` values (β, sample index, value) when requested.
    pub scatter: Vec<(f64, u64, f64)>,
}

/// Mean `Σ f²` and derived `m(β)` over a β grid.
pub fn run_scan(cfg: &ExperimentConfig) -> Result<ScanReport, ExperimentError> {
    cfg.validate()?;
    let lattice = Lattice::new(cfg.size, cfg.bc)?;
    let pool = cfg.pool()?;
    let theta = cfg.theta.resolve(cfg.u)[0];
    let mut rows = Vec::new();
    let mut scatter = Vec::new();
    for (job, beta) in cfg.beta.grid_points().into_iter().enumerate() {
        let samples = adaptive_farm(&lattice, beta, cfg, job as u64, &pool)?;
        let est = estimate_of(&samples, "power_sum_2", |m| m.power_sum(2));
        // Clamp the rare subcritical fluctuation above the bound rather
        // than failing the whole scan.
        let m = m_from_second_moment(est.mean.min(1.0 / (theta + 1.0)), theta)?;
        let m_stderr = if est.mean > 0.0 { m * est.stderr / (2.0 * est.mean) } else { 0.0 };
        if cfg.scatter {
            scatter.extend(
                samples.iter().enumerate().map(|(i, s)| (beta, i as u64, s.power_sum(2))),
            );
        }
        rows.push(ScanRow { beta, second_moment: est, theta, m, m_stderr });
    }
    Ok(ScanReport { provenance: Provenance::of(cfg), rows, scatter })
}

// ---------------------------------------------------------------------------
// moments

#[derive(Debug, Clone, Serialize)]
pub struct SingleMomentRow {
    pub theta: f64,
    pub n1: u32,
    /// `E[Σ f^{n₁}]`.
    pub raw: MomentEstimate,
    /// The mass estimate `m_{n₁}`.
    pub m: MomentEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairMomentRow {
    pub theta: f64,
    pub n1: u32,
    pub n2: u32,
    /// `E[Σ_distinct f^{n₁} f^{n₂}]`.
    pub raw: MomentEstimate,
    /// The mass estimate `m_{n₁,n₂}`.
    pub m: MomentEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsReport {
    pub provenance: Provenance,
    pub singles: Vec<SingleMomentRow>,
    pub pairs: Vec<PairMomentRow>,
    /// Antipodal two-point connectivity estimate from the same samples.
    pub connectivity: MomentEstimate,
    pub probe_sites: (usize, usize),
}

/// Tables of `m_{n₁}` (n₁ = 2..5) and `m_{n₁,n₂}` (2 ≤ n₁ ≤ n₂ ≤ 5) at a
/// single β, under every requested θ hypothesis.
pub fn run_moments(cfg: &ExperimentConfig) -> Result<MomentsReport, ExperimentError> {
    cfg.validate()?;
    let lattice = Lattice::new(cfg.size, cfg.bc)?;
    let pool = cfg.pool()?;
    let beta = cfg.beta.grid_points()[0];
    let samples = adaptive_farm(&lattice, beta, cfg, 0, &pool)?;
    moments_from_samples(cfg, &lattice, &samples)
}

pub fn moments_from_samples(
    cfg: &ExperimentConfig,
    lattice: &Lattice,
    samples: &[SampleMoments],
) -> Result<MomentsReport, ExperimentError> {
    let thetas = cfg.theta.resolve(cfg.u);
    let mut singles = Vec::new();
    let mut pairs = Vec::new();
    for &theta in &thetas {
        for n1 in SINGLE_EXPONENTS {
            let raw = estimate_of(samples, &format!("power_sum_{n1}"), |m| m.power_sum(n1));
            let m = m_single(&raw, n1, theta)?;
            singles.push(SingleMomentRow { theta, n1, raw, m });
        }
        for n1 in SINGLE_EXPONENTS {
            for n2 in n1..SINGLE_EXPONENTS.end {
                let raw = estimate_of(samples, &format!("distinct_{n1}_{n2}"), |m| {
                    m.pair_moment(n1, n2)
                });
                let m = m_pair(&raw, n1, n2, theta)?;
                pairs.push(PairMomentRow { theta, n1, n2, raw, m });
            }
        }
    }
    let pair_sites = antipodal_pair(lattice);
    let connected: Vec<f64> =
        samples.iter().map(|s| f64::from(s.antipodal_connected)).collect();
    let connectivity = MomentEstimate::from_samples(
        format!("connect_{}_{}", pair_sites.0, pair_sites.1),
        &connected,
    )?;
    Ok(MomentsReport {
        provenance: Provenance::of(cfg),
        singles,
        pairs,
        connectivity,
        probe_sites: pair_sites,
    })
}

// ---------------------------------------------------------------------------
// betac

#[derive(Debug, Clone, Serialize)]
pub struct BetaCEstimate {
    pub u: f64,
    /// Bracket midpoint; prefer the bracket itself.
    pub estimate: f64,
    pub bracket: (f64, f64),
    pub sizes: (usize, usize),
    /// Human-readable description of the crossing criterion.
    pub criterion: String,
    pub tolerance: f64,
    /// False when the sample cap was reached before the bracket narrowed
    /// to the tolerance.
    pub converged: bool,
    /// Total samples drawn across all evaluations.
    pub samples_used: usize,
}

/// Finite-size crossing statistic `R_L(β) = sqrt(E[Σ f²]) · L^x` and its
/// standard error.
fn crossing_statistic(
    lattice: &Lattice,
    beta: f64,
    cfg: &ExperimentConfig,
    job: u64,
    n: Range<u64>,
    pool: &rayon::ThreadPool,
    acc: &mut Vec<SampleMoments>,
) -> Result<(f64, f64), ExperimentError> {
    let more = sample_moments_farm(lattice, beta, cfg.u, cfg.seed, job, n, pool)?;
    acc.extend(more);
    let s2: Vec<f64> = acc.iter().map(|m| m.power_sum(2)).collect();
    let est = MomentEstimate::from_samples("s2", &s2)?;
    let scale = (lattice.side() as f64).powf(cfg.crossing_exponent);
    let r = est.mean.max(0.0).sqrt() * scale;
    // Delta method for sqrt: σ_R = L^x · σ_E / (2 sqrt(E)).
    let sigma = if est.mean > 0.0 { scale * est.stderr / (2.0 * est.mean.sqrt()) } else { 0.0 };
    Ok((r, sigma))
}

/// Estimate β_c(u) by bisecting on the sign of
/// `R_{2L}(β) − R_L(β)`: negative in the subcritical phase (the statistic
/// decreases with size), positive in the supercritical phase. Evaluations
/// adaptively double their sample count until the sign is 2σ-significant
/// or the cap is reached.
pub fn estimate_beta_c(cfg: &ExperimentConfig) -> Result<BetaCEstimate, ExperimentError> {
    cfg.validate()?;
    let (l1, l2) = (cfg.size, 2 * cfg.size);
    let lat1 = Lattice::new(l1, cfg.bc)?;
    let lat2 = Lattice::new(l2, cfg.bc)?;
    let pool = cfg.pool()?;
    let BetaSpec::Grid { min, max, .. } = cfg.beta else {
        return Err(ExperimentError::Config("betac needs a beta grid".into()));
    };
    let criterion = format!(
        "crossing of sqrt(E[sum (l_j/|V|)^2]) * L^{} between L={l1} and L={l2}",
        cfg.crossing_exponent
    );

    let mut job: u64 = 0;
    let mut samples_used = 0usize;
    // Significant sign of Δ(β) = R_{L2} − R_{L1}, or None at the cap.
    let mut delta_sign = |beta: f64| -> Result<Option<f64>, ExperimentError> {
        let (job1, job2) = (job, job + 1);
        job += 2;
        let mut acc1 = Vec::new();
        let mut acc2 = Vec::new();
        let mut n = cfg.min_samples as u64;
        let (mut drawn1, mut drawn2) = (0u64, 0u64);
        loop {
            let (r1, s1) =
                crossing_statistic(&lat1, beta, cfg, job1, drawn1..n, &pool, &mut acc1)?;
            let (r2, s2) =
                crossing_statistic(&lat2, beta, cfg, job2, drawn2..n, &pool, &mut acc2)?;
            let newly_drawn = (n - drawn1) + (n - drawn2);
            drawn1 = n;
            drawn2 = n;
            samples_used += newly_drawn as usize;
            let delta = r2 - r1;
            let sigma = (s1 * s1 + s2 * s2).sqrt();
            if delta.abs() >= 2.0 * sigma {
                return Ok(Some(delta));
            }
            if n as usize >= cfg.samples {
                return Ok(None);
            }
            n = (n * 2).min(cfg.samples as u64);
        }
    };

    let lo_sign = delta_sign(min)?;
    match lo_sign {
        Some(d) if d < 0.0 => {}
        Some(_) => {
            return Err(ExperimentError::Bracketing(format!(
                "R_{l2} already exceeds R_{l1} at beta-min = {min}; no crossing in the grid"
            )))
        }
        None => {
            return Err(ExperimentError::Bracketing(format!(
                "sign of the crossing statistic at beta-min = {min} is not resolvable \
                 within the sample cap {}",
                cfg.samples
            )))
        }
    }
    let hi_sign = delta_sign(max)?;
    match hi_sign {
        Some(d) if d > 0.0 => {}
        Some(_) => {
            return Err(ExperimentError::Bracketing(format!(
                "R_{l2} still below R_{l1} at beta-max = {max}; no crossing in the grid"
            )))
        }
        None => {
            return Err(ExperimentError::Bracketing(format!(
                "sign of the crossing statistic at beta-max = {max} is not resolvable \
                 within the sample cap {}",
                cfg.samples
            )))
        }
    }

    let (mut lo, mut hi) = (min, max);
    let mut converged = true;
    while hi - lo > cfg.betac_tol {
        let mid = 0.5 * (lo + hi);
        match delta_sign(mid)? {
            Some(d) if d < 0.0 => lo = mid,
            Some(_) => hi = mid,
            None => {
                // The crossing is statistically indistinguishable from mid
                // at the sample cap; report the current bracket honestly.
                converged = false;
                break;
            }
        }
    }

    Ok(BetaCEstimate {
        u: cfg.u,
        estimate: 0.5 * (lo + hi),
        bracket: (lo, hi),
        sizes: (l1, l2),
        criterion,
        tolerance: cfg.betac_tol,
        converged,
        samples_used,
    })
}

// ---------------------------------------------------------------------------
// pd-check

#[derive(Debug, Clone, Serialize)]
pub struct PdCheckRow {
    pub theta: f64,
    pub exponents: Vec<u32>,
    /// Simulated `E[Σ_distinct Π f^{n_i}]`.
    pub simulated: MomentEstimate,
    /// `m^{Σn} ×` exact PD moment, with `m` from the second moment under
    /// the same θ.
    pub reference: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThetaDiscrimination {
    pub theta: f64,
    /// `m_{n₁}` for n₁ = 2..5.
    pub m_values: Vec<MomentEstimate>,
    /// max − min of the `m_{n₁}` means.
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PdCheckReport {
    pub provenance: Provenance,
    pub rows: Vec<PdCheckRow>,
    pub discrimination: Vec<ThetaDiscrimination>,
}

/// Compare simulated loop moments against the exact Poisson-Dirichlet
/// values under both θ hypotheses, and summarise which θ keeps the
/// `m_{n₁}` sequence flat.
pub fn run_pd_check(cfg: &ExperimentConfig) -> Result<PdCheckReport, ExperimentError> {
    cfg.validate()?;
    let lattice = Lattice::new(cfg.size, cfg.bc)?;
    let pool = cfg.pool()?;
    let beta = cfg.beta.grid_points()[0];
    let samples = adaptive_farm(&lattice, beta, cfg, 0, &pool)?;

    let exponent_sets: Vec<Vec<u32>> =
        vec![vec![2], vec![3], vec![4], vec![5], vec![2, 2], vec![3, 2], vec![3, 3]];

    let mut rows = Vec::new();
    let mut discrimination = Vec::new();
    for theta in [0.5, 1.0] {
        let s2 = estimate_of(&samples, "power_sum_2", |m| m.power_sum(2));
        let m = m_single(&s2, 2, theta)?.mean;
        for exps in &exponent_sets {
            let label = format!(
                "distinct_{}",
                exps.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("_")
            );
            let simulated = estimate_of(&samples, &label, |s| match exps.len() {
                1 => s.power_sum(exps[0]),
                2 => s.pair_moment(exps[0], exps[1]),
                _ => unreachable!("exponent sets are singles or pairs"),
            });
            let reference = pd_moment_exact_scaled(theta, exps, m.min(1.0))?;
            let ratio = if reference > 0.0 { simulated.mean / reference } else { f64::NAN };
            let ratio_stderr = if reference > 0.0 { simulated.stderr / reference } else { f64::NAN };
            rows.push(PdCheckRow {
                theta,
                exponents: exps.clone(),
                simulated,
                reference,
                ratio,
                ratio_stderr,
            });
        }
        let mut m_values = Vec::new();
        for n1 in SINGLE_EXPONENTS {
            let raw = estimate_of(&samples, &format!("power_sum_{n1}"), |m| m.power_sum(n1));
            m_values.push(m_single(&raw, n1, theta)?);
        }
        let spread = m_values.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max)
            - m_values.iter().map(|e| e.mean).fold(f64::INFINITY, f64::min);
        discrimination.push(ThetaDiscrimination { theta, m_values, spread });
    }

    Ok(PdCheckReport { provenance: Provenance::of(cfg), rows, discrimination })
}

// ---------------------------------------------------------------------------
// partition dump

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub sample: u64,
    pub u: f64,
    pub beta: f64,
    pub size: usize,
    pub bc: BoundaryCondition,
    pub seed: u64,
    /// Sorted `ℓ_j/|Λ|`.
    pub fractions: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_fractions: Option<Vec<f64>>,
}

/// Write one JSON record per realisation with the sorted shadow fractions
/// (and optionally the length fractions). Samples are processed in
/// batches so large lattices stream instead of accumulating.
pub fn dump_partitions(cfg: &ExperimentConfig, out: &mut impl Write) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let lattice = Lattice::new(cfg.size, cfg.bc)?;
    let pool = cfg.pool()?;
    let beta = cfg.beta.grid_points()[0];
    let sites = lattice.site_count() as f64;
    let batch = 64usize;
    let mut start = 0u64;
    while start < cfg.samples as u64 {
        let end = (start + batch as u64).min(cfg.samples as u64);
        let records: Result<Vec<PartitionRecord>, ExperimentError> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(cfg.seed, i);
                    let real = Realisation::sample(&lattice, beta, cfg.u, &mut rng)?;
                    let loops = trace_loops(&real)?;
                    let fractions =
                        loops.shadow_partition().iter().map(|&l| l as f64 / sites).collect();
                    let length_fractions = cfg.dump_lengths.then(|| {
                        loops.length_partition().iter().map(|&l| l / (beta * sites)).collect()
                    });
                    Ok(PartitionRecord {
                        sample: i,
                        u: cfg.u,
                        beta,
                        size: cfg.size,
                        bc: cfg.bc,
                        seed: cfg.seed,
                        fractions,
                        length_fractions,
                    })
                })
                .collect()
        });
        for record in records? {
            serde_json::to_writer(&mut *out, &record)
                .map_err(|e| ExperimentError::Config(format!("serialise: {e}")))?;
            out.write_all(b"\n")?;
        }
        start = end;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// serialisation

/// Provenance fields every output row carries.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub u: f64,
    pub beta: BetaSpec,
    pub size: usize,
    pub bc: BoundaryCondition,
    pub seed: u64,
}

impl Provenance {
    fn of(cfg: &ExperimentConfig) -> Self {
        Provenance { u: cfg.u, beta: cfg.beta, size: cfg.size, bc: cfg.bc, seed: cfg.seed }
    }
}

pub const MOMENT_CSV_HEADER: &str = "label,u,beta,L,bc,seed,n_samples,mean,stderr";

fn moment_csv_row(
    w: &mut impl Write,
    est: &MomentEstimate,
    p: &Provenance,
    beta: f64,
) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{:.12e},{:.12e}",
        est.label, p.u, beta, p.size, p.bc, p.seed, est.n_samples, est.mean, est.stderr
    )
}

impl ScanReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{MOMENT_CSV_HEADER}")?;
        for row in &self.rows {
            moment_csv_row(w, &row.second_moment, &self.provenance, row.beta)?;
            let m_est = MomentEstimate {
                label: format!("m_theta_{}", row.theta),
                mean: row.m,
                stderr: row.m_stderr,
                n_samples: row.second_moment.n_samples,
            };
            moment_csv_row(w, &m_est, &self.provenance, row.beta)?;
        }
        if !self.scatter.is_empty() {
            writeln!(w, "# scatter: beta,sample,power_sum_2")?;
            for &(beta, i, v) in &self.scatter {
                writeln!(w, "# {beta},{i},{v:.12e}")?;
            }
        }
        Ok(())
    }
}

impl MomentsReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{MOMENT_CSV_HEADER}")?;
        let beta = match self.provenance.beta {
            BetaSpec::Single(b) => b,
            BetaSpec::Grid { min, .. } => min,
        };
        for row in &self.singles {
            moment_csv_row(w, &row.raw, &self.provenance, beta)?;
            moment_csv_row(w, &row.m, &self.provenance, beta)?;
        }
        for row in &self.pairs {
            moment_csv_row(w, &row.raw, &self.provenance, beta)?;
            moment_csv_row(w, &row.m, &self.provenance, beta)?;
        }
        moment_csv_row(w, &self.connectivity, &self.provenance, beta)?;
        Ok(())
    }
}

impl BetaCEstimate {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "u,beta_c,bracket_lo,bracket_hi,L1,L2,tolerance,converged,samples_used,criterion")?;
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{},{},{},{},{},\"{}\"",
            self.u,
            self.estimate,
            self.bracket.0,
            self.bracket.1,
            self.sizes.0,
            self.sizes.1,
            self.tolerance,
            self.converged,
            self.samples_used,
            self.criterion
        )
    }
}

impl PdCheckReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "label,u,beta,L,bc,seed,n_samples,theta,simulated,simulated_stderr,reference,ratio,ratio_stderr"
        )?;
        let p = &self.provenance;
        let beta = match p.beta {
            BetaSpec::Single(b) => b,
            BetaSpec::Grid { min, .. } => min,
        };
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.6},{:.6}",
                row.simulated.label,
                p.u,
                beta,
                p.size,
                p.bc,
                p.seed,
                row.simulated.n_samples,
                row.theta,
                row.simulated.mean,
                row.simulated.stderr,
                row.reference,
                row.ratio,
                row.ratio_stderr
            )?;
        }
        for d in &self.discrimination {
            for est in &d.m_values {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{:.12e},{:.12e},,,",
                    est.label, p.u, beta, p.size, p.bc, p.seed, est.n_samples, d.theta, est.mean,
                    est.stderr
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg(mode: Mode, beta: BetaSpec) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(mode, 4, 1.0, beta);
        cfg.bc = BoundaryCondition::Free;
        cfg.samples = 64;
        cfg.min_samples = 64;
        cfg.seed = 9;
        cfg.workers = 2;
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg(Mode::Moments, BetaSpec::Single(1.0));
        cfg.validate().unwrap();
        cfg.u = 1.5;
        assert!(cfg.validate().is_err());
        cfg.u = 1.0;
        cfg.size = 2;
        cfg.bc = BoundaryCondition::Periodic;
        assert!(cfg.validate().is_err());
        cfg.size = 4;
        cfg.beta = BetaSpec::Single(-1.0);
        assert!(cfg.validate().is_err());
        cfg.beta = BetaSpec::Grid { min: 0.2, max: 0.1, steps: 3 };
        assert!(cfg.validate().is_err());
        // Grid beta is rejected for single-beta modes and vice versa.
        cfg.beta = BetaSpec::Grid { min: 0.2, max: 0.4, steps: 3 };
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg(Mode::Scan, BetaSpec::Single(1.0));
        assert!(cfg.validate().is_err());
        cfg.min_samples = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn theta_resolution() {
        assert_eq!(ThetaChoice::Auto.resolve(0.0), vec![1.0]);
        assert_eq!(ThetaChoice::Auto.resolve(1.0), vec![1.0]);
        assert_eq!(ThetaChoice::Auto.resolve(0.5), vec![0.5]);
        assert_eq!(ThetaChoice::Fixed(0.7).resolve(0.5), vec![0.7]);
        assert_eq!(ThetaChoice::Both.resolve(0.3), vec![0.5, 1.0]);
        assert_eq!("auto".parse::<ThetaChoice>().unwrap(), ThetaChoice::Auto);
        assert_eq!("0.5".parse::<ThetaChoice>().unwrap(), ThetaChoice::Fixed(0.5));
        assert!("zero".parse::<ThetaChoice>().is_err());
    }

    #[test]
    fn subcritical_second_moment_is_microscopic() {
        // Below the percolation bound every loop is O(1), so E[Σ f²]
        // is of order 1/|Λ|.
        let mut cfg = base_cfg(Mode::Scan, BetaSpec::Grid { min: 0.1, max: 0.2, steps: 2 });
        cfg.size = 6;
        let report = run_scan(&cfg).unwrap();
        let volume = 6.0f64.powi(3);
        for row in &report.rows {
            assert!(
                row.second_moment.mean < 10.0 / volume,
                "beta {}: E[s2] = {} not microscopic",
                row.beta,
                row.second_moment.mean
            );
        }
    }

    #[test]
    fn scan_means_nondecreasing_in_beta() {
        // m(β) is increasing; demand no 3σ-significant inversion.
        let mut cfg = base_cfg(Mode::Scan, BetaSpec::Grid { min: 0.3, max: 1.2, steps: 4 });
        cfg.size = 5;
        cfg.samples = 128;
        cfg.min_samples = 128;
        let report = run_scan(&cfg).unwrap();
        for pair in report.rows.windows(2) {
            let (a, b) = (&pair[0].second_moment, &pair[1].second_moment);
            let sigma = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            assert!(
                b.mean >= a.mean - 3.0 * sigma,
                "inversion between beta {} and {}",
                pair[0].beta,
                pair[1].beta
            );
        }
    }

    #[test]
    fn moments_report_covers_requested_thetas() {
        let mut cfg = base_cfg(Mode::Moments, BetaSpec::Single(1.0));
        cfg.u = 0.5;
        cfg.theta = ThetaChoice::Both;
        let report = run_moments(&cfg).unwrap();
        assert_eq!(report.singles.len(), 8); // 4 exponents x 2 thetas
        assert_eq!(report.pairs.len(), 20); // 10 pairs x 2 thetas
        assert_eq!(report.connectivity.n_samples, 64);
    }

    #[test]
    fn reports_are_reproducible_and_worker_independent() {
        let mut cfg = base_cfg(Mode::Moments, BetaSpec::Single(0.8));
        cfg.u = 0.5;
        let a = run_moments(&cfg).unwrap();
        let b = run_moments(&cfg).unwrap();
        cfg.workers = 1;
        let c = run_moments(&cfg).unwrap();
        for (x, y) in [(&a, &b), (&a, &c)] {
            for (rx, ry) in x.singles.iter().zip(&y.singles) {
                assert_eq!(rx.raw.mean, ry.raw.mean);
                assert_eq!(rx.m.mean, ry.m.mean);
            }
            assert_eq!(x.connectivity.mean, y.connectivity.mean);
        }
    }

    #[test]
    fn beta_zero_limit_matches_closed_form() {
        // With no events every site is a singleton loop: Σ f^n = |Λ|^{1-n}.
        let lattice = Lattice::new(3, BoundaryCondition::Free).unwrap();
        let real = Realisation::from_events(&lattice, 1.0, 1.0, &[]).unwrap();
        let loops = trace_loops(&real).unwrap();
        let p = PartitionSample::from_shadows(&loops);
        let volume = 27.0f64;
        for n in 2..=5u32 {
            let expected = volume.powi(1 - n as i32);
            approx::assert_relative_eq!(
                p.power_sum(n).unwrap(),
                expected,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn pd_check_second_moment_row_is_self_consistent() {
        // The mass fed into the reference is derived from E[Σ f²] under
        // the same θ, so the (2) row's ratio is 1 by construction; it
        // anchors the scale of the other rows.
        let mut cfg = base_cfg(Mode::PdCheck, BetaSpec::Single(1.0));
        cfg.u = 1.0;
        let report = run_pd_check(&cfg).unwrap();
        for theta in [0.5, 1.0] {
            let row = report
                .rows
                .iter()
                .find(|r| r.theta == theta && r.exponents == vec![2])
                .unwrap();
            approx::assert_relative_eq!(row.ratio, 1.0, max_relative = 1e-9);
        }
        assert_eq!(report.discrimination.len(), 2);
    }

    #[test]
    fn partition_dump_is_normalised_jsonl() {
        let mut cfg = base_cfg(Mode::PartitionDump, BetaSpec::Single(0.5));
        cfg.samples = 8;
        cfg.min_samples = 8;
        cfg.dump_lengths = true;
        let mut buf = Vec::new();
        dump_partitions(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        for line in lines {
            let rec: PartitionRecord = serde_json::from_str(line).unwrap();
            let sum: f64 = rec.fractions.iter().sum();
            approx::assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            let lsum: f64 = rec.length_fractions.unwrap().iter().sum();
            approx::assert_relative_eq!(lsum, 1.0, epsilon = 1e-9);
            assert_eq!(rec.seed, cfg.seed);
        }
    }

    #[test]
    fn scan_csv_has_provenance_columns() {
        let mut cfg = base_cfg(Mode::Scan, BetaSpec::Grid { min: 0.4, max: 0.8, steps: 2 });
        cfg.size = 4;
        let report = run_scan(&cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), MOMENT_CSV_HEADER);
        let first = lines.next().unwrap();
        assert!(first.starts_with("power_sum_2,1,0.4,4,free,9,"), "row was {first}");
    }
}
