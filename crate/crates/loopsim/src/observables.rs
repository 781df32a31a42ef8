//! Estimators built on loop partitions: power sums, distinct-index mixed
//! moments, the macroscopic mass `m(β)`, two-point connectivity, the
//! percolation projection with its cluster bound, and the mesoscopic-mass
//! diagnostic.

use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::lattice::Lattice;
use crate::looptracer::LoopSet;
use crate::realisation::Realisation;

#[derive(Debug, Error, PartialEq)]
pub enum ObservableError {
    /// `n = 0` diverges with microscopic loops.
    #[error("power sum exponent must be >= 1")]
    ZeroExponent,
    /// Small loops contaminate `n = 1` terms of distinct moments.
    #[error("distinct moment exponents must all be >= 2, got {0}")]
    ExponentTooSmall(u32),
    #[error("moment must be nonnegative, got {0}")]
    NegativeMoment(f64),
    #[error("theta must be positive, got {0}")]
    NonPositiveTheta(f64),
    #[error("(theta+1) * E2 = {0} exceeds 1; not a valid squared mass")]
    MassBoundExceeded(f64),
    #[error("two-point connectivity needs two distinct sites, got {0} twice")]
    SamePair(usize),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("no samples supplied")]
    EmptySampleSet,
}

/// Tolerance on the unit-sum constraint of a partition.
pub const PARTITION_SUM_TOL: f64 = 1e-9;
/// Headroom on the `(θ+1) E₂ ≤ 1` mass bound.
pub const MASS_BOUND_TOL: f64 = 1e-6;

/// A sorted random partition of `[0, 1]`: fractions `ℓ_j/|Λ|` (shadow
/// version) or `L_j/(β|Λ|)` (length version), descending.
#[derive(Debug, Clone)]
pub struct PartitionSample {
    fractions: Vec<f64>,
    /// The normalisation the fractions were divided by (`|Λ|` or `β|Λ|`),
    /// kept so size cutoffs in original units remain expressible.
    norm: f64,
}

impl PartitionSample {
    /// Shadow partition `(ℓ_1/|Λ|, ℓ_2/|Λ|, …)`.
    pub fn from_shadows(loops: &LoopSet) -> Self {
        let norm = loops.site_count() as f64;
        let fractions = loops.shadow_partition().iter().map(|&l| l as f64 / norm).collect();
        PartitionSample { fractions, norm }
    }

    /// Length partition `(L_1/(β|Λ|), L_2/(β|Λ|), …)`.
    pub fn from_lengths(loops: &LoopSet) -> Self {
        let norm = loops.beta() * loops.site_count() as f64;
        let fractions = loops.length_partition().iter().map(|&l| l / norm).collect();
        PartitionSample { fractions, norm }
    }

    /// Build from pre-normalised fractions; validates descending order and
    /// unit sum within [`PARTITION_SUM_TOL`].
    pub fn from_fractions(fractions: Vec<f64>, norm: f64) -> Result<Self, ObservableError> {
        if fractions.windows(2).any(|w| w[0] < w[1]) {
            return Err(ObservableError::InvalidPartition("fractions not descending".into()));
        }
        if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(ObservableError::InvalidPartition(
                "fractions must lie in (0, 1]".into(),
            ));
        }
        let sum = kahan_sum(fractions.iter().copied());
        if (sum - 1.0).abs() > PARTITION_SUM_TOL {
            return Err(ObservableError::InvalidPartition(format!(
                "fractions sum to {sum}, not 1"
            )));
        }
        Ok(PartitionSample { fractions, norm })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// `Σ_j f_j^n`.
    pub fn power_sum(&self, n: u32) -> Result<f64, ObservableError> {
        if n == 0 {
            return Err(ObservableError::ZeroExponent);
        }
        Ok(kahan_sum(self.fractions.iter().map(|&f| f.powi(n as i32))))
    }

    /// All power sums `Σ f^n` for `n = 2..=max_n` in one pass.
    pub fn power_sums_upto(&self, max_n: u32) -> Vec<f64> {
        assert!(max_n >= 2);
        let mut sums = vec![0.0; (max_n - 1) as usize];
        let mut comp = vec![0.0; (max_n - 1) as usize];
        for &f in &self.fractions {
            let mut p = f * f;
            for i in 0..sums.len() {
                // Kahan step: partitions hold thousands of tiny parts.
                let y = p - comp[i];
                let t = sums[i] + y;
                comp[i] = (t - sums[i]) - y;
                sums[i] = t;
                p *= f;
            }
        }
        sums
    }

    /// `Σ over ordered k-tuples of distinct indices of Π f_{j_i}^{n_i}`.
    ///
    /// Evaluated by inclusion-exclusion over set partitions of the
    /// exponent indices, which reduces the sum to power-sum products; a
    /// block of size `m` carries the Möbius weight `(−1)^{m−1} (m−1)!`.
    pub fn distinct_moment(&self, exponents: &[u32]) -> Result<f64, ObservableError> {
        if let Some(&bad) = exponents.iter().find(|&&n| n < 2) {
            return Err(ObservableError::ExponentTooSmall(bad));
        }
        assert!(!exponents.is_empty() && exponents.len() <= 8);
        let k = exponents.len();
        let total: u32 = exponents.iter().sum();
        let sums = self.power_sums_upto(total);
        let s = |n: u32| sums[(n - 2) as usize];

        let mut acc = 0.0;
        let mut blocks: Vec<u32> = Vec::with_capacity(k);
        // Enumerate set partitions: element i joins an existing block or
        // opens a new one. Only block exponent totals matter.
        fn recurse(
            i: usize,
            exponents: &[u32],
            blocks: &mut Vec<u32>,
            acc: &mut f64,
            s: &dyn Fn(u32) -> f64,
            sizes: &mut Vec<u32>,
        ) {
            if i == exponents.len() {
                let mut term = 1.0;
                for (b, &total) in blocks.iter().enumerate() {
                    let m = sizes[b];
                    let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
                    let weight = sign * (1..m).map(f64::from).product::<f64>();
                    term *= weight * s(total);
                }
                *acc += term;
                return;
            }
            for b in 0..blocks.len() {
                blocks[b] += exponents[i];
                sizes[b] += 1;
                recurse(i + 1, exponents, blocks, acc, s, sizes);
                sizes[b] -= 1;
                blocks[b] -= exponents[i];
            }
            blocks.push(exponents[i]);
            sizes.push(1);
            recurse(i + 1, exponents, blocks, acc, s, sizes);
            sizes.pop();
            blocks.pop();
        }
        let mut sizes: Vec<u32> = Vec::with_capacity(k);
        recurse(0, exponents, &mut blocks, &mut acc, &s, &mut sizes);
        Ok(acc)
    }

    /// Total fraction carried by loops of mesoscopic size, i.e. with
    /// `micro_cutoff < size < macro_fraction · norm` in original units.
    pub fn mesoscopic_mass(&self, micro_cutoff: usize, macro_fraction: f64) -> f64 {
        assert!(micro_cutoff >= 1, "micro cutoff must be >= 1");
        assert!(
            macro_fraction > 0.0 && macro_fraction < 1.0,
            "macro fraction must lie in (0, 1)"
        );
        // Small slack keeps integer shadow counts on the correct side of
        // the strict cutoffs despite the division by |Λ|.
        let lo = micro_cutoff as f64 + 1e-9;
        self.fractions
            .iter()
            .filter(|&&f| f * self.norm > lo && f < macro_fraction)
            .sum()
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MomentEstimate {
    pub label: String,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_samples)`; 0 for n < 2.
    pub stderr: f64,
    pub n_samples: usize,
}

impl MomentEstimate {
    pub fn from_samples(label: impl Into<String>, xs: &[f64]) -> Result<Self, ObservableError> {
        if xs.is_empty() {
            return Err(ObservableError::EmptySampleSet);
        }
        let n = xs.len() as f64;
        let mean = kahan_sum(xs.iter().copied()) / n;
        let stderr = if xs.len() < 2 {
            0.0
        } else {
            let var = kahan_sum(xs.iter().map(|&x| (x - mean) * (x - mean))) / (n - 1.0);
            (var / n).sqrt()
        };
        Ok(MomentEstimate { label: label.into(), mean, stderr, n_samples: xs.len() })
    }
}

/// Order-independent compensated summation.
pub(crate) fn kahan_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// `m(β) = sqrt((θ+1) E[Σ (ℓ_j/|Λ|)²])`, clamped to `[0, 1]`.
pub fn m_from_second_moment(e2: f64, theta: f64) -> Result<f64, ObservableError> {
    if e2 < 0.0 {
        return Err(ObservableError::NegativeMoment(e2));
    }
    if theta <= 0.0 {
        return Err(ObservableError::NonPositiveTheta(theta));
    }
    let sq = (theta + 1.0) * e2;
    if sq > 1.0 + MASS_BOUND_TOL {
        return Err(ObservableError::MassBoundExceeded(sq));
    }
    Ok(sq.sqrt().min(1.0))
}

/// Single-loop mass estimator
/// `m_{n₁} = [Γ(θ+n₁)/(θ Γ(θ) Γ(n₁)) · E(Σ f^{n₁})]^{1/n₁}`,
/// with the standard error propagated through the power.
///
/// The value is deliberately not clamped: evaluating a partition under the
/// wrong θ hypothesis is supposed to produce visibly inconsistent
/// estimates, and may exceed 1.
pub fn m_single(
    moment: &MomentEstimate,
    n1: u32,
    theta: f64,
) -> Result<MomentEstimate, ObservableError> {
    if n1 < 2 {
        return Err(ObservableError::ExponentTooSmall(n1));
    }
    if theta <= 0.0 {
        return Err(ObservableError::NonPositiveTheta(theta));
    }
    if moment.mean < 0.0 {
        return Err(ObservableError::NegativeMoment(moment.mean));
    }
    let factor = gamma(theta + n1 as f64) / (theta * gamma(theta) * gamma(n1 as f64));
    Ok(powered_estimate(moment, factor, n1, format!("m_{n1}_theta_{theta}")))
}

/// Two-loop mass estimator
/// `m_{n₁,n₂} = [Γ(θ+n₁+n₂)/(θ² Γ(θ) Γ(n₁) Γ(n₂)) · E(Σ_distinct …)]^{1/(n₁+n₂)}`.
pub fn m_pair(
    moment: &MomentEstimate,
    n1: u32,
    n2: u32,
    theta: f64,
) -> Result<MomentEstimate, ObservableError> {
    for n in [n1, n2] {
        if n < 2 {
            return Err(ObservableError::ExponentTooSmall(n));
        }
    }
    if theta <= 0.0 {
        return Err(ObservableError::NonPositiveTheta(theta));
    }
    if moment.mean < 0.0 {
        return Err(ObservableError::NegativeMoment(moment.mean));
    }
    let factor = gamma(theta + (n1 + n2) as f64)
        / (theta * theta * gamma(theta) * gamma(n1 as f64) * gamma(n2 as f64));
    Ok(powered_estimate(moment, factor, n1 + n2, format!("m_{n1}_{n2}_theta_{theta}")))
}

/// `(a·mean)^{1/p}` with the delta-method standard error
/// `m · stderr / (p · mean)`.
fn powered_estimate(moment: &MomentEstimate, a: f64, p: u32, label: String) -> MomentEstimate {
    let scaled = a * moment.mean;
    let m = scaled.powf(1.0 / p as f64);
    let stderr = if moment.mean > 0.0 {
        m * moment.stderr / (p as f64 * moment.mean)
    } else {
        0.0
    };
    MomentEstimate { label, mean: m, stderr, n_samples: moment.n_samples }
}

/// Fraction of realisations in which `(x, 0)` and `(y, 0)` lie on the same
/// loop.
pub fn two_point_connectivity(
    samples: &[LoopSet],
    x: usize,
    y: usize,
) -> Result<MomentEstimate, ObservableError> {
    if x == y {
        return Err(ObservableError::SamePair(x));
    }
    let indicators: Vec<f64> = samples
        .iter()
        .map(|ls| f64::from(ls.same_loop_at_time_zero(x, y)))
        .collect();
    MomentEstimate::from_samples(format!("connect_{x}_{y}"), &indicators)
}

/// Bond configuration η(ω): one bit per edge, set iff at least one event
/// occurs on that edge. Each bit is open with probability `1 − e^{−β}`.
pub fn percolation_projection(r: &Realisation) -> Vec<bool> {
    (0..r.lattice().edge_count()).map(|e| !r.edge_events(e).is_empty()).collect()
}

/// Number of connected components of the open-bond graph over all sites
/// (isolated sites count as clusters).
pub fn cluster_count(open: &[bool], lattice: &Lattice) -> usize {
    assert_eq!(open.len(), lattice.edge_count());
    let mut uf = UnionFind::new(lattice.site_count());
    for (e, &bit) in open.iter().enumerate() {
        if bit {
            let (a, b) = lattice.edge_endpoints(e);
            uf.union(a, b);
        }
    }
    uf.count
}

struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
    count: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect(), rank: vec![0; n], count: n }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a as u32), self.find(b as u32));
        if ra == rb {
            return;
        }
        let (hi, lo) = if self.rank[ra as usize] >= self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
        self.count -= 1;
    }
}
