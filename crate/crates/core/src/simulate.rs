//! Samplers and Monte Carlo studies: power of the strong-null tests,
//! confidence-interval coverage, discretization bias of partitioned doses,
//! and the first-order insensitivity of the moments to nuisance error.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{decompose, estimate_d0, two_sided_p, Component, DecompositionQuery, ParameterId};
use crate::error::{Error, Result};
use crate::hypothesis::{
    analytic_power, covariance_of, strong_null_contrasts, supremum_test, wald_test, wald_test_generalized, z_test,
    Method, PowerSpec, SupremumRule,
};
use crate::model::{discretize, AggregationScheme, Arm, Dataset, Design, GroupRule, PartitionScheme};
use crate::moments::{Aggregate, Context, PrimitiveId};
use crate::nuisance::{assign_folds, fit_granular, CellFrequency, NuisanceEstimates, DEFAULT_FOLDS};
use crate::oracle::{population_decomposition, power_design, standard_query, DiscreteDgp, PopulationDecomposition};

/// Seed for a named sub-stream of a master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(master ^ mix(tag))
}

/// Version-count design with a control label of probability 1/2 and `J`
/// treated versions of probability `1/(2J)` each. The first `round(J^a)`
/// versions differ between the groups by `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSimDgp {
    pub j: usize,
    pub sparsity: f64,
    pub magnitude: f64,
}

impl PowerSimDgp {
    pub fn xi(&self) -> Vec<f64> {
        let k = (self.j as f64).powf(self.sparsity).round() as usize;
        (1..=self.j).map(|t| if t <= k { self.magnitude } else { 0.0 }).collect()
    }

    pub fn discrete(&self) -> Result<DiscreteDgp> {
        power_design(&self.xi())
    }

    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
        self.discrete()?.sample(n, seed, stream)
    }
}

/// An atom of the dose distribution with per-covariate probability and mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseAtom {
    pub location: f64,
    pub prob: [f64; 2],
    pub mean: [f64; 2],
}

/// Binary covariate `X ~ Bernoulli(1/2)` and a dose on `[0, 1]` with density
/// `(1 − Σπ_r(x)) (1 + s_x (2t − 1))` plus atoms. Outcome mean
/// `c + A (t − 1/2)(2x − 1)` on the continuous part, normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDgp {
    pub tilt: [f64; 2],
    pub amplitude: f64,
    pub intercept: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub atoms: Vec<DoseAtom>,
    /// Smoothness order of the mean in the dose, informational.
    pub smoothness: u32,
}

/// Composite Simpson rule with `m` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let h = (hi - lo) / m as f64;
    let mut s = f(lo) + f(hi);
    for k in 1..m {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + h * k as f64);
    }
    s * h / 3.0
}

/// Number of Simpson intervals for continuous truths.
pub const QUADRATURE_NODES: usize = 1 << 14;

impl ContinuousDgp {
    /// Smooth design of the partition study.
    pub fn smooth() -> Self {
        Self { tilt: [-0.9, 0.9], amplitude: 4.0, intercept: 1.0, noise_sd: 0.1, atoms: vec![], smoothness: 2 }
    }

    /// Smooth design plus an untreated atom at zero.
    pub fn with_zero_atom() -> Self {
        Self { atoms: vec![DoseAtom { location: 0.0, prob: [0.3, 0.1], mean: [-1.0, 2.0] }], ..Self::smooth() }
    }

    fn atom_mass(&self, x: usize) -> f64 {
        self.atoms.iter().map(|a| a.prob[x]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tilt.iter().any(|s| !(s.abs() < 1.0)) || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("tilts must lie in (-1, 1) and noise_sd must be nonnegative".into()));
        }
        for x in 0..2 {
            let m = self.atom_mass(x);
            if self.atoms.iter().any(|a| !(a.prob[x] >= 0.0)) || !(m < 1.0) {
                return Err(Error::InvalidInput("atom probabilities must be nonnegative with total below one".into()));
            }
            let total = simpson(|t| self.density(t, x), 0.0, 1.0, QUADRATURE_NODES) + m;
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::QuadratureFailure(format!("dose law for x={x} integrates to {total}")));
            }
        }
        Ok(())
    }

    /// Continuous part of the dose density given `x`.
    pub fn density(&self, t: f64, x: usize) -> f64 {
        (1.0 - self.atom_mass(x)) * (1.0 + self.tilt[x] * (2.0 * t - 1.0))
    }

    pub fn mean(&self, t: f64, x: usize) -> f64 {
        self.intercept + self.amplitude * (t - 0.5) * (2.0 * x as f64 - 1.0)
    }

    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let (mut y, mut dose, mut xs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let x = usize::from(rng.random::<bool>());
            let mut u: f64 = rng.random();
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut atom = None;
            for a in &self.atoms {
                if u < a.prob[x] {
                    atom = Some(a);
                    break;
                }
                u -= a.prob[x];
            }
            let (t, m) = match atom {
                Some(a) => (a.location, a.mean[x]),
                None => {
                    let v: f64 = rng.random();
                    let s = self.tilt[x];
                    // Inverse of F(t) = t + s (t² − t).
                    let t = if s.abs() < 1e-12 {
                        v
                    } else {
                        (-(1.0 - s) + ((1.0 - s).powi(2) + 4.0 * s * v).sqrt()) / (2.0 * s)
                    };
                    (t, self.mean(t, x))
                }
            };
            y.push(m + self.noise_sd * z);
            dose.push(t);
            xs.push(vec![x as f64]);
        }
        Dataset::from_doses(y, dose, xs)
    }

    /// Baseline of the continuous arm: the dose-density-weighted average of
    /// `E[μ(t, X)]`, by quadrature.
    pub fn continuous_d0(&self) -> Result<f64> {
        self.validate()?;
        let marginal = |t: f64| 0.5 * (self.density(t, 0) + self.density(t, 1));
        let mass = simpson(marginal, 0.0, 1.0, QUADRATURE_NODES);
        let num = simpson(|t| marginal(t) * 0.5 * (self.mean(t, 0) + self.mean(t, 1)), 0.0, 1.0, QUADRATURE_NODES);
        if !(mass > 0.0) || !num.is_finite() {
            return Err(Error::QuadratureFailure("continuous arm has no mass".into()));
        }
        Ok(num / mass)
    }

    /// Baseline of the atom arm, `Σ_r e_r μ_r` over atoms.
    pub fn atom_d0(&self) -> Result<f64> {
        let mass: f64 = 0.5 * (self.atom_mass(0) + self.atom_mass(1));
        if !(mass > 0.0) {
            return Err(Error::ZeroProbabilityCell("atom arm".into()));
        }
        Ok(self.atoms.iter().map(|a| 0.5 * (a.prob[0] + a.prob[1]) / mass * 0.5 * (a.mean[0] + a.mean[1])).sum())
    }

    /// `(P(T in bin | x), E[Y | T in bin, x])` for each bin between the
    /// given edges; the outer edges are taken as the support ends.
    fn bin_tables(&self, edges: &[f64]) -> Vec<[(f64, f64); 2]> {
        let k = edges.len() - 1;
        (0..k)
            .map(|b| {
                let lo = if b == 0 { 0.0 } else { edges[b] };
                let hi = if b == k - 1 { 1.0 } else { edges[b + 1] };
                let m = (QUADRATURE_NODES / k).max(16);
                let cell = |x: usize| {
                    let p = simpson(|t| self.density(t, x), lo, hi, m);
                    let s = simpson(|t| self.density(t, x) * self.mean(t, x), lo, hi, m);
                    (p, if p > 0.0 { s / p } else { 0.0 })
                };
                [cell(0), cell(1)]
            })
            .collect()
    }

    /// Baseline of the continuous arm after partitioning into the given bins.
    pub fn binned_d0(&self, edges: &[f64]) -> Result<f64> {
        if edges.len() < 2 {
            return Err(Error::InvalidPartition("need at least two edges".into()));
        }
        let tables = self.bin_tables(edges);
        let mass: f64 = tables.iter().map(|c| 0.5 * (c[0].0 + c[1].0)).sum();
        if !(mass > 0.0) {
            return Err(Error::QuadratureFailure("continuous arm has no mass".into()));
        }
        Ok(tables.iter().map(|c| 0.5 * (c[0].0 + c[1].0) / mass * 0.5 * (c[0].1 + c[1].1)).sum())
    }

    /// Discrete design induced by a partition: labels are the partition's
    /// atoms and bins, arms `atom` and `dose`, groups split on `x`.
    pub fn induced_design(&self, partition: &PartitionScheme) -> Result<DiscreteDgp> {
        self.validate()?;
        let tables = self.bin_tables(partition.edges());
        let labels = partition.labels();
        let mut propensity = vec![vec![]; 2];
        let mut mean = vec![vec![]; 2];
        for x in 0..2 {
            for &loc in partition.atoms() {
                let a = self
                    .atoms
                    .iter()
                    .find(|a| a.location == loc)
                    .ok_or_else(|| Error::InvalidPartition(format!("atom {loc} is not in the dose law")))?;
                propensity[x].push(a.prob[x]);
                mean[x].push(a.mean[x]);
            }
            for c in &tables {
                propensity[x].push(c[x].0);
                mean[x].push(c[x].1);
            }
        }
        let n_atoms = partition.atoms().len();
        let dgp = DiscreteDgp {
            support: vec![vec![0.0], vec![1.0]],
            prob: vec![0.5, 0.5],
            labels: labels.clone(),
            propensity,
            mean,
            noise_sd: self.noise_sd,
            scheme: partition_scheme(&labels, n_atoms),
            group_labels: None,
        };
        dgp.validate()?;
        Ok(dgp)
    }
}

fn partition_scheme(labels: &[String], n_atoms: usize) -> AggregationScheme {
    let mut arms = vec![Arm { name: "dose".into(), labels: labels[n_atoms..].to_vec() }];
    if n_atoms > 0 {
        arms.push(Arm { name: "atom".into(), labels: labels[..n_atoms].to_vec() });
    }
    AggregationScheme {
        arms,
        groups: GroupRule::Threshold { covariate: 0, threshold: 0.5, lower: "g0".into(), upper: "g1".into() },
    }
}

/// Replications, sample size, seeds and grids shared by the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replications: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// `J` grid for power studies, `J*` grid for partition studies.
    #[serde(default)]
    pub grid: Vec<usize>,
    #[serde(default)]
    pub supremum_rule: SupremumRule,
    #[serde(default)]
    pub covariance: CovarianceSource,
}

/// Covariance used to standardize the strong-null contrasts in power studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSource {
    /// Second moment of the replication's influence columns.
    #[default]
    Sample,
    /// Exact population covariance of the design.
    Population,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.n == 0 {
            return Err(Error::InvalidInput("replications and n must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Named study presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Figure2Sparse,
    Figure2Dense,
    CoverageNull,
    PartitionSmooth,
}

/// Power-study `J` grid.
pub const POWER_GRID: [usize; 6] = [2, 4, 8, 16, 32, 64];
/// Partition-study `J*` grid.
pub const PARTITION_GRID: [usize; 5] = [2, 4, 8, 16, 32];

impl Preset {
    pub const ALL: [Preset; 4] =
        [Preset::Figure2Sparse, Preset::Figure2Dense, Preset::CoverageNull, Preset::PartitionSmooth];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Figure2Sparse => "figure2-sparse",
            Preset::Figure2Dense => "figure2-dense",
            Preset::CoverageNull => "coverage-null",
            Preset::PartitionSmooth => "partition-smooth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::InvalidPreset(s.to_string()))
    }

    /// Default scale; `full_scale` raises power studies to 10,000 replications.
    pub fn config(self, full_scale: bool) -> StudyConfig {
        let base = |replications, n, grid: &[usize]| StudyConfig {
            replications,
            n,
            seed: 20240601,
            alpha: 0.05,
            folds: DEFAULT_FOLDS,
            grid: grid.to_vec(),
            supremum_rule: SupremumRule::default(),
            covariance: CovarianceSource::default(),
        };
        match self {
            Preset::Figure2Sparse | Preset::Figure2Dense => {
                base(if full_scale { 10_000 } else { 2_000 }, 1_000, &POWER_GRID)
            }
            Preset::CoverageNull => base(1_000, 2_000, &[4]),
            Preset::PartitionSmooth => base(20, 100_000, &PARTITION_GRID),
        }
    }

    /// Alternative of a power preset.
    pub fn power_design(self) -> Option<PowerDesign> {
        match self {
            Preset::Figure2Sparse => Some(PowerDesign { name: "sparse".into(), sparsity: 0.5, magnitude: 0.5 }),
            Preset::Figure2Dense => Some(PowerDesign { name: "dense".into(), sparsity: 1.0, magnitude: 0.4 }),
            _ => None,
        }
    }
}

/// Sparsity exponent and magnitude of the group differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerDesign {
    pub name: String,
    pub sparsity: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub design: String,
    pub j: usize,
    pub method: Method,
    pub power: f64,
    pub mc_se: f64,
    pub analytic_power: f64,
}

/// Monte Carlo standard error of a rate.
pub fn rate_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

/// Population inputs of one power design: contrasts, their covariance and
/// the within-arm shares.
struct PowerPopulation {
    dgp: DiscreteDgp,
    design_scheme: AggregationScheme,
    means: Vec<f64>,
    /// `Var(m̂)` at sample size `n`.
    covariance: DMatrix<f64>,
    e_ta: Vec<f64>,
}

impl PowerPopulation {
    fn new(dgp: DiscreteDgp, n: usize) -> Result<Self> {
        let (data, truth) = dgp.enumerate()?;
        let design = dgp.scheme.resolve(&data)?;
        let ctx = Context::new(&data, &design, &truth)?;
        let q = standard_query();
        let cols = strong_null_contrasts(&ctx, &q)?;
        let means = cols.iter().map(|c| c.estimate).collect();
        let covariance = covariance_of(&cols, data.weights(), n);
        let a = design.arm_index(&q.arm)?;
        let e_ta =
            design.arm_labels(a).iter().map(|&t| ctx.value(&Aggregate::WithinArmShare(t, a))).collect::<Result<_>>()?;
        Ok(Self { design_scheme: dgp.scheme.clone(), dgp, means, covariance, e_ta })
    }

    fn delta1_variance(&self) -> f64 {
        let e = DVector::from_column_slice(&self.e_ta);
        (e.transpose() * &self.covariance * &e)[(0, 0)]
    }

    /// Closed-form power with alternatives standardized by the population
    /// covariance: per contrast for the Wald and supremum tests, by the
    /// single-contrast standard error for the Δ₁ test.
    fn analytic(&self, alpha: f64) -> Result<crate::hypothesis::PowerValues> {
        let j = self.means.len() as f64;
        let lp = PowerSpec {
            xi: self.means.iter().enumerate().map(|(t, m)| j.sqrt() * m / self.covariance[(t, t)].sqrt()).collect(),
            e_ta: self.e_ta.clone(),
            alpha,
        };
        let sd = self.delta1_variance().sqrt();
        let d1 = PowerSpec { xi: self.means.iter().map(|m| m / sd).collect(), e_ta: self.e_ta.clone(), alpha };
        let a = analytic_power(&lp)?;
        let b = analytic_power(&d1)?;
        Ok(crate::hypothesis::PowerValues { wald: a.wald, supremum: a.supremum, delta1: b.delta1 })
    }

    /// Rejections `[wald, supremum, delta1]` in one replication. Contrasts
    /// use the true nuisances.
    fn replicate(&self, n: usize, seed: u64, rep: u64, config: &StudyConfig) -> Result<[bool; 3]> {
        let data = self.dgp.sample(n, seed, rep)?;
        let truth = self.dgp.truth_for(&data)?;
        let design = self.design_scheme.resolve(&data)?;
        let ctx = Context::new(&data, &design, &truth)?;
        let cols = strong_null_contrasts(&ctx, &standard_query())?;
        let all: Vec<f64> = cols.iter().map(|s| s.estimate).collect();
        let full = match config.covariance {
            CovarianceSource::Population => self.covariance.clone(),
            CovarianceSource::Sample => covariance_of(&cols, data.weights(), n),
        };
        let e = DVector::from_column_slice(&self.e_ta);
        let d1_var = (e.transpose() * &full * &e)[(0, 0)];
        let d1: f64 = all.iter().zip(&self.e_ta).map(|(a, b)| a * b).sum();
        // A version with no units in either group has an identically zero column.
        let keep: Vec<usize> = (0..all.len()).filter(|&t| full[(t, t)] > 1e-14).collect();
        if keep.is_empty() {
            return Ok([false, false, z_test(d1, d1_var.sqrt(), config.alpha).map(|r| r.reject).unwrap_or(false)]);
        }
        let m: Vec<f64> = keep.iter().map(|&t| all[t]).collect();
        let cov = full.select_rows(&keep).select_columns(&keep);
        let scales: Vec<f64> = keep.iter().map(|&t| full[(t, t)].sqrt()).collect();
        let wald = match wald_test(&m, &cov, config.alpha) {
            Err(Error::SingularCovariance) => wald_test_generalized(&m, &cov, config.alpha)?.reject,
            other => other?.reject,
        };
        let sup = supremum_test(&m, &scales, config.alpha, config.supremum_rule)?.reject;
        let delta = z_test(d1, d1_var.sqrt(), config.alpha)?.reject;
        Ok([wald, sup, delta])
    }
}

/// Rejection rates of the three strong-null tests over the `J` grid, for
/// the design's alternative and for the null (`c = 0`).
pub fn power_study(config: &StudyConfig, design: &PowerDesign) -> Result<Vec<PowerRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &j in &config.grid {
        for (name, magnitude) in [(design.name.clone(), design.magnitude), ("null".to_string(), 0.0)] {
            let dgp = PowerSimDgp { j, sparsity: design.sparsity, magnitude };
            let pop = PowerPopulation::new(dgp.discrete()?, config.n)?;
            let analytic = pop.analytic(config.alpha)?;
            let seed = derive_seed(config.seed, j as u64);
            let hits = (0..config.replications as u64)
                .into_par_iter()
                .map(|rep| pop.replicate(config.n, seed, rep, config))
                .collect::<Result<Vec<_>>>()?;
            for (k, method) in Method::ALL.into_iter().enumerate() {
                let power = hits.iter().filter(|h| h[k]).count() as f64 / config.replications as f64;
                rows.push(PowerRow {
                    design: name.clone(),
                    j,
                    method,
                    power,
                    mc_se: rate_se(power, config.replications),
                    analytic_power: analytic.get(method),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub parameter: String,
    pub truth: f64,
    pub coverage: f64,
    pub mc_se: f64,
    pub mean_estimate: f64,
    pub sd_estimate: f64,
    pub mean_se: f64,
    /// Kolmogorov–Smirnov distance of the p-values of `θ = truth` from uniform.
    pub ks_distance: f64,
    pub replications: usize,
}

/// Population value of a parameter of the query.
pub fn population_value(pop: &PopulationDecomposition, id: &ParameterId) -> Result<f64> {
    let q = &pop.query;
    let cell = |arm: &str, group: &str| -> Option<usize> {
        match (arm == q.arm, arm == q.control, group == q.group, group == q.reference) {
            (true, _, true, _) => Some(0),
            (_, true, true, _) => Some(1),
            (true, _, _, true) => Some(2),
            (_, true, _, true) => Some(3),
            _ => None,
        }
    };
    let missing = || Error::InvalidInput(format!("parameter {id} is outside the query"));
    Ok(match id {
        ParameterId::D { component, arm, group } => {
            let g = group.as_deref().unwrap_or(&q.group);
            pop.cells[cell(arm, g).ok_or_else(missing)?].d[component]
        }
        ParameterId::Delta { component, group, .. } if *group == q.group => pop.delta_group[component],
        ParameterId::Delta { component, group, .. } if *group == q.reference => pop.delta_reference[component],
        ParameterId::GroupDelta { component, .. } => pop.group_delta[component],
        ParameterId::PlainContrast { .. } => pop.dim,
        ParameterId::AdjustedContrast { .. } => pop.adim,
        _ => return Err(missing()),
    })
}

/// Kolmogorov–Smirnov distance of a sample from the uniform law on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, p)| ((i + 1) as f64 / n - p).max(p - i as f64 / n)).fold(0.0, f64::max)
}

/// Fraction of replications whose 95% interval covers the population value,
/// with cross-fitted cell-frequency nuisances.
pub fn coverage_study(
    config: &StudyConfig,
    dgp: &DiscreteDgp,
    query: &DecompositionQuery,
    parameters: &[ParameterId],
) -> Result<Vec<CoverageRow>> {
    config.validate()?;
    let pop = population_decomposition(dgp, query)?;
    let truths = parameters.iter().map(|p| population_value(&pop, p)).collect::<Result<Vec<_>>>()?;
    let z = crate::decomp::normal_quantile(1.0 - config.alpha / 2.0);
    let draws = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| -> Result<Vec<(f64, f64)>> {
            let data = dgp.sample(config.n, config.seed, rep)?;
            let design = dgp.scheme.resolve(&data)?;
            let folds = assign_folds(data.n(), config.folds, derive_seed(config.seed, rep))?;
            let nuis = fit_granular(&data, &folds, &CellFrequency, &CellFrequency, None)?;
            let ctx = Context::new(&data, &design, &nuis)?;
            let (report, _) = decompose(&ctx, &nuis, query)?;
            parameters
                .iter()
                .map(|p| {
                    let row = report.row(p).ok_or_else(|| Error::InvalidInput(format!("no row for {p}")))?;
                    Ok((row.estimate, row.se))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let r = config.replications as f64;
    Ok(parameters
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let truth = truths[k];
            let est: Vec<f64> = draws.iter().map(|d| d[k].0).collect();
            let se: Vec<f64> = draws.iter().map(|d| d[k].1).collect();
            let covered = est.iter().zip(&se).filter(|(e, s)| (*e - truth).abs() <= z * *s).count() as f64 / r;
            let pvals: Vec<f64> = est.iter().zip(&se).map(|(e, s)| two_sided_p((e - truth) / s)).collect();
            let mean = est.iter().sum::<f64>() / r;
            let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt();
            CoverageRow {
                parameter: p.to_string(),
                truth,
                coverage: covered,
                mc_se: rate_se(covered, config.replications),
                mean_estimate: mean,
                sd_estimate: sd,
                mean_se: se.iter().sum::<f64>() / r,
                ks_distance: ks_uniform(&pvals),
                replications: config.replications,
            }
        })
        .collect())
}

/// Parameters reported by the `coverage-null` preset: Δ₁ and the treated baseline.
pub fn coverage_parameters(q: &DecompositionQuery) -> Vec<ParameterId> {
    vec![
        ParameterId::GroupDelta {
            component: Component::D1,
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        },
        ParameterId::D { component: Component::D0, arm: q.arm.clone(), group: None },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionRow {
    pub bins: usize,
    /// Mean of `|d̂₀ − d₀|` over replications, `d₀` the continuous target.
    pub mean_abs_gap: f64,
    pub mc_se: f64,
    /// Mean of `|d₀(bins) − d₀|` for the realized partitions.
    pub mean_binned_gap: f64,
    pub mean_estimate: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub rows: Vec<PartitionRow>,
    /// Least-squares slope of `log mean_abs_gap` on `log bins`.
    pub slope: f64,
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Baseline of the continuous arm estimated after equal-mass partitioning,
/// compared with the quadrature target, for each bin count of the grid.
pub fn partition_study(config: &StudyConfig, dgp: &ContinuousDgp) -> Result<PartitionSummary> {
    config.validate()?;
    let truth = dgp.continuous_d0()?;
    let atoms: Vec<f64> = dgp.atoms.iter().map(|a| a.location).collect();
    let mut rows = Vec::new();
    for &bins in &config.grid {
        let seed = derive_seed(config.seed, bins as u64);
        let draws = (0..config.replications as u64)
            .into_par_iter()
            .map(|rep| -> Result<(f64, f64)> {
                let data = dgp.sample(config.n, seed, rep)?;
                let partition = PartitionScheme::equal_mass(data.doses().unwrap(), bins, atoms.clone())?;
                let disc = discretize(&data, &partition)?;
                let design = partition_scheme(&partition.labels(), atoms.len()).resolve(&disc)?;
                let folds = assign_folds(disc.n(), config.folds, derive_seed(seed, rep))?;
                let nuis = fit_granular(&disc, &folds, &CellFrequency, &CellFrequency, None)?;
                let ctx = Context::new(&disc, &design, &nuis)?;
                let est = estimate_d0(&ctx, design.arm_index("dose")?, 0)?.estimate;
                Ok((est, dgp.binned_d0(partition.edges())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let r = config.replications as f64;
        let gaps: Vec<f64> = draws.iter().map(|(e, _)| (e - truth).abs()).collect();
        let mean_abs_gap = gaps.iter().sum::<f64>() / r;
        let sd = (gaps.iter().map(|g| (g - mean_abs_gap).powi(2)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt();
        rows.push(PartitionRow {
            bins,
            mean_abs_gap,
            mc_se: sd / r.sqrt(),
            mean_binned_gap: draws.iter().map(|(_, b)| (b - truth).abs()).sum::<f64>() / r,
            mean_estimate: draws.iter().map(|(e, _)| e).sum::<f64>() / r,
            truth,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.bins as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_abs_gap.ln()).collect();
    let slope = if rows.len() >= 2 { ols_slope(&x, &y) } else { f64::NAN };
    Ok(PartitionSummary { rows, slope })
}

/// Interaction coefficient of `Y ~ 1 + A + G + A·G` on units of the two arms
/// and two groups, with its heteroskedasticity-robust standard error.
pub fn ols_interaction(data: &Dataset, design: &Design, q: &DecompositionQuery) -> Result<(f64, f64)> {
    let a = design.arm_index(&q.arm)?;
    let a0 = design.arm_index(&q.control)?;
    let g = design.group_index(&q.group)?;
    let g0 = design.group_index(&q.reference)?;
    let codes = data.codes().ok_or_else(|| Error::InvalidInput("treatment is a dose; discretize first".into()))?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for i in 0..data.n() {
        let arm = design.arm_of_label[codes[i]];
        let grp = design.group_of_unit[i];
        if !(arm == Some(a) || arm == Some(a0)) || !(grp == g || grp == g0) {
            continue;
        }
        let ai = f64::from(u8::from(arm == Some(a)));
        let gi = f64::from(u8::from(grp == g));
        rows.extend_from_slice(&[1.0, ai, gi, ai * gi]);
        y.push(data.outcome()[i]);
        w.push(data.weight(i));
    }
    let m = y.len();
    let x = DMatrix::from_row_slice(m, 4, &rows);
    let wx = DMatrix::from_fn(m, 4, |i, j| x[(i, j)] * w[i]);
    let xtx = x.transpose() * &wx;
    let inv = xtx.clone().try_inverse().ok_or(Error::SingularCovariance)?;
    let yv = DVector::from_vec(y);
    let beta = &inv * (wx.transpose() * &yv);
    let resid = &yv - &x * &beta;
    let meat =
        DMatrix::from_fn(4, 4, |j, k| (0..m).map(|i| w[i] * w[i] * resid[i].powi(2) * x[(i, j)] * x[(i, k)]).sum());
    let cov = &inv * meat * &inv;
    Ok((beta[3], cov[(3, 3)].sqrt()))
}

/// Polynomial fit of a moment-based parameter along a nuisance perturbation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityFit {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub plugin_values: Vec<f64>,
    /// Coefficients of a degree-4 polynomial fit in ε, constant first.
    pub coefficients: [f64; 5],
    /// The same for the plug-in `mean(ê_t)/mean(ê_a) · mean(μ̂_t)`.
    pub plugin_coefficients: [f64; 5],
}

impl OrthogonalityFit {
    /// `|linear| < 0.005 |quadratic|` for the moment estimate.
    pub fn is_second_order(&self) -> bool {
        self.coefficients[1].abs() < 0.05 * 0.1 * self.coefficients[2].abs()
    }
}

/// Default perturbation sizes.
pub const PERTURBATIONS: [f64; 7] = [-0.1, -0.05, -0.02, 0.0, 0.02, 0.05, 0.1];

fn polynomial_fit(x: &[f64], y: &[f64]) -> Result<[f64; 5]> {
    if x.len() < 5 {
        return Err(Error::InvalidInput("need at least five perturbation sizes".into()));
    }
    let a = DMatrix::from_fn(x.len(), 5, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let ata = a.transpose() * &a;
    let coef = ata.cholesky().ok_or(Error::SingularCovariance)?.solve(&(a.transpose() * b));
    Ok([coef[0], coef[1], coef[2], coef[3], coef[4]])
}

/// Evaluates `θ_{t,a,g,8}` at `base` nuisances moved multiplicatively in the
/// propensities and additively in the outcome means, both in smooth
/// covariate- and label-dependent directions.
pub fn orthogonality_check(
    data: &Dataset,
    design: &Design,
    base: &NuisanceEstimates,
    t: usize,
    a: usize,
    g: usize,
    epsilons: &[f64],
) -> Result<OrthogonalityFit> {
    let p8 = PrimitiveId::new(8)?;
    let score = |i: usize| data.row(i).iter().sum::<f64>();
    let mut values = Vec::new();
    let mut plugin_values = Vec::new();
    for &eps in epsilons {
        let nuis = base.perturbed(|i, s, e, m| {
            let h = (1.0 + 1.7 * s as f64 + 2.3 * score(i)).sin();
            let k = (0.5 + 1.1 * s as f64 + 1.9 * score(i)).cos();
            (e * (1.0 + eps * h), m + eps * k)
        });
        let ctx = Context::new(data, design, &nuis)?;
        values.push(ctx.primitive(p8, t, a, g)?.estimate);
        let arm = design.arm_labels(a);
        let e_t = ctx.mean(|i| nuis.e(i, t));
        let e_a = ctx.mean(|i| arm.iter().map(|&s| nuis.e(i, s)).sum());
        plugin_values.push(e_t / e_a * ctx.mean(|i| nuis.mu(i, t)));
    }
    Ok(OrthogonalityFit {
        epsilons: epsilons.to_vec(),
        coefficients: polynomial_fit(epsilons, &values)?,
        plugin_coefficients: polynomial_fit(epsilons, &plugin_values)?,
        values,
        plugin_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::fit_in_sample;
    use crate::oracle::{group_targeting_example, individual_targeting_example};

    #[test]
    fn power_design_frequencies() {
        let dgp = PowerSimDgp { j: 4, sparsity: 1.0, magnitude: 0.0 };
        let n = 100_000;
        let data = dgp.sample(n, 5, 0).unwrap();
        let codes = data.codes().unwrap();
        for (t, p) in [0.5, 0.125, 0.125, 0.125, 0.125].iter().enumerate() {
            let f = codes.iter().filter(|&&c| c == t).count() as f64 / n as f64;
            assert!((f - p).abs() < 3.0 * rate_se(*p, n), "label {t}: {f}");
        }
    }

    #[test]
    fn sparse_alternative_has_round_sqrt_j_entries() {
        let xi = PowerSimDgp { j: 8, sparsity: 0.5, magnitude: 0.5 }.xi();
        assert_eq!(xi.iter().filter(|v| **v != 0.0).count(), 3);
        assert_eq!(PowerSimDgp { j: 64, sparsity: 1.0, magnitude: 0.4 }.xi(), vec![0.4; 64]);
    }

    #[test]
    fn interaction_regression_matches_truth() {
        let dgp = group_targeting_example();
        let data = dgp.sample(100_000, 11, 0).unwrap();
        let design = dgp.scheme.resolve(&data).unwrap();
        let (b, se) = ols_interaction(&data, &design, &standard_query()).unwrap();
        assert!((b + 1.0 / 3.0).abs() < 3.0 * se, "{b} {se}");
    }

    #[test]
    fn constant_dose_mean_has_no_discretization_gap() {
        let dgp = ContinuousDgp { amplitude: 0.0, ..ContinuousDgp::smooth() };
        let truth = dgp.continuous_d0().unwrap();
        for bins in PARTITION_GRID {
            let p = PartitionScheme::equal_width(0.0, 1.0, bins, vec![]).unwrap();
            assert!((dgp.binned_d0(p.edges()).unwrap() - truth).abs() < 1e-12);
        }
    }

    #[test]
    fn binned_truth_approaches_continuous_truth() {
        let dgp = ContinuousDgp::smooth();
        let truth = dgp.continuous_d0().unwrap();
        let gaps: Vec<f64> = PARTITION_GRID
            .iter()
            .map(|&b| {
                let p = PartitionScheme::equal_width(0.0, 1.0, b, vec![]).unwrap();
                (dgp.binned_d0(p.edges()).unwrap() - truth).abs()
            })
            .collect();
        let x: Vec<f64> = PARTITION_GRID.iter().map(|b| (*b as f64).ln()).collect();
        let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        assert!((ols_slope(&x, &y) + 2.0).abs() < 0.1, "{gaps:?}");
    }

    #[test]
    fn atom_arm_matches_discrete_oracle() {
        let dgp = ContinuousDgp::with_zero_atom();
        let p = PartitionScheme::equal_width(0.0, 1.0, 4, vec![0.0]).unwrap();
        let discrete = dgp.induced_design(&p).unwrap();
        let q = DecompositionQuery {
            arm: "atom".into(),
            control: "dose".into(),
            group: "g1".into(),
            reference: "g0".into(),
        };
        let pop = population_decomposition(&discrete, &q).unwrap();
        assert!((pop.cells[0].d[&Component::D0] - dgp.atom_d0().unwrap()).abs() < 1e-12);
        assert!((pop.cells[1].d[&Component::D0] - dgp.binned_d0(p.edges()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn continuous_sampler_matches_dose_law() {
        let dgp = ContinuousDgp::with_zero_atom();
        let data = dgp.sample(50_000, 2, 0).unwrap();
        let doses = data.doses().unwrap();
        let atoms = doses.iter().filter(|d| **d == 0.0).count() as f64 / 50_000.0;
        assert!((atoms - 0.2).abs() < 3.0 * rate_se(0.2, 50_000));
        let x1: Vec<f64> =
            (0..data.n()).filter(|&i| data.row(i)[0] == 1.0 && doses[i] > 0.0).map(|i| doses[i]).collect();
        let mean = x1.iter().sum::<f64>() / x1.len() as f64;
        // E[T | x=1, continuous] = 1/2 + s/6.
        assert!((mean - (0.5 + 0.9 / 6.0)).abs() < 0.01);
    }

    #[test]
    fn moment_estimate_is_second_order_in_nuisance_error() {
        let dgp = individual_targeting_example();
        let data = dgp.sample(5_000, 4, 0).unwrap();
        let design = dgp.scheme.resolve(&data).unwrap();
        let base = fit_in_sample(&data, &CellFrequency, &CellFrequency, Some(1e-9)).unwrap();
        let fit = orthogonality_check(&data, &design, &base, 2, 0, 1, &PERTURBATIONS).unwrap();
        assert!(fit.is_second_order(), "{:?}", fit.coefficients);
        assert!(fit.plugin_coefficients[1].abs() > 100.0 * fit.coefficients[1].abs());
    }

    #[test]
    fn studies_are_deterministic() {
        let cfg = StudyConfig {
            replications: 8,
            n: 400,
            seed: 1,
            alpha: 0.05,
            folds: 2,
            grid: vec![2],
            supremum_rule: SupremumRule::Sidak,
            covariance: CovarianceSource::Sample,
        };
        let d = PowerDesign { name: "dense".into(), sparsity: 1.0, magnitude: 0.4 };
        assert_eq!(power_study(&cfg, &d).unwrap(), power_study(&cfg, &d).unwrap());
        let dgp = group_targeting_example();
        let q = standard_query();
        let params = coverage_parameters(&q);
        assert_eq!(coverage_study(&cfg, &dgp, &q, &params).unwrap(), coverage_study(&cfg, &dgp, &q, &params).unwrap());
    }
}
