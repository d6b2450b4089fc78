//! Cross-fitted granular nuisances (propensities and outcome regressions),
//! the built-in learners, and the table of aggregate nuisances.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Design};
use crate::moments::{Aggregate, Context};

/// Default number of cross-fitting folds.
pub const DEFAULT_FOLDS: usize = 5;

/// Balanced random partition of unit indices into K folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    /// Fold of each unit, in `0..k`.
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

/// Shuffles units with a seeded generator and deals them round-robin.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || n < k {
        return Err(Error::InvalidK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

impl FoldAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Training data handed to a learner. Covariates are row-major.
pub struct TrainingSet<'a> {
    pub x: &'a [f64],
    pub dim: usize,
    pub codes: &'a [usize],
    pub outcome: &'a [f64],
    pub weights: Option<&'a [f64]>,
    pub n_labels: usize,
}

impl TrainingSet<'_> {
    pub fn n(&self) -> usize {
        self.codes.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }
}

/// Fits a propensity model and returns `test_n × n_labels` probabilities.
pub trait PropensityModel: Send + Sync {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>>;
}

/// Fits one regression per label and returns `test_n × n_labels` predictions.
pub trait OutcomeModel: Send + Sync {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>>;
}

/// Learner kinds and their hyperparameters as they appear in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    CellFrequency,
    RegularizedMultinomial,
    PerTreatmentRidge,
    KNearestNeighbor,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self { kind, hyperparameters: BTreeMap::new() }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.hyperparameters.get(key).copied().unwrap_or(default)
    }

    fn k(&self) -> Result<usize> {
        let k = self.param("k", 25.0);
        if k < 1.0 || k.fract() != 0.0 {
            return Err(Error::InvalidInput(format!("k-nearest-neighbor needs integer k >= 1, got {k}")));
        }
        Ok(k as usize)
    }

    pub fn propensity(&self) -> Result<Arc<dyn PropensityModel>> {
        Ok(match self.kind {
            LearnerKind::CellFrequency => Arc::new(CellFrequency),
            LearnerKind::RegularizedMultinomial => Arc::new(Multinomial {
                penalty: self.param("penalty", 1e-3),
                max_iter: self.param("max_iter", 50.0) as usize,
            }),
            LearnerKind::KNearestNeighbor => Arc::new(Knn { k: self.k()? }),
            LearnerKind::PerTreatmentRidge => {
                return Err(Error::InvalidInput("per-treatment-ridge is an outcome learner".into()))
            }
        })
    }

    pub fn outcome(&self) -> Result<Arc<dyn OutcomeModel>> {
        Ok(match self.kind {
            LearnerKind::CellFrequency => Arc::new(CellFrequency),
            LearnerKind::PerTreatmentRidge => Arc::new(Ridge { penalty: self.param("penalty", 1e-3) }),
            LearnerKind::KNearestNeighbor => Arc::new(Knn { k: self.k()? }),
            LearnerKind::RegularizedMultinomial => {
                return Err(Error::InvalidInput("regularized-multinomial is a propensity learner".into()))
            }
        })
    }
}

/// Frequencies and means within cells of identical covariate vectors.
/// Unseen cells fall back to pooled values.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellFrequency;

fn cell_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

/// Label mass and outcome sums keyed by the bit pattern of the covariates.
type CellSums = HashMap<Vec<u64>, (Vec<f64>, Vec<f64>)>;

impl CellFrequency {
    /// Per-cell weighted label mass and outcome sums.
    fn tabulate(train: &TrainingSet<'_>) -> (CellSums, Vec<f64>, Vec<f64>) {
        let l = train.n_labels;
        let mut cells: HashMap<Vec<u64>, (Vec<f64>, Vec<f64>)> = HashMap::new();
        let mut mass = vec![0.0; l];
        let mut sums = vec![0.0; l];
        for i in 0..train.n() {
            let w = train.weight(i);
            let t = train.codes[i];
            let e = cells.entry(cell_key(train.row(i))).or_insert_with(|| (vec![0.0; l], vec![0.0; l]));
            e.0[t] += w;
            e.1[t] += w * train.outcome[i];
            mass[t] += w;
            sums[t] += w * train.outcome[i];
        }
        (cells, mass, sums)
    }
}

impl PropensityModel for CellFrequency {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let (cells, mass, _) = Self::tabulate(train);
        let total: f64 = mass.iter().sum();
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * train.n_labels);
        for r in 0..rows {
            let x = &test_x[r * train.dim..(r + 1) * train.dim];
            match cells.get(&cell_key(x)) {
                Some((cm, _)) => {
                    let s: f64 = cm.iter().sum();
                    out.extend(cm.iter().map(|c| c / s));
                }
                None => out.extend(mass.iter().map(|c| c / total)),
            }
        }
        Ok(out)
    }
}

impl OutcomeModel for CellFrequency {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let (cells, mass, sums) = Self::tabulate(train);
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * train.n_labels);
        for r in 0..rows {
            let x = &test_x[r * train.dim..(r + 1) * train.dim];
            let cell = cells.get(&cell_key(x));
            for t in 0..train.n_labels {
                let pooled = if mass[t] > 0.0 { sums[t] / mass[t] } else { 0.0 };
                out.push(match cell {
                    Some((cm, cs)) if cm[t] > 0.0 => cs[t] / cm[t],
                    _ => pooled,
                });
            }
        }
        Ok(out)
    }
}

/// Column means and scales of the training covariates.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(train: &TrainingSet<'_>) -> Self {
        let d = train.dim;
        let n = train.n() as f64;
        let mut mean = vec![0.0; d];
        for i in 0..train.n() {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..train.n() {
            for j in 0..d {
                var[j] += (train.row(i)[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    /// Design row `[1, z_1, …, z_d]`.
    fn features(&self, x: &[f64]) -> DVector<f64> {
        let mut f = DVector::zeros(x.len() + 1);
        f[0] = 1.0;
        for j in 0..x.len() {
            f[j + 1] = (x[j] - self.mean[j]) / self.scale[j];
        }
        f
    }
}

/// Softmax regression with an L2 penalty on slopes, fitted by damped Newton steps.
#[derive(Debug, Clone, Copy)]
pub struct Multinomial {
    pub penalty: f64,
    pub max_iter: usize,
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

impl Multinomial {
    fn probs(beta: &DVector<f64>, f: &DVector<f64>, l: usize) -> Vec<f64> {
        let q = f.len();
        let mut eta = vec![0.0; l];
        for k in 1..l {
            eta[k] = (0..q).map(|j| beta[(k - 1) * q + j] * f[j]).sum();
        }
        softmax(&eta)
    }

    fn objective(&self, beta: &DVector<f64>, feats: &[DVector<f64>], train: &TrainingSet<'_>) -> f64 {
        let l = train.n_labels;
        let q = feats[0].len();
        let mut ll = 0.0;
        for (i, f) in feats.iter().enumerate() {
            let p = Self::probs(beta, f, l);
            ll += train.weight(i) * p[train.codes[i]].max(1e-300).ln();
        }
        let pen: f64 = (0..beta.len()).filter(|j| j % q != 0).map(|j| beta[j] * beta[j]).sum();
        ll - 0.5 * self.penalty * pen
    }
}

impl PropensityModel for Multinomial {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let l = train.n_labels;
        let std = Standardizer::fit(train);
        let feats: Vec<DVector<f64>> = (0..train.n()).map(|i| std.features(train.row(i))).collect();
        let q = train.dim + 1;
        let p = (l - 1) * q;
        let total: f64 = (0..train.n()).map(|i| train.weight(i)).sum();
        let mut beta = DVector::zeros(p);
        // Start from the marginal frequencies.
        let mut mass = vec![0.0; l];
        for i in 0..train.n() {
            mass[train.codes[i]] += train.weight(i);
        }
        for k in 1..l {
            beta[(k - 1) * q] = ((mass[k] + 0.5) / (mass[0] + 0.5)).ln();
        }
        let mut obj = self.objective(&beta, &feats, train);
        for _ in 0..self.max_iter {
            let mut grad = DVector::zeros(p);
            let mut hess = DMatrix::zeros(p, p);
            for (i, f) in feats.iter().enumerate() {
                let w = train.weight(i);
                let pr = Self::probs(&beta, f, l);
                for k in 1..l {
                    let r = f64::from(u8::from(train.codes[i] == k)) - pr[k];
                    for a in 0..q {
                        grad[(k - 1) * q + a] += w * r * f[a];
                    }
                    for m in 1..l {
                        let c = w * pr[k] * (f64::from(u8::from(k == m)) - pr[m]);
                        if c == 0.0 {
                            continue;
                        }
                        for a in 0..q {
                            for b in 0..q {
                                hess[((k - 1) * q + a, (m - 1) * q + b)] += c * f[a] * f[b];
                            }
                        }
                    }
                }
            }
            for j in 0..p {
                let lam = if j % q == 0 { 1e-8 * total } else { self.penalty };
                grad[j] -= if j % q == 0 { 0.0 } else { self.penalty * beta[j] };
                hess[(j, j)] += lam;
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::LearnerFailure("multinomial Hessian not positive definite".into()))?
                .solve(&grad);
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let cand = &beta + &step * scale;
                let o = self.objective(&cand, &feats, train);
                if o >= obj - 1e-12 * obj.abs() {
                    beta = cand;
                    improved = o - obj > 1e-10 * (1.0 + obj.abs());
                    obj = o;
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::LearnerFailure("multinomial coefficients diverged".into()));
        }
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let f = std.features(&test_x[r * train.dim..(r + 1) * train.dim]);
            out.extend(Self::probs(&beta, &f, l));
        }
        Ok(out)
    }
}

/// Separate ridge regression of the outcome on covariates for each label.
#[derive(Debug, Clone, Copy)]
pub struct Ridge {
    pub penalty: f64,
}

impl OutcomeModel for Ridge {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let l = train.n_labels;
        let std = Standardizer::fit(train);
        let q = train.dim + 1;
        let mut coefs = Vec::with_capacity(l);
        for t in 0..l {
            let mut xtx = DMatrix::<f64>::zeros(q, q);
            let mut xty = DVector::<f64>::zeros(q);
            for i in (0..train.n()).filter(|&i| train.codes[i] == t) {
                let f = std.features(train.row(i));
                let w = train.weight(i);
                xtx += &f * f.transpose() * w;
                xty += &f * (w * train.outcome[i]);
            }
            for j in 1..q {
                xtx[(j, j)] += self.penalty;
            }
            xtx[(0, 0)] += 1e-10;
            let beta = xtx
                .cholesky()
                .ok_or_else(|| Error::LearnerFailure(format!("ridge system singular for label {t}")))?
                .solve(&xty);
            coefs.push(beta);
        }
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let f = std.features(&test_x[r * train.dim..(r + 1) * train.dim]);
            out.extend(coefs.iter().map(|b| b.dot(&f)));
        }
        Ok(out)
    }
}

/// Brute-force k-nearest-neighbour averages in standardized covariate space.
#[derive(Debug, Clone, Copy)]
pub struct Knn {
    pub k: usize,
}

impl Knn {
    fn nearest(&self, std: &Standardizer, pool: &[(usize, DVector<f64>)], x: &DVector<f64>) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = pool.iter().map(|(i, f)| ((f - x).norm_squared(), *i)).collect();
        let k = self.k.min(d.len());
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
        }
        let _ = std;
        d.into_iter().map(|(_, i)| i).collect()
    }
}

impl PropensityModel for Knn {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let l = train.n_labels;
        let std = Standardizer::fit(train);
        let pool: Vec<(usize, DVector<f64>)> = (0..train.n()).map(|i| (i, std.features(train.row(i)))).collect();
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let f = std.features(&test_x[r * train.dim..(r + 1) * train.dim]);
            let mut p = vec![0.0; l];
            for i in self.nearest(&std, &pool, &f) {
                p[train.codes[i]] += train.weight(i);
            }
            let s: f64 = p.iter().sum();
            out.extend(p.into_iter().map(|v| v / s));
        }
        Ok(out)
    }
}

impl OutcomeModel for Knn {
    fn fit_predict(&self, train: &TrainingSet<'_>, test_x: &[f64], n_test: usize) -> Result<Vec<f64>> {
        let l = train.n_labels;
        let std = Standardizer::fit(train);
        let pools: Vec<Vec<(usize, DVector<f64>)>> = (0..l)
            .map(|t| (0..train.n()).filter(|&i| train.codes[i] == t).map(|i| (i, std.features(train.row(i)))).collect())
            .collect();
        let rows = n_test;
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let f = std.features(&test_x[r * train.dim..(r + 1) * train.dim]);
            for pool in &pools {
                let (mut s, mut w) = (0.0, 0.0);
                for i in self.nearest(&std, pool, &f) {
                    s += train.weight(i) * train.outcome[i];
                    w += train.weight(i);
                }
                out.push(if w > 0.0 { s / w } else { 0.0 });
            }
        }
        Ok(out)
    }
}

/// Clipping diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClipDiagnostics {
    pub floor: f64,
    /// Number of propensity entries raised to the floor.
    pub clipped: usize,
    /// Largest absolute change of any entry.
    pub max_adjustment: f64,
    /// Largest change relative to the unclipped value, over nonzero entries.
    pub max_relative_adjustment: f64,
}

/// Default clip floor `max(1e-4, 1/(2n))`.
pub fn default_clip_floor(n: usize) -> f64 {
    (1e-4f64).max(0.5 / n as f64)
}

/// Raises entries below `floor` and renormalizes each row to sum to one.
pub fn clip_propensities(e: &mut [f64], n_labels: usize, floor: f64) -> ClipDiagnostics {
    let mut diag = ClipDiagnostics { floor, ..Default::default() };
    for row in e.chunks_mut(n_labels) {
        let before: Vec<f64> = row.to_vec();
        let mut hit = 0;
        for v in row.iter_mut() {
            if *v < floor {
                *v = floor;
                hit += 1;
            }
        }
        if hit == 0 {
            continue;
        }
        diag.clipped += hit;
        let s: f64 = row.iter().sum();
        for (v, b) in row.iter_mut().zip(&before) {
            *v /= s;
            let change = (*v - b).abs();
            diag.max_adjustment = diag.max_adjustment.max(change);
            if *b > 0.0 {
                diag.max_relative_adjustment = diag.max_relative_adjustment.max(change / b);
            }
        }
    }
    diag
}

/// Granular and aggregate nuisances for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceEstimates {
    n_labels: usize,
    /// `n × n_labels` row-major propensities.
    e_hat: Vec<f64>,
    /// `n × n_labels` row-major outcome regressions.
    mu_hat: Vec<f64>,
    pub clip: ClipDiagnostics,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    #[serde(skip)]
    aggregates: BTreeMap<Aggregate, f64>,
}

impl NuisanceEstimates {
    /// Wraps externally known nuisances without clipping.
    pub fn from_truth(e_hat: Vec<f64>, mu_hat: Vec<f64>, n_labels: usize) -> Result<Self> {
        if n_labels == 0 || !e_hat.len().is_multiple_of(n_labels) || e_hat.len() != mu_hat.len() {
            return Err(Error::InvalidInput("nuisance matrices have inconsistent shapes".into()));
        }
        if e_hat.iter().any(|v| !(0.0..=1.0).contains(v)) || mu_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("supplied nuisances".into()));
        }
        for row in e_hat.chunks(n_labels) {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidInput("propensity row does not sum to one".into()));
            }
        }
        Ok(Self {
            n_labels,
            e_hat,
            mu_hat,
            clip: ClipDiagnostics::default(),
            folds: None,
            seed: None,
            aggregates: BTreeMap::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.e_hat.len() / self.n_labels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn e(&self, i: usize, t: usize) -> f64 {
        self.e_hat[i * self.n_labels + t]
    }

    pub fn mu(&self, i: usize, t: usize) -> f64 {
        self.mu_hat[i * self.n_labels + t]
    }

    pub fn e_row(&self, i: usize) -> &[f64] {
        &self.e_hat[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn aggregates(&self) -> &BTreeMap<Aggregate, f64> {
        &self.aggregates
    }

    pub fn aggregate(&self, a: &Aggregate) -> Option<f64> {
        self.aggregates.get(a).copied()
    }

    /// Applies `f(i, t, e, mu) -> (e', mu')` to every entry, then renormalizes
    /// propensity rows. Aggregates are dropped.
    pub fn perturbed(&self, f: impl Fn(usize, usize, f64, f64) -> (f64, f64)) -> Self {
        let mut out = self.clone();
        out.aggregates.clear();
        let l = self.n_labels;
        for i in 0..self.n() {
            for t in 0..l {
                let (e, m) = f(i, t, self.e(i, t), self.mu(i, t));
                out.e_hat[i * l + t] = e;
                out.mu_hat[i * l + t] = m;
            }
            let row = &mut out.e_hat[i * l..(i + 1) * l];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        out
    }
}

fn training_set<'a>(
    data: &'a Dataset,
    x: &'a [f64],
    codes: &'a [usize],
    y: &'a [f64],
    w: Option<&'a [f64]>,
) -> TrainingSet<'a> {
    TrainingSet { x, dim: data.dim(), codes, outcome: y, weights: w, n_labels: data.alphabet().map_or(0, |a| a.len()) }
}

fn check_rows(e: &[f64], l: usize) -> Result<()> {
    for row in e.chunks(l) {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::LearnerFailure("propensity learner returned invalid probabilities".into()));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return Err(Error::LearnerFailure("propensity row does not sum to one".into()));
        }
    }
    Ok(())
}

/// Test rows of one fold with their propensity and outcome predictions.
type FoldPredictions = (Vec<usize>, Vec<f64>, Vec<f64>);

/// Cross-fits both nuisances: each unit's predictions come from models
/// trained on the other folds. Propensities are clipped at `clip_floor`
/// (default `max(1e-4, 1/(2n))`) and renormalized.
pub fn fit_granular(
    data: &Dataset,
    folds: &FoldAssignment,
    propensity: &dyn PropensityModel,
    outcome: &dyn OutcomeModel,
    clip_floor: Option<f64>,
) -> Result<NuisanceEstimates> {
    let alphabet =
        data.alphabet().ok_or_else(|| Error::InvalidInput("treatment is a dose; discretize first".into()))?;
    let n = data.n();
    if folds.fold_of.len() != n {
        return Err(Error::InvalidInput("fold assignment length differs from n".into()));
    }
    let l = alphabet.len();
    let per_fold: Vec<Result<FoldPredictions>> = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds.fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds.fold_of[i] == f).collect();
            let tr = data.select(&train);
            let tr_codes = tr.codes().unwrap();
            let mut present = vec![false; l];
            for (i, &c) in tr_codes.iter().enumerate() {
                if tr.weight(i) > 0.0 {
                    present[c] = true;
                }
            }
            if let Some(t) = present.iter().position(|p| !p) {
                return Err(Error::LabelAbsentInFold { label: alphabet[t].clone(), fold: f + 1 });
            }
            let mut test_x = Vec::with_capacity(test.len() * data.dim());
            for &i in &test {
                test_x.extend_from_slice(data.row(i));
            }
            let ts = training_set(data, tr.covariates(), tr_codes, tr.outcome(), tr.weights());
            let e = propensity.fit_predict(&ts, &test_x, test.len())?;
            let m = outcome.fit_predict(&ts, &test_x, test.len())?;
            if e.len() != test.len() * l || m.len() != test.len() * l {
                return Err(Error::LearnerFailure("learner returned wrong number of predictions".into()));
            }
            check_rows(&e, l)?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::LearnerFailure("outcome learner returned non-finite values".into()));
            }
            Ok((test, e, m))
        })
        .collect();
    let mut e_hat = vec![0.0; n * l];
    let mut mu_hat = vec![0.0; n * l];
    for res in per_fold {
        let (test, e, m) = res?;
        for (r, &i) in test.iter().enumerate() {
            e_hat[i * l..(i + 1) * l].copy_from_slice(&e[r * l..(r + 1) * l]);
            mu_hat[i * l..(i + 1) * l].copy_from_slice(&m[r * l..(r + 1) * l]);
        }
    }
    let floor = clip_floor.unwrap_or_else(|| default_clip_floor(n));
    let clip = clip_propensities(&mut e_hat, l, floor);
    Ok(NuisanceEstimates {
        n_labels: l,
        e_hat,
        mu_hat,
        clip,
        folds: Some(folds.k),
        seed: Some(folds.seed),
        aggregates: BTreeMap::new(),
    })
}

/// Fits and predicts on the full sample without sample splitting.
pub fn fit_in_sample(
    data: &Dataset,
    propensity: &dyn PropensityModel,
    outcome: &dyn OutcomeModel,
    clip_floor: Option<f64>,
) -> Result<NuisanceEstimates> {
    let l = data.alphabet().ok_or_else(|| Error::InvalidInput("treatment is a dose; discretize first".into()))?.len();
    let ts = training_set(data, data.covariates(), data.codes().unwrap(), data.outcome(), data.weights());
    let mut e_hat = propensity.fit_predict(&ts, data.covariates(), data.n())?;
    let mu_hat = outcome.fit_predict(&ts, data.covariates(), data.n())?;
    check_rows(&e_hat, l)?;
    let clip = clip_propensities(&mut e_hat, l, clip_floor.unwrap_or_else(|| default_clip_floor(data.n())));
    Ok(NuisanceEstimates { n_labels: l, e_hat, mu_hat, clip, folds: None, seed: None, aggregates: BTreeMap::new() })
}

/// Every aggregate nuisance needed for the decomposition of `design`.
pub fn aggregate_catalog(design: &Design) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for g in 0..design.group_names.len() {
        out.push(Aggregate::GroupShare(g));
    }
    for a in 0..design.arm_names.len() {
        out.push(Aggregate::ArmShare(a));
        for g in 0..design.group_names.len() {
            out.push(Aggregate::ArmGroupShare(a, g));
            out.push(Aggregate::ArmShareInGroup(a, g));
            out.push(Aggregate::ArmGroupMean(a, g));
        }
        for t in design.arm_labels(a) {
            out.push(Aggregate::LabelShare(t));
            out.push(Aggregate::MeanOutcome(t));
            out.push(Aggregate::WithinArmShare(t, a));
            for g in 0..design.group_names.len() {
                out.push(Aggregate::GroupLabelShare(t, g));
                out.push(Aggregate::GroupMeanOutcome(t, g));
                out.push(Aggregate::WithinArmShareInGroup(t, a, g));
                out.push(Aggregate::MeanWithinArmPropensity(t, a, g));
            }
        }
    }
    out
}

/// Solves every aggregate moment and stores the values alongside the
/// granular nuisances.
pub fn fit_aggregates(data: &Dataset, design: &Design, granular: NuisanceEstimates) -> Result<NuisanceEstimates> {
    let mut values = BTreeMap::new();
    {
        let ctx = Context::new(data, design, &granular)?;
        for agg in aggregate_catalog(design) {
            values.insert(agg, ctx.aggregate(&agg)?.estimate);
        }
    }
    let mut out = granular;
    out.aggregates = values;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn folds_are_balanced_and_reproducible() {
        let f = assign_folds(10, 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut s = assign_folds(11, 5, 1).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(assign_folds(100, 5, 9), assign_folds(100, 5, 9));
        assert_ne!(assign_folds(100, 5, 9).unwrap().fold_of, assign_folds(100, 5, 10).unwrap().fold_of);
        assert_eq!(assign_folds(3, 5, 0), Err(Error::InvalidK { k: 5, n: 3 }));
        assert_eq!(assign_folds(3, 1, 0), Err(Error::InvalidK { k: 1, n: 3 }));
    }

    fn two_cell_data() -> Dataset {
        let mut t = Vec::new();
        let mut x = Vec::new();
        for i in 0..40 {
            let xi = (i % 2) as f64;
            x.push(vec![xi]);
            t.push(if i % 5 == 0 || (xi == 1.0 && i % 3 == 0) { "1" } else { "0" }.to_string());
        }
        let y = (0..40).map(|i| i as f64).collect();
        Dataset::from_labels(y, &t, x).unwrap()
    }

    #[test]
    fn cell_frequency_is_out_of_fold_cell_frequency() {
        let data = two_cell_data();
        let folds = assign_folds(data.n(), 4, 3).unwrap();
        let nu = fit_granular(&data, &folds, &CellFrequency, &CellFrequency, Some(1e-9)).unwrap();
        let codes = data.codes().unwrap();
        for i in 0..data.n() {
            let (mut c1, mut c) = (0.0, 0.0);
            let (mut s, mut m) = (0.0, 0.0);
            for j in 0..data.n() {
                if folds.fold_of[j] != folds.fold_of[i] && data.row(j) == data.row(i) {
                    c += 1.0;
                    if codes[j] == 1 {
                        c1 += 1.0;
                        s += data.outcome()[j];
                        m += 1.0;
                    }
                }
            }
            assert!((nu.e(i, 1) - c1 / c).abs() < 1e-8);
            if m > 0.0 {
                assert!((nu.mu(i, 1) - s / m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn absent_label_in_training_split_is_an_error() {
        let t: Vec<String> = ["0", "0", "0", "0", "1"].iter().map(|s| s.to_string()).collect();
        let data = Dataset::from_labels(vec![0.0; 5], &t, vec![vec![0.0]; 5]).unwrap();
        let folds = assign_folds(5, 5, 0).unwrap();
        let err = fit_granular(&data, &folds, &CellFrequency, &CellFrequency, None).unwrap_err();
        assert!(matches!(err, Error::LabelAbsentInFold { ref label, .. } if label == "1"));
    }

    #[test]
    fn clipping_respects_floor_and_bound() {
        let mut e = vec![0.0, 0.3, 0.7, 1e-6, 1e-6, 1.0 - 2e-6, 0.2, 0.3, 0.5];
        let floor = 1e-3;
        let diag = clip_propensities(&mut e, 3, floor);
        assert_eq!(diag.clipped, 3);
        for row in e.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        assert!(diag.max_adjustment <= 2.0 * floor);
        assert_eq!(&e[6..], &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn multinomial_recovers_constant_propensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs = [0.5, 0.3, 0.2];
        let n = 10_000;
        let mut t = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            x.push(vec![rng.random::<f64>(), rng.random::<f64>()]);
            let u: f64 = rng.random();
            t.push(
                if u < 0.5 {
                    "a"
                } else if u < 0.8 {
                    "b"
                } else {
                    "c"
                }
                .to_string(),
            );
        }
        let data = Dataset::from_labels(vec![0.0; n], &t, x).unwrap();
        let folds = assign_folds(n, 5, 2).unwrap();
        let m = Multinomial { penalty: 1e-3, max_iter: 50 };
        let nu = fit_granular(&data, &folds, &m, &CellFrequency, None).unwrap();
        for (k, p) in probs.iter().enumerate() {
            let mean: f64 = (0..n).map(|i| nu.e(i, k)).sum::<f64>() / n as f64;
            assert!((mean - p).abs() < 0.02, "label {k}: {mean}");
        }
    }

    #[test]
    fn ridge_rmse_is_close_to_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let n = 10_000;
        let (mut t, mut x, mut y, mut truth) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x1: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let x2: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let lab = rng.random_range(0..2usize);
            let mu = if lab == 0 { 1.0 + 2.0 * x1 - x2 } else { -0.5 * x1 + 3.0 * x2 };
            t.push(lab.to_string());
            x.push(vec![x1, x2]);
            y.push(mu + noise.sample(&mut rng));
            truth.push(mu);
        }
        let data = Dataset::from_labels(y.clone(), &t, x).unwrap();
        let folds = assign_folds(n, 5, 2).unwrap();
        let nu = fit_granular(&data, &folds, &CellFrequency, &Ridge { penalty: 1e-3 }, None).unwrap();
        let codes = data.codes().unwrap();
        let rmse = ((0..n).map(|i| (y[i] - nu.mu(i, codes[i])).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((rmse - 1.0).abs() < 0.1, "rmse {rmse}");
    }

    #[test]
    fn knn_and_specs_build() {
        let data = two_cell_data();
        let folds = assign_folds(data.n(), 2, 0).unwrap();
        let p = LearnerSpec { kind: LearnerKind::KNearestNeighbor, hyperparameters: [("k".to_string(), 5.0)].into() };
        let nu = fit_granular(&data, &folds, &*p.propensity().unwrap(), &*p.outcome().unwrap(), None).unwrap();
        assert_eq!(nu.n(), data.n());
        assert!(LearnerSpec::new(LearnerKind::PerTreatmentRidge).propensity().is_err());
        let spec: LearnerSpec =
            serde_json::from_str(r#"{"kind":"regularized-multinomial","hyperparameters":{"penalty":0.1}}"#).unwrap();
        assert_eq!(spec.kind, LearnerKind::RegularizedMultinomial);
    }
}
