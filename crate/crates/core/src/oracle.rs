//! Exact population values on finite discrete designs, computed by direct
//! summation over the covariate support.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decomp::{decompose, Component, DecompositionQuery, DecompositionReport, InfluenceMatrix};
use crate::error::{Error, Result};
use crate::model::{AggregationScheme, Arm, Dataset, Design, GroupRule};
use crate::moments::Context;
use crate::nuisance::{fit_aggregates, NuisanceEstimates};

/// Finite covariate support with propensity and outcome-mean tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub support: Vec<Vec<f64>>,
    pub prob: Vec<f64>,
    pub labels: Vec<String>,
    /// `propensity[x][t]`.
    pub propensity: Vec<Vec<f64>>,
    /// `mean[x][t]`.
    pub mean: Vec<Vec<f64>>,
    /// Standard deviation of the mean-zero normal noise used by the sampler.
    pub noise_sd: f64,
    pub scheme: AggregationScheme,
    /// Group label of each support point, used with the column group rule.
    #[serde(default)]
    pub group_labels: Option<Vec<String>>,
}

const TABLE_TOL: f64 = 1e-12;

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl DiscreteDgp {
    pub fn validate(&self) -> Result<()> {
        let k = self.support.len();
        let l = self.labels.len();
        if k == 0 || l == 0 || self.prob.len() != k || self.propensity.len() != k || self.mean.len() != k {
            return Err(Error::InvalidInput("design tables have inconsistent sizes".into()));
        }
        if self.prob.iter().any(|p| !(*p >= 0.0)) || (self.prob.iter().sum::<f64>() - 1.0).abs() > TABLE_TOL {
            return Err(Error::InvalidInput("support probabilities must be nonnegative and sum to one".into()));
        }
        for x in 0..k {
            let e = &self.propensity[x];
            if e.len() != l || e.iter().any(|p| !(*p >= 0.0)) || (e.iter().sum::<f64>() - 1.0).abs() > TABLE_TOL {
                return Err(Error::InvalidInput(format!("propensity row {x} is not a distribution")));
            }
            if self.mean[x].len() != l || self.mean[x].iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidInput(format!("mean row {x} is invalid")));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("noise_sd must be nonnegative".into()));
        }
        Ok(())
    }

    /// Design resolved on the support itself (one row per support point).
    fn support_design(&self) -> Result<Design> {
        let codes: Vec<usize> = (0..self.support.len()).map(|i| i % self.labels.len()).collect();
        let mut data = Dataset::from_codes(vec![0.0; codes.len()], codes, self.labels.clone(), self.support.clone())?;
        if let Some(g) = &self.group_labels {
            data = data.with_group(g.clone())?;
        }
        resolve_without_arm_check(&self.scheme, &data)
    }

    /// Draws `n` iid units.
    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let xdist = WeightedIndex::new(&self.prob).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let tdists: Vec<Option<WeightedIndex<f64>>> =
            self.propensity.iter().map(|e| WeightedIndex::new(e).ok()).collect();
        let (mut y, mut codes, mut xs, mut groups) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x = xdist.sample(&mut rng);
            let t = tdists[x].as_ref().expect("positive-probability support point").sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            y.push(self.mean[x][t] + self.noise_sd * z);
            codes.push(t);
            xs.push(self.support[x].clone());
            if let Some(g) = &self.group_labels {
                groups.push(g[x].clone());
            }
        }
        let data = Dataset::from_codes(y, codes, self.labels.clone(), xs)?;
        if self.group_labels.is_some() {
            data.with_group(groups)
        } else {
            Ok(data)
        }
    }

    /// True propensities and outcome means at each row of a sample drawn
    /// from this design.
    pub fn truth_for(&self, data: &Dataset) -> Result<NuisanceEstimates> {
        let l = self.labels.len();
        let mut e = Vec::with_capacity(data.n() * l);
        let mut mu = Vec::with_capacity(data.n() * l);
        for i in 0..data.n() {
            let x = self
                .support
                .iter()
                .position(|s| s.as_slice() == data.row(i))
                .ok_or_else(|| Error::InvalidInput(format!("row {i} is not a support point")))?;
            e.extend_from_slice(&self.propensity[x]);
            mu.extend_from_slice(&self.mean[x]);
        }
        NuisanceEstimates::from_truth(e, mu, l)
    }

    /// Weighted dataset with two rows `μ ± σ` per (x, t) atom of positive mass,
    /// and the matching true nuisances. Weighted sample moments on it are
    /// population moments.
    pub fn enumerate(&self) -> Result<(Dataset, NuisanceEstimates)> {
        self.validate()?;
        let l = self.labels.len();
        let sd = if self.noise_sd > 0.0 { self.noise_sd } else { 0.0 };
        let (mut y, mut codes, mut xs, mut w, mut groups, mut e, mut mu) =
            (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
        for x in 0..self.support.len() {
            for t in 0..l {
                let mass = self.prob[x] * self.propensity[x][t];
                if mass <= 0.0 {
                    continue;
                }
                for s in [-1.0, 1.0] {
                    y.push(self.mean[x][t] + s * sd);
                    codes.push(t);
                    xs.push(self.support[x].clone());
                    w.push(0.5 * mass);
                    if let Some(g) = &self.group_labels {
                        groups.push(g[x].clone());
                    }
                    e.extend_from_slice(&self.propensity[x]);
                    mu.extend_from_slice(&self.mean[x]);
                }
            }
        }
        let mut data = Dataset::from_codes(y, codes, self.labels.clone(), xs)?.with_weights(w)?;
        if self.group_labels.is_some() {
            data = data.with_group(groups)?;
        }
        Ok((data, NuisanceEstimates::from_truth(e, mu, l)?))
    }
}

fn resolve_without_arm_check(scheme: &AggregationScheme, data: &Dataset) -> Result<Design> {
    let alphabet = data.alphabet().unwrap();
    let mut arm_of_label = vec![None; alphabet.len()];
    for (ai, arm) in scheme.arms.iter().enumerate() {
        for l in &arm.labels {
            let t = alphabet.iter().position(|a| a == l).ok_or_else(|| Error::UnknownTreatmentLabel(l.clone()))?;
            if arm_of_label[t].is_some() {
                return Err(Error::OverlappingArms(l.clone()));
            }
            arm_of_label[t] = Some(ai);
        }
    }
    let (group_names, group_of_unit) = match &scheme.groups {
        GroupRule::Column => {
            let col = data.group_column().ok_or_else(|| Error::UnknownColumn("group".into()))?;
            let mut names: Vec<String> = col.to_vec();
            names.sort();
            names.dedup();
            let of = col.iter().map(|g| names.iter().position(|n| n == g).unwrap()).collect();
            (names, of)
        }
        GroupRule::Threshold { covariate, threshold, lower, upper } => {
            if *covariate >= data.dim() {
                return Err(Error::UnknownColumn(format!("covariate index {covariate}")));
            }
            let of = (0..data.n()).map(|i| usize::from(data.row(i)[*covariate] >= *threshold)).collect();
            (vec![lower.clone(), upper.clone()], of)
        }
    };
    Ok(Design {
        labels: alphabet.to_vec(),
        arm_names: scheme.arms.iter().map(|a| a.name.clone()).collect(),
        group_names,
        arm_of_label,
        group_of_unit,
    })
}

/// Population quantities for one arm and group, from their definitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellTruth {
    pub arm_share_in_group: f64,
    /// `E[Y | T in a, X in g]`.
    pub conditional_mean: f64,
    /// `E[E[Y | T in a, X] | X in g]`.
    pub adjusted_mean: f64,
    /// `Σ_t e_ta(g) μ_t(g)`.
    pub stratified: f64,
    pub d: BTreeMap<Component, f64>,
}

/// Exact decomposition for a four-cell query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationDecomposition {
    pub query: DecompositionQuery,
    /// Cells in the order (a, g), (a', g), (a, g'), (a', g').
    pub cells: Vec<CellTruth>,
    pub delta_group: BTreeMap<Component, f64>,
    pub delta_reference: BTreeMap<Component, f64>,
    pub group_delta: BTreeMap<Component, f64>,
    pub dim: f64,
    pub adim: f64,
}

struct Support<'a> {
    dgp: &'a DiscreteDgp,
    design: Design,
}

impl Support<'_> {
    fn in_group(&self, x: usize, g: usize) -> bool {
        self.design.group_of_unit[x] == g
    }

    fn group_mass(&self, g: usize) -> f64 {
        (0..self.dgp.support.len()).filter(|&x| self.in_group(x, g)).map(|x| self.dgp.prob[x]).sum()
    }

    /// `E[f(x) | X in g]`.
    fn given_group(&self, g: usize, f: impl Fn(usize) -> f64) -> Result<f64> {
        let pg = self.group_mass(g);
        if pg <= 0.0 {
            return Err(Error::ZeroProbabilityCell(format!("group {}", self.design.group_names[g])));
        }
        Ok((0..self.dgp.support.len()).filter(|&x| self.in_group(x, g)).map(|x| self.dgp.prob[x] * f(x)).sum::<f64>()
            / pg)
    }

    fn overall(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.dgp.support.len()).map(|x| self.dgp.prob[x] * f(x)).sum()
    }

    fn arm_prop(&self, x: usize, a: usize) -> f64 {
        self.design.arm_labels(a).iter().map(|&t| self.dgp.propensity[x][t]).sum()
    }

    fn cell(&self, a: usize, g: usize) -> Result<CellTruth> {
        let dgp = self.dgp;
        let labels = self.design.arm_labels(a);
        let e = |x: usize, t: usize| dgp.propensity[x][t];
        let mu = |x: usize, t: usize| dgp.mean[x][t];
        let pa_g = self.given_group(g, |x| self.arm_prop(x, a))?;
        let pa = self.overall(|x| self.arm_prop(x, a));
        if pa_g <= 0.0 || pa <= 0.0 {
            return Err(Error::ZeroProbabilityCell(format!(
                "arm {} in group {}",
                self.design.arm_names[a], self.design.group_names[g]
            )));
        }
        let (mut d0, mut d1, mut d2, mut d3, mut d4, mut d4a, mut d5) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut stratified = 0.0;
        let mut conditional = 0.0;
        for &t in &labels {
            let e_t = self.overall(|x| e(x, t));
            let e_ta = e_t / pa;
            let mu_t = self.overall(|x| mu(x, t));
            let e_tg = self.given_group(g, |x| e(x, t))?;
            let e_tag = e_tg / pa_g;
            let mu_tg = self.given_group(g, |x| mu(x, t))?;
            let eta_x = |x: usize| {
                let p = self.arm_prop(x, a);
                if p > 0.0 {
                    e(x, t) / p
                } else {
                    0.0
                }
            };
            let mean_eta = self.given_group(g, eta_x)?;
            let cov_eta_mu = self.given_group(g, |x| (eta_x(x) - mean_eta) * (mu(x, t) - mu_tg))?;
            let cov_e_mu = self.given_group(g, |x| (e(x, t) - e_tg) * (mu(x, t) - mu_tg))?;
            d0 += e_ta * mu_t;
            d1 += e_ta * (mu_tg - mu_t);
            d2 += (e_tag - e_ta) * mu_t;
            d3 += (e_tag - e_ta) * (mu_tg - mu_t);
            d4 += cov_e_mu / pa_g;
            d4a += cov_eta_mu;
            d5 += (mean_eta - e_tag) * mu_tg;
            stratified += e_tag * mu_tg;
            conditional += self.given_group(g, |x| e(x, t) * mu(x, t))? / pa_g;
        }
        let adjusted = self.given_group(g, |x| {
            let p = self.arm_prop(x, a);
            if p > 0.0 {
                labels.iter().map(|&t| e(x, t) * mu(x, t)).sum::<f64>() / p
            } else {
                0.0
            }
        })?;
        if self.given_group(g, |x| f64::from(u8::from(self.arm_prop(x, a) <= 0.0)))? > 0.0 {
            return Err(Error::ZeroProbabilityCell(format!(
                "arm {} has zero propensity on part of group {}",
                self.design.arm_names[a], self.design.group_names[g]
            )));
        }
        let d = BTreeMap::from([
            (Component::D0, d0),
            (Component::D1, d1),
            (Component::D2, d2),
            (Component::D3, d3),
            (Component::D4, d4),
            (Component::D4Adjusted, d4a),
            (Component::D5, d5),
        ]);
        Ok(CellTruth {
            arm_share_in_group: pa_g,
            conditional_mean: conditional,
            adjusted_mean: adjusted,
            stratified,
            d,
        })
    }
}

/// Every component of the four cells, the arm contrasts, the group
/// differences, and the plain and adjusted four-cell contrasts.
pub fn population_decomposition(dgp: &DiscreteDgp, q: &DecompositionQuery) -> Result<PopulationDecomposition> {
    dgp.validate()?;
    let s = Support { dgp, design: dgp.support_design()? };
    let a = s.design.arm_index(&q.arm)?;
    let a0 = s.design.arm_index(&q.control)?;
    let g = s.design.group_index(&q.group)?;
    let g0 = s.design.group_index(&q.reference)?;
    let cells = vec![s.cell(a, g)?, s.cell(a0, g)?, s.cell(a, g0)?, s.cell(a0, g0)?];
    let diff = |x: &CellTruth, y: &CellTruth| -> BTreeMap<Component, f64> {
        Component::ALL.iter().map(|&c| (c, x.d[&c] - y.d[&c])).collect()
    };
    let delta_group = diff(&cells[0], &cells[1]);
    let delta_reference = diff(&cells[2], &cells[3]);
    let group_delta = Component::CONTRASTS.iter().map(|&c| (c, delta_group[&c] - delta_reference[&c])).collect();
    let dim =
        cells[0].conditional_mean - cells[1].conditional_mean - cells[2].conditional_mean + cells[3].conditional_mean;
    let adim = cells[0].adjusted_mean - cells[1].adjusted_mean - cells[2].adjusted_mean + cells[3].adjusted_mean;
    Ok(PopulationDecomposition { query: q.clone(), cells, delta_group, delta_reference, group_delta, dim, adim })
}

/// Population interaction coefficient of the saturated two-by-two regression:
/// the four-cell contrast of conditional means.
pub fn population_regression_beta3(dgp: &DiscreteDgp, q: &DecompositionQuery) -> Result<f64> {
    dgp.validate()?;
    let s = Support { dgp, design: dgp.support_design()? };
    let a = s.design.arm_index(&q.arm)?;
    let a0 = s.design.arm_index(&q.control)?;
    let g = s.design.group_index(&q.group)?;
    let g0 = s.design.group_index(&q.reference)?;
    let mean = |arm: usize, grp: usize| -> Result<f64> {
        let num = s.given_group(grp, |x| {
            s.design.arm_labels(arm).iter().map(|&t| dgp.propensity[x][t] * dgp.mean[x][t]).sum()
        })?;
        let den = s.given_group(grp, |x| s.arm_prop(x, arm))?;
        if den <= 0.0 {
            return Err(Error::ZeroProbabilityCell(format!("arm {arm} in group {grp}")));
        }
        Ok(num / den)
    };
    Ok(mean(a, g)? - mean(a0, g)? - mean(a, g0)? + mean(a0, g0)?)
}

/// Runs the estimator on the enumerated population with true nuisances.
/// Estimates equal population values and `Σ̂` is the exact asymptotic
/// covariance of the influence functions.
pub fn population_influence(
    dgp: &DiscreteDgp,
    q: &DecompositionQuery,
) -> Result<(DecompositionReport, InfluenceMatrix)> {
    let (data, truth) = dgp.enumerate()?;
    let design = dgp.scheme.resolve(&data)?;
    let nuis = fit_aggregates(&data, &design, truth)?;
    let ctx = Context::new(&data, &design, &nuis)?;
    decompose(&ctx, &nuis, q)
}

fn two_arm_scheme(treated: &[&str], control: &[&str], covariate: usize) -> AggregationScheme {
    AggregationScheme {
        arms: vec![
            Arm { name: "treated".into(), labels: labels(treated) },
            Arm { name: "control".into(), labels: labels(control) },
        ],
        groups: GroupRule::Threshold { covariate, threshold: 0.5, lower: "g0".into(), upper: "g1".into() },
    }
}

/// Query comparing the treated and control arms between groups `g1` and `g0`.
pub fn standard_query() -> DecompositionQuery {
    DecompositionQuery { arm: "treated".into(), control: "control".into(), group: "g1".into(), reference: "g0".into() }
}

/// Binary group, two treated versions with group-specific shares and
/// constant version means 0, 1, 2. Only the group targeting of average
/// outcomes differs between groups, with group contrast −1/3.
pub fn group_targeting_example() -> DiscreteDgp {
    DiscreteDgp {
        support: vec![vec![0.0], vec![1.0]],
        prob: vec![0.5, 0.5],
        labels: labels(&["0", "1", "2"]),
        propensity: vec![vec![0.5, 1.0 / 6.0, 1.0 / 3.0], vec![0.5, 1.0 / 3.0, 1.0 / 6.0]],
        mean: vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]],
        noise_sd: 1.0,
        scheme: two_arm_scheme(&["1", "2"], &["0"], 0),
        group_labels: None,
    }
}

/// Covariates `(x1, g)` uniform on `{0,1}²`. In group 1 the share of version 2
/// falls with `x1` while its mean rises with `x1`, producing individual
/// targeting of `−Var(x1)/3` in that group only.
pub fn individual_targeting_example() -> DiscreteDgp {
    let mut support = Vec::new();
    let mut propensity = Vec::new();
    let mut mean = Vec::new();
    for g in [0.0, 1.0] {
        for x1 in [0.0, 1.0] {
            support.push(vec![x1, g]);
            let e2 = if g == 1.0 { 0.5 * (2.0 / 3.0 - x1 / 3.0) } else { 0.25 };
            propensity.push(vec![0.5, 0.5 - e2, e2]);
            mean.push(vec![0.0, 0.0, x1 - 0.5]);
        }
    }
    DiscreteDgp {
        support,
        prob: vec![0.25; 4],
        labels: labels(&["0", "1", "2"]),
        propensity,
        mean,
        noise_sd: 1.0,
        scheme: two_arm_scheme(&["1", "2"], &["0"], 1),
        group_labels: None,
    }
}

/// Power-study design: control with probability 1/2 and `J` treated versions
/// with probability `1/(2J)` each, binary group, version means `(j−1)/(J−1)`
/// in group 1 and shifted down by `xi[j]` in group 0, unit noise.
pub fn power_design(xi: &[f64]) -> Result<DiscreteDgp> {
    let j = xi.len();
    if j == 0 {
        return Err(Error::InvalidInput("power design needs J >= 1".into()));
    }
    let mut names = vec!["0".to_string()];
    names.extend((1..=j).map(|k| k.to_string()));
    let mut e = vec![0.5];
    e.extend(std::iter::repeat_n(0.5 / j as f64, j));
    let slope = |k: usize| if j > 1 { (k - 1) as f64 / (j - 1) as f64 } else { 0.0 };
    let mut mean = Vec::new();
    for g in [0.0, 1.0] {
        let mut row = vec![0.0];
        for k in 1..=j {
            row.push(slope(k) - if g == 0.0 { xi[k - 1] } else { 0.0 });
        }
        mean.push(row);
    }
    let treated: Vec<String> = names[1..].to_vec();
    Ok(DiscreteDgp {
        support: vec![vec![0.0], vec![1.0]],
        prob: vec![0.5, 0.5],
        labels: names,
        propensity: vec![e.clone(), e],
        mean,
        noise_sd: 1.0,
        scheme: AggregationScheme {
            arms: vec![
                Arm { name: "treated".into(), labels: treated },
                Arm { name: "control".into(), labels: vec!["0".into()] },
            ],
            groups: GroupRule::Threshold { covariate: 0, threshold: 0.5, lower: "g0".into(), upper: "g1".into() },
        },
        group_labels: None,
    })
}

/// Random design with `k` support points on one covariate `0..k`, `l` labels,
/// treated arm = labels `1..l`, control = label 0, groups split at `k/2`.
/// With `randomized`, propensities are constant within each group.
pub fn random_design(k: usize, l: usize, randomized: bool, rng: &mut impl rand::Rng) -> DiscreteDgp {
    let mut prob: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    let s: f64 = prob.iter().sum();
    prob.iter_mut().for_each(|p| *p /= s);
    let split = k / 2;
    let shared: Vec<Vec<f64>> = (0..2).map(|_| (0..l).map(|_| 0.2 + rng.random::<f64>()).collect()).collect();
    let propensity = (0..k)
        .map(|x| {
            let mut row: Vec<f64> = if randomized {
                shared[usize::from(x >= split)].clone()
            } else {
                (0..l).map(|_| 0.2 + rng.random::<f64>()).collect()
            };
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect();
    let mean = (0..k).map(|_| (0..l).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
    let names: Vec<String> = (0..l).map(|t| t.to_string()).collect();
    DiscreteDgp {
        support: (0..k).map(|x| vec![x as f64]).collect(),
        prob,
        labels: names.clone(),
        propensity,
        mean,
        noise_sd: 1.0,
        scheme: AggregationScheme {
            arms: vec![
                Arm { name: "treated".into(), labels: names[1..].to_vec() },
                Arm { name: "control".into(), labels: vec![names[0].clone()] },
            ],
            groups: GroupRule::Threshold {
                covariate: 0,
                threshold: split as f64 - 0.5,
                lower: "g0".into(),
                upper: "g1".into(),
            },
        },
        group_labels: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{Aggregate, PrimitiveId};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn group_targeting_truth() {
        let p = population_decomposition(&group_targeting_example(), &standard_query()).unwrap();
        assert!(close(p.group_delta[&Component::D2], -1.0 / 3.0));
        for c in [Component::D1, Component::D3, Component::D4, Component::D4Adjusted, Component::D5] {
            assert!(close(p.group_delta[&c], 0.0), "{c:?}");
        }
        assert!(close(population_regression_beta3(&group_targeting_example(), &standard_query()).unwrap(), -1.0 / 3.0));
    }

    #[test]
    fn individual_targeting_truth() {
        let dgp = individual_targeting_example();
        let p = population_decomposition(&dgp, &standard_query()).unwrap();
        assert!(close(p.group_delta[&Component::D4], -1.0 / 12.0));
        assert!(close(p.group_delta[&Component::D4Adjusted], -1.0 / 12.0));
        assert!(close(p.cells[0].d[&Component::D4], -(1.0 / 3.0) * 0.25));
        for c in [Component::D1, Component::D2, Component::D3, Component::D5] {
            assert!(close(p.group_delta[&c], 0.0), "{c:?}");
        }
        assert!(close(population_regression_beta3(&dgp, &standard_query()).unwrap(), -1.0 / 12.0));
    }

    #[test]
    fn homogeneous_randomized_design_has_zero_interaction() {
        let dgp = power_design(&[0.0; 3]).unwrap();
        assert!(close(population_regression_beta3(&dgp, &standard_query()).unwrap(), 0.0));
    }

    #[test]
    fn single_version_arm_collapses_to_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dgp = random_design(4, 2, false, &mut rng);
        let p = population_decomposition(&dgp, &standard_query()).unwrap();
        for cell in &p.cells {
            let sum: f64 = [Component::D0, Component::D1, Component::D2, Component::D3, Component::D4]
                .iter()
                .map(|c| cell.d[c])
                .sum();
            assert!(close(sum, cell.conditional_mean));
            assert!(close(cell.d[&Component::D5], 0.0));
        }
    }

    #[test]
    fn enumeration_reproduces_truth_through_moments() {
        let dgp = individual_targeting_example();
        let (data, truth) = dgp.enumerate().unwrap();
        let design = dgp.scheme.resolve(&data).unwrap();
        let nuis = fit_aggregates(&data, &design, truth).unwrap();
        let ctx = Context::new(&data, &design, &nuis).unwrap();
        // E[e_ta(X) | g1] for version 2 is (2/3 + 1/3)/2 = 1/2.
        assert!(close(ctx.value(&Aggregate::MeanWithinArmPropensity(2, 0, 1)).unwrap(), 0.5));
        assert!(close(ctx.value(&Aggregate::MeanOutcome(2)).unwrap(), 0.0));
        // E[e_2(X) μ_2(X) | g1] = ((1/3)(-1/2) + (1/6)(1/2)) / 2.
        let p7 = ctx.primitive(PrimitiveId::new(7).unwrap(), 2, 0, 1).unwrap();
        assert!(close(p7.estimate, -1.0 / 24.0));
        let (report, _) = population_influence(&dgp, &standard_query()).unwrap();
        assert!(close(report.group_delta(Component::D4).estimate, -1.0 / 12.0));
    }

    #[test]
    fn sampler_is_deterministic() {
        let dgp = group_targeting_example();
        assert_eq!(dgp.sample(100, 1, 0).unwrap(), dgp.sample(100, 1, 0).unwrap());
        assert_ne!(dgp.sample(100, 1, 0).unwrap(), dgp.sample(100, 1, 1).unwrap());
    }
}
