//! Weighted linear moments `Ψ = Ψ_X (Ψ_Y − θ Ψ_T)` for the aggregate
//! nuisances and for the eight primitive parameters, and their solver.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, Design};
use crate::nuisance::NuisanceEstimates;

/// Plug-in probabilities below this value are rejected.
pub const DENOMINATOR_GUARD: f64 = 1e-6;

/// Scalar aggregate nuisances. `t` is a treatment code, `a` an arm index and
/// `g` a group index of the resolved design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum Aggregate {
    /// P(T in a).
    ArmShare(usize),
    /// P(X in g).
    GroupShare(usize),
    /// P(T = t).
    LabelShare(usize),
    /// E[μ_t(X)].
    MeanOutcome(usize),
    /// P(T = t | T in a).
    WithinArmShare(usize, usize),
    /// P(T = t | X in g).
    GroupLabelShare(usize, usize),
    /// E[μ_t(X) | X in g].
    GroupMeanOutcome(usize, usize),
    /// P(T in a, X in g).
    ArmGroupShare(usize, usize),
    /// P(T in a | X in g).
    ArmShareInGroup(usize, usize),
    /// E[Y | T in a, X in g].
    ArmGroupMean(usize, usize),
    /// P(T = t | T in a, X in g).
    WithinArmShareInGroup(usize, usize, usize),
    /// E[e_t(X) / P(T in a | X) | X in g].
    MeanWithinArmPropensity(usize, usize, usize),
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Aggregate::*;
        match *self {
            ArmShare(a) => write!(f, "e_a[a={a}]"),
            GroupShare(g) => write!(f, "e_g[g={g}]"),
            LabelShare(t) => write!(f, "e_t[t={t}]"),
            MeanOutcome(t) => write!(f, "mu_t[t={t}]"),
            WithinArmShare(t, a) => write!(f, "e_ta[t={t},a={a}]"),
            GroupLabelShare(t, g) => write!(f, "e_t|g[t={t},g={g}]"),
            GroupMeanOutcome(t, g) => write!(f, "mu_t|g[t={t},g={g}]"),
            ArmGroupShare(a, g) => write!(f, "e_ag[a={a},g={g}]"),
            ArmShareInGroup(a, g) => write!(f, "e_a|g[a={a},g={g}]"),
            ArmGroupMean(a, g) => write!(f, "m_a|g[a={a},g={g}]"),
            WithinArmShareInGroup(t, a, g) => write!(f, "e_ta|g[t={t},a={a},g={g}]"),
            MeanWithinArmPropensity(t, a, g) => write!(f, "E[e_ta(X)|g][t={t},a={a},g={g}]"),
        }
    }
}

/// Identifier of the eight primitive parameters.
///
/// 1. within-arm share in group times group mean outcome
/// 2. group mean of within-arm propensity times group mean outcome
/// 3. group mean of within-arm propensity times outcome regression
/// 4. within-arm share times group mean outcome
/// 5. within-arm share in group times overall mean outcome
/// 6. label share in group times group mean outcome
/// 7. group mean of propensity times outcome regression
/// 8. within-arm share times overall mean outcome
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PrimitiveId(u8);

impl PrimitiveId {
    pub fn new(p: u8) -> Result<Self> {
        if (1..=8).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::InvalidInput(format!("primitive index {p} outside 1..=8")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = PrimitiveId> {
        (1..=8).map(PrimitiveId)
    }
}

/// Per-unit `Ψ_X`, `Ψ_Y`, `Ψ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentComponents {
    pub psi_x: Vec<f64>,
    pub psi_y: Vec<f64>,
    pub psi_t: Vec<f64>,
}

impl MomentComponents {
    fn with_capacity(n: usize) -> Self {
        Self { psi_x: Vec::with_capacity(n), psi_y: Vec::with_capacity(n), psi_t: Vec::with_capacity(n) }
    }

    fn push(&mut self, x: f64, y: f64, t: f64) {
        self.psi_x.push(x);
        self.psi_y.push(y);
        self.psi_t.push(t);
    }
}

/// A moment solution and its per-unit influence column.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub estimate: f64,
    pub influence: Vec<f64>,
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Weighted mean of `f(i)` over `n` units.
pub fn weighted_mean(n: usize, weights: Option<&[f64]>, f: impl Fn(usize) -> f64) -> f64 {
    match weights {
        None => pairwise_sum(&(0..n).map(f).collect::<Vec<_>>()) / n as f64,
        Some(w) => {
            let num: Vec<f64> = (0..n).map(|i| if w[i] == 0.0 { 0.0 } else { w[i] * f(i) }).collect();
            pairwise_sum(&num) / pairwise_sum(w)
        }
    }
}

/// Solves `E_n[Ψ_X (Ψ_Y − θ Ψ_T)] = 0` for θ.
pub fn solve_linear_moment(c: &MomentComponents, weights: Option<&[f64]>) -> Result<Solved> {
    let n = c.psi_x.len();
    let num = weighted_mean(n, weights, |i| c.psi_x[i] * c.psi_y[i]);
    let den = weighted_mean(n, weights, |i| c.psi_x[i] * c.psi_t[i]);
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::DegenerateDenominator { what: "moment normalizer".into(), value: den });
    }
    let estimate = num / den;
    if !estimate.is_finite() {
        return Err(Error::NonFinite("moment solution".into()));
    }
    let influence = (0..n)
        .map(|i| if c.psi_x[i] == 0.0 { 0.0 } else { c.psi_x[i] * (c.psi_y[i] - estimate * c.psi_t[i]) })
        .collect();
    Ok(Solved { estimate, influence })
}

/// Shared per-unit quantities for one (dataset, design, nuisances) triple.
pub struct Context<'a> {
    data: &'a Dataset,
    design: &'a Design,
    nuis: &'a NuisanceEstimates,
    codes: &'a [usize],
    /// `arm_prop[a][i] = Σ_{s in a} ê_s(x_i)`.
    arm_prop: Vec<Vec<f64>>,
    /// `psi_mu[t][i]`, the doubly robust score for the mean of μ_t.
    psi_mu: Vec<Vec<f64>>,
    /// Weighted mass of units by (label, group).
    label_group_mass: Vec<Vec<f64>>,
    cache: Mutex<BTreeMap<Aggregate, f64>>,
}

impl<'a> Context<'a> {
    pub fn new(data: &'a Dataset, design: &'a Design, nuis: &'a NuisanceEstimates) -> Result<Self> {
        let codes = data.codes().ok_or_else(|| Error::InvalidInput("treatment is a dose; discretize first".into()))?;
        let n = data.n();
        let l = design.labels.len();
        if nuis.n() != n || nuis.n_labels() != l || design.group_of_unit.len() != n {
            return Err(Error::InvalidInput("nuisances, design and dataset disagree in shape".into()));
        }
        let arm_prop = (0..design.arm_names.len())
            .map(|a| {
                let labels = design.arm_labels(a);
                (0..n).map(|i| labels.iter().map(|&t| nuis.e(i, t)).sum()).collect()
            })
            .collect();
        let y = data.outcome();
        let mut psi_mu = Vec::with_capacity(l);
        for t in 0..l {
            let mut col = Vec::with_capacity(n);
            for i in 0..n {
                let mu = nuis.mu(i, t);
                if codes[i] == t && data.weight(i) > 0.0 {
                    let e = nuis.e(i, t);
                    if !(e > 0.0) {
                        return Err(Error::NonFinite(format!("propensity of observed label at row {i}")));
                    }
                    col.push((y[i] - mu) / e + mu);
                } else {
                    col.push(mu);
                }
            }
            psi_mu.push(col);
        }
        let mut label_group_mass = vec![vec![0.0; design.group_names.len()]; l];
        for i in 0..n {
            label_group_mass[codes[i]][design.group_of_unit[i]] += data.weight(i);
        }
        Ok(Self {
            data,
            design,
            nuis,
            codes,
            arm_prop,
            psi_mu,
            label_group_mass,
            cache: Mutex::new(nuis.aggregates().clone()),
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn design(&self) -> &Design {
        self.design
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.data.weights()
    }

    /// Weighted sample mean of a per-unit column.
    pub fn mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        weighted_mean(self.n(), self.weights(), f)
    }

    fn in_arm(&self, i: usize, a: usize) -> bool {
        self.design.arm_of_label[self.codes[i]] == Some(a)
    }

    fn in_group(&self, i: usize, g: usize) -> bool {
        self.design.group_of_unit[i] == g
    }

    /// ê_t(x_i) / P̂(T in a | x_i).
    fn within_arm_propensity(&self, i: usize, t: usize, a: usize) -> f64 {
        let p = self.arm_prop[a][i];
        if p > 0.0 {
            self.nuis.e(i, t) / p
        } else {
            0.0
        }
    }

    /// Score for E[e_ta(X) | X in g] before group weighting.
    fn psi_within_arm(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        let eta = self.within_arm_propensity(i, t, a);
        if self.in_arm(i, a) && self.data.weight(i) > 0.0 {
            let p = self.arm_prop[a][i];
            if !(p > 0.0) {
                return Err(Error::NonFinite(format!("arm propensity at row {i}")));
            }
            let ind = f64::from(u8::from(self.codes[i] == t));
            Ok((ind - eta) / p + eta)
        } else {
            Ok(eta)
        }
    }

    fn check_label(&self, t: usize) -> Result<()> {
        if t >= self.design.labels.len() {
            return Err(Error::InvalidInput(format!("treatment code {t} out of range")));
        }
        Ok(())
    }

    fn check_label_in_arm(&self, t: usize, a: usize) -> Result<()> {
        self.check_label(t)?;
        self.check_arm(a)?;
        if self.design.arm_of_label[t] != Some(a) {
            return Err(Error::InvalidInput(format!(
                "label `{}` is not in arm `{}`",
                self.design.labels[t], self.design.arm_names[a]
            )));
        }
        Ok(())
    }

    fn check_arm(&self, a: usize) -> Result<()> {
        if a >= self.design.arm_names.len() {
            return Err(Error::UnknownArm(format!("#{a}")));
        }
        Ok(())
    }

    fn check_group(&self, g: usize) -> Result<()> {
        if g >= self.design.group_names.len() {
            return Err(Error::UnknownGroup(format!("#{g}")));
        }
        Ok(())
    }

    fn check_cell(&self, t: usize, g: usize) -> Result<()> {
        if self.label_group_mass[t][g] <= 0.0 {
            return Err(Error::EmptyCell {
                label: self.design.labels[t].clone(),
                group: self.design.group_names[g].clone(),
            });
        }
        Ok(())
    }

    /// Solved value of an aggregate, cached.
    pub fn value(&self, agg: &Aggregate) -> Result<f64> {
        if let Some(v) = self.cache.lock().unwrap().get(agg) {
            return Ok(*v);
        }
        let v = self.aggregate(agg)?.estimate;
        self.cache.lock().unwrap().insert(*agg, v);
        Ok(v)
    }

    /// A probability used as a denominator, with the zero and small-value guards.
    fn probability(&self, agg: Aggregate) -> Result<f64> {
        let v = self.value(&agg)?;
        if v <= 0.0 {
            return Err(match agg {
                Aggregate::ArmGroupShare(a, g) | Aggregate::ArmShareInGroup(a, g) => Error::EmptyCell {
                    label: self.design.arm_names[a].clone(),
                    group: self.design.group_names[g].clone(),
                },
                Aggregate::GroupShare(g) => Error::EmptyGroup(self.design.group_names[g].clone()),
                Aggregate::ArmShare(a) => Error::EmptyArm(self.design.arm_names[a].clone()),
                _ => Error::DegenerateDenominator { what: agg.to_string(), value: v },
            });
        }
        if v < DENOMINATOR_GUARD {
            return Err(Error::DegenerateDenominator { what: agg.to_string(), value: v });
        }
        Ok(v)
    }

    /// Moment components of an aggregate nuisance.
    pub fn aggregate_components(&self, agg: &Aggregate) -> Result<MomentComponents> {
        use Aggregate::*;
        let n = self.n();
        let ind = |b: bool| f64::from(u8::from(b));
        let mut c = MomentComponents::with_capacity(n);
        match *agg {
            ArmShare(a) => {
                self.check_arm(a)?;
                (0..n).for_each(|i| c.push(1.0, ind(self.in_arm(i, a)), 1.0));
            }
            GroupShare(g) => {
                self.check_group(g)?;
                (0..n).for_each(|i| c.push(1.0, ind(self.in_group(i, g)), 1.0));
            }
            LabelShare(t) => {
                self.check_label(t)?;
                (0..n).for_each(|i| c.push(1.0, ind(self.codes[i] == t), 1.0));
            }
            MeanOutcome(t) => {
                self.check_label(t)?;
                (0..n).for_each(|i| c.push(1.0, self.psi_mu[t][i], 1.0));
            }
            WithinArmShare(t, a) => {
                self.check_label_in_arm(t, a)?;
                let pa = self.probability(ArmShare(a))?;
                (0..n).for_each(|i| c.push(ind(self.in_arm(i, a)) / pa, ind(self.codes[i] == t), 1.0));
            }
            GroupLabelShare(t, g) => {
                self.check_label(t)?;
                let pg = self.probability(GroupShare(g))?;
                (0..n).for_each(|i| c.push(ind(self.in_group(i, g)) / pg, ind(self.codes[i] == t), 1.0));
            }
            GroupMeanOutcome(t, g) => {
                self.check_label(t)?;
                let pg = self.probability(GroupShare(g))?;
                (0..n).for_each(|i| c.push(ind(self.in_group(i, g)) / pg, self.psi_mu[t][i], 1.0));
            }
            ArmGroupShare(a, g) => {
                self.check_arm(a)?;
                self.check_group(g)?;
                (0..n).for_each(|i| c.push(1.0, ind(self.in_arm(i, a) && self.in_group(i, g)), 1.0));
            }
            ArmShareInGroup(a, g) => {
                self.check_arm(a)?;
                let pg = self.probability(GroupShare(g))?;
                (0..n).for_each(|i| c.push(ind(self.in_group(i, g)) / pg, ind(self.in_arm(i, a)), 1.0));
            }
            ArmGroupMean(a, g) => {
                let pag = self.probability(ArmGroupShare(a, g))?;
                let y = self.data.outcome();
                (0..n).for_each(|i| c.push(ind(self.in_arm(i, a) && self.in_group(i, g)) / pag, y[i], 1.0));
            }
            WithinArmShareInGroup(t, a, g) => {
                self.check_label_in_arm(t, a)?;
                let pag = self.probability(ArmGroupShare(a, g))?;
                (0..n).for_each(|i| {
                    c.push(ind(self.in_arm(i, a) && self.in_group(i, g)) / pag, ind(self.codes[i] == t), 1.0)
                });
            }
            MeanWithinArmPropensity(t, a, g) => {
                self.check_label_in_arm(t, a)?;
                let pg = self.probability(GroupShare(g))?;
                for i in 0..n {
                    if self.in_group(i, g) {
                        c.push(1.0 / pg, self.psi_within_arm(i, t, a)?, 1.0);
                    } else {
                        c.push(0.0, 0.0, 1.0);
                    }
                }
            }
        }
        Ok(c)
    }

    /// Solved aggregate and its influence column.
    pub fn aggregate(&self, agg: &Aggregate) -> Result<Solved> {
        solve_linear_moment(&self.aggregate_components(agg)?, self.weights())
    }

    /// Influence column of an aggregate nuisance.
    pub fn aggregate_if(&self, agg: &Aggregate) -> Result<Vec<f64>> {
        Ok(self.aggregate(agg)?.influence)
    }

    /// Moment components of primitive `p` for label `t` in arm `a` and group `g`.
    pub fn primitive_components(&self, p: PrimitiveId, t: usize, a: usize, g: usize) -> Result<MomentComponents> {
        use Aggregate::*;
        self.check_label_in_arm(t, a)?;
        self.check_group(g)?;
        if p.0 != 8 {
            self.check_cell(t, g)?;
        }
        let n = self.n();
        let ind = |b: bool| f64::from(u8::from(b));
        let psi_mu = &self.psi_mu[t];
        let mut c = MomentComponents::with_capacity(n);
        match p.0 {
            1 => {
                let pg = self.probability(GroupShare(g))?;
                let pag = self.probability(ArmShareInGroup(a, g))?;
                let mu_g = self.value(&GroupMeanOutcome(t, g))?;
                let eta_g = self.value(&WithinArmShareInGroup(t, a, g))?;
                for i in 0..n {
                    if !self.in_group(i, g) {
                        c.push(0.0, 0.0, 1.0);
                        continue;
                    }
                    let arm = ind(self.in_arm(i, a));
                    let y = arm * ind(self.codes[i] == t) / pag * mu_g + eta_g * psi_mu[i];
                    c.push(1.0 / pg, y, 1.0 + arm / pag);
                }
            }
            2 => {
                let pg = self.probability(GroupShare(g))?;
                let mu_g = self.value(&GroupMeanOutcome(t, g))?;
                let eeta = self.value(&MeanWithinArmPropensity(t, a, g))?;
                for i in 0..n {
                    if !self.in_group(i, g) {
                        c.push(0.0, 0.0, 2.0);
                        continue;
                    }
                    let y = self.psi_within_arm(i, t, a)? * mu_g + eeta * psi_mu[i];
                    c.push(1.0 / pg, y, 2.0);
                }
            }
            3 => {
                let pg = self.probability(GroupShare(g))?;
                for i in 0..n {
                    if !self.in_group(i, g) {
                        c.push(0.0, 0.0, 1.0);
                        continue;
                    }
                    let eta = self.within_arm_propensity(i, t, a);
                    let mu = self.nuis.mu(i, t);
                    let correction = if self.in_arm(i, a) && self.data.weight(i) > 0.0 {
                        (ind(self.codes[i] == t) - eta) / self.arm_prop[a][i] * mu
                    } else {
                        0.0
                    };
                    c.push(1.0 / pg, correction + eta * psi_mu[i], 1.0);
                }
            }
            4 => {
                let pa = self.probability(ArmShare(a))?;
                let pg = self.probability(GroupShare(g))?;
                let mu_g = self.value(&GroupMeanOutcome(t, g))?;
                let eta = self.value(&WithinArmShare(t, a))?;
                for i in 0..n {
                    let arm = ind(self.in_arm(i, a)) / pa;
                    let grp = ind(self.in_group(i, g)) / pg;
                    let y = arm * ind(self.codes[i] == t) * mu_g + eta * grp * psi_mu[i];
                    c.push(1.0, y, arm + grp);
                }
            }
            5 => {
                let pag = self.probability(ArmGroupShare(a, g))?;
                let mu = self.value(&MeanOutcome(t))?;
                let eta_g = self.value(&WithinArmShareInGroup(t, a, g))?;
                for i in 0..n {
                    let cell = ind(self.in_arm(i, a) && self.in_group(i, g)) / pag;
                    let y = cell * ind(self.codes[i] == t) * mu + eta_g * psi_mu[i];
                    c.push(1.0, y, cell + 1.0);
                }
            }
            6 => {
                let pg = self.probability(GroupShare(g))?;
                let mu_g = self.value(&GroupMeanOutcome(t, g))?;
                let e_g = self.value(&GroupLabelShare(t, g))?;
                for i in 0..n {
                    if !self.in_group(i, g) {
                        c.push(0.0, 0.0, 2.0);
                        continue;
                    }
                    let y = ind(self.codes[i] == t) * mu_g + e_g * psi_mu[i];
                    c.push(1.0 / pg, y, 2.0);
                }
            }
            7 => {
                let pg = self.probability(GroupShare(g))?;
                let yv = self.data.outcome();
                for i in 0..n {
                    let grp = ind(self.in_group(i, g)) / pg;
                    c.push(grp, ind(self.codes[i] == t) * yv[i], 1.0);
                }
            }
            8 => {
                let pa = self.probability(ArmShare(a))?;
                let mu = self.value(&MeanOutcome(t))?;
                let eta = self.value(&WithinArmShare(t, a))?;
                for i in 0..n {
                    let arm = ind(self.in_arm(i, a)) / pa;
                    let y = arm * ind(self.codes[i] == t) * mu + eta * psi_mu[i];
                    c.push(1.0, y, arm + 1.0);
                }
            }
            _ => unreachable!(),
        }
        if c.psi_y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("primitive {} components", p.0)));
        }
        Ok(c)
    }

    /// Doubly robust covariate-adjusted mean of arm `a` in group `g`,
    /// computed directly from the granular nuisances.
    pub fn adjusted_arm_group_mean(&self, a: usize, g: usize) -> Result<Solved> {
        self.check_arm(a)?;
        let pg = self.probability(Aggregate::GroupShare(g))?;
        let labels = self.design.arm_labels(a);
        let y = self.data.outcome();
        let mut c = MomentComponents::with_capacity(self.n());
        for i in 0..self.n() {
            if !self.in_group(i, g) {
                c.push(0.0, 0.0, 1.0);
                continue;
            }
            let m: f64 = labels.iter().map(|&t| self.within_arm_propensity(i, t, a) * self.nuis.mu(i, t)).sum();
            let correction =
                if self.in_arm(i, a) && self.data.weight(i) > 0.0 { (y[i] - m) / self.arm_prop[a][i] } else { 0.0 };
            c.push(1.0 / pg, correction + m, 1.0);
        }
        solve_linear_moment(&c, self.weights())
    }

    /// Solved primitive and its influence column.
    pub fn primitive(&self, p: PrimitiveId, t: usize, a: usize, g: usize) -> Result<Solved> {
        solve_linear_moment(&self.primitive_components(p, t, a, g)?, self.weights())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggregationScheme, Arm, GroupRule};
    use crate::nuisance::{assign_folds, fit_aggregates, fit_granular, CellFrequency};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64, constant: Option<f64>) -> (Dataset, Design) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut t, mut x, mut y) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let xi = f64::from(u8::from(rng.random::<bool>()));
            let u: f64 = rng.random();
            let lab = if u < 0.4 {
                0
            } else if u < 0.7 + 0.1 * xi {
                1
            } else {
                2
            };
            t.push(lab.to_string());
            x.push(vec![xi]);
            y.push(constant.unwrap_or(lab as f64 + xi * lab as f64 + rng.random::<f64>()));
        }
        let data = Dataset::from_labels(y, &t, x).unwrap();
        let scheme = AggregationScheme {
            arms: vec![
                Arm { name: "treated".into(), labels: vec!["1".into(), "2".into()] },
                Arm { name: "control".into(), labels: vec!["0".into()] },
            ],
            groups: GroupRule::Threshold { covariate: 0, threshold: 0.5, lower: "g0".into(), upper: "g1".into() },
        };
        let design = scheme.resolve(&data).unwrap();
        (data, design)
    }

    fn fitted(data: &Dataset, design: &Design) -> NuisanceEstimates {
        let folds = assign_folds(data.n(), 5, 1).unwrap();
        let g = fit_granular(data, &folds, &CellFrequency, &CellFrequency, None).unwrap();
        fit_aggregates(data, design, g).unwrap()
    }

    #[test]
    fn mean_and_share_as_moment_solutions() {
        let y = vec![1.0, 2.0, 4.0, 9.0];
        let c = MomentComponents { psi_x: vec![1.0; 4], psi_y: y, psi_t: vec![1.0; 4] };
        let s = solve_linear_moment(&c, None).unwrap();
        assert_eq!(s.estimate, 4.0);
        assert_eq!(s.influence, vec![-3.0, -2.0, 0.0, 5.0]);
        let zero = MomentComponents { psi_x: vec![0.0; 2], psi_y: vec![1.0; 2], psi_t: vec![1.0; 2] };
        assert!(matches!(solve_linear_moment(&zero, None), Err(Error::DegenerateDenominator { .. })));
    }

    #[test]
    fn frequency_rows_have_closed_forms() {
        let (data, design) = sample(500, 3, None);
        let nu = fitted(&data, &design);
        let ctx = Context::new(&data, &design, &nu).unwrap();
        let codes = data.codes().unwrap();
        let n = data.n() as f64;
        let in_a = codes.iter().filter(|&&c| c > 0).count() as f64;
        let t1 = codes.iter().filter(|&&c| c == 1).count() as f64;
        assert!((ctx.value(&Aggregate::ArmShare(0)).unwrap() - in_a / n).abs() < 1e-14);
        let eta = ctx.value(&Aggregate::WithinArmShare(1, 0)).unwrap();
        assert!((eta - t1 / in_a).abs() < 1e-14);
        assert!((eta * in_a / n - t1 / n).abs() < 1e-10);
        let g1 = design.group_of_unit.iter().filter(|&&g| g == 1).count() as f64;
        let col = ctx.aggregate_if(&Aggregate::GroupShare(1)).unwrap();
        for i in 0..data.n() {
            let ind = f64::from(u8::from(design.group_of_unit[i] == 1));
            assert!((col[i] - (ind - g1 / n)).abs() < 1e-14);
        }
        let ag = ctx.aggregate_if(&Aggregate::ArmGroupShare(0, 1)).unwrap();
        let share = ctx.value(&Aggregate::ArmGroupShare(0, 1)).unwrap();
        for i in 0..data.n() {
            let ind = f64::from(u8::from(codes[i] > 0 && design.group_of_unit[i] == 1));
            assert!((ag[i] - (ind - share)).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_outcome_gives_zero_influence() {
        let (data, design) = sample(300, 4, Some(2.5));
        let nu = fitted(&data, &design);
        let ctx = Context::new(&data, &design, &nu).unwrap();
        let s = ctx.aggregate(&Aggregate::ArmGroupMean(0, 1)).unwrap();
        assert!((s.estimate - 2.5).abs() < 1e-12);
        assert!(s.influence.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn every_influence_column_has_mean_zero() {
        let (data, design) = sample(800, 5, None);
        let nu = fitted(&data, &design);
        let ctx = Context::new(&data, &design, &nu).unwrap();
        let check = |s: &Solved| {
            let m = ctx.mean(|i| s.influence[i]);
            let sd = ctx.mean(|i| s.influence[i].powi(2)).sqrt();
            assert!(m.abs() <= 1e-10 * sd.max(1e-300), "mean {m} sd {sd}");
        };
        for agg in crate::nuisance::aggregate_catalog(&design) {
            check(&ctx.aggregate(&agg).unwrap());
        }
        for p in PrimitiveId::all() {
            for t in [1, 2] {
                for g in 0..2 {
                    check(&ctx.primitive(p, t, 0, g).unwrap());
                }
            }
        }
    }

    #[test]
    fn outcome_scaling_scales_primitives() {
        let (data, design) = sample(400, 6, None);
        let nu = fitted(&data, &design);
        let scaled = data.with_outcome(data.outcome().iter().map(|y| y * 4.0).collect()).unwrap();
        let nu_scaled = nu.perturbed(|_, _, e, m| (e, 4.0 * m));
        let nu_scaled = fit_aggregates(&scaled, &design, nu_scaled).unwrap();
        let c1 = Context::new(&data, &design, &nu).unwrap();
        let c2 = Context::new(&scaled, &design, &nu_scaled).unwrap();
        for p in PrimitiveId::all() {
            let a = c1.primitive(p, 2, 0, 1).unwrap();
            let b = c2.primitive(p, 2, 0, 1).unwrap();
            assert!((b.estimate - 4.0 * a.estimate).abs() < 1e-12 * (1.0 + a.estimate.abs()));
            for (x, y) in a.influence.iter().zip(&b.influence) {
                assert!((y - 4.0 * x).abs() < 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn primitive_refuses_empty_cell() {
        let t: Vec<String> = ["0", "1", "2", "0", "1", "0"].iter().map(|s| s.to_string()).collect();
        let x = vec![vec![1.0], vec![1.0], vec![1.0], vec![0.0], vec![0.0], vec![0.0]];
        let data = Dataset::from_labels(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &t, x).unwrap();
        let (_, design0) = sample(10, 1, None);
        let scheme = AggregationScheme {
            arms: vec![
                Arm { name: "treated".into(), labels: vec!["1".into(), "2".into()] },
                Arm { name: "control".into(), labels: vec!["0".into()] },
            ],
            groups: GroupRule::Threshold { covariate: 0, threshold: 0.5, lower: "g0".into(), upper: "g1".into() },
        };
        let design = scheme.resolve(&data).unwrap();
        assert_eq!(design.group_names, design0.group_names);
        let e = vec![1.0 / 3.0; 18];
        let nu = NuisanceEstimates::from_truth(e, vec![0.0; 18], 3).unwrap();
        let ctx = Context::new(&data, &design, &nu).unwrap();
        let err = ctx.primitive(PrimitiveId::new(1).unwrap(), 2, 0, 0).unwrap_err();
        assert_eq!(err, Error::EmptyCell { label: "2".into(), group: "g0".into() });
        assert!(ctx.primitive(PrimitiveId::new(1).unwrap(), 2, 0, 1).is_ok());
    }

    #[test]
    fn single_label_arm_product_primitive() {
        let (data, design) = sample(600, 8, None);
        let nu = fitted(&data, &design);
        let ctx = Context::new(&data, &design, &nu).unwrap();
        let s = ctx.primitive(PrimitiveId::new(8).unwrap(), 0, 1, 0).unwrap();
        assert_eq!(ctx.value(&Aggregate::WithinArmShare(0, 1)).unwrap(), 1.0);
        let mu = ctx.value(&Aggregate::MeanOutcome(0)).unwrap();
        assert!((s.estimate - mu).abs() < 1e-12);
    }
}
