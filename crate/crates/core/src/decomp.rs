//! Assembly of the decomposition parameters from primitives, the joint
//! influence matrix, and normal inference for linear combinations.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::moments::{pairwise_sum, weighted_mean, Aggregate, Context, PrimitiveId, Solved};
use crate::nuisance::{ClipDiagnostics, NuisanceEstimates};

/// The seven components of an arm-by-group mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    /// Baseline.
    #[serde(rename = "0")]
    D0,
    /// Outcome heterogeneity.
    #[serde(rename = "1")]
    D1,
    /// Group targeting of average outcomes.
    #[serde(rename = "2")]
    D2,
    /// Group targeting of group outcomes.
    #[serde(rename = "3")]
    D3,
    /// Individual targeting, unadjusted.
    #[serde(rename = "4")]
    D4,
    /// Individual targeting, adjusted.
    #[serde(rename = "4'")]
    D4Adjusted,
    /// Composition shift between group and individual targeting.
    #[serde(rename = "5")]
    D5,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::D0,
        Component::D1,
        Component::D2,
        Component::D3,
        Component::D4,
        Component::D4Adjusted,
        Component::D5,
    ];

    /// Components entering group contrasts (the baseline cancels).
    pub const CONTRASTS: [Component; 6] =
        [Component::D1, Component::D2, Component::D3, Component::D4, Component::D4Adjusted, Component::D5];

    pub fn name(self) -> &'static str {
        match self {
            Component::D0 => "0",
            Component::D1 => "1",
            Component::D2 => "2",
            Component::D3 => "3",
            Component::D4 => "4",
            Component::D4Adjusted => "4'",
            Component::D5 => "5",
        }
    }

    /// Whether the component enters the unadjusted mean contrast.
    pub fn in_plain(self) -> bool {
        matches!(self, Component::D1 | Component::D2 | Component::D3 | Component::D4)
    }

    /// Whether the component enters the adjusted mean contrast.
    pub fn in_adjusted(self) -> bool {
        matches!(self, Component::D1 | Component::D2 | Component::D3 | Component::D4Adjusted | Component::D5)
    }
}

/// Identifier of an estimated parameter. Arms and groups are named.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "kebab-case")]
pub enum ParameterId {
    /// Component of one arm's mean in one group; the baseline has no group.
    D { component: Component, arm: String, group: Option<String> },
    /// Arm contrast within a group.
    Delta { component: Component, arm: String, control: String, group: String },
    /// Difference of arm contrasts between two groups.
    GroupDelta { component: Component, arm: String, control: String, group: String, reference: String },
    /// Raw four-cell difference in means.
    PlainContrast { arm: String, control: String, group: String, reference: String },
    /// Directly estimated covariate-adjusted four-cell contrast.
    AdjustedContrast { arm: String, control: String, group: String, reference: String },
}

impl fmt::Display for ParameterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParameterId::D { component, arm, group: Some(g) } => write!(f, "d{}({arm},{g})", component.name()),
            ParameterId::D { component, arm, group: None } => write!(f, "d{}({arm})", component.name()),
            ParameterId::Delta { component, arm, control, group } => {
                write!(f, "delta{}({arm},{control},{group})", component.name())
            }
            ParameterId::GroupDelta { component, arm, control, group, reference } => {
                write!(f, "Delta{}({arm},{control},{group},{reference})", component.name())
            }
            ParameterId::PlainContrast { arm, control, group, reference } => {
                write!(f, "dim_plain({arm},{control},{group},{reference})")
            }
            ParameterId::AdjustedContrast { arm, control, group, reference } => {
                write!(f, "adim_plain({arm},{control},{group},{reference})")
            }
        }
    }
}

/// Values of the seven components for one arm and group, with influence columns.
#[derive(Debug, Clone)]
pub struct DBlock {
    pub arm: usize,
    pub group: usize,
    pub values: Vec<(Component, Solved)>,
}

impl DBlock {
    pub fn get(&self, c: Component) -> &Solved {
        &self.values.iter().find(|(k, _)| *k == c).unwrap().1
    }
}

fn combine(terms: &[(f64, &Solved)]) -> Solved {
    let n = terms[0].1.influence.len();
    let estimate = terms.iter().map(|(w, s)| w * s.estimate).sum();
    let influence = (0..n).map(|i| terms.iter().map(|(w, s)| w * s.influence[i]).sum()).collect();
    Solved { estimate, influence }
}

fn add_into(acc: &mut Solved, w: f64, s: &Solved) {
    acc.estimate += w * s.estimate;
    for (a, b) in acc.influence.iter_mut().zip(&s.influence) {
        *a += w * b;
    }
}

fn zero(n: usize) -> Solved {
    Solved { estimate: 0.0, influence: vec![0.0; n] }
}

/// Baseline `d0(a) = Σ_t θ8`.
pub fn estimate_d0(ctx: &Context<'_>, arm: usize, group: usize) -> Result<Solved> {
    let p8 = PrimitiveId::new(8)?;
    let mut acc = zero(ctx.n());
    for t in ctx.design().arm_labels(arm) {
        add_into(&mut acc, 1.0, &ctx.primitive(p8, t, arm, group)?);
    }
    Ok(acc)
}

/// Outcome-heterogeneity component `d1(a, g) = Σ_t (θ4 − θ8)`.
pub fn estimate_d1(ctx: &Context<'_>, arm: usize, group: usize) -> Result<Solved> {
    let (p4, p8) = (PrimitiveId::new(4)?, PrimitiveId::new(8)?);
    let mut acc = zero(ctx.n());
    for t in ctx.design().arm_labels(arm) {
        add_into(&mut acc, 1.0, &ctx.primitive(p4, t, arm, group)?);
        add_into(&mut acc, -1.0, &ctx.primitive(p8, t, arm, group)?);
    }
    Ok(acc)
}

/// All seven components of the mean of `arm` in `group`.
pub fn estimate_d(ctx: &Context<'_>, arm: usize, group: usize) -> Result<DBlock> {
    let n = ctx.n();
    let labels = ctx.design().arm_labels(arm);
    // sums[p - 1] = Σ_t θ_p
    let mut sums: Vec<Solved> = (0..8).map(|_| zero(n)).collect();
    for &t in &labels {
        for p in PrimitiveId::all() {
            let s = ctx.primitive(p, t, arm, group)?;
            add_into(&mut sums[usize::from(p.index()) - 1], 1.0, &s);
        }
    }
    let th = |p: usize| &sums[p - 1];
    let share = ctx.aggregate(&Aggregate::ArmShareInGroup(arm, group))?;
    let s = share.estimate;
    if !(s > 0.0) {
        return Err(Error::DegenerateDenominator { what: "arm share in group".into(), value: s });
    }
    let gap = combine(&[(1.0, th(7)), (-1.0, th(6))]);
    let d4 = Solved {
        estimate: gap.estimate / s,
        influence: (0..n).map(|i| gap.influence[i] / s - share.influence[i] * gap.estimate / (s * s)).collect(),
    };
    let values = vec![
        (Component::D0, th(8).clone()),
        (Component::D1, combine(&[(1.0, th(4)), (-1.0, th(8))])),
        (Component::D2, combine(&[(1.0, th(5)), (-1.0, th(8))])),
        (Component::D3, combine(&[(1.0, th(1)), (-1.0, th(5)), (-1.0, th(4)), (1.0, th(8))])),
        (Component::D4, d4),
        (Component::D4Adjusted, combine(&[(1.0, th(3)), (-1.0, th(2))])),
        (Component::D5, combine(&[(1.0, th(2)), (-1.0, th(1))])),
    ];
    Ok(DBlock { arm, group, values })
}

/// Arm contrast `δ_j(a, a', g) = d_j(a, g) − d_j(a', g)`.
pub fn estimate_delta(treated: &DBlock, control: &DBlock) -> Vec<(Component, Solved)> {
    Component::ALL.iter().map(|&c| (c, combine(&[(1.0, treated.get(c)), (-1.0, control.get(c))]))).collect()
}

/// Group difference `Δ_j = δ_j(g) − δ_j(g')`.
pub fn estimate_group_delta(
    delta_g: &[(Component, Solved)],
    delta_ref: &[(Component, Solved)],
) -> Vec<(Component, Solved)> {
    Component::CONTRASTS
        .iter()
        .map(|&c| {
            let a = &delta_g.iter().find(|(k, _)| *k == c).unwrap().1;
            let b = &delta_ref.iter().find(|(k, _)| *k == c).unwrap().1;
            (c, combine(&[(1.0, a), (-1.0, b)]))
        })
        .collect()
}

/// Stacked estimates, influence columns and `Σ̂ = E_n[IF IF']`.
#[derive(Debug, Clone)]
pub struct InfluenceMatrix {
    pub ids: Vec<ParameterId>,
    pub estimates: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl InfluenceMatrix {
    pub fn new(entries: Vec<(ParameterId, Solved)>, weights: Option<&[f64]>, n: usize) -> Self {
        let p = entries.len();
        let mut ids = Vec::with_capacity(p);
        let mut estimates = Vec::with_capacity(p);
        let mut columns = Vec::with_capacity(p);
        for (id, s) in entries {
            ids.push(id);
            estimates.push(s.estimate);
            columns.push(s.influence);
        }
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect();
        let vals: Vec<f64> = pairs
            .par_iter()
            .map(|&(j, k)| {
                let (a, b) = (&columns[j], &columns[k]);
                weighted_mean(a.len(), weights, |i| a[i] * b[i])
            })
            .collect();
        let mut sigma = DMatrix::zeros(p, p);
        for (&(j, k), v) in pairs.iter().zip(vals) {
            sigma[(j, k)] = v;
            sigma[(k, j)] = v;
        }
        Self { ids, estimates, columns, sigma, n }
    }

    pub fn index_of(&self, id: &ParameterId) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Sub-block of `Σ̂` for the given parameter indices.
    pub fn sigma_block(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.sigma[(idx[r], idx[c])])
    }
}

/// Result of a normal test of one linear combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inference {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided normal p-value.
pub fn two_sided_p(z: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    (2.0 * std.sf(z.abs())).clamp(0.0, 1.0)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Variances below this fraction of the reference scale count as zero.
const ZERO_VARIANCE_TOL: f64 = 1e-24;

/// Estimate, standard error `sqrt(c'Σ̂c/n)`, z statistic and two-sided p-value
/// for `c'θ̂`. Zero-variance combinations with a zero estimate report SE 0, p 1.
pub fn infer(c: &[f64], m: &InfluenceMatrix) -> Result<Inference> {
    if c.len() != m.estimates.len() || c.iter().any(|v| !v.is_finite()) || c.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInput("weight vector must be finite, nonzero and match the parameters".into()));
    }
    let estimate: f64 = c.iter().zip(&m.estimates).map(|(a, b)| a * b).sum();
    let mut var = 0.0;
    let mut scale = 0.0;
    for j in 0..c.len() {
        if c[j] == 0.0 {
            continue;
        }
        scale += c[j].abs() * m.sigma[(j, j)].sqrt();
        for k in 0..c.len() {
            var += c[j] * c[k] * m.sigma[(j, k)];
        }
    }
    degenerate_or(estimate, var, scale.powi(2), m.n)
}

fn degenerate_or(estimate: f64, var: f64, scale2: f64, n: usize) -> Result<Inference> {
    if var <= ZERO_VARIANCE_TOL * scale2.max(1.0) {
        if estimate.abs() <= 1e-10 * (1.0 + scale2.sqrt()) {
            return Ok(Inference { estimate, se: 0.0, z: 0.0, p_value: 1.0 });
        }
        return Err(Error::ZeroVariance);
    }
    let se = (var / n as f64).sqrt();
    let z = estimate / se;
    Ok(Inference { estimate, se, z, p_value: two_sided_p(z) })
}

/// Inference for a single influence column.
pub fn infer_solved(s: &Solved, weights: Option<&[f64]>, n: usize) -> Result<Inference> {
    let var = weighted_mean(s.influence.len(), weights, |i| s.influence[i] * s.influence[i]);
    degenerate_or(s.estimate, var, 0.0, n)
}

/// Arms and groups of a four-cell decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionQuery {
    pub arm: String,
    pub control: String,
    pub group: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterRow {
    pub id: ParameterId,
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaBlock {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceDiagnostics {
    pub clip: ClipDiagnostics,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub min_cell_count: f64,
}

/// Gap between the summed components and directly estimated contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityDiagnostics {
    pub plain_sum: f64,
    pub plain_direct: f64,
    pub plain_gap: f64,
    pub plain_se: f64,
    pub adjusted_sum: f64,
    pub adjusted_direct: f64,
    pub adjusted_gap: f64,
    pub adjusted_se: f64,
    /// Set when either gap exceeds five standard errors of the direct estimator.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub query: DecompositionQuery,
    pub parameters: Vec<ParameterRow>,
    pub sigma: SigmaBlock,
    pub identity: IdentityDiagnostics,
    pub nuisance: NuisanceDiagnostics,
}

impl DecompositionReport {
    pub fn row(&self, id: &ParameterId) -> Option<&ParameterRow> {
        self.parameters.iter().find(|r| &r.id == id)
    }

    /// `Δ_j` row for this report's query.
    pub fn group_delta(&self, c: Component) -> &ParameterRow {
        let q = &self.query;
        self.row(&ParameterId::GroupDelta {
            component: c,
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        })
        .expect("group contrast rows are always present")
    }

    /// Delimited rows `(component, group, value, p)`.
    pub fn plot_rows(&self) -> Vec<(String, String, f64, f64)> {
        let mut out = Vec::new();
        for r in &self.parameters {
            match &r.id {
                ParameterId::Delta { component, group, .. } if *component != Component::D0 => {
                    out.push((format!("delta{}", component.name()), group.clone(), r.estimate, r.p_value))
                }
                ParameterId::GroupDelta { component, group, reference, .. } => out.push((
                    format!("Delta{}", component.name()),
                    format!("{group}-{reference}"),
                    r.estimate,
                    r.p_value,
                )),
                _ => {}
            }
        }
        out
    }
}

/// Estimates every d, δ and Δ parameter for the query together with the
/// direct four-cell contrasts.
pub fn decompose(
    ctx: &Context<'_>,
    nuis: &NuisanceEstimates,
    q: &DecompositionQuery,
) -> Result<(DecompositionReport, InfluenceMatrix)> {
    let design = ctx.design();
    let a = design.arm_index(&q.arm)?;
    let a0 = design.arm_index(&q.control)?;
    let g = design.group_index(&q.group)?;
    let g0 = design.group_index(&q.reference)?;
    if a == a0 {
        return Err(Error::InvalidInput("treated and control arms must differ".into()));
    }
    let cells = [(a, g), (a0, g), (a, g0), (a0, g0)];
    let blocks: Vec<DBlock> = cells.par_iter().map(|&(arm, grp)| estimate_d(ctx, arm, grp)).collect::<Result<_>>()?;
    let (ag, a0g, ag0, a0g0) = (&blocks[0], &blocks[1], &blocks[2], &blocks[3]);
    let delta_g = estimate_delta(ag, a0g);
    let delta_ref = estimate_delta(ag0, a0g0);
    let big = estimate_group_delta(&delta_g, &delta_ref);

    let mut entries: Vec<(ParameterId, Solved)> = Vec::new();
    let arm_name = |x: usize| design.arm_names[x].clone();
    let group_name = |x: usize| design.group_names[x].clone();
    for arm in [a, a0] {
        entries.push((
            ParameterId::D { component: Component::D0, arm: arm_name(arm), group: None },
            blocks.iter().find(|b| b.arm == arm).unwrap().get(Component::D0).clone(),
        ));
    }
    let mut seen = Vec::new();
    for b in &blocks {
        if seen.contains(&(b.arm, b.group)) {
            continue;
        }
        seen.push((b.arm, b.group));
        for (c, s) in &b.values {
            if *c != Component::D0 {
                entries.push((
                    ParameterId::D { component: *c, arm: arm_name(b.arm), group: Some(group_name(b.group)) },
                    s.clone(),
                ));
            }
        }
    }
    let mut delta_groups = vec![(g, &delta_g)];
    if g0 != g {
        delta_groups.push((g0, &delta_ref));
    }
    for (grp, deltas) in delta_groups {
        for (c, s) in deltas.iter() {
            entries.push((
                ParameterId::Delta {
                    component: *c,
                    arm: q.arm.clone(),
                    control: q.control.clone(),
                    group: group_name(grp),
                },
                s.clone(),
            ));
        }
    }
    for (c, s) in &big {
        entries.push((
            ParameterId::GroupDelta {
                component: *c,
                arm: q.arm.clone(),
                control: q.control.clone(),
                group: q.group.clone(),
                reference: q.reference.clone(),
            },
            s.clone(),
        ));
    }
    let signs = [1.0, -1.0, -1.0, 1.0];
    let mut plain = zero(ctx.n());
    let mut adjusted = zero(ctx.n());
    for (&(arm, grp), &w) in cells.iter().zip(&signs) {
        add_into(&mut plain, w, &ctx.aggregate(&Aggregate::ArmGroupMean(arm, grp))?);
        add_into(&mut adjusted, w, &ctx.adjusted_arm_group_mean(arm, grp)?);
    }
    entries.push((
        ParameterId::PlainContrast {
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        },
        plain,
    ));
    entries.push((
        ParameterId::AdjustedContrast {
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        },
        adjusted,
    ));

    let matrix = InfluenceMatrix::new(entries, ctx.weights(), ctx.n());
    let mut rows = Vec::with_capacity(matrix.ids.len());
    for (j, id) in matrix.ids.iter().enumerate() {
        let mut c = vec![0.0; matrix.ids.len()];
        c[j] = 1.0;
        let inf = match infer(&c, &matrix) {
            Err(Error::ZeroVariance) => {
                let estimate = matrix.estimates[j];
                Inference { estimate, se: 0.0, z: f64::INFINITY.copysign(estimate), p_value: 0.0 }
            }
            other => other?,
        };
        rows.push(ParameterRow {
            id: id.clone(),
            label: id.to_string(),
            estimate: inf.estimate,
            se: inf.se,
            z: inf.z,
            p_value: inf.p_value,
        });
    }
    let sigma = SigmaBlock {
        labels: rows.iter().map(|r| r.label.clone()).collect(),
        matrix: (0..matrix.ids.len()).map(|r| (0..matrix.ids.len()).map(|c| matrix.sigma[(r, c)]).collect()).collect(),
    };
    let min_cell_count = {
        let codes = ctx.data().codes().unwrap();
        let mut mass = vec![0.0; design.labels.len() * design.group_names.len()];
        for (i, &t) in codes.iter().enumerate() {
            mass[t * design.group_names.len() + design.group_of_unit[i]] += ctx.data().weight(i);
        }
        cells
            .iter()
            .flat_map(|&(arm, grp)| {
                let m = &mass;
                design.arm_labels(arm).into_iter().map(move |t| m[t * design.group_names.len() + grp])
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut report = DecompositionReport {
        n: ctx.n(),
        query: q.clone(),
        parameters: rows,
        sigma,
        identity: IdentityDiagnostics {
            plain_sum: 0.0,
            plain_direct: 0.0,
            plain_gap: 0.0,
            plain_se: 0.0,
            adjusted_sum: 0.0,
            adjusted_direct: 0.0,
            adjusted_gap: 0.0,
            adjusted_se: 0.0,
            flagged: false,
        },
        nuisance: NuisanceDiagnostics { clip: nuis.clip, folds: nuis.folds, seed: nuis.seed, min_cell_count },
    };
    report.identity = identity_check(&report);
    Ok((report, matrix))
}

/// Compares the summed group contrasts with the directly estimated plain and
/// adjusted four-cell contrasts.
pub fn identity_check(report: &DecompositionReport) -> IdentityDiagnostics {
    let sum = |f: fn(Component) -> bool| -> f64 {
        let parts: Vec<f64> =
            Component::CONTRASTS.iter().filter(|c| f(**c)).map(|&c| report.group_delta(c).estimate).collect();
        pairwise_sum(&parts)
    };
    let q = &report.query;
    let plain = report
        .row(&ParameterId::PlainContrast {
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        })
        .expect("plain contrast row");
    let adjusted = report
        .row(&ParameterId::AdjustedContrast {
            arm: q.arm.clone(),
            control: q.control.clone(),
            group: q.group.clone(),
            reference: q.reference.clone(),
        })
        .expect("adjusted contrast row");
    let plain_sum = sum(Component::in_plain);
    let adjusted_sum = sum(Component::in_adjusted);
    let plain_gap = (plain_sum - plain.estimate).abs();
    let adjusted_gap = (adjusted_sum - adjusted.estimate).abs();
    let tol = 1e-9 * (1.0 + plain.estimate.abs());
    IdentityDiagnostics {
        plain_sum,
        plain_direct: plain.estimate,
        plain_gap,
        plain_se: plain.se,
        adjusted_sum,
        adjusted_direct: adjusted.estimate,
        adjusted_gap,
        adjusted_se: adjusted.se,
        flagged: plain_gap > 5.0 * plain.se + tol || adjusted_gap > 5.0 * adjusted.se + tol,
    }
}
