//! Tests of equal version-level group effects (Wald and supremum), the
//! single-contrast test on the outcome-heterogeneity component, and their
//! closed-form local power.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::decomp::{two_sided_p, Component, DecompositionQuery, DecompositionReport};
use crate::error::{Error, Result};
use crate::moments::{weighted_mean, Aggregate, Context, Solved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wald,
    Supremum,
    Delta1,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Wald, Method::Supremum, Method::Delta1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::Supremum => "supremum",
            Method::Delta1 => "delta1",
        }
    }
}

/// Critical value of the maximum absolute standardized contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupremumRule {
    /// Extreme-value limit `a_J + b_J · G⁻¹(1 − α)`.
    Gumbel,
    /// Exact for independent contrasts: `Φ⁻¹((1 + (1 − α)^{1/J}) / 2)`.
    #[default]
    Sidak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrongNullResult {
    pub method: Method,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub j: usize,
    pub alpha: f64,
    pub reject: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// Gumbel quantile `−ln(−ln p)`.
pub fn gumbel_quantile(p: f64) -> f64 {
    -(-p.ln()).ln()
}

/// Gumbel distribution function `exp(−exp(−x))`.
pub fn gumbel_cdf(x: f64) -> f64 {
    (-(-x).exp()).exp()
}

/// Normalizing constants `(a_J, b_J)` of the maximum of J squared-normal
/// absolute values.
pub fn gumbel_constants(j: usize) -> Result<(f64, f64)> {
    if j < 2 {
        return Err(Error::InvalidInput("normalizing constants need J >= 2".into()));
    }
    let l = (j as f64).ln();
    let r = (2.0 * l).sqrt();
    let a = r - (l.ln() + (4.0 * std::f64::consts::PI).ln()) / (2.0 * r);
    Ok((a, 1.0 / r))
}

/// Critical value for the supremum statistic over `j` contrasts.
pub fn supremum_critical_value(j: usize, alpha: f64, rule: SupremumRule) -> Result<f64> {
    check_alpha(alpha)?;
    if j == 0 {
        return Err(Error::InvalidInput("no contrasts to test".into()));
    }
    if j == 1 {
        return Ok(std_normal().inverse_cdf(1.0 - alpha / 2.0));
    }
    Ok(match rule {
        SupremumRule::Gumbel => {
            let (a, b) = gumbel_constants(j)?;
            a + b * gumbel_quantile(1.0 - alpha)
        }
        SupremumRule::Sidak => std_normal().inverse_cdf(0.5 * (1.0 + (1.0 - alpha).powf(1.0 / j as f64))),
    })
}

/// Wald test of `m = 0` given `Var(m̂)`; the statistic is compared with the
/// chi-square quantile on `J = len(m)` degrees of freedom.
pub fn wald_test(diffs: &[f64], covariance: &DMatrix<f64>, alpha: f64) -> Result<StrongNullResult> {
    check_alpha(alpha)?;
    let j = diffs.len();
    if j == 0 || covariance.nrows() != j || covariance.ncols() != j {
        return Err(Error::InvalidInput("covariance shape does not match contrasts".into()));
    }
    let chol = covariance.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let m = nalgebra::DVector::from_column_slice(diffs);
    let statistic = m.dot(&chol.solve(&m));
    let chi = ChiSquared::new(j as f64).unwrap();
    let critical_value = chi.inverse_cdf(1.0 - alpha);
    let p_value = chi.sf(statistic).clamp(0.0, 1.0);
    Ok(StrongNullResult {
        method: Method::Wald,
        statistic,
        critical_value,
        p_value,
        j,
        alpha,
        reject: statistic > critical_value,
    })
}

/// Wald test through the Moore-Penrose inverse, on `rank(covariance)`
/// degrees of freedom. Eigenvalues below `1e-10` times the largest are
/// treated as zero.
pub fn wald_test_generalized(diffs: &[f64], covariance: &DMatrix<f64>, alpha: f64) -> Result<StrongNullResult> {
    check_alpha(alpha)?;
    let j = diffs.len();
    if j == 0 || covariance.nrows() != j || covariance.ncols() != j {
        return Err(Error::InvalidInput("covariance shape does not match contrasts".into()));
    }
    let eig = covariance.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if !(top > 0.0) {
        return Err(Error::SingularCovariance);
    }
    let m = nalgebra::DVector::from_column_slice(diffs);
    let mut statistic = 0.0;
    let mut rank = 0usize;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 1e-10 * top {
            let proj = eig.eigenvectors.column(k).dot(&m);
            statistic += proj * proj / lambda;
            rank += 1;
        }
    }
    let chi = ChiSquared::new(rank as f64).unwrap();
    let critical_value = chi.inverse_cdf(1.0 - alpha);
    Ok(StrongNullResult {
        method: Method::Wald,
        statistic,
        critical_value,
        p_value: chi.sf(statistic).clamp(0.0, 1.0),
        j,
        alpha,
        reject: statistic > critical_value,
    })
}

/// Supremum test: maximum absolute standardized contrast.
pub fn supremum_test(diffs: &[f64], scales: &[f64], alpha: f64, rule: SupremumRule) -> Result<StrongNullResult> {
    check_alpha(alpha)?;
    let j = diffs.len();
    if j == 0 || scales.len() != j {
        return Err(Error::InvalidInput("contrasts and scales must have equal nonzero length".into()));
    }
    if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput("scales must be positive".into()));
    }
    let statistic = diffs.iter().zip(scales).map(|(d, s)| (d / s).abs()).fold(0.0, f64::max);
    let critical_value = supremum_critical_value(j, alpha, rule)?;
    let tail = 2.0 * std_normal().sf(statistic);
    let p_value = if j == 1 {
        tail
    } else {
        match rule {
            SupremumRule::Sidak => 1.0 - (1.0 - tail).powi(j as i32),
            SupremumRule::Gumbel => {
                let (a, b) = gumbel_constants(j)?;
                1.0 - gumbel_cdf((statistic - a) / b)
            }
        }
    }
    .clamp(0.0, 1.0);
    Ok(StrongNullResult {
        method: Method::Supremum,
        statistic,
        critical_value,
        p_value,
        j,
        alpha,
        reject: statistic > critical_value,
    })
}

/// Two-sided z test of an estimate with a known standard error.
pub fn z_test(estimate: f64, se: f64, alpha: f64) -> Result<StrongNullResult> {
    check_alpha(alpha)?;
    let critical_value = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    let (statistic, p_value) = if se > 0.0 {
        let z = (estimate / se).abs();
        (z, two_sided_p(z))
    } else {
        (0.0, 1.0)
    };
    Ok(StrongNullResult {
        method: Method::Delta1,
        statistic,
        critical_value,
        p_value,
        j: 1,
        alpha,
        reject: statistic > critical_value,
    })
}

/// Test of zero outcome heterogeneity using the report's group contrast.
pub fn delta1_test(report: &DecompositionReport, alpha: f64) -> Result<StrongNullResult> {
    let row = report.group_delta(Component::D1);
    z_test(row.estimate, row.se, alpha)
}

/// Version-level effect differences `τ_{t,s}(g) − τ_{t,s}(g')` for every
/// treated label t and control label s, built from the group mean outcomes.
pub fn strong_null_contrasts(ctx: &Context<'_>, q: &DecompositionQuery) -> Result<Vec<Solved>> {
    let design = ctx.design();
    let a = design.arm_index(&q.arm)?;
    let a0 = design.arm_index(&q.control)?;
    let g = design.group_index(&q.group)?;
    let g0 = design.group_index(&q.reference)?;
    let n = ctx.n();
    let mut out = Vec::new();
    for s in design.arm_labels(a0) {
        let base_g = ctx.aggregate(&Aggregate::GroupMeanOutcome(s, g))?;
        let base_r = ctx.aggregate(&Aggregate::GroupMeanOutcome(s, g0))?;
        for t in design.arm_labels(a) {
            let mg = ctx.aggregate(&Aggregate::GroupMeanOutcome(t, g))?;
            let mr = ctx.aggregate(&Aggregate::GroupMeanOutcome(t, g0))?;
            out.push(Solved {
                estimate: (mg.estimate - base_g.estimate) - (mr.estimate - base_r.estimate),
                influence: (0..n)
                    .map(|i| (mg.influence[i] - base_g.influence[i]) - (mr.influence[i] - base_r.influence[i]))
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// `Var` of the estimates, `E_n[IF IF'] / n`.
pub fn covariance_of(cols: &[Solved], weights: Option<&[f64]>, n: usize) -> DMatrix<f64> {
    let p = cols.len();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let (a, b) = (&cols[j].influence, &cols[k].influence);
            let v = weighted_mean(a.len(), weights, |i| a[i] * b[i]) / n as f64;
            out[(j, k)] = v;
            out[(k, j)] = v;
        }
    }
    out
}

/// Local alternatives and weights for the closed-form power functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    /// Standardized local alternatives, one per version.
    pub xi: Vec<f64>,
    /// Within-arm shares used by the single-contrast test.
    pub e_ta: Vec<f64>,
    pub alpha: f64,
}

impl PowerSpec {
    /// Equal shares `1/J` and a constant alternative.
    pub fn dense(j: usize, xi: f64, alpha: f64) -> Self {
        Self { xi: vec![xi; j], e_ta: vec![1.0 / j as f64; j], alpha }
    }

    pub fn j(&self) -> usize {
        self.xi.len()
    }

    /// `(a_J, b_J)` when `J >= 2`.
    pub fn gumbel_constants(&self) -> Option<(f64, f64)> {
        gumbel_constants(self.j()).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerValues {
    pub wald: f64,
    pub supremum: f64,
    pub delta1: f64,
}

impl PowerValues {
    pub fn get(&self, m: Method) -> f64 {
        match m {
            Method::Wald => self.wald,
            Method::Supremum => self.supremum,
            Method::Delta1 => self.delta1,
        }
    }
}

/// Closed-form approximate local power of the three tests.
pub fn analytic_power(spec: &PowerSpec) -> Result<PowerValues> {
    check_alpha(spec.alpha)?;
    let j = spec.j();
    if j == 0 || spec.e_ta.len() != j {
        return Err(Error::InvalidInput("xi and e_ta must have equal nonzero length".into()));
    }
    let alpha = spec.alpha;
    let nd = std_normal();
    let jf = j as f64;
    let sq: f64 = spec.xi.iter().map(|x| x * x).sum::<f64>() / jf;
    let root = (1.0 + 2.0 * sq).sqrt();
    let wald = 1.0 - nd.cdf(nd.inverse_cdf(1.0 - alpha) / root - (1.0 / (2.0 * jf).sqrt()) * sq / root);
    let sup_norm = spec.xi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let shift = if j >= 2 { (2.0 * jf.ln() / jf).sqrt() * sup_norm } else { 0.0 };
    let supremum = 1.0 - gumbel_cdf(gumbel_quantile(1.0 - alpha) - shift);
    let drift: f64 = spec.xi.iter().zip(&spec.e_ta).map(|(x, e)| x * e).sum();
    let delta1 = 1.0 - nd.cdf(nd.inverse_cdf(1.0 - alpha / 2.0) - drift) + nd.cdf(nd.inverse_cdf(alpha / 2.0) - drift);
    Ok(PowerValues { wald, supremum, delta1 })
}
