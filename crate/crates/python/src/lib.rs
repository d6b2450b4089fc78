//! Python bindings. Structured results are returned as plain dicts.

use hetdecomp::hypothesis::{analytic_power as closed_form_power, PowerSpec};
use hetdecomp::nuisance::{assign_folds, fit_granular};
use hetdecomp::oracle::{group_targeting_example, individual_targeting_example, population_decomposition, DiscreteDgp};
use hetdecomp::{
    decompose as run_decomposition, AggregationScheme, Arm, Context, Dataset, DecompositionQuery, Error, GroupRule,
    LearnerKind, LearnerSpec,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pyhetdecomp, EstimationError, PyException);

fn to_py(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        EstimationError::new_err(format!("{} ({})", e, e.module()))
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| EstimationError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn learner(name: &str) -> PyResult<LearnerSpec> {
    let kind = match name {
        "cell-frequency" => LearnerKind::CellFrequency,
        "regularized-multinomial" => LearnerKind::RegularizedMultinomial,
        "per-treatment-ridge" => LearnerKind::PerTreatmentRidge,
        "k-nearest-neighbor" => LearnerKind::KNearestNeighbor,
        other => return Err(PyValueError::new_err(format!("unknown learner `{other}`"))),
    };
    Ok(LearnerSpec::new(kind))
}

fn example(name: &str) -> PyResult<DiscreteDgp> {
    match name {
        "group-targeting" => Ok(group_targeting_example()),
        "individual-targeting" => Ok(individual_targeting_example()),
        other => Err(PyValueError::new_err(format!("unknown example `{other}`"))),
    }
}

/// Cross-fitted decomposition of `arm` versus `control` between `group` and
/// `reference`. Groups come from `groups` (one label per unit) or from
/// `threshold = (covariate index, cut)`, which names them `g0` and `g1`.
#[pyfunction]
#[pyo3(signature = (
    outcome, treatment, covariates, arms, arm, control, group, reference, seed,
    folds = 5, groups = None, threshold = None,
    propensity = "cell-frequency", outcome_model = "cell-frequency",
))]
#[allow(clippy::too_many_arguments)]
fn decompose<'py>(
    py: Python<'py>,
    outcome: Vec<f64>,
    treatment: Vec<String>,
    covariates: Vec<Vec<f64>>,
    arms: Vec<(String, Vec<String>)>,
    arm: String,
    control: String,
    group: String,
    reference: String,
    seed: u64,
    folds: usize,
    groups: Option<Vec<String>>,
    threshold: Option<(usize, f64)>,
    propensity: &str,
    outcome_model: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let (e_model, m_model) =
        (learner(propensity)?.propensity().map_err(to_py)?, learner(outcome_model)?.outcome().map_err(to_py)?);
    let report = py
        .detach(|| -> hetdecomp::Result<_> {
            let mut data = Dataset::from_labels(outcome, &treatment, covariates)?;
            let rule = match (groups, threshold) {
                (Some(g), None) => {
                    data = data.with_group(g)?;
                    GroupRule::Column
                }
                (None, Some((covariate, cut))) => {
                    GroupRule::Threshold { covariate, threshold: cut, lower: "g0".into(), upper: "g1".into() }
                }
                _ => return Err(Error::InvalidInput("give exactly one of `groups` or `threshold`".into())),
            };
            let scheme = AggregationScheme {
                arms: arms.into_iter().map(|(name, labels)| Arm { name, labels }).collect(),
                groups: rule,
            };
            let design = scheme.resolve(&data)?;
            let fa = assign_folds(data.n(), folds, seed)?;
            let nuis = fit_granular(&data, &fa, e_model.as_ref(), m_model.as_ref(), None)?;
            let ctx = Context::new(&data, &design, &nuis)?;
            let query = DecompositionQuery { arm, control, group, reference };
            Ok(run_decomposition(&ctx, &nuis, &query)?.0)
        })
        .map_err(to_py)?;
    to_dict(py, &report)
}

/// Closed-form power of the Wald, supremum and single-contrast tests.
#[pyfunction]
#[pyo3(signature = (xi, e_ta = None, alpha = 0.05))]
fn analytic_power<'py>(
    py: Python<'py>,
    xi: Vec<f64>,
    e_ta: Option<Vec<f64>>,
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let j = xi.len();
    if j == 0 {
        return Err(PyValueError::new_err("xi must be nonempty"));
    }
    let e_ta = e_ta.unwrap_or_else(|| vec![1.0 / j as f64; j]);
    let values = closed_form_power(&PowerSpec { xi, e_ta, alpha }).map_err(to_py)?;
    to_dict(py, &values)
}

/// Exact population decomposition of a bundled example design.
#[pyfunction]
fn population<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    let dgp = example(name)?;
    let pop = population_decomposition(&dgp, &hetdecomp::oracle::standard_query()).map_err(to_py)?;
    to_dict(py, &pop)
}

type Columns = (Vec<f64>, Vec<String>, Vec<Vec<f64>>);

/// Draws `n` units from a bundled example: `(outcome, treatment, covariates)`.
#[pyfunction]
#[pyo3(signature = (name, n, seed, stream = 0))]
fn sample(name: &str, n: usize, seed: u64, stream: u64) -> PyResult<Columns> {
    let data = example(name)?.sample(n, seed, stream).map_err(to_py)?;
    let alphabet = data.alphabet().unwrap();
    let labels = data.codes().unwrap().iter().map(|&c| alphabet[c].clone()).collect();
    let xs = (0..data.n()).map(|i| data.row(i).to_vec()).collect();
    Ok((data.outcome().to_vec(), labels, xs))
}

#[pymodule]
fn pyhetdecomp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("EstimationError", m.py().get_type::<EstimationError>())?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_power, m)?)?;
    m.add_function(wrap_pyfunction!(population, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    Ok(())
}
