//! Subcommand implementations.

use std::path::{Path, PathBuf};

use hetdecomp::decomp::{normal_quantile, InfluenceMatrix};
use hetdecomp::hypothesis::{
    analytic_power, covariance_of, delta1_test, strong_null_contrasts, supremum_test, wald_test, wald_test_generalized,
    Method, PowerSpec, StrongNullResult, SupremumRule,
};
use hetdecomp::model::{validate, Warning, DEFAULT_SHARE_FLOOR};
use hetdecomp::nuisance::{assign_folds, fit_granular, DEFAULT_FOLDS};
use hetdecomp::oracle::standard_query;
use hetdecomp::simulate::{
    coverage_parameters, coverage_study, partition_study, power_study, ContinuousDgp, CovarianceSource, PowerSimDgp,
    Preset, StudyConfig,
};
use hetdecomp::{
    decompose, AggregationScheme, Context, DecompositionQuery, DecompositionReport, Design, Error, GroupRule,
    NuisanceEstimates, PartitionScheme,
};
use serde::Serialize;

use crate::config::{Groups, RunConfig};
use crate::io::{file_digest, load_csv, write_csv, write_json};
use crate::{CliError, PowerArgs, RunArgs, StudyArgs};

#[derive(Serialize)]
struct InputInfo {
    path: PathBuf,
    sha256: String,
    rows: usize,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    arguments: Vec<String>,
    threads: usize,
    config: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<InputInfo>,
    outputs: Vec<PathBuf>,
}

fn write_manifest<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    input: Option<InputInfo>,
    mut outputs: Vec<PathBuf>,
) -> Result<(), CliError> {
    outputs.push(out_dir.join("manifest.json"));
    let manifest = Manifest {
        tool: "hetdecomp",
        version: env!("CARGO_PKG_VERSION"),
        command,
        arguments: std::env::args().skip(1).collect(),
        threads: rayon::current_num_threads(),
        config,
        input,
        outputs,
    };
    write_json(out_dir, "manifest.json", &manifest)?;
    Ok(())
}

/// Effective run configuration after flags are applied.
fn effective_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.folds.is_some() {
        cfg.folds = args.folds;
    }
    if args.alpha.is_some() {
        cfg.alpha = args.alpha;
    }
    for (slot, flag) in [
        (&mut cfg.query.arm, &args.arm),
        (&mut cfg.query.control, &args.control),
        (&mut cfg.query.group, &args.group),
        (&mut cfg.query.reference, &args.reference),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    cfg.folds.get_or_insert(DEFAULT_FOLDS);
    cfg.alpha.get_or_insert(0.05);
    if cfg.seed.is_none() {
        return Err(CliError::input("a seed is required for cross-fitting; pass --seed or set `seed`"));
    }
    Ok(cfg)
}

fn scheme_of(cfg: &RunConfig) -> Result<AggregationScheme, CliError> {
    let groups = match &cfg.groups {
        Groups::Column => {
            if cfg.columns.group.is_none() {
                return Err(CliError::input("the column group rule needs `columns.group`"));
            }
            GroupRule::Column
        }
        Groups::Threshold { covariate, threshold, lower, upper } => {
            let index = cfg
                .columns
                .covariates
                .iter()
                .position(|c| c == covariate)
                .ok_or_else(|| Error::UnknownColumn(covariate.clone()))?;
            GroupRule::Threshold { covariate: index, threshold: *threshold, lower: lower.clone(), upper: upper.clone() }
        }
    };
    Ok(AggregationScheme { arms: cfg.arms.clone(), groups })
}

struct Fitted {
    cfg: RunConfig,
    query: DecompositionQuery,
    data: hetdecomp::Dataset,
    design: Design,
    nuis: NuisanceEstimates,
    warnings: Vec<Warning>,
    input: InputInfo,
    partition: Option<PartitionScheme>,
}

fn fit(args: &RunArgs) -> Result<Fitted, CliError> {
    let cfg = effective_config(args)?;
    let query = cfg.query()?;
    let loaded = load_csv(&args.input, &cfg.columns, cfg.partition.as_ref())?;
    let scheme = scheme_of(&cfg)?;
    let checked = validate(&loaded.data, &scheme, DEFAULT_SHARE_FLOOR)?;
    let design = scheme.resolve(&loaded.data)?;
    let folds = assign_folds(loaded.data.n(), cfg.folds.unwrap(), cfg.seed.unwrap())?;
    let propensity = cfg.learners.propensity.propensity()?;
    let outcome = cfg.learners.outcome.outcome()?;
    let nuis = fit_granular(&loaded.data, &folds, propensity.as_ref(), outcome.as_ref(), cfg.clip_floor)?;
    let input = InputInfo { path: args.input.clone(), sha256: file_digest(&args.input)?, rows: loaded.rows };
    Ok(Fitted {
        cfg,
        query,
        data: loaded.data,
        design,
        nuis,
        warnings: checked.warnings,
        input,
        partition: loaded.partition,
    })
}

#[derive(Serialize)]
struct PlotRow {
    component: String,
    group: String,
    value: f64,
    p_value: f64,
}

#[derive(Serialize)]
struct DecomposeOutput<'a> {
    report: &'a DecompositionReport,
    alpha: f64,
    warnings: Vec<String>,
    /// Bin edges and atoms when the treatment is a discretized dose.
    #[serde(skip_serializing_if = "Option::is_none")]
    partition: Option<BinsOutput>,
}

#[derive(Serialize)]
struct BinsOutput {
    labels: Vec<String>,
    edges: Vec<f64>,
    atoms: Vec<f64>,
}

fn print_summary(report: &DecompositionReport, alpha: f64) {
    let z = normal_quantile(1.0 - alpha / 2.0);
    println!("{:<34} {:>12} {:>10} {:>24} {:>10}", "parameter", "estimate", "se", "interval", "p");
    for r in &report.parameters {
        if !matches!(r.id, hetdecomp::ParameterId::GroupDelta { .. }) {
            continue;
        }
        let ci = format!("[{:.4}, {:.4}]", r.estimate - z * r.se, r.estimate + z * r.se);
        println!("{:<34} {:>12.6} {:>10.6} {:>24} {:>10.4}", r.label, r.estimate, r.se, ci, r.p_value);
    }
}

pub fn run_decompose(args: &RunArgs) -> Result<(), CliError> {
    let fitted = fit(args)?;
    let ctx = Context::new(&fitted.data, &fitted.design, &fitted.nuis)?;
    let (report, _) = decompose(&ctx, &fitted.nuis, &fitted.query)?;
    let alpha = fitted.cfg.alpha.unwrap();
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    let plot: Vec<PlotRow> = report
        .plot_rows()
        .into_iter()
        .map(|(component, group, value, p_value)| PlotRow { component, group, value, p_value })
        .collect();
    let output = DecomposeOutput {
        report: &report,
        alpha,
        warnings: fitted.warnings.iter().map(|w| w.to_string()).collect(),
        partition: fitted.partition.as_ref().map(|p| BinsOutput {
            labels: p.labels(),
            edges: p.edges().to_vec(),
            atoms: p.atoms().to_vec(),
        }),
    };
    let outputs =
        vec![write_json(&args.out_dir, "report.json", &output)?, write_csv(&args.out_dir, "plot.csv", &plot)?];
    write_manifest(&args.out_dir, "decompose", &fitted.cfg, Some(fitted.input), outputs)?;
    print_summary(&report, alpha);
    Ok(())
}

#[derive(Serialize)]
struct ContrastRow {
    treated: String,
    control: String,
    estimate: f64,
    se: f64,
}

#[derive(Serialize)]
struct TestOutput {
    query: DecompositionQuery,
    alpha: f64,
    supremum_rule: SupremumRule,
    results: Vec<StrongNullResult>,
    contrasts: Vec<ContrastRow>,
}

pub fn run_test(args: &RunArgs, rule: SupremumRule) -> Result<(), CliError> {
    let fitted = fit(args)?;
    let alpha = fitted.cfg.alpha.unwrap();
    let ctx = Context::new(&fitted.data, &fitted.design, &fitted.nuis)?;
    let (report, _): (DecompositionReport, InfluenceMatrix) = decompose(&ctx, &fitted.nuis, &fitted.query)?;
    let cols = strong_null_contrasts(&ctx, &fitted.query)?;
    let cov = covariance_of(&cols, fitted.data.weights(), fitted.data.n());
    let m: Vec<f64> = cols.iter().map(|c| c.estimate).collect();
    let scales: Vec<f64> = (0..m.len()).map(|t| cov[(t, t)].sqrt()).collect();
    let wald = match wald_test(&m, &cov, alpha) {
        Err(Error::SingularCovariance) => wald_test_generalized(&m, &cov, alpha),
        other => other,
    }?;
    let results = vec![wald, supremum_test(&m, &scales, alpha, rule)?, delta1_test(&report, alpha)?];
    let d = &fitted.design;
    let treated = d.arm_labels(d.arm_index(&fitted.query.arm)?);
    let control = d.arm_labels(d.arm_index(&fitted.query.control)?);
    let mut contrasts = Vec::new();
    for &s in &control {
        for &t in &treated {
            let k = contrasts.len();
            contrasts.push(ContrastRow {
                treated: d.labels[t].clone(),
                control: d.labels[s].clone(),
                estimate: m[k],
                se: scales[k],
            });
        }
    }
    println!("{:<10} {:>12} {:>12} {:>10} {:>8}", "method", "statistic", "critical", "p", "reject");
    for r in &results {
        println!(
            "{:<10} {:>12.4} {:>12.4} {:>10.4} {:>8}",
            r.method.name(),
            r.statistic,
            r.critical_value,
            r.p_value,
            r.reject
        );
    }
    let output = TestOutput { query: fitted.query.clone(), alpha, supremum_rule: rule, results, contrasts };
    let outputs = vec![write_json(&args.out_dir, "tests.json", &output)?];
    write_manifest(&args.out_dir, "test", &fitted.cfg, Some(fitted.input), outputs)?;
    Ok(())
}

/// Study configuration: preset defaults, then the config file, then flags.
fn study_config(args: &StudyArgs, preset: Preset) -> Result<StudyConfig, CliError> {
    let mut cfg = preset.config(args.full_scale);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&cfg).map_err(|e| CliError::io(e.to_string()))?;
        for (k, v) in table {
            if k != "preset" {
                base.insert(k, v);
            }
        }
        cfg = base.try_into().map_err(|e| CliError::input(format!("invalid study config {}: {e}", path.display())))?;
    }
    if let Some(v) = args.reps {
        cfg.replications = v;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(g) = &args.grid {
        cfg.grid = g.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset_of(args: &StudyArgs, allowed: &[Preset], default: Option<Preset>) -> Result<Preset, CliError> {
    let preset = match &args.preset {
        Some(name) => Preset::parse(name)?,
        None => default.ok_or_else(|| CliError::input("--preset is required"))?,
    };
    if !allowed.contains(&preset) {
        return Err(Error::InvalidPreset(format!("{} (not valid for this command)", preset.name())).into());
    }
    Ok(preset)
}

#[derive(Serialize)]
struct PowerCsvRow {
    design: String,
    #[serde(rename = "J")]
    j: usize,
    method: &'static str,
    power: f64,
    mc_se: f64,
    analytic_power: f64,
}

#[derive(Serialize)]
struct AnalyticOutput {
    j: usize,
    xi: f64,
    alpha: f64,
    wald: f64,
    supremum: f64,
    delta1: f64,
}

pub fn run_power(args: &PowerArgs, covariance: Option<CovarianceSource>) -> Result<(), CliError> {
    let out_dir = &args.study.out_dir;
    if args.analytic {
        let j = args.j.ok_or_else(|| CliError::input("--analytic needs --J"))?;
        let xi = args.xi_dense.ok_or_else(|| CliError::input("--analytic needs --xi-dense"))?;
        let alpha = args.study.alpha.unwrap_or(0.05);
        if j == 0 {
            return Err(CliError::input("--J must be at least 1"));
        }
        let values = analytic_power(&PowerSpec::dense(j, xi, alpha))?;
        let out = AnalyticOutput {
            j,
            xi,
            alpha,
            wald: values.get(Method::Wald),
            supremum: values.get(Method::Supremum),
            delta1: values.get(Method::Delta1),
        };
        println!("J={j} xi={xi} alpha={alpha}");
        println!("wald     {:.6}\nsupremum {:.6}\ndelta1   {:.6}", out.wald, out.supremum, out.delta1);
        let outputs = vec![write_json(out_dir, "analytic_power.json", &out)?];
        return write_manifest(out_dir, "power", &out, None, outputs);
    }
    let preset = preset_of(&args.study, &[Preset::Figure2Dense, Preset::Figure2Sparse], None)?;
    let mut cfg = study_config(&args.study, preset)?;
    if let Some(c) = covariance {
        cfg.covariance = c;
    }
    if let Some(r) = args.supremum_rule {
        cfg.supremum_rule = r.into();
    }
    let design = preset.power_design().expect("power preset");
    let rows = power_study(&cfg, &design)?;
    let table: Vec<PowerCsvRow> = rows
        .iter()
        .map(|r| PowerCsvRow {
            design: r.design.clone(),
            j: r.j,
            method: r.method.name(),
            power: r.power,
            mc_se: r.mc_se,
            analytic_power: r.analytic_power,
        })
        .collect();
    println!("{:<8} {:>4} {:<10} {:>8} {:>8} {:>9}", "design", "J", "method", "power", "mc_se", "analytic");
    for r in &table {
        println!(
            "{:<8} {:>4} {:<10} {:>8.4} {:>8.4} {:>9.4}",
            r.design, r.j, r.method, r.power, r.mc_se, r.analytic_power
        );
    }
    let outputs = vec![write_csv(out_dir, "power.csv", &table)?];
    write_manifest(
        out_dir,
        "power",
        &ManifestStudy { preset: preset.name(), study: &cfg, design: Some(&design) },
        None,
        outputs,
    )
}

#[derive(Serialize)]
struct ManifestStudy<'a, D: Serialize> {
    preset: &'static str,
    study: &'a StudyConfig,
    design: Option<&'a D>,
}

pub fn run_simulate(args: &StudyArgs) -> Result<(), CliError> {
    let preset = preset_of(args, &[Preset::CoverageNull], Some(Preset::CoverageNull))?;
    let cfg = study_config(args, preset)?;
    let j = *cfg.grid.first().ok_or_else(|| CliError::input("coverage study needs a one-element grid"))?;
    let sim = PowerSimDgp { j, sparsity: 1.0, magnitude: 0.0 };
    let dgp = sim.discrete()?;
    let q = standard_query();
    let rows = coverage_study(&cfg, &dgp, &q, &coverage_parameters(&q))?;
    println!("{:<40} {:>9} {:>9} {:>8} {:>8}", "parameter", "truth", "coverage", "mc_se", "ks");
    for r in &rows {
        println!("{:<40} {:>9.4} {:>9.4} {:>8.4} {:>8.4}", r.parameter, r.truth, r.coverage, r.mc_se, r.ks_distance);
    }
    let outputs = vec![write_csv(&args.out_dir, "coverage.csv", &rows)?];
    write_manifest(
        &args.out_dir,
        "simulate",
        &ManifestStudy { preset: preset.name(), study: &cfg, design: Some(&sim) },
        None,
        outputs,
    )
}

#[derive(Serialize)]
struct PartitionOutput<'a> {
    slope: f64,
    dgp: &'a ContinuousDgp,
}

pub fn run_partition(args: &StudyArgs, with_atom: bool) -> Result<(), CliError> {
    let preset = preset_of(args, &[Preset::PartitionSmooth], Some(Preset::PartitionSmooth))?;
    let cfg = study_config(args, preset)?;
    let dgp = if with_atom { ContinuousDgp::with_zero_atom() } else { ContinuousDgp::smooth() };
    let summary = partition_study(&cfg, &dgp)?;
    println!("{:>5} {:>12} {:>10} {:>12}", "bins", "mean_gap", "mc_se", "binned_gap");
    for r in &summary.rows {
        println!("{:>5} {:>12.6} {:>10.6} {:>12.6}", r.bins, r.mean_abs_gap, r.mc_se, r.mean_binned_gap);
    }
    println!("log-log slope {:.3}", summary.slope);
    let outputs = vec![
        write_csv(&args.out_dir, "partition.csv", &summary.rows)?,
        write_json(&args.out_dir, "partition_summary.json", &PartitionOutput { slope: summary.slope, dgp: &dgp })?,
    ];
    write_manifest(
        &args.out_dir,
        "partition",
        &ManifestStudy { preset: preset.name(), study: &cfg, design: Some(&dgp) },
        None,
        outputs,
    )
}
