//! Data containers, treatment and group aggregation, cell accounting and
//! partitioning of continuous doses into labelled bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment column: either categorical codes into an alphabet or a raw dose.
#[derive(Debug, Clone, PartialEq)]
pub enum Treatment {
    Labels { codes: Vec<usize>, alphabet: Vec<String> },
    Dose(Vec<f64>),
}

/// Per-unit records.
///
/// Covariates are stored row-major with a shared dimension. `weights` is only
/// set for enumerated populations where every row stands for a probability
/// mass; ordinary samples leave it empty and all means are unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome: Vec<f64>,
    treatment: Treatment,
    covariates: Vec<f64>,
    dim: usize,
    group: Option<Vec<String>>,
    weights: Option<Vec<f64>>,
}

fn sort_alphabet(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            let x: f64 = a.parse().unwrap();
            let y: f64 = b.parse().unwrap();
            x.total_cmp(&y)
        });
    } else {
        labels.sort();
    }
}

impl Dataset {
    /// Builds a dataset from string treatment labels. The alphabet is sorted
    /// numerically when every label parses as a number, lexically otherwise.
    pub fn from_labels(outcome: Vec<f64>, labels: &[String], covariates: Vec<Vec<f64>>) -> Result<Self> {
        let mut alphabet: Vec<String> = labels.to_vec();
        sort_alphabet(&mut alphabet);
        alphabet.dedup();
        let codes = labels.iter().map(|l| alphabet.iter().position(|a| a == l).unwrap()).collect();
        Self::from_codes(outcome, codes, alphabet, covariates)
    }

    /// Builds a dataset from integer codes into a fixed alphabet.
    pub fn from_codes(
        outcome: Vec<f64>,
        codes: Vec<usize>,
        alphabet: Vec<String>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if let Some(&c) = codes.iter().find(|&&c| c >= alphabet.len()) {
            return Err(Error::UnknownTreatmentLabel(format!("code {c}")));
        }
        Self::build(outcome, Treatment::Labels { codes, alphabet }, covariates)
    }

    /// Builds a dataset with a real-valued dose.
    pub fn from_doses(outcome: Vec<f64>, doses: Vec<f64>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        for (row, d) in doses.iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::MissingValue { column: "treatment".into(), row });
            }
        }
        Self::build(outcome, Treatment::Dose(doses), covariates)
    }

    fn build(outcome: Vec<f64>, treatment: Treatment, covariates: Vec<Vec<f64>>) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        let t_len = match &treatment {
            Treatment::Labels { codes, .. } => codes.len(),
            Treatment::Dose(d) => d.len(),
        };
        if t_len != n || covariates.len() != n {
            return Err(Error::InvalidInput(format!(
                "column lengths differ: outcome {n}, treatment {t_len}, covariates {}",
                covariates.len()
            )));
        }
        for (row, y) in outcome.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::MissingValue { column: "outcome".into(), row });
            }
        }
        let dim = covariates[0].len();
        let mut flat = Vec::with_capacity(n * dim);
        for (row, x) in covariates.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::InvalidInput(format!("row {row} has {} covariates, expected {dim}", x.len())));
            }
            for (j, v) in x.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::MissingValue { column: format!("x{j}"), row });
                }
            }
            flat.extend_from_slice(x);
        }
        Ok(Self { outcome, treatment, covariates: flat, dim, group: None, weights: None })
    }

    /// Attaches an explicit group label column.
    pub fn with_group(mut self, group: Vec<String>) -> Result<Self> {
        if group.len() != self.n() {
            return Err(Error::InvalidInput("group column length differs from n".into()));
        }
        for (row, g) in group.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::MissingValue { column: "group".into(), row });
            }
        }
        self.group = Some(group);
        Ok(self)
    }

    /// Attaches nonnegative unit weights (population enumeration only).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::InvalidInput("weight column length differs from n".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput("weights must be finite, nonnegative, not all zero".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Returns a copy with a different outcome vector.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        if outcome.len() != self.n() {
            return Err(Error::InvalidInput("outcome length differs from n".into()));
        }
        let mut out = self.clone();
        out.outcome = outcome;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatment(&self) -> &Treatment {
        &self.treatment
    }

    /// Treatment codes, or `None` for a dose dataset.
    pub fn codes(&self) -> Option<&[usize]> {
        match &self.treatment {
            Treatment::Labels { codes, .. } => Some(codes),
            Treatment::Dose(_) => None,
        }
    }

    pub fn alphabet(&self) -> Option<&[String]> {
        match &self.treatment {
            Treatment::Labels { alphabet, .. } => Some(alphabet),
            Treatment::Dose(_) => None,
        }
    }

    pub fn doses(&self) -> Option<&[f64]> {
        match &self.treatment {
            Treatment::Dose(d) => Some(d),
            Treatment::Labels { .. } => None,
        }
    }

    /// Row-major covariate matrix.
    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn group_column(&self) -> Option<&[String]> {
        self.group.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weight of unit `i` (1 when unweighted).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.as_ref().map_or(self.n() as f64, |w| w.iter().sum())
    }

    /// Subset of rows, in the order given.
    pub fn select(&self, rows: &[usize]) -> Self {
        let outcome = rows.iter().map(|&i| self.outcome[i]).collect();
        let treatment = match &self.treatment {
            Treatment::Labels { codes, alphabet } => {
                Treatment::Labels { codes: rows.iter().map(|&i| codes[i]).collect(), alphabet: alphabet.clone() }
            }
            Treatment::Dose(d) => Treatment::Dose(rows.iter().map(|&i| d[i]).collect()),
        };
        let mut covariates = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            covariates.extend_from_slice(self.row(i));
        }
        Self {
            outcome,
            treatment,
            covariates,
            dim: self.dim,
            group: self.group.as_ref().map(|g| rows.iter().map(|&i| g[i].clone()).collect()),
            weights: self.weights.as_ref().map(|w| rows.iter().map(|&i| w[i]).collect()),
        }
    }
}

/// A named set of treatment labels analyzed as one treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub labels: Vec<String>,
}

/// How units are mapped to heterogeneity groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum GroupRule {
    /// Use the dataset's explicit group column.
    Column,
    /// Split on one covariate: `value >= threshold` goes to `upper`.
    Threshold { covariate: usize, threshold: f64, lower: String, upper: String },
}

/// Treatment arms and the group rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationScheme {
    pub arms: Vec<Arm>,
    pub groups: GroupRule,
}

/// An aggregation scheme resolved against a concrete alphabet and dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub labels: Vec<String>,
    pub arm_names: Vec<String>,
    pub group_names: Vec<String>,
    /// Arm of each treatment code, `None` when the label is in no arm.
    pub arm_of_label: Vec<Option<usize>>,
    /// Group of each unit.
    pub group_of_unit: Vec<usize>,
}

impl Design {
    pub fn arm_index(&self, name: &str) -> Result<usize> {
        self.arm_names.iter().position(|a| a == name).ok_or_else(|| Error::UnknownArm(name.into()))
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.group_names.iter().position(|g| g == name).ok_or_else(|| Error::UnknownGroup(name.into()))
    }

    /// Treatment codes belonging to an arm, in alphabet order.
    pub fn arm_labels(&self, arm: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&t| self.arm_of_label[t] == Some(arm)).collect()
    }
}

impl AggregationScheme {
    /// Resolves label names and unit groups. Fails on unknown labels,
    /// overlapping arms, and empty arms or groups.
    pub fn resolve(&self, data: &Dataset) -> Result<Design> {
        let alphabet =
            data.alphabet().ok_or_else(|| Error::InvalidInput("treatment is a dose; discretize first".into()))?;
        let codes = data.codes().unwrap();
        let mut arm_of_label = vec![None; alphabet.len()];
        for (ai, arm) in self.arms.iter().enumerate() {
            for l in &arm.labels {
                let t = alphabet.iter().position(|a| a == l).ok_or_else(|| Error::UnknownTreatmentLabel(l.clone()))?;
                if arm_of_label[t].is_some() {
                    return Err(Error::OverlappingArms(l.clone()));
                }
                arm_of_label[t] = Some(ai);
            }
        }
        if let Some(i) = (0..self.arms.len()).find(|i| self.arms[i + 1..].iter().any(|b| b.name == self.arms[*i].name))
        {
            return Err(Error::InvalidInput(format!("duplicate arm name `{}`", self.arms[i].name)));
        }
        for (ai, arm) in self.arms.iter().enumerate() {
            if !codes.iter().any(|&c| arm_of_label[c] == Some(ai)) {
                return Err(Error::EmptyArm(arm.name.clone()));
            }
        }
        let (group_names, group_of_unit) = match &self.groups {
            GroupRule::Column => {
                let col = data.group_column().ok_or_else(|| Error::UnknownColumn("group".into()))?;
                let mut names: Vec<String> = col.to_vec();
                sort_alphabet(&mut names);
                names.dedup();
                let of = col.iter().map(|g| names.iter().position(|n| n == g).unwrap()).collect();
                (names, of)
            }
            GroupRule::Threshold { covariate, threshold, lower, upper } => {
                if *covariate >= data.dim() {
                    return Err(Error::UnknownColumn(format!("covariate index {covariate}")));
                }
                if lower == upper {
                    return Err(Error::InvalidInput("group names must differ".into()));
                }
                let of: Vec<usize> =
                    (0..data.n()).map(|i| usize::from(data.row(i)[*covariate] >= *threshold)).collect();
                let names = vec![lower.clone(), upper.clone()];
                for (gi, name) in names.iter().enumerate() {
                    if !of.contains(&gi) {
                        return Err(Error::EmptyGroup(name.clone()));
                    }
                }
                (names, of)
            }
        };
        Ok(Design {
            labels: alphabet.to_vec(),
            arm_names: self.arms.iter().map(|a| a.name.clone()).collect(),
            group_names,
            arm_of_label,
            group_of_unit,
        })
    }
}

/// Unit counts by (treatment label, group) together with derived totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellTable {
    pub labels: Vec<String>,
    pub arms: Vec<String>,
    pub groups: Vec<String>,
    /// Arm of each label, `None` when unassigned.
    pub arm_of_label: Vec<Option<usize>>,
    /// `counts[t][g]`.
    pub counts: Vec<Vec<usize>>,
}

impl CellTable {
    pub fn n(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Count for (t, arm, group); zero when t is not in the arm.
    pub fn count(&self, t: usize, arm: usize, group: usize) -> usize {
        if self.arm_of_label[t] == Some(arm) {
            self.counts[t][group]
        } else {
            0
        }
    }

    pub fn arm_total(&self, arm: usize) -> usize {
        (0..self.labels.len()).map(|t| (0..self.groups.len()).map(|g| self.count(t, arm, g)).sum::<usize>()).sum()
    }

    pub fn group_total(&self, group: usize) -> usize {
        self.counts.iter().map(|row| row[group]).sum()
    }

    pub fn arm_group_total(&self, arm: usize, group: usize) -> usize {
        (0..self.labels.len()).map(|t| self.count(t, arm, group)).sum()
    }

    /// Smallest count among cells of referenced arms.
    pub fn min_cell(&self) -> usize {
        (0..self.labels.len())
            .filter(|&t| self.arm_of_label[t].is_some())
            .flat_map(|t| self.counts[t].iter().copied())
            .min()
            .unwrap_or(0)
    }
}

/// Validation warnings.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Warning {
    EmptyCell { label: String, group: String },
    LowArmShare { arm: String, share: f64 },
    LowGroupShare { group: String, share: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::EmptyCell { label, group } => write!(f, "empty cell (t={label}, g={group})"),
            Warning::LowArmShare { arm, share } => write!(f, "arm {arm} share {share:.4} below floor"),
            Warning::LowGroupShare { group, share } => {
                write!(f, "group {group} share {share:.4} below floor")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub cells: CellTable,
    pub warnings: Vec<Warning>,
}

/// Share below which arms and groups are flagged.
pub const DEFAULT_SHARE_FLOOR: f64 = 0.01;

/// Resolves the scheme, counts cells and flags empty cells and small shares.
pub fn validate(data: &Dataset, scheme: &AggregationScheme, share_floor: f64) -> Result<ValidationReport> {
    let design = scheme.resolve(data)?;
    let cells = cell_table(data, &design);
    let mut warnings = Vec::new();
    let n = data.n() as f64;
    for t in 0..design.labels.len() {
        if design.arm_of_label[t].is_none() {
            continue;
        }
        for g in 0..design.group_names.len() {
            if cells.counts[t][g] == 0 {
                warnings
                    .push(Warning::EmptyCell { label: design.labels[t].clone(), group: design.group_names[g].clone() });
            }
        }
    }
    for a in 0..design.arm_names.len() {
        let share = cells.arm_total(a) as f64 / n;
        if share < share_floor {
            warnings.push(Warning::LowArmShare { arm: design.arm_names[a].clone(), share });
        }
    }
    for g in 0..design.group_names.len() {
        let share = cells.group_total(g) as f64 / n;
        if share < share_floor {
            warnings.push(Warning::LowGroupShare { group: design.group_names[g].clone(), share });
        }
    }
    Ok(ValidationReport { cells, warnings })
}

/// Counts units by (label, group) for a resolved design.
pub fn cell_table(data: &Dataset, design: &Design) -> CellTable {
    let codes = data.codes().expect("labelled dataset");
    let mut counts = vec![vec![0usize; design.group_names.len()]; design.labels.len()];
    for (i, &t) in codes.iter().enumerate() {
        counts[t][design.group_of_unit[i]] += 1;
    }
    CellTable {
        labels: design.labels.clone(),
        arms: design.arm_names.clone(),
        groups: design.group_names.clone(),
        arm_of_label: design.arm_of_label.clone(),
        counts,
    }
}

/// Contiguous bins over a dose range plus exact-valued atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    edges: Vec<f64>,
    #[serde(default)]
    atoms: Vec<f64>,
}

const ATOM_TOL: f64 = 1e-12;

impl PartitionScheme {
    pub fn new(edges: Vec<f64>, atoms: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidPartition("need at least two edges".into()));
        }
        if edges.iter().chain(&atoms).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPartition("non-finite edge or atom".into()));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPartition("edges must be strictly increasing".into()));
        }
        let mut atoms = atoms;
        atoms.sort_by(f64::total_cmp);
        atoms.dedup();
        Ok(Self { edges, atoms })
    }

    /// `bins` equal-width bins over `[lo, hi]`.
    pub fn equal_width(lo: f64, hi: f64, bins: usize, atoms: Vec<f64>) -> Result<Self> {
        if bins == 0 || hi <= lo {
            return Err(Error::InvalidPartition("need bins >= 1 and hi > lo".into()));
        }
        let edges = (0..=bins).map(|j| lo + (hi - lo) * j as f64 / bins as f64).collect();
        Self::new(edges, atoms)
    }

    /// Equal-mass bins from the empirical quantiles of the non-atom doses.
    pub fn equal_mass(doses: &[f64], bins: usize, atoms: Vec<f64>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidPartition("need bins >= 1".into()));
        }
        let mut cont: Vec<f64> = doses
            .iter()
            .copied()
            .filter(|d| !atoms.iter().any(|a| (d - a).abs() <= ATOM_TOL * a.abs().max(1.0)))
            .collect();
        if cont.len() < bins {
            return Err(Error::InvalidPartition(format!("{} continuous doses cannot fill {bins} bins", cont.len())));
        }
        cont.sort_by(f64::total_cmp);
        let m = cont.len();
        let mut edges = Vec::with_capacity(bins + 1);
        edges.push(cont[0]);
        for j in 1..bins {
            edges.push(cont[j * m / bins]);
        }
        edges.push(cont[m - 1]);
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPartition("tied quantiles; use fewer bins".into()));
        }
        Self::new(edges, atoms)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    /// Label alphabet: atoms first, then bins.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.atoms.iter().map(|a| format!("atom:{a}")).collect();
        out.extend((0..self.bin_count()).map(|j| format!("bin:{}", j + 1)));
        out
    }

    /// Code of a dose in the label alphabet.
    pub fn code_of(&self, dose: f64) -> Result<usize> {
        if let Some(r) = self.atoms.iter().position(|a| (dose - a).abs() <= ATOM_TOL * a.abs().max(1.0)) {
            return Ok(r);
        }
        let j = self.edges.len() - 1;
        if dose < self.edges[0] || dose > self.edges[j] || dose.is_nan() {
            return Err(Error::OutOfRangeDose(dose));
        }
        // Left-closed, right-open; the last bin is closed.
        let bin = self.edges.partition_point(|&e| e <= dose).saturating_sub(1).min(j - 1);
        Ok(self.atoms.len() + bin)
    }
}

/// Replaces a dose column by bin and atom labels.
pub fn discretize(data: &Dataset, partition: &PartitionScheme) -> Result<Dataset> {
    let doses = data.doses().ok_or_else(|| Error::InvalidInput("treatment is already categorical".into()))?;
    let codes = doses.iter().map(|&d| partition.code_of(d)).collect::<Result<Vec<_>>>()?;
    let mut out = data.clone();
    out.treatment = Treatment::Labels { codes, alphabet: partition.labels() };
    Ok(out)
}
