//! Configuration-driven scenarios.
//!
//! A scenario is a TOML document with the sections `[space]`, `[operator]`,
//! `[nonlinearity]`, `[measure]`, `[weights]` and `[task]`. Running it yields
//! a CSV artifact whose first line names the column schema, and a JSON
//! summary for the log. Outputs depend only on the configuration and seed;
//! wall-clock time goes to the log alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::capacity::{capacity, point_capacity_ladder, CapacityOptions};
use crate::error::{CapacityError, FormError, MeasureError, NonlinearityError, SolveError};
use crate::form::{assemble, FormMatrix, Provenance};
use crate::green::{Discretization, WeightSource};
use crate::measure::{parse_node_values, DiscreteMeasure, Tag};
use crate::nonlinearity::{BoundedShape, Nonlinearity};
use crate::operator::{DiffusionTensor, KernelCoefficient, OperatorKind, OperatorSpec, ScaleFunction};
use crate::reduction::{existence_from_sub_super, project, reduce, ReductionOptions, Schedule};
use crate::solver::{classify, eval_vec, solve, solve_between, solve_fixed_point, SolveReport, SolverOptions};
use crate::space::{build_space, GridSpec, StateSpace};
use crate::study::{asymptotic_equivalence_study, refinement_study, EquivalenceBounds, SiteAtom, StudyConfig, StudyError};
use crate::suite::{admissible_suite, apriori_suite, reduction_suite, run_all, SuiteOptions};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Nonlinearity(#[from] NonlinearityError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

impl ScenarioError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }

    /// Numerical breakdown, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Self::Solve(e) => matches!(e, SolveError::NoConvergence { .. } | SolveError::InvariantViolation(_)),
            Self::Capacity(e) => matches!(e, CapacityError::NoConvergence(_)),
            Self::Study(e) => !e.is_validation(),
            _ => false,
        }
    }

    /// 3 for solver failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_solver_failure() {
            3
        } else {
            2
        }
    }

    /// Machine-readable error block.
    pub fn to_json(&self) -> Value {
        json!({
            "error": {
                "kind": if self.is_solver_failure() { "solver_failure" } else { "validation" },
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub space: Option<SpaceSection>,
    pub operator: Option<OperatorSection>,
    pub nonlinearity: Option<NonlinearitySection>,
    pub measure: Option<MeasureSection>,
    #[serde(default)]
    pub weights: WeightsSection,
    pub task: TaskSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Bounds {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Bounds {
    fn expand(&self, dim: usize) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![*v; dim],
            Self::Vector(v) => v.clone(),
        }
    }
}

/// Either a uniform grid (`lower`, `upper`, `h`) or `nodes` abstract nodes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default = "one_dim")]
    pub dim: usize,
    pub lower: Option<Bounds>,
    pub upper: Option<Bounds>,
    pub h: Option<f64>,
    pub nodes: Option<usize>,
    pub cells: Option<Vec<f64>>,
}

fn one_dim() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSection {
    Local {
        #[serde(default = "unit")]
        coefficient: f64,
        #[serde(default = "yes")]
        exterior: bool,
    },
    Fractional {
        alpha: f64,
        #[serde(default = "unit")]
        coefficient: f64,
        #[serde(default = "yes")]
        exterior: bool,
        #[serde(default = "yes")]
        correction: bool,
    },
    MixedStable {
        components: Vec<(f64, f64)>,
        #[serde(default = "unit")]
        coefficient: f64,
        #[serde(default = "yes")]
        exterior: bool,
        #[serde(default = "yes")]
        correction: bool,
    },
    /// Explicit form matrix on the nodes of `[space]`.
    Matrix { matrix: Vec<Vec<f64>> },
}

impl OperatorSection {
    fn spec(&self) -> Option<OperatorSpec> {
        let nonlocal = |kind, c: f64, scale, exterior, correction| OperatorSpec::Nonlocal {
            kind,
            kernel: KernelCoefficient::Constant(c),
            scale,
            exterior,
            near_diagonal_correction: correction,
        };
        match self {
            Self::Local { coefficient, exterior } => {
                Some(OperatorSpec::Local { tensor: DiffusionTensor::Constant(*coefficient), exterior: *exterior })
            }
            Self::Fractional { alpha, coefficient, exterior, correction } => Some(nonlocal(
                OperatorKind::Fractional,
                *coefficient,
                ScaleFunction::Power { alpha: *alpha },
                *exterior,
                *correction,
            )),
            Self::MixedStable { components, coefficient, exterior, correction } => Some(nonlocal(
                OperatorKind::MixedStable,
                *coefficient,
                ScaleFunction::Mixed { components: components.clone() },
                *exterior,
                *correction,
            )),
            Self::Matrix { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Scalar(f64),
    PerNode(Vec<f64>),
}

impl Default for Coefficient {
    fn default() -> Self {
        Self::Scalar(1.0)
    }
}

impl From<&Coefficient> for crate::nonlinearity::NodeField {
    fn from(c: &Coefficient) -> Self {
        match c {
            Coefficient::Scalar(v) => (*v).into(),
            Coefficient::PerNode(v) => v.clone().into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySection {
    /// `-c |y|^(p-1) y`.
    Power {
        p: f64,
        #[serde(default)]
        c: Coefficient,
    },
    /// `-c y`.
    Linear {
        #[serde(default)]
        c: Coefficient,
    },
    /// `-c sign(y) (e^|y| - 1)`.
    Exp {
        #[serde(default)]
        c: Coefficient,
    },
    /// `-bound shape(y)`.
    Bounded {
        #[serde(default)]
        bound: Coefficient,
        shape: BoundedShape,
    },
    /// Piecewise linear `(y, f)` table.
    Tabulated { table: Vec<(f64, f64)> },
    Zero,
    Sum { terms: Vec<NonlinearitySection> },
}

impl NonlinearitySection {
    pub fn build(&self) -> Result<Nonlinearity, NonlinearityError> {
        Ok(match self {
            Self::Power { p, c } => Nonlinearity::power(*p, c)?,
            Self::Linear { c } => Nonlinearity::power(1.0, c)?,
            Self::Exp { c } => Nonlinearity::exp(c)?,
            Self::Bounded { bound, shape } => Nonlinearity::bounded(bound, *shape)?,
            Self::Tabulated { table } => Nonlinearity::tabulated(table.clone())?,
            Self::Zero => Nonlinearity::power(1.0, 0.0)?,
            Self::Sum { terms } => {
                let mut parts = terms.iter().map(Self::build);
                let first = parts.next().ok_or_else(|| NonlinearityError::InvalidParameter("empty sum".into()))??;
                parts.try_fold(first, |acc, t| t.map(|t| acc.plus(&t)))?
            }
        })
    }
}

/// A constant or a `node:value` list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum NodeValues {
    Constant(f64),
    Literal(String),
    Vector(Vec<f64>),
}

impl NodeValues {
    fn resolve(&self, len: usize) -> Result<DVector<f64>, ScenarioError> {
        match self {
            Self::Constant(v) => Ok(DVector::from_element(len, *v)),
            Self::Literal(s) => Ok(parse_node_values(s, len)?),
            Self::Vector(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
            Self::Vector(v) => Err(ScenarioError::invalid("node values", format!("expected {len} entries, got {}", v.len()))),
        }
    }

    fn constant(&self) -> Option<f64> {
        match self {
            Self::Constant(v) => Some(*v),
            _ => None,
        }
    }
}

fn concentrated() -> Tag {
    Tag::Concentrated
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AtomSpec {
    /// `[node, mass, tag]`.
    Triplet(usize, f64, Tag),
    /// `{ site = [x, ...], mass, tag }`: placed at the nearest node.
    Site {
        site: Vec<f64>,
        mass: f64,
        #[serde(default = "concentrated")]
        tag: Tag,
    },
    /// `{ node, mass, tag }`.
    Node {
        node: usize,
        mass: f64,
        #[serde(default = "concentrated")]
        tag: Tag,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    /// Diffuse density with respect to the cell measure.
    pub density: Option<NodeValues>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RhoSource {
    #[default]
    Constant,
    PrincipalEigenfunction,
    User,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(default)]
    pub source: RhoSource,
    pub rho: Option<Vec<f64>>,
    /// Truncation weight, default 1.
    pub phi: Option<NodeValues>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Solve,
    Reduce,
    Project,
    Capacity,
    Suite,
    Study,
    EquivStudy,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    #[default]
    Monotone,
    Picard,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSelection {
    #[default]
    All,
    Reduction,
    Apriori,
    Admissible,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub nonlinearity: NonlinearitySection,
    pub c1: f64,
    pub c2: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub tol: Option<f64>,
    /// `start:ratio:end`.
    pub schedule: Option<String>,
    pub reduction_tol: Option<f64>,
    pub seed: Option<u64>,
    pub instances: Option<usize>,
    #[serde(default)]
    pub suites: SuiteSelection,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub method: SolveMethod,
    pub damping: Option<f64>,
    pub sub: Option<NodeValues>,
    pub sup: Option<NodeValues>,
    /// Capacity node set.
    pub set: Option<Vec<usize>>,
    /// Mesh sizes for studies and capacity ladders.
    pub ladder: Option<Vec<f64>>,
    /// Capacity-ladder site.
    pub site: Option<Vec<f64>>,
    pub max_nodes: Option<usize>,
    pub compare: Option<CompareSection>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.message().to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&read(path)?)
    }

    /// Merge several TOML fragments (later keys win) into one configuration.
    pub fn from_fragments(fragments: &[String]) -> Result<Self, ScenarioError> {
        let mut merged = toml::Table::new();
        for text in fragments {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ScenarioError::Parse(e.message().to_string()))?;
            merge(&mut merged, table);
        }
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| ScenarioError::Parse(e.message().to_string()))
    }
}

pub fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(toml::Value::Table(old)), toml::Value::Table(new)) => merge(old, new),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}

/// CSV text plus a JSON summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub csv: String,
    pub summary: Value,
    pub runtime: Duration,
}

impl Artifacts {
    /// Write the CSV to `path` and the summary log to `<path>.log`.
    pub fn write(&self, path: &Path) -> Result<(), ScenarioError> {
        write_file(path, &self.csv)?;
        let log = json!({ "summary": self.summary, "runtime_seconds": self.runtime.as_secs_f64() });
        write_file(&log_path(path), &format!("{}\n", serde_json::to_string_pretty(&log).expect("json values serialise")))
    }
}

pub fn log_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

pub fn write_file(path: &Path, text: &str) -> Result<(), ScenarioError> {
    std::fs::write(path, text).map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Column schemas of every artifact, one per task.
pub const SCHEMAS: &[(&str, &str)] = &[
    ("solve", "node,u,f_of_u,Rmu,residual"),
    ("reduce", "n,sup_change,l1rho_f,atom_mass_estimate"),
    ("project", "node,mu_diffuse,mu_concentrated,projected_diffuse,projected_concentrated"),
    ("capacity", "node,in_set,potential,equilibrium"),
    ("capacity_ladder", "h,cap_estimate"),
    ("suite", crate::suite::RECORD_SCHEMA),
    ("study", "h,nodes,retention,weighted_l1,reduced_mass,converged,truncation_levels"),
    ("equiv_study", "h,reduced_gap,retention_f,retention_g,retention_gap"),
];

fn schema(name: &str) -> &'static str {
    SCHEMAS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).expect("known schema")
}

struct Table {
    text: String,
}

impl Table {
    fn new(name: &str) -> Self {
        let columns = schema(name);
        Self { text: format!("# schema: {columns}\n{columns}\n") }
    }

    fn row(&mut self, cells: &[Cell]) {
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        writeln!(self.text, "{}", line.join(",")).expect("writing to a string");
    }
}

enum Cell {
    Int(usize),
    Num(f64),
    Flag(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Self::Int(v) => v.to_string(),
            Self::Num(v) => format!("{v:.16e}"),
            Self::Flag(v) => v.to_string(),
        }
    }
}

use Cell::{Flag, Int, Num};

/// Run the configured task.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Artifacts, ScenarioError> {
    let started = Instant::now();
    let (csv, summary) = match config.task.kind {
        TaskKind::Solve => run_solve(config)?,
        TaskKind::Reduce => run_reduce(config)?,
        TaskKind::Project => run_project(config)?,
        TaskKind::Capacity => run_capacity(config)?,
        TaskKind::Suite => run_suite(config)?,
        TaskKind::Study => run_study(config)?,
        TaskKind::EquivStudy => run_equivalence(config)?,
    };
    Ok(Artifacts { csv, summary, runtime: started.elapsed() })
}

fn section<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, ScenarioError> {
    value.as_ref().ok_or_else(|| ScenarioError::Missing(format!("[{name}] section")))
}

fn build_state_space(space: &SpaceSection) -> Result<std::sync::Arc<StateSpace>, ScenarioError> {
    match (space.h, space.nodes) {
        (Some(h), None) => {
            let lower = space.lower.as_ref().ok_or_else(|| ScenarioError::Missing("space.lower".into()))?;
            let upper = space.upper.as_ref().ok_or_else(|| ScenarioError::Missing("space.upper".into()))?;
            Ok(build_space(&GridSpec { dim: space.dim, lower: lower.expand(space.dim), upper: upper.expand(space.dim), h })?)
        }
        (None, Some(n)) => {
            let cells = space.cells.clone().unwrap_or_else(|| vec![1.0; n]);
            Ok(StateSpace::from_points(1, (0..n).map(|i| vec![i as f64]).collect(), cells, None)?)
        }
        _ => Err(ScenarioError::invalid("space", "give either a grid (lower, upper, h) or a node count")),
    }
}

fn build_form(config: &ScenarioConfig) -> Result<FormMatrix, ScenarioError> {
    let space = build_state_space(section(&config.space, "space")?)?;
    let operator = section(&config.operator, "operator")?;
    match operator {
        OperatorSection::Matrix { matrix } => {
            let n = space.len();
            if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
                return Err(ScenarioError::invalid("operator.matrix", format!("expected a {n}x{n} matrix")));
            }
            let b = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
            Ok(FormMatrix::new(space, b, Provenance::Custom)?)
        }
        other => Ok(assemble(&space, &other.spec().expect("non-matrix operator"))?),
    }
}

fn weight_source(config: &ScenarioConfig) -> Result<WeightSource, ScenarioError> {
    Ok(match config.weights.source {
        RhoSource::Constant => WeightSource::Constant,
        RhoSource::PrincipalEigenfunction => WeightSource::PrincipalEigenfunction,
        RhoSource::User => WeightSource::User(DVector::from_vec(
            config.weights.rho.clone().ok_or_else(|| ScenarioError::Missing("weights.rho".into()))?,
        )),
    })
}

fn discretization(config: &ScenarioConfig) -> Result<Discretization, ScenarioError> {
    Ok(Discretization::with_weights(build_form(config)?, &weight_source(config)?)?)
}

fn nonlinearity(config: &ScenarioConfig, len: usize) -> Result<Nonlinearity, ScenarioError> {
    let f = section(&config.nonlinearity, "nonlinearity")?.build()?;
    f.check_nodes(len)?;
    Ok(f)
}

fn measure(config: &ScenarioConfig, space: &std::sync::Arc<StateSpace>) -> Result<DiscreteMeasure, ScenarioError> {
    let spec = section(&config.measure, "measure")?;
    let n = space.len();
    let density = match &spec.density {
        Some(values) => values.resolve(n)?,
        None => DVector::zeros(n),
    };
    let mut mu = DiscreteMeasure::from_density(space.clone(), &density)?;
    for atom in &spec.atoms {
        let (node, mass, tag) = match atom {
            AtomSpec::Triplet(node, mass, tag) | AtomSpec::Node { node, mass, tag } => (*node, *mass, *tag),
            AtomSpec::Site { site, mass, tag } => {
                let node = space
                    .nearest_node(site)
                    .ok_or_else(|| ScenarioError::invalid("measure.atoms", "site dimension does not match the space"))?;
                (node, *mass, *tag)
            }
        };
        mu = mu.with_atom(node, mass, tag)?;
    }
    Ok(mu)
}

fn phi(config: &ScenarioConfig, len: usize) -> Result<DVector<f64>, ScenarioError> {
    let phi = match &config.weights.phi {
        Some(values) => values.resolve(len)?,
        None => DVector::from_element(len, 1.0),
    };
    if phi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(ScenarioError::invalid("weights.phi", "truncation weight must be positive"));
    }
    Ok(phi)
}

fn solver_options(task: &TaskSection) -> Result<SolverOptions, ScenarioError> {
    let mut opts = SolverOptions::default();
    if let Some(tol) = task.tol {
        opts.tol = tol;
    }
    if let Some(theta) = task.damping {
        opts.damping = theta;
    }
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(ScenarioError::invalid("task.tol", "must be positive"));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(ScenarioError::invalid("task.damping", "must lie in (0, 1]"));
    }
    Ok(opts)
}

fn reduction_options(task: &TaskSection) -> Result<ReductionOptions, ScenarioError> {
    let mut opts = ReductionOptions { solver: solver_options(task)?, ..ReductionOptions::default() };
    if let Some(s) = &task.schedule {
        opts.schedule = Schedule::parse(s)?;
    }
    if let Some(tol) = task.reduction_tol {
        opts.tol = tol;
    }
    Ok(opts)
}

fn vector_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn run_solve(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let disc = discretization(config)?;
    let n = disc.len();
    let f = nonlinearity(config, n)?;
    let mu = measure(config, disc.form().space())?;
    let task = &config.task;
    let opts = solver_options(task)?;
    let report: SolveReport = match (task.method, &task.sub, &task.sup) {
        (SolveMethod::Picard, None, None) => solve_fixed_point(&disc, &f, &mu, &opts)?,
        (SolveMethod::Picard, _, _) => {
            return Err(ScenarioError::invalid("task.method", "the fixed-point method takes no bracket"));
        }
        (SolveMethod::Monotone, None, None) => solve(&disc, &f, &mu, &opts)?,
        (SolveMethod::Monotone, Some(sub), Some(sup)) => {
            let (sub, sup) = (sub.resolve(n)?, sup.resolve(n)?);
            if (0..n).all(|i| sub[i] <= sup[i]) {
                solve_between(&disc, &f, &mu, &sub, &sup, &opts)?
            } else {
                let red = ReductionOptions { solver: opts, ..reduction_options(task)? };
                existence_from_sub_super(&disc, &f, &mu, &sub, &sup, &red)?.solution
            }
        }
        _ => return Err(ScenarioError::invalid("task", "give both sub and sup, or neither")),
    };
    let u = &report.u;
    let fu = eval_vec(&f, u);
    let rmu = disc.green().apply_masses(&mu.node_masses());
    let residual = u - disc.green().apply_masses(&(fu.component_mul(disc.cells()) + mu.node_masses()));
    let mut table = Table::new("solve");
    for i in 0..n {
        table.row(&[Int(i), Num(u[i]), Num(fu[i]), Num(rmu[i]), Num(residual[i])]);
    }
    let summary = json!({
        "task": "solve",
        "nodes": n,
        "method": report.method,
        "iterations": report.iterations,
        "final_residual": report.final_residual,
        "apriori_ok": report.apriori_ok,
        "shift_corrections": report.shift_corrections,
        "classification": classify(&disc, &f, &mu, u)?,
        "nonlinearity": f.describe(),
    });
    Ok((table.text, summary))
}

fn run_reduce(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let disc = discretization(config)?;
    let n = disc.len();
    let f = nonlinearity(config, n)?;
    let mu = measure(config, disc.form().space())?;
    let opts = reduction_options(&config.task)?;
    let report = reduce(&disc, &f, &mu, &phi(config, n)?, &opts)?;
    let mut table = Table::new("reduce");
    for level in &report.levels {
        table.row(&[Num(level.level), Num(level.sup_change.unwrap_or(f64::NAN)), Num(level.weighted_absorption), Num(level.atom_mass)]);
    }
    let summary = json!({
        "task": "reduce",
        "nodes": n,
        "converged": report.converged,
        "bounds_ok": report.bounds_ok,
        "equation_residual": report.equation_residual,
        "u_star": vector_json(&report.u_star),
        "mu_star_diffuse": vector_json(report.mu_star.diffuse_masses()),
        "mu_star_concentrated": vector_json(report.mu_star.concentrated_masses()),
        "nu": vector_json(&report.nu.node_masses()),
        "defect": vector_json(&report.defect),
    });
    Ok((table.text, summary))
}

fn run_project(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let disc = discretization(config)?;
    let n = disc.len();
    let f = nonlinearity(config, n)?;
    let mu = measure(config, disc.form().space())?;
    let projected = project(&disc, &f, &mu, &phi(config, n)?, &reduction_options(&config.task)?)?;
    let mut table = Table::new("project");
    for i in 0..n {
        table.row(&[
            Int(i),
            Num(mu.diffuse_masses()[i]),
            Num(mu.concentrated_masses()[i]),
            Num(projected.diffuse_masses()[i]),
            Num(projected.concentrated_masses()[i]),
        ]);
    }
    let rho = &disc.weights().rho;
    let summary = json!({
        "task": "project",
        "nodes": n,
        "distance_rho": mu.sub(&projected)?.tv_norm(rho)?,
    });
    Ok((table.text, summary))
}

fn run_capacity(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let task = &config.task;
    let opts = CapacityOptions { tol: task.tol.unwrap_or(1e-10), ..CapacityOptions::default() };
    if let (Some(ladder), Some(site)) = (&task.ladder, &task.site) {
        let space = section(&config.space, "space")?;
        let (lower, upper) = match (&space.lower, &space.upper) {
            (Some(l), Some(u)) => (l.expand(space.dim), u.expand(space.dim)),
            _ => return Err(ScenarioError::Missing("space.lower and space.upper".into())),
        };
        let grids: Vec<GridSpec> =
            ladder.iter().map(|&h| GridSpec { dim: space.dim, lower: lower.clone(), upper: upper.clone(), h }).collect();
        let spec = section(&config.operator, "operator")?
            .spec()
            .ok_or_else(|| ScenarioError::invalid("operator", "a capacity ladder needs a grid operator"))?;
        let report = point_capacity_ladder(&grids, &spec, site, opts)?;
        let mut table = Table::new("capacity_ladder");
        for (h, cap) in &report.levels {
            table.row(&[Num(*h), Num(*cap)]);
        }
        let summary = json!({
            "task": "capacity",
            "exponent": report.exponent,
            "verdict": report.verdict,
            "rule": "polar iff fitted exponent >= 0.1 and last estimate <= half the first",
        });
        return Ok((table.text, summary));
    }
    let set = task.set.as_ref().ok_or_else(|| ScenarioError::Missing("task.set (or task.ladder with task.site)".into()))?;
    let form = build_form(config)?;
    let result = capacity(&form, set, opts)?;
    let mut table = Table::new("capacity");
    for i in 0..form.len() {
        table.row(&[Int(i), Flag(set.contains(&i)), Num(result.potential[i]), Num(result.equilibrium[i])]);
    }
    let summary = json!({
        "task": "capacity",
        "value": result.value,
        "kkt_residual": result.kkt_residual,
        "iterations": result.iterations,
    });
    Ok((table.text, summary))
}

fn run_suite(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let task = &config.task;
    let mut opts = SuiteOptions::new(task.seed.unwrap_or(0), task.instances.unwrap_or(200));
    if let Some(n) = task.max_nodes {
        if n < 2 {
            return Err(ScenarioError::invalid("task.max_nodes", "suites need at least two nodes"));
        }
        opts.max_nodes = n;
    }
    if task.schedule.is_some() || task.tol.is_some() || task.reduction_tol.is_some() {
        opts.reduction = reduction_options(task)?;
    }
    let report = match task.suites {
        SuiteSelection::All => run_all(&opts),
        SuiteSelection::Reduction => reduction_suite(&opts),
        SuiteSelection::Apriori => apriori_suite(&opts),
        SuiteSelection::Admissible => admissible_suite(&opts),
    };
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| ScenarioError::Io { path: "<suite csv>".into(), message: e.to_string() })?;
    let summary = json!({
        "task": "suite",
        "seed": report.seed,
        "all_passed": report.all_passed(),
        "census": report.census,
        "laws": report.tallies(),
        "failures": report.failures,
    });
    Ok((String::from_utf8(csv).expect("csv output is utf-8"), summary))
}

fn study_config(config: &ScenarioConfig) -> Result<StudyConfig, ScenarioError> {
    let space = section(&config.space, "space")?;
    let (lower, upper) = match (&space.lower, &space.upper) {
        (Some(l), Some(u)) => (l.expand(space.dim), u.expand(space.dim)),
        _ => return Err(ScenarioError::Missing("space.lower and space.upper".into())),
    };
    let operator = section(&config.operator, "operator")?
        .spec()
        .ok_or_else(|| ScenarioError::invalid("operator", "studies need a grid operator"))?;
    let measure = section(&config.measure, "measure")?;
    let density = match &measure.density {
        None => 0.0,
        Some(v) => v.constant().ok_or_else(|| ScenarioError::invalid("measure.density", "studies take a constant density"))?,
    };
    let atom = match measure.atoms.as_slice() {
        [] => None,
        [AtomSpec::Site { site, mass, tag: Tag::Concentrated }] => Some(SiteAtom { site: site.clone(), mass: *mass }),
        _ => {
            return Err(ScenarioError::invalid(
                "measure.atoms",
                "studies take at most one concentrated atom given by a physical site",
            ))
        }
    };
    let phi = match &config.weights.phi {
        None => 1.0,
        Some(v) => v.constant().ok_or_else(|| ScenarioError::invalid("weights.phi", "studies take a constant weight"))?,
    };
    let task = &config.task;
    Ok(StudyConfig {
        dim: space.dim,
        lower,
        upper,
        ladder: task.ladder.clone().ok_or_else(|| ScenarioError::Missing("task.ladder".into()))?,
        operator,
        nonlinearity: section(&config.nonlinearity, "nonlinearity")?.build()?,
        atom,
        density,
        phi,
        weights: weight_source(config)?,
        reduction: reduction_options(task)?,
        max_nodes: task.max_nodes.unwrap_or_else(|| StudyConfig::default_max_nodes(space.dim)),
    })
}

fn run_study(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let study = study_config(config)?;
    let report = refinement_study(&study)?;
    let mut table = Table::new("study");
    for l in &report.levels {
        table.row(&[
            Num(l.h),
            Int(l.nodes),
            Num(l.retention),
            Num(l.weighted_l1),
            Num(l.reduced_mass),
            Flag(l.converged),
            Int(l.truncation_levels),
        ]);
    }
    let summary = json!({
        "task": "study",
        "spearman": report.spearman,
        "drop": report.drop,
        "verdict": report.verdict,
        "level_runtime_seconds": report.levels.iter().map(|l| l.runtime.as_secs_f64()).collect::<Vec<_>>(),
    });
    Ok((table.text, summary))
}

fn run_equivalence(config: &ScenarioConfig) -> Result<(String, Value), ScenarioError> {
    let study = study_config(config)?;
    let compare = config.task.compare.as_ref().ok_or_else(|| ScenarioError::Missing("[task.compare] section".into()))?;
    let g = compare.nonlinearity.build()?;
    let bounds = EquivalenceBounds { c1: compare.c1, c2: compare.c2, r: compare.r };
    let report = asymptotic_equivalence_study(&study, &g, bounds)?;
    let mut table = Table::new("equiv_study");
    for l in &report.levels {
        table.row(&[Num(l.h), Num(l.reduced_gap), Num(l.retention_f), Num(l.retention_g), Num(l.retention_gap)]);
    }
    let summary = json!({
        "task": "equiv_study",
        "verdict_f": report.verdict_f,
        "verdict_g": report.verdict_g,
        "max_retention_gap": report.levels.iter().map(|l| l.retention_gap).fold(0.0, f64::max),
    });
    Ok((table.text, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIX1_SOLVE: &str = r#"
        [space]
        lower = -1.0
        upper = 1.0
        h = 1.0
        [operator]
        kind = "local"
        [nonlinearity]
        family = "power"
        p = 3
        [measure]
        atoms = [[0, 3.0, "concentrated"]]
        [task]
        kind = "solve"
    "#;

    #[test]
    fn single_node_cubic_scenario() {
        let art = run_scenario(&ScenarioConfig::parse(FIX1_SOLVE).unwrap()).unwrap();
        let mut lines = art.csv.lines();
        assert_eq!(lines.next(), Some("# schema: node,u,f_of_u,Rmu,residual"));
        lines.next();
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
        assert!((row[1] - 1.0).abs() < 1e-10);
        assert!((row[3] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn missing_measure_is_a_validation_error() {
        let text = FIX1_SOLVE.replace("[measure]\n        atoms = [[0, 3.0, \"concentrated\"]]", "");
        let err = run_scenario(&ScenarioConfig::parse(&text).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("[measure]"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::parse(&FIX1_SOLVE.replace("h = 1.0", "h = 1.0\nmesh = 2")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn fragments_merge_by_section() {
        let cfg = ScenarioConfig::from_fragments(&[
            FIX1_SOLVE.to_string(),
            "[task]\nkind = \"reduce\"\nschedule = \"1:2:8\"".to_string(),
        ])
        .unwrap();
        assert_eq!(cfg.task.kind, TaskKind::Reduce);
        let art = run_scenario(&cfg).unwrap();
        assert!(art.csv.starts_with("# schema: n,sup_change"));
        assert_eq!(art.summary["converged"], json!(true));
    }

    #[test]
    fn site_atoms_and_literal_densities() {
        let text = r#"
            [space]
            lower = -1.5
            upper = 1.5
            h = 1.0
            [operator]
            kind = "local"
            [nonlinearity]
            family = "zero"
            [measure]
            density = "1:2.0"
            atoms = [{ site = [-0.4], mass = 3.0 }]
            [task]
            kind = "solve"
        "#;
        let art = run_scenario(&ScenarioConfig::parse(text).unwrap()).unwrap();
        let rows: Vec<Vec<f64>> =
            art.csv.lines().skip(2).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
        // G = [[2, 1], [1, 2]] / 3 applied to masses (3, 2).
        assert!((rows[0][1] - 8.0 / 3.0).abs() < 1e-10);
        assert!((rows[1][1] - 7.0 / 3.0).abs() < 1e-10);
    }
}
