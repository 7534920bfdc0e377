//! Randomized property suites for the solver, the reduction operator and the
//! admissible approximation.
//!
//! Every law evaluation becomes one [`LawRecord`]. A record passes when its
//! discrepancy is at most its threshold, so failures are data rather than
//! errors. Instances are independent and seeded per index, which keeps the
//! records identical however the work is scheduled.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::SolveError;
use crate::green::{Discretization, WeightSource};
use crate::measure::DiscreteMeasure;
use crate::nonlinearity::Nonlinearity;
use crate::reduction::{admissible_approx, is_good, project, reduce, reduce_min, ReductionOptions, ReductionReport};
use crate::sampling::{
    instance_rng, normalise, random_diffuse_measure, random_form, random_measure, random_nonlinearity,
    random_positive_measure, random_subset, Family,
};
use crate::solver::{
    apriori_bracket, classify, eval_vec, max_of_subsolutions, residual_measure, solve, solve_between, Classification,
};

/// Tolerance for the algebraic laws.
pub const LAW_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Reduction,
    Apriori,
    Admissible,
}

impl SuiteKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Reduction => "reduction",
            Self::Apriori => "apriori",
            Self::Admissible => "admissible",
        }
    }
}

/// How a discrepancy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// `sum_i rho_i |mass_i|` over both copies of the node set.
    Rho,
    /// Largest nodewise excess.
    Sup,
    /// `sum_i rho_i m_i |v_i|`.
    L1Rho,
    /// Dimensionless ratio.
    Ratio,
    /// `0` when a boolean law holds, `1` otherwise.
    Flag,
}

impl Norm {
    pub fn label(self) -> &'static str {
        match self {
            Self::Rho => "rho",
            Self::Sup => "sup",
            Self::L1Rho => "l1_rho",
            Self::Ratio => "ratio",
            Self::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawRecord {
    pub instance: usize,
    pub suite: SuiteKind,
    pub law: &'static str,
    pub nodes: usize,
    pub family: Family,
    pub norm: Norm,
    pub discrepancy: f64,
    pub threshold: f64,
}

impl LawRecord {
    /// `NaN` never passes.
    pub fn passed(&self) -> bool {
        self.discrepancy <= self.threshold
    }
}

/// Everything needed to rebuild a failing instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reproduction {
    pub suite: SuiteKind,
    pub seed: u64,
    pub instance: usize,
    pub laws: Vec<&'static str>,
    pub form: Vec<Vec<f64>>,
    pub cells: Vec<f64>,
    pub mu_diffuse: Vec<f64>,
    pub mu_concentrated: Vec<f64>,
    pub nonlinearity: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawTally {
    pub suite: SuiteKind,
    pub law: &'static str,
    pub checked: usize,
    pub failed: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Census {
    pub instances: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub diffuse_masses: usize,
    pub concentrated_atoms: usize,
    pub negative_masses: usize,
    pub good_samples: usize,
    pub subsolutions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertySuiteReport {
    pub seed: u64,
    pub census: Census,
    pub records: Vec<LawRecord>,
    pub failures: Vec<Reproduction>,
}

impl PropertySuiteReport {
    pub fn all_passed(&self) -> bool {
        self.records.iter().all(LawRecord::passed)
    }

    /// Per-law counts and worst discrepancy, in first-seen order.
    pub fn tallies(&self) -> Vec<LawTally> {
        let mut out: Vec<LawTally> = Vec::new();
        for r in &self.records {
            let slot = match out.iter().position(|t| t.suite == r.suite && t.law == r.law) {
                Some(k) => k,
                None => {
                    out.push(LawTally { suite: r.suite, law: r.law, checked: 0, failed: 0, worst: 0.0 });
                    out.len() - 1
                }
            };
            let t = &mut out[slot];
            t.checked += 1;
            t.failed += usize::from(!r.passed());
            t.worst = if r.discrepancy.is_nan() { f64::NAN } else { t.worst.max(r.discrepancy) };
        }
        out
    }

    fn merge(seed: u64, outcomes: Vec<Outcome>) -> Self {
        let mut census = Census { min_nodes: usize::MAX, ..Census::default() };
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for o in outcomes {
            census.instances += 1;
            census.min_nodes = census.min_nodes.min(o.nodes);
            census.max_nodes = census.max_nodes.max(o.nodes);
            census.diffuse_masses += o.census.diffuse_masses;
            census.concentrated_atoms += o.census.concentrated_atoms;
            census.negative_masses += o.census.negative_masses;
            census.good_samples += o.census.good_samples;
            census.subsolutions += o.census.subsolutions;
            let failed: Vec<&'static str> = o.records.iter().filter(|r| !r.passed()).map(|r| r.law).collect();
            if !failed.is_empty() {
                let mut repro = o.reproduction;
                repro.laws = failed;
                failures.push(repro);
            }
            records.extend(o.records);
        }
        if census.instances == 0 {
            census.min_nodes = 0;
        }
        Self { seed, census, records, failures }
    }

    /// CSV with a schema comment; floats in `{:.16e}`.
    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        write_records(&self.records, out)
    }
}

pub const RECORD_SCHEMA: &str = "instance,suite,law,nodes,family,norm,discrepancy,threshold,pass";

pub fn write_records(records: &[LawRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# schema: {RECORD_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_SCHEMA.split(','))?;
    for r in records {
        w.write_record([
            r.instance.to_string(),
            r.suite.label().to_string(),
            r.law.to_string(),
            r.nodes.to_string(),
            r.family.label().to_string(),
            r.norm.label().to_string(),
            format!("{:.16e}", r.discrepancy),
            format!("{:.16e}", r.threshold),
            r.passed().to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    /// Node counts are drawn from `2..=max_nodes`.
    pub max_nodes: usize,
    /// Good measures sampled per instance for the projection law.
    pub good_samples: usize,
    /// Largest `n` of the admissible approximation.
    pub admissible_levels: usize,
    pub reduction: ReductionOptions,
}

impl SuiteOptions {
    pub fn new(seed: u64, instances: usize) -> Self {
        Self {
            seed,
            instances,
            max_nodes: 32,
            good_samples: 50,
            admissible_levels: 200,
            reduction: ReductionOptions::default(),
        }
    }
}

/// The three suites on instance streams that do not overlap.
pub fn run_all(opts: &SuiteOptions) -> PropertySuiteReport {
    let mut outcomes = Vec::new();
    for (offset, kind) in [(0u64, SuiteKind::Reduction), (1 << 32, SuiteKind::Apriori), (2 << 32, SuiteKind::Admissible)] {
        let instances = if kind == SuiteKind::Admissible { opts.instances.div_ceil(10) } else { opts.instances };
        outcomes.extend(run_kind(kind, offset, instances, opts));
    }
    PropertySuiteReport::merge(opts.seed, outcomes)
}

/// Reduction-operator laws.
pub fn reduction_suite(opts: &SuiteOptions) -> PropertySuiteReport {
    PropertySuiteReport::merge(opts.seed, run_kind(SuiteKind::Reduction, 0, opts.instances, opts))
}

/// A-priori bounds, subsolution barrier, gluing of subsolutions and comparison.
pub fn apriori_suite(opts: &SuiteOptions) -> PropertySuiteReport {
    PropertySuiteReport::merge(opts.seed, run_kind(SuiteKind::Apriori, 1 << 32, opts.instances, opts))
}

/// Decay and admissibility of `g_n = f(u_n) / n`.
pub fn admissible_suite(opts: &SuiteOptions) -> PropertySuiteReport {
    PropertySuiteReport::merge(opts.seed, run_kind(SuiteKind::Admissible, 2 << 32, opts.instances, opts))
}

fn run_kind(kind: SuiteKind, offset: u64, instances: usize, opts: &SuiteOptions) -> Vec<Outcome> {
    (0..instances)
        .into_par_iter()
        .map(|k| {
            let mut rng = instance_rng(opts.seed, offset + k as u64);
            let family = match kind {
                SuiteKind::Apriori if k % 2 == 1 => Family::Exponential,
                _ => Family::Cubic,
            };
            Instance::draw(&mut rng, k, kind, family, opts).evaluate(rng, opts)
        })
        .collect()
}

#[derive(Debug, Default)]
struct InstanceCensus {
    diffuse_masses: usize,
    concentrated_atoms: usize,
    negative_masses: usize,
    good_samples: usize,
    subsolutions: usize,
}

struct Outcome {
    nodes: usize,
    records: Vec<LawRecord>,
    census: InstanceCensus,
    reproduction: Reproduction,
}

struct Instance {
    index: usize,
    kind: SuiteKind,
    family: Family,
    disc: Discretization,
    f: Nonlinearity,
    mu: DiscreteMeasure,
    phi: DVector<f64>,
}

impl Instance {
    fn draw(rng: &mut ChaCha8Rng, index: usize, kind: SuiteKind, family: Family, opts: &SuiteOptions) -> Self {
        let n = rng.gen_range(2..=opts.max_nodes.max(2));
        let form = random_form(rng, n).expect("sampled forms are Markovian");
        let source = if index.is_multiple_of(2) { WeightSource::Constant } else { WeightSource::PrincipalEigenfunction };
        let disc = Discretization::with_weights(form, &source).expect("sampled forms are transient");
        let (f, coeff) = random_nonlinearity(rng, family, n).expect("finite coefficients");
        let raw = random_measure(rng, &disc);
        let mu = match kind {
            SuiteKind::Admissible => {
                // Keep the absorption at most comparable to the linear part:
                // c (R|mu|)^2 ||R 1|| <= 1.
                let reach = disc.green().apply_density(&DVector::from_element(n, 1.0)).amax();
                let cmax = coeff.iter().copied().fold(0.0, f64::max);
                normalise(&disc, &raw, (1.0 / (reach * cmax)).sqrt().min(1.5))
            }
            _ => normalise(&disc, &raw, rng.gen_range(0.5..2.5)),
        };
        let phi = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
        Self { index, kind, family, disc, f, mu, phi }
    }

    fn evaluate(self, mut rng: ChaCha8Rng, opts: &SuiteOptions) -> Outcome {
        let mut sink = Sink { instance: &self, records: Vec::new(), census: InstanceCensus::default() };
        let result = match self.kind {
            SuiteKind::Reduction => reduction_laws(&self, &mut rng, opts, &mut sink),
            SuiteKind::Apriori => apriori_laws(&self, &mut rng, opts, &mut sink),
            SuiteKind::Admissible => admissible_laws(&self, opts, &mut sink),
        };
        let detail = match result {
            Ok(()) => String::new(),
            Err(e) => {
                sink.push("evaluation", Norm::Flag, f64::INFINITY, 0.0);
                e.to_string()
            }
        };
        let Sink { records, mut census, .. } = sink;
        let mu = &self.mu;
        census.diffuse_masses = mu.diffuse_masses().iter().filter(|v| **v != 0.0).count();
        census.concentrated_atoms = mu.concentrated_masses().iter().filter(|v| **v != 0.0).count();
        census.negative_masses =
            mu.diffuse_masses().iter().chain(mu.concentrated_masses().iter()).filter(|v| **v < 0.0).count();
        let b = self.disc.form().matrix();
        Outcome {
            nodes: self.disc.len(),
            records,
            census,
            reproduction: Reproduction {
                suite: self.kind,
                seed: opts.seed,
                instance: self.index,
                laws: Vec::new(),
                form: (0..b.nrows()).map(|i| b.row(i).iter().copied().collect()).collect(),
                cells: self.disc.cells().iter().copied().collect(),
                mu_diffuse: mu.diffuse_masses().iter().copied().collect(),
                mu_concentrated: mu.concentrated_masses().iter().copied().collect(),
                nonlinearity: self.f.describe(),
                detail,
            },
        }
    }

    fn rho(&self) -> &DVector<f64> {
        &self.disc.weights().rho
    }

    fn reduce(&self, mu: &DiscreteMeasure, opts: &SuiteOptions) -> Result<ReductionReport, SolveError> {
        reduce(&self.disc, &self.f, mu, &self.phi, &opts.reduction)
    }

    fn star(&self, mu: &DiscreteMeasure, opts: &SuiteOptions) -> Result<DiscreteMeasure, SolveError> {
        Ok(self.reduce(mu, opts)?.mu_star)
    }
}

struct Sink<'a> {
    instance: &'a Instance,
    records: Vec<LawRecord>,
    census: InstanceCensus,
}

impl Sink<'_> {
    fn push(&mut self, law: &'static str, norm: Norm, discrepancy: f64, threshold: f64) {
        self.records.push(LawRecord {
            instance: self.instance.index,
            suite: self.instance.kind,
            law,
            nodes: self.instance.disc.len(),
            family: self.instance.family,
            norm,
            discrepancy,
            threshold,
        });
    }

    fn law(&mut self, law: &'static str, discrepancy: f64) {
        self.push(law, Norm::Rho, discrepancy, LAW_TOL);
    }

    fn flag(&mut self, law: &'static str, holds: bool) {
        self.push(law, Norm::Flag, if holds { 0.0 } else { 1.0 }, 0.0);
    }
}

/// Apply `op` to the diffuse and the concentrated copies and sum `rho_i op(a_i, b_i)`.
fn copywise(a: &DiscreteMeasure, b: &DiscreteMeasure, rho: &DVector<f64>, op: impl Fn(f64, f64) -> f64) -> f64 {
    let part = |x: &DVector<f64>, y: &DVector<f64>| (0..x.len()).map(|i| rho[i] * op(x[i], y[i])).sum::<f64>();
    part(a.diffuse_masses(), b.diffuse_masses()) + part(a.concentrated_masses(), b.concentrated_masses())
}

/// `|| a - b ||_rho`.
fn distance(a: &DiscreteMeasure, b: &DiscreteMeasure, rho: &DVector<f64>) -> f64 {
    copywise(a, b, rho, |x, y| (x - y).abs())
}

/// `|| (a - b)^+ ||_rho`, the violation of `a <= b`.
fn excess(a: &DiscreteMeasure, b: &DiscreteMeasure, rho: &DVector<f64>) -> f64 {
    copywise(a, b, rho, |x, y| (x - y).max(0.0))
}

/// `sum rho min(|a|, |b|)`, zero exactly for mutually singular measures.
fn overlap(a: &DiscreteMeasure, b: &DiscreteMeasure, rho: &DVector<f64>) -> f64 {
    copywise(a, b, rho, |x, y| x.abs().min(y.abs()))
}

fn complement(nodes: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|i| !nodes.contains(i)).collect()
}

fn reduction_laws(inst: &Instance, rng: &mut ChaCha8Rng, opts: &SuiteOptions, sink: &mut Sink) -> Result<(), SolveError> {
    let n = inst.disc.len();
    let rho = inst.rho();
    let mu = &inst.mu;
    let other = normalise(&inst.disc, &random_measure(rng, &inst.disc), rng.gen_range(0.5..2.5));
    let report = inst.reduce(mu, opts)?;
    let star = &report.mu_star;
    let (mu_d, mu_c) = mu.split_dc();

    sink.law("contraction", excess(&star.variation(), &mu.variation(), rho));
    sink.law("diffuse_preserved", distance(&star.split_dc().0, &mu_d, rho));
    sink.law("upper_bound", excess(star, mu, rho));
    sink.law("lower_bound", excess(&mu.negative_part().neg(), star, rho));
    sink.law("retained_part", excess(&report.nu.neg(), &DiscreteMeasure::zero(mu.space().clone()), rho)
        + excess(&report.nu, &mu_c.positive_part(), rho));
    sink.push("equation", Norm::Sup, report.equation_residual, LAW_TOL);

    let other_star = inst.star(&other, opts)?;
    sink.law("meet", distance(&inst.star(&mu.inf(&other)?, opts)?, &star.inf(&other_star)?, rho));
    sink.law("join", distance(&inst.star(&mu.sup(&other)?, opts)?, &star.sup(&other_star)?, rho));

    let part = random_subset(rng, n);
    let left = mu.restrict_to(&part)?;
    let right = other.restrict_to(&complement(&part, n))?;
    let (left_star, right_star) = (inst.star(&left, opts)?, inst.star(&right, opts)?);
    let joint = inst.star(&left.add(&right)?, opts)?;
    sink.law("orthogonal_additivity", distance(&joint, &left_star.add(&right_star)?, rho));
    sink.law("orthogonal_images", overlap(&left_star, &right_star, rho));

    let subset = random_subset(rng, n);
    sink.law("restriction", distance(&inst.star(&mu.restrict_to(&subset)?, opts)?, &star.restrict_to(&subset)?, rho));

    let smooth = random_diffuse_measure(rng, &inst.disc);
    sink.law("smooth_shift", distance(&inst.star(&mu.add(&smooth)?, opts)?, &star.add(&smooth)?, rho));

    let structure = mu_d.sub(&mu_c.negative_part())?.add(&inst.star(&mu_c.positive_part(), opts)?)?;
    sink.law("structure_formula", distance(star, &structure, rho));
    sink.law("concentrated_commutes", distance(&inst.star(&mu_c, opts)?, &star.split_dc().1, rho));

    let bump = random_positive_measure(rng, &inst.disc).scale(0.5);
    let larger = mu.add(&bump)?;
    let larger_report = inst.reduce(&larger, opts)?;
    sink.law("monotone", excess(star, &larger_report.mu_star, rho));
    sink.push("level_comparison", Norm::L1Rho, level_comparison(inst, &report, &larger_report), LAW_TOL);

    let positive = inst.star(&mu.positive_part(), opts)?;
    sink.law("positive_stays_positive", excess(&positive.neg(), &DiscreteMeasure::zero(mu.space().clone()), rho));

    let lower = reduce_min(&inst.disc, &inst.f, mu, &inst.phi, &opts.reduction)?;
    sink.law("minimal_side_above", excess(mu, &lower.mu_star, rho));

    let largest = largest_good_violation(inst, &report, rng, opts, sink)?;
    sink.law("largest_good_below", largest);

    let projected = project(&inst.disc, &inst.f, mu, &inst.phi, &opts.reduction)?;
    let minimal = projection_violation(inst, &projected, rng, opts, sink)?;
    sink.law("projection_minimal", minimal);

    let good = is_good(&inst.disc, &inst.f, mu, &opts.reduction.solver);
    sink.flag("good_iff_positive_good", good == is_good(&inst.disc, &inst.f, &mu.positive_part(), &opts.reduction.solver));
    sink.flag("good_iff_concentrated_good", good == is_good(&inst.disc, &inst.f, &mu_c, &opts.reduction.solver));
    let below = mu.sub(&bump)?;
    let sandwich = is_good(&inst.disc, &inst.f, &below, &opts.reduction.solver)
        && is_good(&inst.disc, &inst.f, &larger, &opts.reduction.solver);
    sink.flag("sandwich", !sandwich || good);

    sink.law("continuity_trend", continuity_violation(inst, star, &bump, opts)?);
    Ok(())
}

/// Solutions at a common truncation level are ordered like their data.
fn level_comparison(inst: &Instance, small: &ReductionReport, large: &ReductionReport) -> f64 {
    let rho = inst.rho();
    let cells = inst.disc.cells();
    small
        .levels
        .iter()
        .zip(&large.levels)
        .map(|(a, b)| (0..a.u.len()).map(|i| rho[i] * cells[i] * (a.u[i] - b.u[i]).max(0.0)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Good measures below `mu` lie below `mu*`; candidates are `mu` minus random positive measures.
fn largest_good_violation(
    inst: &Instance,
    report: &ReductionReport,
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    sink: &mut Sink,
) -> Result<f64, SolveError> {
    let rho = inst.rho();
    let mut worst: f64 = 0.0;
    for size in [0.1, 0.5, 2.0] {
        let candidate = inst.mu.sub(&random_positive_measure(rng, &inst.disc).scale(size))?;
        if is_good(&inst.disc, &inst.f, &candidate, &opts.reduction.solver) {
            sink.census.good_samples += 1;
            worst = worst.max(excess(&candidate, &report.mu_star, rho));
        }
    }
    Ok(worst)
}

/// `|mu - Pi(mu)| <= |mu - nu|` nodewise for sampled good `nu`.
fn projection_violation(
    inst: &Instance,
    projected: &DiscreteMeasure,
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    sink: &mut Sink,
) -> Result<f64, SolveError> {
    let rho = inst.rho();
    let gap = inst.mu.sub(projected)?.variation();
    let mut worst: f64 = 0.0;
    for _ in 0..opts.good_samples {
        let nu = normalise(&inst.disc, &random_measure(rng, &inst.disc), rng.gen_range(0.5..2.5));
        if !is_good(&inst.disc, &inst.f, &nu, &opts.reduction.solver) {
            continue;
        }
        sink.census.good_samples += 1;
        worst = worst.max(excess(&gap, &inst.mu.sub(&nu)?.variation(), rho));
    }
    Ok(worst)
}

/// `|| (mu + beta / k)* - mu* ||_rho` does not increase in `k`.
fn continuity_violation(
    inst: &Instance,
    star: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    opts: &SuiteOptions,
) -> Result<f64, SolveError> {
    let rho = inst.rho();
    let mut previous = f64::INFINITY;
    let mut worst: f64 = 0.0;
    for k in 1..=6 {
        let shifted = inst.mu.add(&beta.scale(1.0 / k as f64))?;
        let gap = distance(&inst.star(&shifted, opts)?, star, rho);
        worst = worst.max(gap - previous);
        previous = gap;
    }
    Ok(worst)
}

fn apriori_laws(inst: &Instance, rng: &mut ChaCha8Rng, opts: &SuiteOptions, sink: &mut Sink) -> Result<(), SolveError> {
    let disc = &inst.disc;
    let n = disc.len();
    let rho = inst.rho();
    let cells = disc.cells();
    let green = disc.green();
    let mu = &inst.mu;
    let solver = &opts.reduction.solver;

    let report = solve(disc, &inst.f, mu, solver)?;
    let u = &report.u;
    sink.push("residual", Norm::Sup, report.final_residual, solver.tol);
    let fu = eval_vec(&inst.f, u);
    let bound = green.apply_masses(&mu.variation().node_masses());
    let absorbed = green.apply_density(&fu.abs());
    let pointwise = (0..n).map(|i| u[i].abs() + absorbed[i] - bound[i]).fold(0.0, f64::max);
    sink.push("apriori_pointwise", Norm::Sup, pointwise, LAW_TOL);
    let l1: f64 = (0..n).map(|i| rho[i] * cells[i] * fu[i].abs()).sum();
    sink.push("apriori_l1", Norm::L1Rho, (l1 - mu.tv_norm(rho)?).max(0.0), LAW_TOL);

    // Subsolutions: the level-n seeds, the solution minus positive potentials, and their maxima.
    let (lower, upper) = apriori_bracket(disc, mu);
    let r_phi = green.apply_density(&inst.phi);
    let mut subs: Vec<DVector<f64>> = vec![lower.clone(), u.clone()];
    for level in [0.5, 2.0, 8.0] {
        subs.push(&lower - level * &r_phi);
    }
    for _ in 0..3 {
        let psi = DVector::from_fn(n, |_, _| if rng.gen_bool(0.5) { rng.gen_range(0.0..1.0) } else { 0.0 });
        subs.push(u - green.apply_density(&psi));
    }
    let mut certified = Vec::new();
    for s in &subs {
        if matches!(classify(disc, &inst.f, mu, s)?, Classification::Subsolution | Classification::Solution) {
            certified.push(s.clone());
        }
    }
    sink.flag("subsolutions_certified", certified.len() == subs.len());
    let mut glued_worst: f64 = 0.0;
    let pairs = certified.len().saturating_sub(1).min(4);
    for k in 0..pairs {
        let (joined, residual) = max_of_subsolutions(disc, &inst.f, mu, &certified[k], &certified[k + 1])?;
        glued_worst = glued_worst.max((-residual.nu.min() - residual.tolerance).max(0.0));
        certified.push(joined);
    }
    sink.push("max_of_subsolutions", Norm::Sup, glued_worst, 0.0);
    sink.census.subsolutions += certified.len();
    let barrier = certified
        .iter()
        .map(|s| (0..n).map(|i| s[i] - upper[i]).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    sink.push("subsolution_barrier", Norm::Sup, barrier, 1e-10);

    // Comparison: f <= max(f, -phi) and mu <= mu + bump.
    let phi: Vec<f64> = inst.phi.iter().copied().collect();
    let weaker = inst.f.truncated_below(1.0, phi);
    let larger = mu.add(&random_positive_measure(rng, disc).scale(0.5))?;
    let big = solve(disc, &weaker, &larger, solver)?;
    let comparison = (0..n).map(|i| u[i] - big.u[i]).fold(0.0, f64::max);
    sink.push("comparison", Norm::Sup, comparison, LAW_TOL);

    // The maximal solution between the a-priori bracket is also maximal in any inner bracket.
    let inner = solve_between(disc, &inst.f, mu, &certified[0], &upper, solver)?;
    sink.push("bracket_independence", Norm::Sup, (&inner.u - u).amax(), 10.0 * solver.tol);
    let classification = residual_measure(disc, &inst.f, mu, u)?.classification;
    sink.flag("solution_classified", classification == Classification::Solution);
    Ok(())
}

fn admissible_laws(inst: &Instance, opts: &SuiteOptions, sink: &mut Sink) -> Result<(), SolveError> {
    let steps = admissible_approx(&inst.disc, &inst.f, &inst.mu, opts.admissible_levels, &opts.reduction.solver)?;
    let first = steps[0].g_norm;
    let tail = steps.iter().filter(|s| s.n >= 100).map(|s| s.g_norm).fold(0.0, f64::max);
    let ratio = if first > 0.0 { tail / first } else if tail == 0.0 { 0.0 } else { f64::INFINITY };
    if opts.admissible_levels >= 100 {
        sink.push("decay_after_100", Norm::Ratio, ratio, 0.1);
    }
    let increases = steps.windows(2).map(|w| w[1].g_norm - w[0].g_norm).fold(0.0, f64::max);
    sink.push("decay_monotone", Norm::L1Rho, increases, LAW_TOL);
    sink.flag("admissible", steps.iter().all(|s| s.admissible));
    let gap = steps.iter().map(|s| s.recovery_gap).fold(0.0, f64::max);
    sink.push("recovery", Norm::Sup, gap, LAW_TOL);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SuiteOptions {
        SuiteOptions { max_nodes: 6, good_samples: 5, admissible_levels: 120, ..SuiteOptions::new(seed, 4) }
    }

    #[test]
    fn reduction_laws_hold_on_small_instances() {
        let report = reduction_suite(&small(3));
        let bad: Vec<_> = report.records.iter().filter(|r| !r.passed()).collect();
        assert!(bad.is_empty(), "{bad:?}\n{:?}", report.failures);
        assert_eq!(report.census.instances, 4);
    }

    #[test]
    fn apriori_and_admissible_hold() {
        let opts = small(5);
        assert!(apriori_suite(&opts).all_passed());
        let adm = admissible_suite(&opts);
        assert!(adm.all_passed(), "{:?}", adm.records);
    }

    #[test]
    fn csv_is_reproducible() {
        let opts = small(9);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_all(&opts).write_csv(&mut a).unwrap();
        run_all(&opts).write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("# schema: instance,suite,law"));
    }
}
