//! Reduced measures by truncation of the absorption, and derived constructions.

use nalgebra::DVector;

use crate::error::SolveError;
use crate::green::Discretization;
use crate::measure::DiscreteMeasure;
use crate::nonlinearity::Nonlinearity;
use crate::solver::{apriori_bracket, eval_vec, residual_measure, solve, solve_between, Classification, SolveReport, SolverOptions};

/// Increasing truncation levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule(Vec<f64>);

impl Default for Schedule {
    /// `1, 2, 4, ..., 16384`.
    fn default() -> Self {
        Self((0..15).map(|k| f64::from(1u32 << k)).collect())
    }
}

impl Schedule {
    pub fn new(levels: Vec<f64>) -> Result<Self, SolveError> {
        if levels.is_empty() {
            return Err(SolveError::InvalidOption("schedule is empty".into()));
        }
        if levels.iter().any(|v| !(v.is_finite() && *v > 0.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SolveError::InvalidOption("schedule must be positive and strictly increasing".into()));
        }
        Ok(Self(levels))
    }

    /// Geometric schedule `start:ratio:end`, e.g. `1:2:16384`.
    pub fn parse(literal: &str) -> Result<Self, SolveError> {
        let parts: Vec<f64> = literal
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| SolveError::InvalidOption(format!("malformed schedule {literal:?}")))?;
        let [start, ratio, end] = parts[..] else {
            return Err(SolveError::InvalidOption(format!("schedule must read start:ratio:end, got {literal:?}")));
        };
        if !(start > 0.0 && ratio > 1.0 && end >= start) {
            return Err(SolveError::InvalidOption(format!("schedule {literal:?} is not increasing")));
        }
        let mut levels = vec![start];
        while let Some(&last) = levels.last() {
            let next = last * ratio;
            if next > end * (1.0 + 1e-12) {
                break;
            }
            levels.push(next);
        }
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionOptions {
    pub schedule: Schedule,
    /// Stop once consecutive levels differ by at most this in sup norm.
    pub tol: f64,
    pub solver: SolverOptions,
}

impl Default for ReductionOptions {
    fn default() -> Self {
        Self { schedule: Schedule::default(), tol: 1e-9, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub level: f64,
    pub u: DVector<f64>,
    pub sup_change: Option<f64>,
    /// `sum_i rho_i m_i |f_n(u_n)_i|`.
    pub weighted_absorption: f64,
    /// Effective point source at the atoms: `sum_a mu_c(a) + m_a f_n(u_n(a))`.
    pub atom_mass: f64,
    /// Nodes where the truncation is active.
    pub truncated_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    pub levels: Vec<LevelTrace>,
    pub u_star: DVector<f64>,
    /// Reduced measure `-A u* - f(u*)`: diffuse part of `mu`, concentrated part on the atoms of `mu`.
    pub mu_star: DiscreteMeasure,
    /// Retained part of the positive atoms: `mu*_c = nu - mu_c^-` with `0 <= nu <= mu_c^+`.
    pub nu: DiscreteMeasure,
    /// Concentrated mass of `mu*` found away from the atoms of `mu`.
    pub defect: DVector<f64>,
    /// `|| B u* - M f(u*) - mu* ||_inf`.
    pub equation_residual: f64,
    pub converged: bool,
    /// `-mu^- <= mu* <= mu` up to `1e-8` relative.
    pub bounds_ok: bool,
}

/// Reduced limit of the truncated problems `f_n = max(f, -n phi)`.
///
/// Level `n` takes the maximal solution below the previous level's solution,
/// so the sequence decreases. The run stops when two levels agree to `tol`
/// or when no node is truncated (then the level solves the original problem).
pub fn reduce(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    phi: &DVector<f64>,
    opts: &ReductionOptions,
) -> Result<ReductionReport, SolveError> {
    let n = disc.len();
    if phi.len() != n {
        return Err(SolveError::Length { got: phi.len(), expected: n });
    }
    if let Some(bad) = phi.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(SolveError::Precondition(format!("truncation weight must be positive (node {bad})")));
    }
    let phi_vec: Vec<f64> = phi.iter().copied().collect();
    let (lower, mut upper) = apriori_bracket(disc, mu);
    let rho = &disc.weights().rho;
    let cells = disc.cells();
    let atoms = mu.concentrated_masses();

    let mut levels: Vec<LevelTrace> = Vec::new();
    let mut converged = false;
    let mut last_truncated = f.clone();
    for &level in opts.schedule.levels() {
        let truncated = f.truncated_below(level, phi_vec.clone());
        let report = solve_between(disc, &truncated, mu, &lower, &upper, &opts.solver)?;
        let u = report.u;
        let fu = eval_vec(&truncated, &u);
        let raw = eval_vec(f, &u);
        let sup_change = levels.last().map(|prev| (&prev.u - &u).amax());
        if let Some(prev) = levels.last() {
            let slack = 1e-12 * (1.0 + prev.u.amax());
            if let Some(i) = (0..n).find(|&i| u[i] > prev.u[i] + slack.max(opts.solver.tol)) {
                return Err(SolveError::InvariantViolation(format!(
                    "truncated solutions increased at node {i} between levels"
                )));
            }
        }
        let truncated_nodes = (0..n).filter(|&i| raw[i] < -level * phi[i]).count();
        let trace = LevelTrace {
            level,
            sup_change,
            weighted_absorption: (0..n).map(|i| rho[i] * cells[i] * fu[i].abs()).sum(),
            atom_mass: (0..n).filter(|&i| atoms[i] != 0.0).map(|i| atoms[i] + cells[i] * fu[i]).sum(),
            truncated_nodes,
            u: u.clone(),
        };
        levels.push(trace);
        upper = u;
        last_truncated = truncated;
        if sup_change.is_some_and(|c| c <= opts.tol) || truncated_nodes == 0 {
            converged = true;
            break;
        }
    }

    let u_star = upper;
    let f_star = eval_vec(f, &u_star);
    let f_level = eval_vec(&last_truncated, &u_star);
    let total = mu.node_masses() + (f_level - &f_star).component_mul(cells);
    let diffuse = mu.diffuse_masses().clone();
    let mut concentrated = &total - &diffuse;
    let mut defect = DVector::zeros(n);
    for i in 0..n {
        if atoms[i] == 0.0 {
            defect[i] = concentrated[i];
            concentrated[i] = 0.0;
        }
    }
    let space = mu.space().clone();
    let mu_star = DiscreteMeasure::from_parts(space.clone(), diffuse, concentrated.clone())?;
    let negative_atoms = atoms.map(|a| (-a).max(0.0));
    let nu = DiscreteMeasure::from_parts(space, DVector::zeros(n), concentrated + negative_atoms)?;

    let equation_residual =
        (disc.form().apply(&u_star) - f_star.component_mul(cells) - mu_star.node_masses() - &defect).amax();
    let scale = mu.node_masses().amax().max(mu.diffuse_masses().amax()).max(1.0);
    let bounds_ok = mu.negative_part().neg().le(&mu_star, 1e-8 * scale)? && mu_star.le(mu, 1e-8 * scale)?;
    Ok(ReductionReport { levels, u_star, mu_star, nu, defect, equation_residual, converged, bounds_ok })
}

/// Minimal-side reduction: `-reduce(reflected f, -mu)`.
pub fn reduce_min(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    phi: &DVector<f64>,
    opts: &ReductionOptions,
) -> Result<ReductionReport, SolveError> {
    let mut report = reduce(disc, &f.reflected(), &mu.neg(), phi, opts)?;
    for level in &mut report.levels {
        level.u = -&level.u;
        level.atom_mass = -level.atom_mass;
    }
    report.u_star = -report.u_star;
    report.mu_star = report.mu_star.neg();
    report.defect = -report.defect;
    Ok(report)
}

/// Projection onto good measures: `(mu^+)* + (-mu^-)_*`, certified by a solve.
pub fn project(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    phi: &DVector<f64>,
    opts: &ReductionOptions,
) -> Result<DiscreteMeasure, SolveError> {
    let upper = reduce(disc, f, &mu.positive_part(), phi, opts)?;
    let lower = reduce_min(disc, f, &mu.negative_part().neg(), phi, opts)?;
    let projected = upper.mu_star.add(&lower.mu_star)?;
    let report = solve(disc, f, &projected, &opts.solver)?;
    if report.final_residual > opts.solver.tol {
        return Err(SolveError::InvariantViolation(format!(
            "projected measure failed certification (residual {:e})",
            report.final_residual
        )));
    }
    Ok(projected)
}

/// A measure is good when its problem has a solution that reproduces it.
pub fn is_good(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure, opts: &SolverOptions) -> bool {
    match solve(disc, f, mu, opts) {
        Ok(report) => {
            report.final_residual <= opts.tol
                && residual_measure(disc, f, mu, &report.u).is_ok_and(|r| r.classification == Classification::Solution)
        }
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleStep {
    pub n: usize,
    pub u: DVector<f64>,
    /// Density `f(u_n) / n`.
    pub g: DVector<f64>,
    /// `sum_i rho_i m_i |g_i|`.
    pub g_norm: f64,
    /// `f(R(mu + g m))` is finite.
    pub admissible: bool,
    /// `|| R(mu + g m) - u_n ||_inf`.
    pub recovery_gap: f64,
}

/// Approximations `-A u_n = f(u_n)/n + mu` and the densities `g_n = f(u_n)/n`,
/// for which `mu + g_n` is admissible and `g_n -> 0`.
pub fn admissible_approx(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    n_max: usize,
    opts: &SolverOptions,
) -> Result<Vec<AdmissibleStep>, SolveError> {
    if n_max == 0 {
        return Err(SolveError::InvalidOption("n_max must be at least 1".into()));
    }
    let base = solve(disc, f, mu, opts)?;
    if base.final_residual > opts.tol {
        return Err(SolveError::Precondition("the measure is not good for f".into()));
    }
    let rho = &disc.weights().rho;
    let cells = disc.cells();
    let green = disc.green();
    let mut steps = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let scaled = f.scaled(1.0 / n as f64);
        let report = solve(disc, &scaled, mu, opts)?;
        let g = eval_vec(&scaled, &report.u);
        let recovered = green.apply_masses(&(mu.node_masses() + g.component_mul(cells)));
        let admissible = eval_vec(f, &recovered).iter().all(|v| v.is_finite());
        steps.push(AdmissibleStep {
            n,
            g_norm: (0..g.len()).map(|i| rho[i] * cells[i] * g[i].abs()).sum(),
            recovery_gap: (&recovered - &report.u).amax(),
            admissible,
            g,
            u: report.u,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExistenceReport {
    pub solution: SolveReport,
    /// Maximal solution of the upward reduction, a subsolution of the problem.
    pub lower: DVector<f64>,
    /// Maximal solution for the downward-reduced measure, a supersolution.
    pub upper: DVector<f64>,
}

/// Existence from a subsolution and a supersolution.
///
/// Both inputs are certified first. The bracket actually used comes from the
/// reductions of `mu`: the reduced solution `u*` and the maximal solution for
/// the minimal-side reduced measure.
pub fn existence_from_sub_super(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    sub: &DVector<f64>,
    sup: &DVector<f64>,
    opts: &ReductionOptions,
) -> Result<ExistenceReport, SolveError> {
    let n = disc.len();
    let phi = DVector::from_element(n, 1.0);
    for (v, expect_sub) in [(sub, true), (sup, false)] {
        let r = residual_measure(disc, f, mu, v)?;
        let ok = match r.classification {
            Classification::Solution => true,
            Classification::Subsolution => expect_sub,
            Classification::Supersolution => !expect_sub,
            Classification::Neither => false,
        };
        if !ok {
            return Err(if expect_sub {
                let node = r.nu.imin();
                SolveError::NotSubsolution { node, value: r.nu[node] }
            } else {
                let node = r.nu.imax();
                SolveError::NotSupersolution { node, value: r.nu[node] }
            });
        }
    }
    if let Some(node) = (0..n).find(|&i| sub[i] > sup[i] + 1e-12 * (1.0 + sup[i].abs())) {
        return Err(SolveError::BracketViolation { node, lower: sub[node], upper: sup[node] });
    }
    let upward = reduce(disc, f, mu, &phi, opts)?;
    let downward = reduce_min(disc, f, mu, &phi, opts)?;
    let top = solve(disc, f, &downward.mu_star, &opts.solver)?;
    let lower = upward.u_star;
    let upper = top.u;
    let solution = solve_between(disc, f, mu, &lower, &upper, &opts.solver)?;
    Ok(ExistenceReport { solution, lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::{FormMatrix, Provenance};
    use crate::measure::Tag;
    use crate::space::StateSpace;
    use nalgebra::DMatrix;

    fn fix1() -> Discretization {
        let space = StateSpace::abstract_nodes(1).unwrap();
        Discretization::new(FormMatrix::new(space, DMatrix::from_element(1, 1, 2.0), Provenance::Custom).unwrap()).unwrap()
    }

    fn atom(disc: &Discretization, mass: f64) -> DiscreteMeasure {
        DiscreteMeasure::zero(disc.form().space().clone()).with_atom(0, mass, Tag::Concentrated).unwrap()
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(Schedule::parse("1:2:16").unwrap().levels(), &[1.0, 2.0, 4.0, 8.0, 16.0]);
        assert_eq!(Schedule::default().levels().len(), 15);
        assert!(Schedule::parse("1:1:4").is_err());
        assert!(Schedule::parse("1:2").is_err());
    }

    #[test]
    fn finite_space_measure_is_its_own_reduction() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let mu = atom(&disc, 3.0);
        let report = reduce(&disc, &f, &mu, &DVector::from_element(1, 1.0), &ReductionOptions::default()).unwrap();
        assert!(report.converged && report.bounds_ok);
        assert!((report.u_star[0] - 1.0).abs() < 1e-9);
        assert!((report.mu_star.node_masses()[0] - 3.0).abs() < 1e-8);
        assert!((report.nu.node_masses()[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn admissible_densities_shrink() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let steps = admissible_approx(&disc, &f, &atom(&disc, 3.0), 10, &SolverOptions::default()).unwrap();
        assert!((steps[0].u[0] - 1.0).abs() < 1e-9 && (steps[0].g[0] + 1.0).abs() < 1e-9);
        assert!((steps[2].u[0] - 1.2072).abs() < 1e-3);
        assert!(steps.iter().all(|s| s.admissible && s.recovery_gap < 1e-9));
        assert!(steps[9].g_norm < steps[0].g_norm);
    }
}
