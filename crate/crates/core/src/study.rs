//! Refinement studies: how much of a point mass survives reduction as the grid is refined.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{FormError, SolveError};
use crate::form::assemble;
use crate::green::{Discretization, WeightSource};
use crate::measure::{DiscreteMeasure, Tag};
use crate::nonlinearity::{check_equivalence, Nonlinearity};
use crate::operator::OperatorSpec;
use crate::reduction::{reduce, ReductionOptions};
use crate::space::{build_space, GridSpec};

/// A point mass at a physical site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteAtom {
    pub site: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Mesh sizes, at least four.
    pub ladder: Vec<f64>,
    pub operator: OperatorSpec,
    pub nonlinearity: Nonlinearity,
    pub atom: Option<SiteAtom>,
    /// Constant diffuse density added to the atom.
    pub density: f64,
    /// Constant truncation weight.
    pub phi: f64,
    pub weights: WeightSource,
    pub reduction: ReductionOptions,
    /// Largest admissible node count on any level.
    pub max_nodes: usize,
}

impl StudyConfig {
    fn grid(&self, h: f64) -> GridSpec {
        GridSpec { dim: self.dim, lower: self.lower.clone(), upper: self.upper.clone(), h }
    }

    /// Node cap: 4096 in 1D, 64^2 in 2D.
    pub fn default_max_nodes(_dim: usize) -> usize {
        4096
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyLevel {
    pub h: f64,
    pub nodes: usize,
    /// Fitted point-source strength of the reduced solution divided by the atom mass.
    pub retention: f64,
    /// `sum_i varrho_i m_i |u*_i|`.
    pub weighted_l1: f64,
    pub reduced_mass: f64,
    pub converged: bool,
    pub truncation_levels: usize,
    #[serde(skip)]
    pub runtime: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionVerdict {
    Reduced,
    Retained,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub levels: Vec<StudyLevel>,
    /// Rank correlation of mesh size against retention.
    pub spearman: f64,
    /// Retention on the coarsest level minus retention on the finest.
    pub drop: f64,
    pub verdict: RetentionVerdict,
}

/// Study-level failures.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("at least four ladder levels are required, got {0}")]
    TooFewLevels(usize),
    #[error("level h = {h} needs {nodes} nodes, above the cap of {cap}")]
    TooLarge { h: f64, nodes: usize, cap: usize },
    #[error("atom site has dimension {got}, expected {expected}")]
    SiteDimension { got: usize, expected: usize },
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Nonlinearity(#[from] crate::error::NonlinearityError),
    #[error(transparent)]
    Measure(#[from] crate::error::MeasureError),
}

impl StudyError {
    /// Whether the failure comes from invalid input rather than a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Solve(e) => !matches!(e, SolveError::NoConvergence { .. } | SolveError::InvariantViolation(_)),
            _ => true,
        }
    }
}

/// Run the reduction on every ladder level and classify the retention trend.
pub fn refinement_study(config: &StudyConfig) -> Result<StudyReport, StudyError> {
    if config.ladder.len() < 4 {
        return Err(StudyError::TooFewLevels(config.ladder.len()));
    }
    if let Some(atom) = &config.atom {
        if atom.site.len() != config.dim {
            return Err(StudyError::SiteDimension { got: atom.site.len(), expected: config.dim });
        }
    }
    for &h in &config.ladder {
        let grid = config.grid(h);
        let nodes: usize = (0..config.dim)
            .map(|a| (((grid.upper[a] - grid.lower[a]) / h).round() as usize).saturating_sub(1))
            .product();
        if nodes > config.max_nodes {
            return Err(StudyError::TooLarge { h, nodes, cap: config.max_nodes });
        }
    }
    let mut levels = Vec::with_capacity(config.ladder.len());
    for &h in &config.ladder {
        levels.push(study_level(config, &config.nonlinearity, h)?.0);
    }
    Ok(summarise(levels))
}

/// One ladder level: returns the level summary and the reduced measure.
fn study_level(config: &StudyConfig, f: &Nonlinearity, h: f64) -> Result<(StudyLevel, DiscreteMeasure, Discretization), StudyError> {
    let started = Instant::now();
    let space = build_space(&config.grid(h))?;
    let form = assemble(&space, &config.operator)?;
    let disc = Discretization::with_weights(form, &config.weights)?;
    let n = disc.len();
    let mut mu = DiscreteMeasure::from_density(space.clone(), &DVector::from_element(n, config.density))?;
    let mut atom_node = None;
    if let Some(atom) = &config.atom {
        let node = space.nearest_node(&atom.site).expect("site dimension checked");
        mu = mu.with_atom(node, atom.mass, Tag::Concentrated)?;
        atom_node = Some((node, atom.mass));
    }
    let phi = DVector::from_element(n, config.phi);
    let report = reduce(&disc, f, &mu, &phi, &config.reduction)?;
    let rho = &disc.weights().rho;
    let retention = match atom_node {
        Some((node, mass)) => {
            let diffuse_potential = disc.green().apply_masses(mu.diffuse_masses());
            let signal = &report.u_star - diffuse_potential;
            fit_retention(&space, &disc, &signal, node, h) / mass
        }
        None => report.mu_star.tv_norm(rho)? / mu.tv_norm(rho)?.max(f64::MIN_POSITIVE),
    };
    let varrho = &disc.weights().varrho;
    let cells = disc.cells();
    let level = StudyLevel {
        h,
        nodes: n,
        retention,
        weighted_l1: (0..n).map(|i| varrho[i] * cells[i] * report.u_star[i].abs()).sum(),
        reduced_mass: report.mu_star.tv_norm(rho)?,
        converged: report.converged,
        truncation_levels: report.levels.len(),
        runtime: started.elapsed(),
    };
    Ok((level, report.mu_star, disc))
}

/// Least-squares coefficient of `signal` against the Green column of `node`
/// over the annulus `2h <= |x - x_node| <= 8h`, with a smooth radial
/// background `a + b r^2` fitted alongside.
fn fit_retention(space: &crate::space::StateSpace, disc: &Discretization, signal: &DVector<f64>, node: usize, h: f64) -> f64 {
    let column = disc.green().column(node);
    let mut rows = Vec::new();
    for i in 0..space.len() {
        let r = space.distance(i, node);
        if r >= 2.0 * h * (1.0 - 1e-9) && r <= 8.0 * h * (1.0 + 1e-9) {
            rows.push((column[i], (r / h).powi(2), signal[i]));
        }
    }
    if rows.len() < 3 {
        return f64::NAN;
    }
    let design = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => rows[i].0,
        1 => 1.0,
        _ => rows[i].1,
    });
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    design.svd(true, true).solve(&target, 1e-12).map_or(f64::NAN, |c| c[0])
}

fn summarise(levels: Vec<StudyLevel>) -> StudyReport {
    let hs: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let rs: Vec<f64> = levels.iter().map(|l| l.retention).collect();
    let spearman = spearman(&hs, &rs);
    let coarse = levels.iter().max_by(|a, b| a.h.total_cmp(&b.h)).map_or(f64::NAN, |l| l.retention);
    let fine = levels.iter().min_by(|a, b| a.h.total_cmp(&b.h)).map_or(f64::NAN, |l| l.retention);
    let drop = coarse - fine;
    let min_retention = rs.iter().copied().fold(f64::INFINITY, f64::min);
    let verdict = if spearman >= 0.8 && drop > 0.0 {
        RetentionVerdict::Reduced
    } else if min_retention >= 0.9 {
        RetentionVerdict::Retained
    } else {
        RetentionVerdict::Inconclusive
    };
    StudyReport { levels, spearman, drop, verdict }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = 0.5 * (start + end) as f64 + 1.0;
        for &k in &order[start..=end] {
            out[k] = rank;
        }
        start = end + 1;
    }
    out
}

/// Constants of the equivalence spot-check `c1 <= |g|/|f| <= c2` for `|y| >= r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceBounds {
    pub c1: f64,
    pub c2: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceLevel {
    pub h: f64,
    /// `|| mu*_f - mu*_g ||_rho`.
    pub reduced_gap: f64,
    pub retention_f: f64,
    pub retention_g: f64,
    pub retention_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub levels: Vec<EquivalenceLevel>,
    pub verdict_f: RetentionVerdict,
    pub verdict_g: RetentionVerdict,
}

/// Compare reductions under `f` (from the config) and an equivalent `g` along the ladder.
pub fn asymptotic_equivalence_study(
    config: &StudyConfig,
    g: &Nonlinearity,
    bounds: EquivalenceBounds,
) -> Result<EquivalenceReport, StudyError> {
    if config.ladder.len() < 4 {
        return Err(StudyError::TooFewLevels(config.ladder.len()));
    }
    let coarsest = config.ladder.iter().copied().fold(0.0, f64::max);
    let probe_nodes = build_space(&config.grid(coarsest))?.len();
    check_equivalence(&config.nonlinearity, g, probe_nodes, bounds.c1, bounds.c2, bounds.r)?;
    if config.density < 0.0 || config.atom.as_ref().is_some_and(|a| a.mass < 0.0) {
        return Err(StudyError::Solve(SolveError::Precondition("the equivalence study needs a nonnegative measure".into())));
    }
    let mut rows = Vec::new();
    let (mut lf, mut lg) = (Vec::new(), Vec::new());
    for &h in &config.ladder {
        let (level_f, star_f, disc) = study_level(config, &config.nonlinearity, h)?;
        let (level_g, star_g, _) = study_level(config, g, h)?;
        rows.push(EquivalenceLevel {
            h,
            reduced_gap: star_f.sub(&star_g)?.tv_norm(&disc.weights().rho)?,
            retention_f: level_f.retention,
            retention_g: level_g.retention,
            retention_gap: (level_f.retention - level_g.retention).abs(),
        });
        lf.push(level_f);
        lg.push(level_g);
    }
    Ok(EquivalenceReport { levels: rows, verdict_f: summarise(lf).verdict, verdict_g: summarise(lg).verdict })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_handles_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn short_ladder_is_rejected() {
        let config = StudyConfig {
            dim: 1,
            lower: vec![-1.0],
            upper: vec![1.0],
            ladder: vec![0.5, 0.25, 0.125],
            operator: OperatorSpec::laplacian(),
            nonlinearity: Nonlinearity::power(3.0, 1.0).unwrap(),
            atom: Some(SiteAtom { site: vec![0.0], mass: 1.0 }),
            density: 0.0,
            phi: 1.0,
            weights: WeightSource::Constant,
            reduction: ReductionOptions::default(),
            max_nodes: 4096,
        };
        assert_eq!(refinement_study(&config).unwrap_err(), StudyError::TooFewLevels(3));
    }
}
