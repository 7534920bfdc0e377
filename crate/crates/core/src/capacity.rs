//! Capacities of node sets and polarity verdicts under refinement.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::CapacityError;
use crate::form::{assemble, FormMatrix};
use crate::operator::OperatorSpec;
use crate::space::{build_space, GridSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityResult {
    /// `min { E(w, w) : w >= 1 on the set }`.
    pub value: f64,
    /// Equilibrium potential.
    pub potential: DVector<f64>,
    /// Equilibrium measure `B w`, carried by the set.
    pub equilibrium: DVector<f64>,
    /// Sup-norm of the projected-gradient step at the returned potential.
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CapacityOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 20_000 }
    }
}

/// Capacity of `set` by projected gradient with Barzilai-Borwein steps,
/// finished by an exact solve on the detected active set.
pub fn capacity(form: &FormMatrix, set: &[usize], opts: CapacityOptions) -> Result<CapacityResult, CapacityError> {
    let n = form.len();
    if set.is_empty() {
        return Err(CapacityError::EmptySet);
    }
    let mut in_set = vec![false; n];
    for &k in set {
        if k >= n {
            return Err(CapacityError::NodeOutOfRange { node: k, len: n });
        }
        in_set[k] = true;
    }
    form.check_markov()?;
    let b = form.matrix();
    let scale = b.amax().max(f64::MIN_POSITIVE);
    let project = |w: &mut DVector<f64>| {
        for i in 0..n {
            if in_set[i] && w[i] < 1.0 {
                w[i] = 1.0;
            }
        }
    };
    let kkt = |w: &DVector<f64>| -> f64 {
        let grad = 2.0 * (b * w) / scale;
        let mut step = w - &grad;
        project(&mut step);
        (step - w).amax()
    };

    let mut w = DVector::from_fn(n, |i, _| if in_set[i] { 1.0 } else { 0.0 });
    let mut grad = 2.0 * (b * &w);
    let mut step_len = 1.0 / (2.0 * scale * n as f64);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut next = &w - step_len * &grad;
        project(&mut next);
        let next_grad = 2.0 * (b * &next);
        let s = &next - &w;
        let y = &next_grad - &grad;
        let sy = s.dot(&y);
        w = next;
        grad = next_grad;
        if kkt(&w) <= opts.tol.max(1e-6) {
            break;
        }
        step_len = if sy > 0.0 { s.dot(&s) / sy } else { 1.0 / (2.0 * scale) };
    }

    let active: Vec<bool> = (0..n).map(|i| in_set[i] && w[i] <= 1.0 + 1e-6).collect();
    let polished = solve_active(b, &active)?;
    let mut best = w;
    if polished.iter().enumerate().all(|(i, v)| !in_set[i] || *v >= 1.0 - 1e-12) && kkt(&polished) <= kkt(&best) {
        best = polished;
    }
    let residual = kkt(&best);
    if residual > opts.tol {
        return Err(CapacityError::NoConvergence(residual));
    }
    let equilibrium = b * &best;
    Ok(CapacityResult { value: best.dot(&equilibrium), potential: best, equilibrium, kkt_residual: residual, iterations })
}

/// Minimiser with `w = 1` on the active nodes and free elsewhere.
fn solve_active(b: &DMatrix<f64>, active: &[bool]) -> Result<DVector<f64>, CapacityError> {
    let n = active.len();
    let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
    let mut w = DVector::from_fn(n, |i, _| if active[i] { 1.0 } else { 0.0 });
    if free.is_empty() {
        return Ok(w);
    }
    let b_ff = DMatrix::from_fn(free.len(), free.len(), |r, c| b[(free[r], free[c])]);
    let rhs = DVector::from_fn(free.len(), |r, _| -(0..n).filter(|&j| active[j]).map(|j| b[(free[r], j)]).sum::<f64>());
    let chol = b_ff.cholesky().ok_or(CapacityError::NotTransient)?;
    let sol = chol.solve(&rhs);
    for (r, &i) in free.iter().enumerate() {
        w[i] = sol[r];
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityVerdict {
    Polar,
    NonPolar,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolarityReport {
    pub levels: Vec<(f64, f64)>,
    /// Fitted exponent in `cap ~ h^beta`.
    pub exponent: f64,
    pub verdict: PolarityVerdict,
}

/// Classify a capacity sequence `(h, cap)` by its log-log slope.
///
/// Polar when the slope is at least 0.1 and the last capacity is at most half
/// the first, non-polar when the slope is below 0.1 and the last exceeds half
/// the first, inconclusive otherwise.
pub fn polarity_verdict(levels: &[(f64, f64)]) -> Result<PolarityReport, CapacityError> {
    if levels.len() < 3 {
        return Err(CapacityError::TooFewLevels(levels.len()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let xs: Vec<f64> = sorted.iter().map(|l| l.0.ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|l| l.1.max(f64::MIN_POSITIVE).ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    let (first, last) = (sorted[0].1, sorted[sorted.len() - 1].1);
    let verdict = if exponent >= 0.1 && last <= 0.5 * first {
        PolarityVerdict::Polar
    } else if exponent < 0.1 && last > 0.5 * first {
        PolarityVerdict::NonPolar
    } else {
        PolarityVerdict::Inconclusive
    };
    Ok(PolarityReport { levels: sorted, exponent, verdict })
}

/// Capacity of the node nearest `site` on each grid of a refinement ladder.
pub fn point_capacity_ladder(
    grids: &[GridSpec],
    operator: &OperatorSpec,
    site: &[f64],
    opts: CapacityOptions,
) -> Result<PolarityReport, CapacityError> {
    let mut levels = Vec::with_capacity(grids.len());
    for grid in grids {
        let space = build_space(grid)?;
        let form = assemble(&space, operator)?;
        let node = space
            .nearest_node(site)
            .ok_or_else(|| CapacityError::Form(crate::error::FormError::InvalidGrid("site dimension mismatch".into())))?;
        levels.push((grid.h, capacity(&form, &[node], opts)?.value));
    }
    polarity_verdict(&levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::Provenance;
    use crate::space::StateSpace;

    fn fix2() -> FormMatrix {
        let space = StateSpace::abstract_nodes(2).unwrap();
        FormMatrix::new(space, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]), Provenance::Custom).unwrap()
    }

    #[test]
    fn two_node_capacity() {
        let result = capacity(&fix2(), &[0], CapacityOptions::default()).unwrap();
        assert!((result.value - 1.5).abs() < 1e-12);
        assert!((result.potential[1] - 0.5).abs() < 1e-12);
        assert!(result.equilibrium[1].abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range_sets() {
        assert_eq!(capacity(&fix2(), &[], CapacityOptions::default()).unwrap_err(), CapacityError::EmptySet);
        assert!(matches!(capacity(&fix2(), &[7], CapacityOptions::default()), Err(CapacityError::NodeOutOfRange { .. })));
    }

    #[test]
    fn local_point_capacity_is_mesh_independent() {
        let grids: Vec<GridSpec> = [0.25, 0.125, 0.0625, 0.03125].iter().map(|&h| GridSpec::interval(-1.0, 1.0, h)).collect();
        let report = point_capacity_ladder(&grids, &OperatorSpec::laplacian(), &[0.0], CapacityOptions::default()).unwrap();
        for (_, cap) in &report.levels {
            assert!((cap - 2.0).abs() < 1e-9);
        }
        assert_eq!(report.verdict, PolarityVerdict::NonPolar);
    }

    #[test]
    fn verdict_needs_three_levels() {
        assert_eq!(polarity_verdict(&[(1.0, 1.0), (0.5, 1.0)]).unwrap_err(), CapacityError::TooFewLevels(2));
    }
}
