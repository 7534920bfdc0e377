//! Solvers for `B u = M f(u) + mu` between a subsolution and a supersolution.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::SolveError;
use crate::green::Discretization;
use crate::measure::DiscreteMeasure;
use crate::nonlinearity::Nonlinearity;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when `|| u - R f(u) - R mu ||_inf <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight of the fixed-point method.
    pub damping: f64,
    /// Use Newton shifts when the nonlinearity is nonincreasing.
    pub accelerate: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100_000, damping: 0.5, accelerate: true }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<(), SolveError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SolveError::InvalidOption(format!("tolerance must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolveError::InvalidOption(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iter == 0 {
            return Err(SolveError::InvalidOption("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonotoneFromAbove,
    MonotoneFromBelow,
    DampedPicard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub u: DVector<f64>,
    pub iterations: usize,
    /// `|| u - R f(u) - R mu ||_inf` at the returned iterate.
    pub final_residual: f64,
    /// `|u| + R|f(u)| <= R|mu|` holds up to `1e-8` relative.
    pub apriori_ok: bool,
    pub method: Method,
    /// Steps where the Newton shift had to be raised.
    pub shift_corrections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Solution,
    Subsolution,
    Supersolution,
    Neither,
}

/// Residual measure `nu = mu + M f(u) - B u` as node masses.
///
/// `nu >= 0` marks a subsolution and `nu <= 0` a supersolution, both up to
/// `tolerance`, which is relative to the size of the terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition {
    pub nu: DVector<f64>,
    pub classification: Classification,
    pub tolerance: f64,
}

const CLASSIFY_TOL: f64 = 1e-9;

pub fn residual_measure(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    u: &DVector<f64>,
) -> Result<ResidualDecomposition, SolveError> {
    check_inputs(disc, f, mu)?;
    check_len(u, disc.len())?;
    let fu = eval_vec(f, u);
    let masses = mu.node_masses();
    let bu = disc.form().apply(u);
    let cells = disc.cells();
    let nu = &masses + fu.component_mul(cells) - &bu;
    let scale = (0..u.len())
        .map(|i| masses[i].abs() + (cells[i] * fu[i]).abs() + bu[i].abs())
        .fold(1.0, f64::max);
    let tolerance = CLASSIFY_TOL * scale;
    let sub = nu.iter().all(|v| *v >= -tolerance);
    let sup = nu.iter().all(|v| *v <= tolerance);
    let classification = match (sub, sup) {
        (true, true) => Classification::Solution,
        (true, false) => Classification::Subsolution,
        (false, true) => Classification::Supersolution,
        (false, false) => Classification::Neither,
    };
    Ok(ResidualDecomposition { nu, classification, tolerance })
}

pub fn classify(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure, u: &DVector<f64>) -> Result<Classification, SolveError> {
    Ok(residual_measure(disc, f, mu, u)?.classification)
}

/// `|| u - R f(u) - R mu ||_inf`.
pub fn fixed_point_residual(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure, u: &DVector<f64>) -> f64 {
    let source = eval_vec(f, u).component_mul(disc.cells()) + mu.node_masses();
    (u - disc.green().apply_masses(&source)).amax()
}

/// Maximal solution between a certified subsolution `lower` and supersolution `upper`.
///
/// Monotone iteration from `upper` with shifted linear solves
/// `(B + Lambda M) u_next = M (f(u) + Lambda u) + mu`. For nonincreasing `f`
/// the shift is the Newton slope, raised whenever the new iterate would not be
/// a supersolution; otherwise it is the one-sided Lipschitz bound on the bracket.
pub fn solve_between(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport, SolveError> {
    opts.check()?;
    certify_bracket(disc, f, mu, lower, upper, opts.tol)?;
    let lower = lower.zip_map(upper, f64::min);
    let (u, iterations, shift_corrections) = descend(disc, f, mu, &lower, upper, opts)?;
    finish(disc, f, mu, u, iterations, Method::MonotoneFromAbove, shift_corrections)
}

/// Minimal solution between `lower` and `upper`, via the reflected problem.
pub fn minimal_between(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport, SolveError> {
    let mut report = solve_between(disc, &f.reflected(), &mu.neg(), &(-upper), &(-lower), opts)?;
    report.u = -report.u;
    report.method = Method::MonotoneFromBelow;
    Ok(report)
}

/// Maximal solution in the a-priori bracket `[-R mu^-, R mu^+]`, which holds every solution.
pub fn solve(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure, opts: &SolverOptions) -> Result<SolveReport, SolveError> {
    let (lower, upper) = apriori_bracket(disc, mu);
    solve_between(disc, f, mu, &lower, &upper, opts)
}

/// `(-R mu^-, R mu^+)`.
pub fn apriori_bracket(disc: &Discretization, mu: &DiscreteMeasure) -> (DVector<f64>, DVector<f64>) {
    let green = disc.green();
    (-green.apply_masses(&mu.negative_part().node_masses()), green.apply_masses(&mu.positive_part().node_masses()))
}

/// Damped Picard iteration for bounded problems.
///
/// `f` is clamped to the a-priori box `|y| <= R|mu|`, which leaves every
/// solution unchanged and makes it bounded by its envelope `g`. Each iterate
/// is checked against the invariant ball `|u - R mu| <= R g`.
pub fn solve_fixed_point(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    opts: &SolverOptions,
) -> Result<SolveReport, SolveError> {
    opts.check()?;
    check_inputs(disc, f, mu)?;
    let n = disc.len();
    let green = disc.green();
    let radius = green.apply_masses(&mu.variation().node_masses());
    let clamped = f.clamped(radius.iter().map(|r| -r).collect(), radius.iter().copied().collect());
    let envelope = DVector::from_fn(n, |i, _| clamped.envelope(i, -radius[i], radius[i]));
    let ball = green.apply_density(&envelope);
    let base = green.apply_masses(&mu.node_masses());
    let theta = opts.damping;
    let mut u = base.clone();
    for k in 1..=opts.max_iter {
        let image = green.apply_density(&eval_vec(&clamped, &u)) + &base;
        let next = (1.0 - theta) * &u + theta * &image;
        for i in 0..n {
            let slack = opts.tol * (1.0 + ball[i]);
            if (next[i] - base[i]).abs() > ball[i] + slack {
                return Err(SolveError::InvariantViolation(format!(
                    "iterate left the invariant ball at node {i}: |u - R mu| = {:e} > {:e}",
                    (next[i] - base[i]).abs(),
                    ball[i]
                )));
            }
        }
        let step = (&next - &u).amax();
        u = next;
        if step <= opts.tol * theta {
            let residual = fixed_point_residual(disc, f, mu, &u);
            if residual <= opts.tol {
                return finish(disc, f, mu, u, k, Method::DampedPicard, 0);
            }
        }
    }
    Err(SolveError::NoConvergence { iterations: opts.max_iter, residual: fixed_point_residual(disc, f, mu, &u) })
}

/// Pointwise maximum of two subsolutions and its residual measure.
pub fn max_of_subsolutions(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    first: &DVector<f64>,
    second: &DVector<f64>,
) -> Result<(DVector<f64>, ResidualDecomposition), SolveError> {
    for (v, which) in [(first, "first"), (second, "second")] {
        let r = residual_measure(disc, f, mu, v)?;
        if !matches!(r.classification, Classification::Subsolution | Classification::Solution) {
            let node = r.nu.imin();
            return Err(SolveError::Precondition(format!(
                "{which} argument is not a subsolution (residual {:e} at node {node})",
                r.nu[node]
            )));
        }
    }
    let joined = first.zip_map(second, f64::max);
    let residual = residual_measure(disc, f, mu, &joined)?;
    Ok((joined, residual))
}

pub(crate) fn eval_vec(f: &Nonlinearity, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| f.eval(i, u[i]))
}

fn check_len(v: &DVector<f64>, expected: usize) -> Result<(), SolveError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(SolveError::Length { got: v.len(), expected })
    }
}

fn check_inputs(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure) -> Result<(), SolveError> {
    check_len(&mu.node_masses(), disc.len())?;
    f.check_nodes(disc.len())?;
    Ok(())
}

fn certify_bracket(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    tol: f64,
) -> Result<(), SolveError> {
    check_inputs(disc, f, mu)?;
    check_len(lower, disc.len())?;
    check_len(upper, disc.len())?;
    let gap_tol = (1e-12 * lower.amax().max(upper.amax()).max(1.0)).max(10.0 * tol);
    if let Some(node) = (0..lower.len()).find(|&i| lower[i] > upper[i] + gap_tol) {
        return Err(SolveError::BracketViolation { node, lower: lower[node], upper: upper[node] });
    }
    let low = residual_measure(disc, f, mu, lower)?;
    if let Some(node) = (0..lower.len()).find(|&i| low.nu[i] < -low.tolerance) {
        return Err(SolveError::NotSubsolution { node, value: low.nu[node] });
    }
    let high = residual_measure(disc, f, mu, upper)?;
    if let Some(node) = (0..upper.len()).find(|&i| high.nu[i] > high.tolerance) {
        return Err(SolveError::NotSupersolution { node, value: high.nu[node] });
    }
    Ok(())
}

struct Shifted {
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Shifted {
    fn new(b: &DMatrix<f64>, shift: &DVector<f64>, cells: &DVector<f64>) -> Result<Self, SolveError> {
        let mut a = b.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += shift[i] * cells[i];
        }
        let factor = a
            .cholesky()
            .ok_or_else(|| SolveError::InvariantViolation("shifted form lost positive definiteness".into()))?;
        Ok(Self { factor })
    }

    fn step(&self, fu: &DVector<f64>, u: &DVector<f64>, shift: &DVector<f64>, cells: &DVector<f64>, masses: &DVector<f64>) -> DVector<f64> {
        let rhs = (fu + shift.component_mul(u)).component_mul(cells) + masses;
        self.factor.solve(&rhs)
    }
}

/// Monotone descent from `upper`; returns the limit, the iteration count and the shift corrections.
fn descend(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize, usize), SolveError> {
    let n = disc.len();
    let b = disc.form().matrix();
    let cells = disc.cells();
    let masses = mu.node_masses();
    let hat = f.clamped(lower.iter().copied().collect(), upper.iter().copied().collect());
    let newton = opts.accelerate && f.is_nonincreasing();
    let shift_cap = 1e8 * (0..n).map(|i| b[(i, i)] / cells[i]).fold(1.0, f64::max);

    let safe_shift = || -> Result<DVector<f64>, SolveError> {
        let mut s = DVector::zeros(n);
        for i in 0..n {
            s[i] = f.one_sided_lipschitz(i, lower[i], upper[i])?;
        }
        Ok(s)
    };
    let mut safe: Option<(DVector<f64>, Shifted)> = None;
    let mut use_newton = newton;
    if !use_newton {
        let s = safe_shift()?;
        let factor = Shifted::new(b, &s, cells)?;
        safe = Some((s, factor));
    }

    let mut u = upper.clone();
    let mut fu = eval_vec(&hat, &u);
    let mut corrections = 0usize;
    let mut stalled = 0usize;
    for k in 1..=opts.max_iter {
        let next = if use_newton {
            match newton_step(b, cells, &masses, &hat, &u, &fu, shift_cap)? {
                Some((next, bumped)) => {
                    corrections += bumped;
                    next
                }
                None => {
                    use_newton = false;
                    let s = safe_shift()?;
                    let factor = Shifted::new(b, &s, cells)?;
                    let next = factor.step(&fu, &u, &s, cells, &masses);
                    safe = Some((s, factor));
                    next
                }
            }
        } else {
            let (s, factor) = safe.as_ref().expect("safe shift prepared");
            factor.step(&fu, &u, s, cells, &masses)
        };

        let mut step = 0.0f64;
        let mut clipped = next;
        for i in 0..n {
            let slack = 1e-12 * (1.0 + u[i].abs());
            if clipped[i] > u[i] + slack.max(opts.tol * 1e-2) {
                return Err(SolveError::InvariantViolation(format!(
                    "monotone iteration increased at node {i}: {} -> {}",
                    u[i], clipped[i]
                )));
            }
            clipped[i] = clipped[i].min(u[i]).max(lower[i]);
            step = step.max(u[i] - clipped[i]);
        }
        u = clipped;
        fu = eval_vec(&hat, &u);
        let residual = fixed_point_residual(disc, f, mu, &u);
        if residual <= opts.tol {
            return Ok((u, k, corrections));
        }
        if step == 0.0 {
            stalled += 1;
            if stalled >= 3 {
                return Err(SolveError::NoConvergence { iterations: k, residual });
            }
        } else {
            stalled = 0;
        }
    }
    Err(SolveError::NoConvergence { iterations: opts.max_iter, residual: fixed_point_residual(disc, f, mu, &u) })
}

/// One Newton-shifted step that keeps the supersolution property, or `None`
/// when no acceptable shift was found.
fn newton_step(
    b: &DMatrix<f64>,
    cells: &DVector<f64>,
    masses: &DVector<f64>,
    hat: &Nonlinearity,
    u: &DVector<f64>,
    fu: &DVector<f64>,
    shift_cap: f64,
) -> Result<Option<(DVector<f64>, usize)>, SolveError> {
    let n = u.len();
    let mut shift = DVector::from_fn(n, |i, _| {
        let slope = -hat.derivative(i, u[i]);
        if slope.is_finite() {
            slope.clamp(0.0, shift_cap)
        } else {
            shift_cap
        }
    });
    for attempt in 0..40 {
        let next = Shifted::new(b, &shift, cells)?.step(fu, u, &shift, cells, masses);
        let f_next = eval_vec(hat, &next);
        let mut ok = true;
        for i in 0..n {
            let drop = u[i] - next[i];
            let gap = fu[i] + shift[i] * drop - f_next[i];
            let slack = 1e-12 * (fu[i].abs() + f_next[i].abs() + (shift[i] * drop).abs()) + 1e-300;
            if gap < -slack {
                ok = false;
                let chord = if drop > 0.0 { (f_next[i] - fu[i]) / drop } else { 0.0 };
                shift[i] = (2.0 * shift[i]).max(1.5 * chord).max(1e-8).min(shift_cap);
            }
        }
        if ok {
            return Ok(Some((next, attempt)));
        }
    }
    Ok(None)
}

fn finish(
    disc: &Discretization,
    f: &Nonlinearity,
    mu: &DiscreteMeasure,
    u: DVector<f64>,
    iterations: usize,
    method: Method,
    shift_corrections: usize,
) -> Result<SolveReport, SolveError> {
    let final_residual = fixed_point_residual(disc, f, mu, &u);
    let green = disc.green();
    let bound = green.apply_masses(&mu.variation().node_masses());
    let absorbed = green.apply_density(&eval_vec(f, &u).abs());
    let slack = 1e-8 * bound.amax().max(1.0);
    let apriori_ok = (0..u.len()).all(|i| u[i].abs() + absorbed[i] <= bound[i] + slack);
    Ok(SolveReport { u, iterations, final_residual, apriori_ok, method, shift_corrections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::{FormMatrix, Provenance};
    use crate::nonlinearity::BoundedShape;
    use crate::space::StateSpace;

    fn fix1() -> Discretization {
        let space = StateSpace::abstract_nodes(1).unwrap();
        Discretization::new(FormMatrix::new(space, DMatrix::from_element(1, 1, 2.0), Provenance::Custom).unwrap()).unwrap()
    }

    fn atom(disc: &Discretization, mass: f64) -> DiscreteMeasure {
        DiscreteMeasure::zero(disc.form().space().clone()).with_atom(0, mass, crate::Tag::Concentrated).unwrap()
    }

    #[test]
    fn cubic_single_node() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let report = solve(&disc, &f, &atom(&disc, 3.0), &SolverOptions::default()).unwrap();
        // 2u + u^3 = 3
        assert!((report.u[0] - 1.0).abs() < 1e-10);
        assert!(report.apriori_ok);
    }

    #[test]
    fn max_of_single_node_subsolutions() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let mu = atom(&disc, 3.0);
        let w = DVector::from_element(1, -1.0);
        // 3 + 1 + 2
        assert!((residual_measure(&disc, &f, &mu, &w).unwrap().nu[0] - 6.0).abs() < 1e-12);
        let (joined, r) = max_of_subsolutions(&disc, &f, &mu, &DVector::zeros(1), &w).unwrap();
        assert_eq!(joined[0], 0.0);
        assert!((r.nu[0] - 3.0).abs() < 1e-12);
        assert_eq!(r.classification, Classification::Subsolution);
    }

    #[test]
    fn fixed_point_tanh() {
        let disc = fix1();
        let f = Nonlinearity::bounded(1.0, BoundedShape::Tanh).unwrap();
        let report = solve_fixed_point(&disc, &f, &atom(&disc, 3.0), &SolverOptions::default()).unwrap();
        let u = report.u[0];
        assert!((2.0 * u + u.tanh() - 3.0).abs() < 1e-9);
        assert!((u - 1.0998).abs() < 1e-3);
    }

    #[test]
    fn bad_bracket_is_rejected() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let mu = atom(&disc, 3.0);
        let err = solve_between(&disc, &f, &mu, &DVector::from_element(1, 2.0), &DVector::from_element(1, 1.5), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, SolveError::BracketViolation { .. }));
        let err = solve_between(&disc, &f, &mu, &DVector::from_element(1, 1.2), &DVector::from_element(1, 1.5), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, SolveError::NotSubsolution { .. }));
    }

    #[test]
    fn safe_shift_matches_newton() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let mu = atom(&disc, -3.0);
        let fast = solve(&disc, &f, &mu, &SolverOptions::default()).unwrap();
        let slow = solve(&disc, &f, &mu, &SolverOptions { accelerate: false, ..Default::default() }).unwrap();
        assert!((fast.u[0] + 1.0).abs() < 1e-10);
        assert!((fast.u[0] - slow.u[0]).abs() < 1e-9);
    }

    #[test]
    fn residual_signs() {
        let disc = fix1();
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let mu = atom(&disc, 3.0);
        assert_eq!(classify(&disc, &f, &mu, &DVector::from_element(1, 0.0)).unwrap(), Classification::Subsolution);
        assert_eq!(classify(&disc, &f, &mu, &DVector::from_element(1, 2.0)).unwrap(), Classification::Supersolution);
        assert_eq!(classify(&disc, &f, &mu, &DVector::from_element(1, 1.0)).unwrap(), Classification::Solution);
    }
}
