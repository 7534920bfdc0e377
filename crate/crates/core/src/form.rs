//! Dirichlet-form matrices and their assembly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::FormError;
use crate::measure::DiscreteMeasure;
use crate::operator::{DiffusionTensor, KernelCoefficient, OperatorSpec, ScaleFunction};
use crate::space::{euclid, StateSpace};

/// How a form matrix came about.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Local,
    Nonlocal,
    Restricted { parent_len: usize },
    Perturbed,
    Resurrected,
    Custom,
}

/// Symmetric matrix `B` with `E(u, v) = u^T B v` on a finite state space.
///
/// Validated forms are Markovian: off-diagonal entries are nonpositive and
/// row sums (the killing) are nonnegative, up to a tolerance relative to `max |B|`.
#[derive(Debug, Clone)]
pub struct FormMatrix {
    space: Arc<StateSpace>,
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

const SYMMETRY_TOL: f64 = 1e-12;
const MARKOV_TOL: f64 = 1e-12;

impl FormMatrix {
    /// Wrap a matrix, checking shape, symmetry and the Markov property.
    pub fn new(space: Arc<StateSpace>, matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self, FormError> {
        let form = Self::symmetric(space, matrix, provenance)?;
        form.check_markov()?;
        Ok(form)
    }

    /// Wrap a symmetric matrix without the Markov check.
    pub fn symmetric(space: Arc<StateSpace>, matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self, FormError> {
        let n = space.len();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(FormError::ShapeMismatch { rows: matrix.nrows(), cols: matrix.ncols(), len: n });
        }
        let scale = max_abs(&matrix).max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in i + 1..n {
                let gap = (matrix[(i, j)] - matrix[(j, i)]).abs();
                if !(gap <= SYMMETRY_TOL * scale) {
                    return Err(FormError::NotSymmetric { i, j, gap });
                }
            }
        }
        Ok(Self { space, matrix, provenance })
    }

    pub fn check_markov(&self) -> Result<(), FormError> {
        let n = self.len();
        let tol = MARKOV_TOL * max_abs(&self.matrix);
        for i in 0..n {
            for j in 0..n {
                if i != j && self.matrix[(i, j)] > tol {
                    return Err(FormError::NotMarkovian(format!(
                        "positive off-diagonal entry {:e} at ({i}, {j})",
                        self.matrix[(i, j)]
                    )));
                }
            }
            let row: f64 = self.matrix.row(i).sum();
            if row < -tol * n as f64 {
                return Err(FormError::NotMarkovian(format!("negative row sum {row:e} at node {i}")));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn cell_measure(&self) -> DVector<f64> {
        DVector::from_column_slice(self.space.cell_measure())
    }

    pub fn energy(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&(&self.matrix * v))
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u
    }

    /// Row sums, i.e. the killing weight at each node.
    pub fn killing(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.matrix.row_iter().map(|r| r.sum()))
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Discretise `spec` on `space`.
pub fn assemble(space: &Arc<StateSpace>, spec: &OperatorSpec) -> Result<FormMatrix, FormError> {
    match spec {
        OperatorSpec::Local { tensor, exterior } => assemble_local(space, tensor, *exterior),
        OperatorSpec::Nonlocal { kernel, scale, exterior, near_diagonal_correction, .. } => {
            assemble_nonlocal(space, kernel, scale, *exterior, *near_diagonal_correction)
        }
    }
}

/// Two-point flux scheme for `-div(a grad u)` on a grid space.
///
/// Each nearest-neighbour edge gets weight `a_kk(midpoint) h^(d-2)`; an edge to a
/// boundary point adds the same weight to the diagonal when `exterior` is set.
pub fn assemble_local(space: &Arc<StateSpace>, tensor: &DiffusionTensor, exterior: bool) -> Result<FormMatrix, FormError> {
    let h = space
        .mesh_size()
        .ok_or_else(|| FormError::InvalidGrid("local operators need a grid space".into()))?;
    let dim = space.dim();
    let scale = h.powi(dim as i32 - 2);
    let n = space.len();
    let mut b = DMatrix::zeros(n, n);

    let edge_weight = |point: &[f64], axis: usize| -> Result<f64, FormError> {
        let a = tensor.at(point);
        check_elliptic(&a, dim, point)?;
        Ok(a[axis][axis] * scale)
    };

    for i in 0..n {
        for (axis, nb) in space.forward_neighbours(i).into_iter().enumerate() {
            let Some(j) = nb else { continue };
            let mid: Vec<f64> = space.position(i).iter().zip(space.position(j)).map(|(a, b)| 0.5 * (a + b)).collect();
            let w = edge_weight(&mid, axis)?;
            b[(i, j)] -= w;
            b[(j, i)] -= w;
            b[(i, i)] += w;
            b[(j, j)] += w;
        }
        if exterior {
            for (axis, face) in space.boundary_faces(i) {
                let mut mid = space.position(i).to_vec();
                mid[axis] = face;
                b[(i, i)] += edge_weight(&mid, axis)?;
            }
        }
    }
    FormMatrix::new(space.clone(), b, Provenance::Local)
}

fn check_elliptic(a: &[[f64; 2]; 2], dim: usize, point: &[f64]) -> Result<(), FormError> {
    let finite = a.iter().flatten().all(|v| v.is_finite());
    if dim == 1 {
        return if finite && a[0][0] > 0.0 { Ok(()) } else { Err(FormError::NotElliptic(point.to_vec())) };
    }
    if !finite || (a[0][1] - a[1][0]).abs() > 1e-12 * (a[0][0].abs() + a[1][1].abs()) {
        return Err(FormError::NotElliptic(point.to_vec()));
    }
    if a[0][0] <= 0.0 || a[0][0] * a[1][1] - a[0][1] * a[1][0] <= 0.0 {
        return Err(FormError::NotElliptic(point.to_vec()));
    }
    if a[0][1] != 0.0 {
        return Err(FormError::CrossDiffusionUnsupported);
    }
    Ok(())
}

/// Jump-kernel discretisation with cell masses as quadrature weights.
///
/// Off-diagonal entries are `-m_i m_j a(x_i, x_j) / (r^d phi(r))`. The killing at
/// node `i` integrates the kernel over the region outside the cell union,
/// `m_i int a T(r(theta)) dtheta` with `T` the radial tail of `1/(r phi)`. The
/// short-range part `|z| < h` is replaced by a nearest-neighbour stencil with
/// coefficient `(|S^(d-1)| / 2d) int_0^h r/phi(r) dr` when `correction` is set.
pub fn assemble_nonlocal(
    space: &Arc<StateSpace>,
    kernel: &KernelCoefficient,
    scale: &ScaleFunction,
    exterior: bool,
    correction: bool,
) -> Result<FormMatrix, FormError> {
    scale.validate()?;
    let dim = space.dim();
    if dim == 0 || dim > 2 {
        return Err(FormError::UnsupportedDimension(dim));
    }
    let n = space.len();
    let cells = space.cell_measure();
    let (lower, upper) = kernel.bounds();
    if !(lower > 0.0 && lower <= upper && upper.is_finite()) {
        return Err(FormError::InvalidScale(format!("kernel bounds [{lower}, {upper}] are invalid")));
    }
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi = space.position(i);
        for j in i + 1..n {
            let xj = space.position(j);
            let a = kernel.at(xi, xj);
            let back = kernel.at(xj, xi);
            if (a - back).abs() > 1e-12 * a.abs().max(back.abs()) {
                return Err(FormError::KernelNotSymmetric(i, j));
            }
            if !(a >= lower * (1.0 - 1e-12) && a <= upper * (1.0 + 1e-12)) {
                return Err(FormError::CoefficientOutOfBounds { i, j, value: a, lower, upper });
            }
            let r = euclid(xi, xj);
            let w = cells[i] * cells[j] * a / (r.powi(dim as i32) * scale.eval(r));
            b[(i, j)] = -w;
            b[(j, i)] = -w;
        }
    }

    if correction {
        if let Some(h) = space.mesh_size() {
            let sphere = if dim == 1 { 2.0 } else { 2.0 * std::f64::consts::PI };
            let c_loc = sphere / (2.0 * dim as f64) * scale.core(h)? * h.powi(dim as i32 - 2);
            for i in 0..n {
                for j in space.forward_neighbours(i).into_iter().flatten() {
                    let w = c_loc * kernel.at(space.position(i), space.position(j));
                    b[(i, j)] -= w;
                    b[(j, i)] -= w;
                }
            }
        }
    }

    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| b[(i, j)]).sum();
        b[(i, i)] = -off;
    }

    if exterior {
        let ext = space.exterior().ok_or(FormError::MissingExterior)?;
        for i in 0..n {
            let x = space.position(i);
            let a = kernel.at(x, x);
            let angular = if dim == 1 {
                scale.tail(ext.exit_distance(x, &[-1.0]))? + scale.tail(ext.exit_distance(x, &[1.0]))?
            } else {
                planar_exit_integral(x, ext, scale)?
            };
            b[(i, i)] += cells[i] * a * angular;
        }
    }
    FormMatrix::new(space.clone(), b, Provenance::Nonlocal)
}

/// `int_0^{2 pi} T(r(theta)) dtheta` for a point inside a rectangle, split at the corner angles.
fn planar_exit_integral(x: &[f64], ext: &crate::space::Exterior, scale: &ScaleFunction) -> Result<f64, FormError> {
    use std::f64::consts::TAU;
    let corners = [
        (ext.upper[0], ext.upper[1]),
        (ext.lower[0], ext.upper[1]),
        (ext.lower[0], ext.lower[1]),
        (ext.upper[0], ext.lower[1]),
    ];
    let mut cuts: Vec<f64> = corners
        .iter()
        .map(|(cx, cy)| (cy - x[1]).atan2(cx - x[0]).rem_euclid(TAU))
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for k in 0..4 {
        let start = cuts[k];
        let end = if k == 3 { cuts[0] + TAU } else { cuts[k + 1] };
        let err = std::cell::RefCell::new(None);
        let piece = crate::quad::simpson(
            |theta| {
                let dir = [theta.cos(), theta.sin()];
                scale.tail(ext.exit_distance(x, &dir)).unwrap_or_else(|e| {
                    *err.borrow_mut() = Some(e);
                    0.0
                })
            },
            start,
            end,
            256,
        );
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        total += piece;
    }
    Ok(total)
}

/// Trace of the form on `nodes`: the Schur complement with the other nodes eliminated.
pub fn restrict(form: &FormMatrix, nodes: &[usize]) -> Result<FormMatrix, FormError> {
    let sub = form.space.subset(nodes)?;
    let n = form.len();
    let mut keep = vec![false; n];
    for &k in nodes {
        keep[k] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&k| !keep[k]).collect();
    let b = &form.matrix;
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| b[(rows[r], cols[c])]);
    let mut trace = pick(nodes, nodes);
    if !rest.is_empty() {
        let b_rr = pick(&rest, &rest);
        let b_rk = pick(&rest, nodes);
        let chol = b_rr.cholesky().ok_or(FormError::NotTransient)?;
        trace -= b_rk.transpose() * chol.solve(&b_rk);
        trace = 0.5 * (&trace + trace.transpose());
    }
    FormMatrix::new(sub, trace, Provenance::Restricted { parent_len: n })
}

/// Add a nonnegative killing measure: `B + diag(nu)`.
pub fn perturb(form: &FormMatrix, nu: &DiscreteMeasure) -> Result<FormMatrix, FormError> {
    if nu.len() != form.len() {
        return Err(FormError::ShapeMismatch { rows: nu.len(), cols: nu.len(), len: form.len() });
    }
    let masses = nu.node_masses();
    if let Some(bad) = (0..nu.len()).find(|&i| nu.diffuse_masses()[i] < 0.0 || nu.concentrated_masses()[i] < 0.0) {
        return Err(FormError::NegativePerturbation(bad));
    }
    let mut b = form.matrix.clone();
    for i in 0..form.len() {
        b[(i, i)] += masses[i];
    }
    FormMatrix::new(form.space.clone(), b, Provenance::Perturbed)
}

/// Jump and killing parts of a form, with the resurrected (killing-free) form.
#[derive(Debug, Clone)]
pub struct BeurlingDeny {
    /// Symmetric jump weights `J(i, j) = -B_ij`, zero diagonal.
    pub jump: DMatrix<f64>,
    pub killing: DVector<f64>,
    pub resurrected: FormMatrix,
}

impl BeurlingDeny {
    /// `sum_{i<j} J_ij (u_i - u_j)(v_i - v_j) + sum_i k_i u_i v_i`.
    pub fn energy(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let n = u.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += self.jump[(i, j)] * (u[i] - u[j]) * (v[i] - v[j]);
            }
            acc += self.killing[i] * u[i] * v[i];
        }
        acc
    }
}

pub fn beurling_deny(form: &FormMatrix) -> Result<BeurlingDeny, FormError> {
    form.check_markov()?;
    let n = form.len();
    let jump = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -form.matrix[(i, j)] });
    let killing = form.killing();
    let mut resurrected = form.matrix.clone();
    for i in 0..n {
        resurrected[(i, i)] -= killing[i];
    }
    Ok(BeurlingDeny {
        jump,
        killing,
        resurrected: FormMatrix::symmetric(form.space.clone(), resurrected, Provenance::Resurrected)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_space, GridSpec};

    #[test]
    fn one_node_laplacian() {
        let space = build_space(&GridSpec::interval(-1.0, 1.0, 1.0)).unwrap();
        let form = assemble(&space, &OperatorSpec::laplacian()).unwrap();
        assert_eq!(form.matrix()[(0, 0)], 2.0);
    }

    #[test]
    fn two_node_laplacian() {
        let space = build_space(&GridSpec::interval(0.0, 3.0, 1.0)).unwrap();
        let form = assemble(&space, &OperatorSpec::laplacian()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        assert_eq!(form.matrix(), &expect);
    }

    #[test]
    fn planar_laplacian_is_five_point() {
        let space = build_space(&GridSpec::square(0.0, 1.0, 0.25)).unwrap();
        let form = assemble(&space, &OperatorSpec::laplacian()).unwrap();
        let b = form.matrix();
        assert_eq!(b[(4, 4)], 4.0);
        assert_eq!(b[(4, 1)], -1.0);
        assert_eq!(b[(0, 4)], 0.0);
        assert_eq!(form.killing()[0], 2.0);
    }

    #[test]
    fn fractional_single_node_killing() {
        let space = build_space(&GridSpec::interval(-1.0, 1.0, 1.0)).unwrap();
        let form = assemble(&space, &OperatorSpec::fractional(0.5)).unwrap();
        // exit distance 1/2 on both sides, tail R^{-1}/1
        assert!((form.matrix()[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_diffusion_is_rejected() {
        let space = build_space(&GridSpec::square(0.0, 1.0, 0.5)).unwrap();
        let tensor = DiffusionTensor::Field(Arc::new(|_| [[2.0, 0.5], [0.5, 2.0]]));
        let err = assemble_local(&space, &tensor, true).unwrap_err();
        assert_eq!(err, FormError::CrossDiffusionUnsupported);
    }

    #[test]
    fn asymmetric_kernel_is_rejected() {
        let space = build_space(&GridSpec::interval(0.0, 1.0, 0.25)).unwrap();
        let kernel = KernelCoefficient::Field { func: Arc::new(|x, y| 1.0 + 0.1 * (x[0] - y[0]).tanh()), lower: 0.5, upper: 2.0 };
        let err = assemble_nonlocal(&space, &kernel, &ScaleFunction::Power { alpha: 0.5 }, true, true).unwrap_err();
        assert!(matches!(err, FormError::KernelNotSymmetric(..)));
    }

    #[test]
    fn restriction_of_a_path() {
        let space = build_space(&GridSpec::interval(0.0, 4.0, 1.0)).unwrap();
        let form = assemble(&space, &OperatorSpec::laplacian()).unwrap();
        let trace = restrict(&form, &[0, 2]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 1.5]);
        assert!((trace.matrix() - expect).amax() < 1e-14);
    }

    #[test]
    fn beurling_deny_reconstructs_energy() {
        let space = build_space(&GridSpec::square(0.0, 1.0, 0.25)).unwrap();
        let form = assemble(&space, &OperatorSpec::fractional(0.3)).unwrap();
        let parts = beurling_deny(&form).unwrap();
        let u = DVector::from_fn(9, |i, _| (i as f64).sin());
        let v = DVector::from_fn(9, |i, _| (i as f64 * 0.7).cos());
        assert!((parts.energy(&u, &v) - form.energy(&u, &v)).abs() < 1e-10);
        assert!(parts.resurrected.killing().amax() < 1e-10);
    }
}
