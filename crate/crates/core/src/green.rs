//! Green operators, resolvents and reference weights.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::FormError;
use crate::form::FormMatrix;

const CONDITION_LIMIT: f64 = 1e12;

/// `G = B^{-1}`: the potential of a node mass, so `R mu = G mu` for masses
/// and `R f = G (m f)` for densities.
#[derive(Debug, Clone)]
pub struct GreenOperator {
    kernel: DMatrix<f64>,
    cells: DVector<f64>,
}

impl GreenOperator {
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Potential of node masses.
    pub fn apply_masses(&self, masses: &DVector<f64>) -> DVector<f64> {
        &self.kernel * masses
    }

    /// Potential of a density with respect to the cell measure.
    pub fn apply_density(&self, density: &DVector<f64>) -> DVector<f64> {
        &self.kernel * density.component_mul(&self.cells)
    }

    pub fn column(&self, node: usize) -> DVector<f64> {
        self.kernel.column(node).into_owned()
    }
}

/// Invert a transient Markovian form.
///
/// Fails when `B` is not positive definite, when the condition number exceeds
/// `1e12`, or when the inverse has a negative entry.
pub fn green(form: &FormMatrix) -> Result<GreenOperator, FormError> {
    form.check_markov()?;
    let b = form.matrix();
    let chol = b.clone().cholesky().ok_or(FormError::NotTransient)?;
    let n = form.len();
    let mut inv = chol.inverse();
    inv = 0.5 * (&inv + inv.transpose());
    let norm = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let condition = norm(b) * norm(&inv);
    if !(condition <= CONDITION_LIMIT) {
        return Err(FormError::IllConditioned(condition));
    }
    let scale = inv.amax();
    for i in 0..n {
        for j in 0..n {
            if inv[(i, j)] < -1e-12 * scale {
                return Err(FormError::NegativeGreen { i, j, value: inv[(i, j)] });
            }
        }
    }
    inv.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(GreenOperator { kernel: inv, cells: form.cell_measure() })
}

/// `R_alpha g`: solves `(B + alpha M) u = M g`.
pub fn resolvent(form: &FormMatrix, alpha: f64, density: &DVector<f64>) -> Result<DVector<f64>, FormError> {
    if !(alpha >= 0.0) {
        return Err(FormError::NegativeResolvent(alpha));
    }
    if density.len() != form.len() {
        return Err(FormError::ShapeMismatch { rows: density.len(), cols: 1, len: form.len() });
    }
    let cells = form.cell_measure();
    let shifted = form.matrix() + DMatrix::from_diagonal(&(alpha * &cells));
    let chol = shifted.cholesky().ok_or(FormError::NotTransient)?;
    Ok(chol.solve(&density.component_mul(&cells)))
}

/// Where the reference weight comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Constant,
    PrincipalEigenfunction,
    User(DVector<f64>),
}

/// Reference weight `rho` with `B rho >= 0` and the scaled weight
/// `varrho = c rho`, `c = min(1, min_i rho_i / (R rho)_i)`, so `R varrho <= rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPair {
    pub rho: DVector<f64>,
    pub varrho: DVector<f64>,
}

pub fn weights(form: &FormMatrix, green: &GreenOperator, source: &WeightSource) -> Result<WeightPair, FormError> {
    let n = form.len();
    let rho = match source {
        WeightSource::Constant => DVector::from_element(n, 1.0),
        WeightSource::PrincipalEigenfunction => principal_eigenfunction(form)?,
        WeightSource::User(v) => {
            if v.len() != n {
                return Err(FormError::InvalidWeight(format!("expected {n} entries, got {}", v.len())));
            }
            if let Some(bad) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(FormError::InvalidWeight(format!("entry {bad} is not strictly positive")));
            }
            v.clone()
        }
    };
    let b_rho = form.apply(&rho);
    let tol = 1e-12 * form.matrix().amax().max(1.0) * rho.amax();
    if let Some(node) = (0..n).find(|&i| b_rho[i] < -tol) {
        return Err(FormError::NotExcessive { node, value: b_rho[node] });
    }
    let potential = green.apply_density(&rho);
    let c = (0..n).map(|i| rho[i] / potential[i]).fold(1.0, f64::min);
    Ok(WeightPair { varrho: c * &rho, rho })
}

/// Principal eigenvector of `M^{-1/2} B M^{-1/2}` mapped back, normalised to max 1.
fn principal_eigenfunction(form: &FormMatrix) -> Result<DVector<f64>, FormError> {
    let cells = form.cell_measure();
    let inv_sqrt = cells.map(|m| 1.0 / m.sqrt());
    let scaled = DMatrix::from_fn(form.len(), form.len(), |i, j| inv_sqrt[i] * form.matrix()[(i, j)] * inv_sqrt[j]);
    let eig = SymmetricEigen::try_new(scaled, 1e-14, 10_000).ok_or(FormError::EigenFailure)?;
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(FormError::EigenFailure)?;
    let mut v = eig.eigenvectors.column(k).component_mul(&inv_sqrt);
    if v.sum() < 0.0 {
        v = -v;
    }
    let top = v.max();
    if !(top > 0.0) || v.iter().any(|x| *x <= 0.0) {
        return Err(FormError::EigenFailure);
    }
    Ok(v / top)
}

/// A form together with its Green operator and reference weights.
#[derive(Debug, Clone)]
pub struct Discretization {
    form: FormMatrix,
    green: GreenOperator,
    weights: WeightPair,
}

impl Discretization {
    pub fn new(form: FormMatrix) -> Result<Self, FormError> {
        Self::with_weights(form, &WeightSource::Constant)
    }

    pub fn with_weights(form: FormMatrix, source: &WeightSource) -> Result<Self, FormError> {
        let g = green(&form)?;
        let weights = weights(&form, &g, source)?;
        Ok(Self { form, green: g, weights })
    }

    pub fn form(&self) -> &FormMatrix {
        &self.form
    }

    pub fn green(&self) -> &GreenOperator {
        &self.green
    }

    pub fn weights(&self) -> &WeightPair {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.form.len()
    }

    pub fn is_empty(&self) -> bool {
        self.form.is_empty()
    }

    pub fn cells(&self) -> &DVector<f64> {
        &self.green.cells
    }
}
