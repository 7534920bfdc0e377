//! Signed measures on a finite state space.
//!
//! Each node carries two masses: a diffuse part (absolutely continuous with
//! respect to the cell measure) and a concentrated part (a tagged atom). The
//! two parts are kept on separate copies of the node set, so lattice
//! operations and mutual singularity act on each part independently.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::MeasureError;
use crate::green::GreenOperator;
use crate::space::StateSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Diffuse,
    Concentrated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub node: usize,
    pub mass: f64,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeOp {
    Sup,
    Inf,
    Add,
    Sub,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    space: Arc<StateSpace>,
    diffuse: DVector<f64>,
    concentrated: DVector<f64>,
}

/// Positive, negative and total-variation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct JordanParts {
    pub positive: DiscreteMeasure,
    pub negative: DiscreteMeasure,
    pub variation: DiscreteMeasure,
}

impl DiscreteMeasure {
    pub fn zero(space: Arc<StateSpace>) -> Self {
        let n = space.len();
        Self { space, diffuse: DVector::zeros(n), concentrated: DVector::zeros(n) }
    }

    /// Measure `density * m`.
    pub fn from_density(space: Arc<StateSpace>, density: &DVector<f64>) -> Result<Self, MeasureError> {
        check_len(&space, density.len())?;
        check_finite(density)?;
        let cells = DVector::from_column_slice(space.cell_measure());
        let n = space.len();
        Ok(Self { diffuse: density.component_mul(&cells), concentrated: DVector::zeros(n), space })
    }

    /// Measure with explicit diffuse and concentrated node masses.
    pub fn from_parts(space: Arc<StateSpace>, diffuse: DVector<f64>, concentrated: DVector<f64>) -> Result<Self, MeasureError> {
        check_len(&space, diffuse.len())?;
        check_len(&space, concentrated.len())?;
        check_finite(&diffuse)?;
        check_finite(&concentrated)?;
        Ok(Self { space, diffuse, concentrated })
    }

    /// Add an atom. Diffuse atoms merge into the density.
    pub fn with_atom(mut self, node: usize, mass: f64, tag: Tag) -> Result<Self, MeasureError> {
        if node >= self.len() {
            return Err(MeasureError::NodeOutOfRange { node, len: self.len() });
        }
        if !mass.is_finite() {
            return Err(MeasureError::NonFinite(node));
        }
        match tag {
            Tag::Diffuse => self.diffuse[node] += mass,
            Tag::Concentrated => self.concentrated[node] += mass,
        }
        Ok(self)
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.diffuse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diffuse.is_empty()
    }

    pub fn diffuse_masses(&self) -> &DVector<f64> {
        &self.diffuse
    }

    pub fn concentrated_masses(&self) -> &DVector<f64> {
        &self.concentrated
    }

    /// Density of the diffuse part with respect to the cell measure.
    pub fn density(&self) -> DVector<f64> {
        let cells = DVector::from_column_slice(self.space.cell_measure());
        self.diffuse.component_div(&cells)
    }

    /// Total mass at each node.
    pub fn node_masses(&self) -> DVector<f64> {
        &self.diffuse + &self.concentrated
    }

    pub fn atoms(&self) -> Vec<Atom> {
        (0..self.len())
            .filter(|&i| self.concentrated[i] != 0.0)
            .map(|i| Atom { node: i, mass: self.concentrated[i], tag: Tag::Concentrated })
            .collect()
    }

    pub fn lattice(&self, other: &Self, op: LatticeOp) -> Result<Self, MeasureError> {
        self.same_space(other)?;
        let combine = |a: &DVector<f64>, b: &DVector<f64>| match op {
            LatticeOp::Sup => a.zip_map(b, f64::max),
            LatticeOp::Inf => a.zip_map(b, f64::min),
            LatticeOp::Add => a + b,
            LatticeOp::Sub => a - b,
        };
        Ok(Self {
            space: self.space.clone(),
            diffuse: combine(&self.diffuse, &other.diffuse),
            concentrated: combine(&self.concentrated, &other.concentrated),
        })
    }

    pub fn sup(&self, other: &Self) -> Result<Self, MeasureError> {
        self.lattice(other, LatticeOp::Sup)
    }

    pub fn inf(&self, other: &Self) -> Result<Self, MeasureError> {
        self.lattice(other, LatticeOp::Inf)
    }

    pub fn add(&self, other: &Self) -> Result<Self, MeasureError> {
        self.lattice(other, LatticeOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, MeasureError> {
        self.lattice(other, LatticeOp::Sub)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| factor * v)
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { space: self.space.clone(), diffuse: self.diffuse.map(&f), concentrated: self.concentrated.map(&f) }
    }

    pub fn positive_part(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn negative_part(&self) -> Self {
        self.map(|v| (-v).max(0.0))
    }

    pub fn variation(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn parts(&self) -> JordanParts {
        JordanParts { positive: self.positive_part(), negative: self.negative_part(), variation: self.variation() }
    }

    /// `sum_i rho_i (|diffuse_i| + |concentrated_i|)`.
    pub fn tv_norm(&self, rho: &DVector<f64>) -> Result<f64, MeasureError> {
        if rho.len() != self.len() {
            return Err(MeasureError::WeightLength { got: rho.len(), expected: self.len() });
        }
        if let Some(bad) = rho.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(MeasureError::NonPositiveWeight(bad));
        }
        Ok((0..self.len()).map(|i| rho[i] * (self.diffuse[i].abs() + self.concentrated[i].abs())).sum())
    }

    /// Mutual singularity: no node copy charges both measures.
    pub fn orthogonal(&self, other: &Self) -> Result<bool, MeasureError> {
        self.same_space(other)?;
        let disjoint = |a: &DVector<f64>, b: &DVector<f64>| a.iter().zip(b.iter()).all(|(x, y)| *x == 0.0 || *y == 0.0);
        Ok(disjoint(&self.diffuse, &other.diffuse) && disjoint(&self.concentrated, &other.concentrated))
    }

    /// Restriction to a node set (both copies).
    pub fn restrict_to(&self, nodes: &[usize]) -> Result<Self, MeasureError> {
        let mut keep = vec![false; self.len()];
        for &n in nodes {
            if n >= self.len() {
                return Err(MeasureError::NodeOutOfRange { node: n, len: self.len() });
            }
            keep[n] = true;
        }
        let mask = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| if keep[i] { v[i] } else { 0.0 });
        Ok(Self { space: self.space.clone(), diffuse: mask(&self.diffuse), concentrated: mask(&self.concentrated) })
    }

    /// `(diffuse part, concentrated part)`.
    pub fn split_dc(&self) -> (Self, Self) {
        let zero = DVector::zeros(self.len());
        (
            Self { space: self.space.clone(), diffuse: self.diffuse.clone(), concentrated: zero.clone() },
            Self { space: self.space.clone(), diffuse: zero, concentrated: self.concentrated.clone() },
        )
    }

    /// Componentwise `self <= other + tol` on both copies.
    pub fn le(&self, other: &Self, tol: f64) -> Result<bool, MeasureError> {
        self.same_space(other)?;
        let ok = |a: &DVector<f64>, b: &DVector<f64>| a.iter().zip(b.iter()).all(|(x, y)| *x <= *y + tol);
        Ok(ok(&self.diffuse, &other.diffuse) && ok(&self.concentrated, &other.concentrated))
    }

    /// Largest componentwise gap between two measures.
    pub fn max_gap(&self, other: &Self) -> Result<f64, MeasureError> {
        self.same_space(other)?;
        Ok((&self.diffuse - &other.diffuse).amax().max((&self.concentrated - &other.concentrated).amax()))
    }

    fn same_space(&self, other: &Self) -> Result<(), MeasureError> {
        if Arc::ptr_eq(&self.space, &other.space) || *self.space == *other.space {
            Ok(())
        } else {
            Err(MeasureError::SpaceMismatch)
        }
    }
}

/// Potential `R mu`.
pub fn apply_green(green: &GreenOperator, mu: &DiscreteMeasure) -> DVector<f64> {
    green.apply_masses(&mu.node_masses())
}

fn check_len(space: &StateSpace, got: usize) -> Result<(), MeasureError> {
    if got == space.len() {
        Ok(())
    } else {
        Err(MeasureError::WeightLength { got, expected: space.len() })
    }
}

fn check_finite(v: &DVector<f64>) -> Result<(), MeasureError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(MeasureError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Parse a `node:value` list such as `"0:1.5, 3:-2"`.
pub fn parse_node_values(literal: &str, len: usize) -> Result<DVector<f64>, MeasureError> {
    let mut out = DVector::zeros(len);
    for item in literal.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (node, value) = item
            .split_once(':')
            .ok_or_else(|| MeasureError::Parse(format!("expected node:value, got {item:?}")))?;
        let node: usize = node.trim().parse().map_err(|_| MeasureError::Parse(format!("bad node index {node:?}")))?;
        let value: f64 = value.trim().parse().map_err(|_| MeasureError::Parse(format!("bad value {value:?}")))?;
        if node >= len {
            return Err(MeasureError::NodeOutOfRange { node, len });
        }
        if !value.is_finite() {
            return Err(MeasureError::NonFinite(node));
        }
        out[node] += value;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(n: usize) -> Arc<StateSpace> {
        StateSpace::abstract_nodes(n).unwrap()
    }

    fn measure(space: &Arc<StateSpace>, d: &[f64], c: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::from_parts(space.clone(), DVector::from_column_slice(d), DVector::from_column_slice(c)).unwrap()
    }

    #[test]
    fn jordan_parts_of_mixed_measure() {
        let s = space(3);
        let mu = measure(&s, &[1.0, -2.0, 0.0], &[0.0, 3.0, -1.0]);
        let parts = mu.parts();
        assert_eq!(parts.positive.node_masses().as_slice(), &[1.0, 3.0, 0.0]);
        assert_eq!(parts.negative.node_masses().as_slice(), &[0.0, 2.0, 1.0]);
        assert_eq!(mu.tv_norm(&DVector::from_element(3, 1.0)).unwrap(), 7.0);
    }

    #[test]
    fn diffuse_and_atom_at_same_node_are_orthogonal() {
        let s = space(2);
        let d = measure(&s, &[1.0, 0.0], &[0.0, 0.0]);
        let c = measure(&s, &[0.0, 0.0], &[1.0, 0.0]);
        assert!(d.orthogonal(&c).unwrap());
        assert!(!d.orthogonal(&d).unwrap());
    }

    #[test]
    fn diffuse_atoms_merge_into_density() {
        let s = space(2);
        let mu = DiscreteMeasure::zero(s).with_atom(1, 2.0, Tag::Diffuse).unwrap();
        assert_eq!(mu.density()[1], 2.0);
        assert!(mu.atoms().is_empty());
    }

    #[test]
    fn literal_parsing() {
        let v = parse_node_values("0:1.5, 2:-2", 3).unwrap();
        assert_eq!(v.as_slice(), &[1.5, 0.0, -2.0]);
        assert!(parse_node_values("4:1", 3).is_err());
        assert!(parse_node_values("x", 3).is_err());
    }

    #[test]
    fn space_mismatch_is_an_error() {
        let a = DiscreteMeasure::zero(space(2));
        let b = DiscreteMeasure::zero(space(3));
        assert_eq!(a.add(&b).unwrap_err(), MeasureError::SpaceMismatch);
    }

    proptest! {
        #[test]
        fn lattice_identities(d in prop::collection::vec(-5i32..5, 8), e in prop::collection::vec(-5i32..5, 8)) {
            let s = space(4);
            let to = |v: &[i32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let (d, e) = (to(&d), to(&e));
            let mu = measure(&s, &d[..4], &d[4..]);
            let nu = measure(&s, &e[..4], &e[4..]);
            let lhs = mu.sup(&nu).unwrap().add(&mu.inf(&nu).unwrap()).unwrap();
            prop_assert!(lhs.max_gap(&mu.add(&nu).unwrap()).unwrap() < 1e-12);
            let split = mu.positive_part().sub(&mu.negative_part()).unwrap();
            prop_assert!(split.max_gap(&mu).unwrap() < 1e-12);
            prop_assert!(mu.positive_part().orthogonal(&mu.negative_part()).unwrap());
        }
    }
}
