//! Finite state spaces: node positions, cell measures and the killing region.

use std::sync::Arc;

use crate::error::FormError;

/// Axis-aligned box whose complement is the killing region.
#[derive(Debug, Clone, PartialEq)]
pub struct Exterior {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Exterior {
    /// Distance from `point` to the complement of the box along `direction` (unit vector).
    pub fn exit_distance(&self, point: &[f64], direction: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for axis in 0..point.len() {
            let step = direction[axis];
            let t = if step > 0.0 {
                (self.upper[axis] - point[axis]) / step
            } else if step < 0.0 {
                (self.lower[axis] - point[axis]) / step
            } else {
                continue;
            };
            best = best.min(t);
        }
        best
    }
}

/// Uniform grid description: `dim` axes, open box `(lower, upper)` and mesh size `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub h: f64,
}

impl GridSpec {
    pub fn interval(lower: f64, upper: f64, h: f64) -> Self {
        Self { dim: 1, lower: vec![lower], upper: vec![upper], h }
    }

    pub fn square(lower: f64, upper: f64, h: f64) -> Self {
        Self { dim: 2, lower: vec![lower; 2], upper: vec![upper; 2], h }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GridLayout {
    h: f64,
    /// Interior node count per axis.
    shape: Vec<usize>,
}

/// A finite state space with positive cell measures.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    dim: usize,
    coords: Vec<f64>,
    cells: Vec<f64>,
    exterior: Option<Exterior>,
    grid: Option<GridLayout>,
}

/// Build the interior node set of a uniform grid.
///
/// Nodes sit at `lower + k h` for `k = 1..K-1` on each axis, ordered with the
/// first axis slowest. Each node carries the cell volume `h^dim`, and the
/// killing region is everything outside the union of the cells.
#[allow(clippy::needless_range_loop)]
pub fn build_space(spec: &GridSpec) -> Result<Arc<StateSpace>, FormError> {
    if spec.dim == 0 || spec.dim > 2 {
        return Err(FormError::UnsupportedDimension(spec.dim));
    }
    if spec.lower.len() != spec.dim || spec.upper.len() != spec.dim {
        return Err(FormError::InvalidGrid("bound vectors do not match the dimension".into()));
    }
    if !(spec.h.is_finite() && spec.h > 0.0) {
        return Err(FormError::InvalidGrid(format!("mesh size must be positive, got {}", spec.h)));
    }
    let mut shape = Vec::with_capacity(spec.dim);
    for axis in 0..spec.dim {
        let extent = spec.upper[axis] - spec.lower[axis];
        if !(extent.is_finite() && extent > 0.0) {
            return Err(FormError::InvalidGrid(format!("axis {axis} has empty extent")));
        }
        let steps = (extent / spec.h).round();
        if (steps * spec.h - extent).abs() > 1e-9 * extent.max(1.0) {
            return Err(FormError::ExtentNotMultiple { axis, extent, h: spec.h });
        }
        let interior = steps as usize;
        if interior < 2 {
            return Err(FormError::EmptySpace);
        }
        shape.push(interior - 1);
    }
    let len: usize = shape.iter().product();
    let mut coords = Vec::with_capacity(len * spec.dim);
    let mut index = vec![0usize; spec.dim];
    for _ in 0..len {
        for axis in 0..spec.dim {
            coords.push(spec.lower[axis] + (index[axis] + 1) as f64 * spec.h);
        }
        for axis in (0..spec.dim).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    let half = 0.5 * spec.h;
    let exterior = Exterior {
        lower: spec.lower.iter().map(|l| l + half).collect(),
        upper: spec.upper.iter().map(|u| u - half).collect(),
    };
    Ok(Arc::new(StateSpace {
        dim: spec.dim,
        coords,
        cells: vec![spec.h.powi(spec.dim as i32); len],
        exterior: Some(exterior),
        grid: Some(GridLayout { h: spec.h, shape }),
    }))
}

impl StateSpace {
    /// A free-form space from explicit positions (row per node) and cell measures.
    pub fn from_points(
        dim: usize,
        points: Vec<Vec<f64>>,
        cells: Vec<f64>,
        exterior: Option<Exterior>,
    ) -> Result<Arc<Self>, FormError> {
        if points.is_empty() {
            return Err(FormError::EmptySpace);
        }
        if points.len() != cells.len() {
            return Err(FormError::InvalidGrid("one cell measure per node is required".into()));
        }
        if let Some(bad) = cells.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(FormError::NonPositiveCell { node: bad });
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(FormError::InvalidGrid("point dimension mismatch".into()));
            }
            coords.extend_from_slice(p);
        }
        Ok(Arc::new(Self { dim, coords, cells, exterior, grid: None }))
    }

    /// `n` abstract nodes of unit mass on a line, no killing region.
    pub fn abstract_nodes(n: usize) -> Result<Arc<Self>, FormError> {
        Self::from_points(1, (0..n).map(|i| vec![i as f64]).collect(), vec![1.0; n], None)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, node: usize) -> &[f64] {
        &self.coords[node * self.dim..(node + 1) * self.dim]
    }

    pub fn cell_measure(&self) -> &[f64] {
        &self.cells
    }

    pub fn exterior(&self) -> Option<&Exterior> {
        self.exterior.as_ref()
    }

    /// Mesh size for grid spaces.
    pub fn mesh_size(&self) -> Option<f64> {
        self.grid.as_ref().map(|g| g.h)
    }

    /// Interior node counts per axis for grid spaces.
    pub fn grid_shape(&self) -> Option<&[usize]> {
        self.grid.as_ref().map(|g| g.shape.as_slice())
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        euclid(self.position(a), self.position(b))
    }

    /// Node closest to `site`, ties broken by lowest index.
    pub fn nearest_node(&self, site: &[f64]) -> Option<usize> {
        if site.len() != self.dim {
            return None;
        }
        (0..self.len())
            .map(|i| (i, euclid(self.position(i), site)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Grid neighbours along each axis in positive direction, `None` when the step leaves the grid.
    pub(crate) fn forward_neighbours(&self, node: usize) -> Vec<Option<usize>> {
        let Some(grid) = &self.grid else { return Vec::new() };
        let multi = self.multi_index(node);
        (0..self.dim)
            .map(|axis| {
                if multi[axis] + 1 < grid.shape[axis] {
                    Some(node + self.stride(axis))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Number of grid steps from `node` that leave the grid (both directions, all axes).
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn boundary_faces(&self, node: usize) -> Vec<(usize, f64)> {
        let Some(grid) = &self.grid else { return Vec::new() };
        let multi = self.multi_index(node);
        let mut faces = Vec::new();
        for axis in 0..self.dim {
            let pos = self.position(node)[axis];
            if multi[axis] == 0 {
                faces.push((axis, pos - 0.5 * grid.h));
            }
            if multi[axis] + 1 == grid.shape[axis] {
                faces.push((axis, pos + 0.5 * grid.h));
            }
        }
        faces
    }

    fn stride(&self, axis: usize) -> usize {
        let shape = &self.grid.as_ref().expect("grid space").shape;
        shape[axis + 1..].iter().product()
    }

    fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let shape = &self.grid.as_ref().expect("grid space").shape;
        let mut out = vec![0; self.dim];
        for axis in (0..self.dim).rev() {
            out[axis] = node % shape[axis];
            node /= shape[axis];
        }
        out
    }

    /// Sub-space on the listed nodes; positions, cells and the killing box carry over.
    pub fn subset(&self, nodes: &[usize]) -> Result<Arc<Self>, FormError> {
        if nodes.is_empty() {
            return Err(FormError::EmptySpace);
        }
        let mut seen = vec![false; self.len()];
        for &n in nodes {
            if n >= self.len() {
                return Err(FormError::NodeOutOfRange { node: n, len: self.len() });
            }
            if std::mem::replace(&mut seen[n], true) {
                return Err(FormError::DuplicateNode(n));
            }
        }
        Self::from_points(
            self.dim,
            nodes.iter().map(|&n| self.position(n).to_vec()).collect(),
            nodes.iter().map(|&n| self.cells[n]).collect(),
            self.exterior.clone(),
        )
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_quarter_mesh() {
        let space = build_space(&GridSpec::square(0.0, 1.0, 0.25)).unwrap();
        assert_eq!(space.len(), 9);
        assert!(space.cell_measure().iter().all(|&m| (m - 0.0625).abs() < 1e-15));
        assert_eq!(space.position(0), &[0.25, 0.25]);
        assert_eq!(space.position(1), &[0.25, 0.5]);
        assert_eq!(space.position(3), &[0.5, 0.25]);
    }

    #[test]
    fn extent_must_be_multiple_of_mesh() {
        let err = build_space(&GridSpec::interval(0.0, 1.0, 0.3)).unwrap_err();
        assert!(matches!(err, FormError::ExtentNotMultiple { .. }));
    }

    #[test]
    fn single_interior_node() {
        let space = build_space(&GridSpec::interval(-1.0, 1.0, 1.0)).unwrap();
        assert_eq!(space.len(), 1);
        assert_eq!(space.position(0), &[0.0]);
        let ext = space.exterior().unwrap();
        assert_eq!(ext.lower, vec![-0.5]);
        assert_eq!(ext.exit_distance(&[0.0], &[1.0]), 0.5);
    }

    #[test]
    fn neighbours_follow_lexicographic_order() {
        let space = build_space(&GridSpec::square(0.0, 1.0, 0.25)).unwrap();
        assert_eq!(space.forward_neighbours(0), vec![Some(3), Some(1)]);
        assert_eq!(space.forward_neighbours(8), vec![None, None]);
        assert_eq!(space.boundary_faces(4).len(), 0);
        assert_eq!(space.boundary_faces(0).len(), 2);
    }

    #[test]
    fn subset_rejects_bad_nodes() {
        let space = StateSpace::abstract_nodes(3).unwrap();
        assert!(matches!(space.subset(&[]), Err(FormError::EmptySpace)));
        assert!(matches!(space.subset(&[0, 0]), Err(FormError::DuplicateNode(0))));
        assert!(matches!(space.subset(&[5]), Err(FormError::NodeOutOfRange { .. })));
        assert_eq!(space.subset(&[2, 0]).unwrap().position(0), &[2.0]);
    }
}
