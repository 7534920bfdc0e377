//! Nonlinearities `f(x, y)` of absorption type and their wrappers.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::NonlinearityError;

type NodeFn = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// Per-node scalar data: one value for all nodes or one value per node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeField {
    Constant(f64),
    PerNode(Arc<[f64]>),
}

impl NodeField {
    pub fn at(&self, node: usize) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::PerNode(v) => v[node],
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            Self::Constant(_) => None,
            Self::PerNode(v) => Some(v.len()),
        }
    }

    fn all(&self, pred: impl Fn(f64) -> bool) -> bool {
        match self {
            Self::Constant(c) => pred(*c),
            Self::PerNode(v) => v.iter().all(|x| pred(*x)),
        }
    }
}

impl From<f64> for NodeField {
    fn from(c: f64) -> Self {
        Self::Constant(c)
    }
}

impl From<Vec<f64>> for NodeField {
    fn from(v: Vec<f64>) -> Self {
        Self::PerNode(v.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundedShape {
    Tanh,
    Atan,
    /// `y / (1 + y^2)`.
    Rational,
}

impl BoundedShape {
    fn eval(self, y: f64) -> f64 {
        match self {
            Self::Tanh => y.tanh(),
            Self::Atan => y.atan(),
            Self::Rational => y / (1.0 + y * y),
        }
    }

    fn slope(self, y: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 / y.cosh().powi(2),
            Self::Atan => 1.0 / (1.0 + y * y),
            Self::Rational => (1.0 - y * y) / (1.0 + y * y).powi(2),
        }
    }
}

/// Piecewise linear table `(y, f)` with constant extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    points: Vec<(f64, f64)>,
}

impl Table {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, NonlinearityError> {
        if points.len() < 2
            || points.windows(2).any(|w| !(w[1].0 > w[0].0))
            || points.iter().any(|(y, f)| !(y.is_finite() && f.is_finite()))
        {
            return Err(NonlinearityError::BadTable);
        }
        Ok(Self { points })
    }

    fn segment(&self, y: f64) -> Option<usize> {
        let pts = &self.points;
        if y < pts[0].0 || y >= pts[pts.len() - 1].0 {
            return None;
        }
        Some(pts.partition_point(|p| p.0 <= y) - 1)
    }

    fn eval(&self, y: f64) -> f64 {
        let pts = &self.points;
        if y <= pts[0].0 {
            return pts[0].1;
        }
        match self.segment(y) {
            None => pts[pts.len() - 1].1,
            Some(k) => {
                let (a, b) = (pts[k], pts[k + 1]);
                a.1 + (b.1 - a.1) * (y - a.0) / (b.0 - a.0)
            }
        }
    }

    fn slope_of(&self, k: usize) -> f64 {
        let (a, b) = (self.points[k], self.points[k + 1]);
        (b.1 - a.1) / (b.0 - a.0)
    }

    fn slope(&self, y: f64) -> f64 {
        self.segment(y).map_or(0.0, |k| self.slope_of(k))
    }

    fn max_decrease(&self, lo: f64, hi: f64) -> f64 {
        (0..self.points.len() - 1)
            .filter(|&k| self.points[k].0 < hi && self.points[k + 1].0 > lo)
            .map(|k| (-self.slope_of(k)).max(0.0))
            .fold(0.0, f64::max)
    }

    fn nonincreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}

#[derive(Clone)]
enum Kind {
    Power { p: f64, coeff: NodeField },
    Exp { coeff: NodeField },
    Bounded { bound: NodeField, shape: BoundedShape },
    Tabulated { tables: Arc<[Table]>, group: Option<Arc<[usize]>> },
    Custom { func: NodeFn, nonincreasing: bool, lipschitz: Option<f64> },
    Sum(Nonlinearity, Nonlinearity),
    TruncBelow { inner: Nonlinearity, level: f64, weight: NodeField },
    TruncAbove { inner: Nonlinearity, level: f64, weight: NodeField },
    Reflect(Nonlinearity),
    Scale { inner: Nonlinearity, factor: f64 },
    Clamp { inner: Nonlinearity, lower: Arc<[f64]>, upper: Arc<[f64]> },
}

/// A nonlinearity `f(node, y)`; cheap to clone.
#[derive(Clone)]
pub struct Nonlinearity(Arc<Kind>);

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

fn invalid(msg: impl Into<String>) -> NonlinearityError {
    NonlinearityError::InvalidParameter(msg.into())
}

impl Nonlinearity {
    fn wrap(kind: Kind) -> Self {
        Self(Arc::new(kind))
    }

    /// `-c(x) |y|^(p-1) y`.
    pub fn power(p: f64, coeff: impl Into<NodeField>) -> Result<Self, NonlinearityError> {
        if !(p.is_finite() && p > 0.0) {
            return Err(invalid(format!("exponent must be positive, got {p}")));
        }
        let coeff = coeff.into();
        if !coeff.all(f64::is_finite) {
            return Err(invalid("power coefficient must be finite"));
        }
        Ok(Self::wrap(Kind::Power { p, coeff }))
    }

    /// `-c(x) sign(y) (e^|y| - 1)`.
    pub fn exp(coeff: impl Into<NodeField>) -> Result<Self, NonlinearityError> {
        let coeff = coeff.into();
        if !coeff.all(f64::is_finite) {
            return Err(invalid("exponential coefficient must be finite"));
        }
        Ok(Self::wrap(Kind::Exp { coeff }))
    }

    /// `-g(x) shape(y)`.
    pub fn bounded(bound: impl Into<NodeField>, shape: BoundedShape) -> Result<Self, NonlinearityError> {
        let bound = bound.into();
        if !bound.all(|g| g.is_finite() && g >= 0.0) {
            return Err(invalid("bound must be finite and nonnegative"));
        }
        Ok(Self::wrap(Kind::Bounded { bound, shape }))
    }

    /// One table for every node.
    pub fn tabulated(points: Vec<(f64, f64)>) -> Result<Self, NonlinearityError> {
        Ok(Self::wrap(Kind::Tabulated { tables: vec![Table::new(points)?].into(), group: None }))
    }

    /// One table per node group; `group[node]` indexes `tables`.
    pub fn tabulated_groups(tables: Vec<Table>, group: Vec<usize>) -> Result<Self, NonlinearityError> {
        if tables.is_empty() || group.iter().any(|&g| g >= tables.len()) {
            return Err(invalid("node group refers to a missing table"));
        }
        Ok(Self::wrap(Kind::Tabulated { tables: tables.into(), group: Some(group.into()) }))
    }

    /// Closure `f(node, y)`. Declaring it nonincreasing in `y` enables Newton steps.
    pub fn custom(f: impl Fn(usize, f64) -> f64 + Send + Sync + 'static, nonincreasing: bool) -> Self {
        Self::wrap(Kind::Custom { func: Arc::new(f), nonincreasing, lipschitz: None })
    }

    /// Closure with a known one-sided Lipschitz constant.
    pub fn custom_with_lipschitz(
        f: impl Fn(usize, f64) -> f64 + Send + Sync + 'static,
        nonincreasing: bool,
        lipschitz: f64,
    ) -> Self {
        Self::wrap(Kind::Custom { func: Arc::new(f), nonincreasing, lipschitz: Some(lipschitz) })
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self::wrap(Kind::Sum(self.clone(), other.clone()))
    }

    /// `max(f, -level * weight)`.
    pub fn truncated_below(&self, level: f64, weight: impl Into<NodeField>) -> Self {
        Self::wrap(Kind::TruncBelow { inner: self.clone(), level, weight: weight.into() })
    }

    /// `min(f, level * weight)`.
    pub fn truncated_above(&self, level: f64, weight: impl Into<NodeField>) -> Self {
        Self::wrap(Kind::TruncAbove { inner: self.clone(), level, weight: weight.into() })
    }

    /// `y -> -f(-y)`.
    pub fn reflected(&self) -> Self {
        Self::wrap(Kind::Reflect(self.clone()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::wrap(Kind::Scale { inner: self.clone(), factor })
    }

    /// `y -> f(clamp(y, lower, upper))`, per node.
    pub fn clamped(&self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self::wrap(Kind::Clamp { inner: self.clone(), lower: lower.into(), upper: upper.into() })
    }

    pub fn eval(&self, node: usize, y: f64) -> f64 {
        match &*self.0 {
            Kind::Power { p, coeff } => -coeff.at(node) * y.abs().powf(p - 1.0) * y,
            Kind::Exp { coeff } => -coeff.at(node) * y.signum() * y.abs().exp_m1(),
            Kind::Bounded { bound, shape } => -bound.at(node) * shape.eval(y),
            Kind::Tabulated { tables, group } => table_for(tables, group, node).eval(y),
            Kind::Custom { func, .. } => func(node, y),
            Kind::Sum(a, b) => a.eval(node, y) + b.eval(node, y),
            Kind::TruncBelow { inner, level, weight } => inner.eval(node, y).max(-level * weight.at(node)),
            Kind::TruncAbove { inner, level, weight } => inner.eval(node, y).min(level * weight.at(node)),
            Kind::Reflect(inner) => -inner.eval(node, -y),
            Kind::Scale { inner, factor } => factor * inner.eval(node, y),
            Kind::Clamp { inner, lower, upper } => inner.eval(node, y.clamp(lower[node], upper[node])),
        }
    }

    /// Derivative in `y` (right derivative at kinks).
    pub fn derivative(&self, node: usize, y: f64) -> f64 {
        match &*self.0 {
            Kind::Power { p, coeff } => {
                if y == 0.0 && *p < 1.0 {
                    f64::NEG_INFINITY
                } else if y == 0.0 && *p > 1.0 {
                    0.0
                } else {
                    -coeff.at(node) * p * y.abs().powf(p - 1.0)
                }
            }
            Kind::Exp { coeff } => -coeff.at(node) * y.abs().exp(),
            Kind::Bounded { bound, shape } => -bound.at(node) * shape.slope(y),
            Kind::Tabulated { tables, group } => table_for(tables, group, node).slope(y),
            Kind::Custom { func, .. } => {
                let step = 1e-6 * (1.0 + y.abs());
                (func(node, y + step) - func(node, y - step)) / (2.0 * step)
            }
            Kind::Sum(a, b) => a.derivative(node, y) + b.derivative(node, y),
            Kind::TruncBelow { inner, level, weight } => {
                if inner.eval(node, y) > -level * weight.at(node) {
                    inner.derivative(node, y)
                } else {
                    0.0
                }
            }
            Kind::TruncAbove { inner, level, weight } => {
                if inner.eval(node, y) < level * weight.at(node) {
                    inner.derivative(node, y)
                } else {
                    0.0
                }
            }
            Kind::Reflect(inner) => inner.derivative(node, -y),
            Kind::Scale { inner, factor } => factor * inner.derivative(node, y),
            Kind::Clamp { inner, lower, upper } => {
                if y >= lower[node] && y <= upper[node] {
                    inner.derivative(node, y)
                } else {
                    0.0
                }
            }
        }
    }

    /// Bound `L >= 0` with `f(y) - f(z) >= -L (y - z)` for `lo <= z <= y <= hi`.
    pub fn one_sided_lipschitz(&self, node: usize, lo: f64, hi: f64) -> Result<f64, NonlinearityError> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(NonlinearityError::LipschitzUnavailable { lower: lo, upper: hi });
        }
        if lo > hi {
            return Ok(0.0);
        }
        let far = lo.abs().max(hi.abs());
        let near = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
        let value = match &*self.0 {
            Kind::Power { p, coeff } => {
                let c = coeff.at(node).max(0.0);
                if c == 0.0 {
                    0.0
                } else if *p >= 1.0 {
                    c * p * far.powf(p - 1.0)
                } else if near == 0.0 {
                    return Err(NonlinearityError::LipschitzUnavailable { lower: lo, upper: hi });
                } else {
                    c * p * near.powf(p - 1.0)
                }
            }
            Kind::Exp { coeff } => coeff.at(node).max(0.0) * far.exp(),
            Kind::Bounded { bound, shape } => {
                let g = bound.at(node);
                match shape {
                    BoundedShape::Tanh | BoundedShape::Atan => g * shape.slope(near),
                    BoundedShape::Rational => g * if near == 0.0 { 1.0 } else { shape.slope(near).max(0.0) },
                }
            }
            Kind::Tabulated { tables, group } => table_for(tables, group, node).max_decrease(lo, hi),
            Kind::Custom { func, lipschitz, .. } => match lipschitz {
                Some(l) => *l,
                None => sampled_decrease(|y| func(node, y), lo, hi)?,
            },
            Kind::Sum(a, b) => a.one_sided_lipschitz(node, lo, hi)? + b.one_sided_lipschitz(node, lo, hi)?,
            Kind::TruncBelow { inner, .. } | Kind::TruncAbove { inner, .. } => inner.one_sided_lipschitz(node, lo, hi)?,
            Kind::Reflect(inner) => inner.one_sided_lipschitz(node, -hi, -lo)?,
            Kind::Scale { inner, factor } => {
                if *factor >= 0.0 {
                    factor * inner.one_sided_lipschitz(node, lo, hi)?
                } else {
                    sampled_decrease(|y| self.eval(node, y), lo, hi)?
                }
            }
            Kind::Clamp { inner, lower, upper } => {
                let (a, b) = (lo.max(lower[node]), hi.min(upper[node]));
                if a > b {
                    0.0
                } else {
                    inner.one_sided_lipschitz(node, a, b)?
                }
            }
        };
        Ok(value)
    }

    /// Structural monotonicity: `y -> f(x, y)` is nonincreasing for every node.
    pub fn is_nonincreasing(&self) -> bool {
        match &*self.0 {
            Kind::Power { coeff, .. } | Kind::Exp { coeff } => coeff.all(|c| c >= 0.0),
            Kind::Bounded { shape, .. } => *shape != BoundedShape::Rational,
            Kind::Tabulated { tables, .. } => tables.iter().all(Table::nonincreasing),
            Kind::Custom { nonincreasing, .. } => *nonincreasing,
            Kind::Sum(a, b) => a.is_nonincreasing() && b.is_nonincreasing(),
            Kind::TruncBelow { inner, .. } | Kind::TruncAbove { inner, .. } | Kind::Reflect(inner) | Kind::Clamp { inner, .. } => {
                inner.is_nonincreasing()
            }
            Kind::Scale { inner, factor } => *factor >= 0.0 && inner.is_nonincreasing(),
        }
    }

    /// Structural property: `|f(x, y)|` is nondecreasing in `|y|` and `f(x, 0) = 0`.
    pub fn abs_monotone(&self) -> bool {
        match &*self.0 {
            Kind::Power { .. } | Kind::Exp { .. } => true,
            Kind::Bounded { shape, .. } => *shape != BoundedShape::Rational,
            Kind::Reflect(inner) | Kind::Scale { inner, .. } => inner.abs_monotone(),
            _ => false,
        }
    }

    /// `sup { |f(node, y)| : lo <= y <= hi }`.
    ///
    /// Exact at the endpoints for magnitude-monotone families and at the
    /// breakpoints for tables; sampled with a golden-section refinement otherwise.
    pub fn envelope(&self, node: usize, lo: f64, hi: f64) -> f64 {
        if lo > hi {
            return 0.0;
        }
        if self.abs_monotone() {
            return self.eval(node, lo).abs().max(self.eval(node, hi).abs());
        }
        if let Kind::Tabulated { tables, group } = &*self.0 {
            let table = table_for(tables, group, node);
            return table
                .points
                .iter()
                .map(|p| p.0)
                .filter(|y| *y > lo && *y < hi)
                .chain([lo, hi])
                .map(|y| table.eval(y).abs())
                .fold(0.0, f64::max);
        }
        let mag = |y: f64| self.eval(node, y).abs();
        const SAMPLES: usize = 512;
        let step = (hi - lo) / SAMPLES as f64;
        let (mut best_y, mut best) = (lo, mag(lo));
        for k in 1..=SAMPLES {
            let y = lo + k as f64 * step;
            let v = mag(y);
            if v > best {
                best = v;
                best_y = y;
            }
        }
        if step > 0.0 {
            let (mut a, mut b) = ((best_y - step).max(lo), (best_y + step).min(hi));
            let ratio = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..60 {
                let c = b - ratio * (b - a);
                let d = a + ratio * (b - a);
                if mag(c) >= mag(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            best = best.max(mag(0.5 * (a + b)));
        }
        best
    }

    /// Check per-node data against the number of nodes.
    pub fn check_nodes(&self, len: usize) -> Result<(), NonlinearityError> {
        let check = |field: &NodeField| match field.len() {
            Some(got) if got != len => Err(NonlinearityError::NodeCount { got, expected: len }),
            _ => Ok(()),
        };
        match &*self.0 {
            Kind::Power { coeff, .. } | Kind::Exp { coeff } => check(coeff),
            Kind::Bounded { bound, .. } => check(bound),
            Kind::Tabulated { group, .. } => match group {
                Some(g) if g.len() != len => Err(NonlinearityError::NodeCount { got: g.len(), expected: len }),
                _ => Ok(()),
            },
            Kind::Custom { .. } => Ok(()),
            Kind::Sum(a, b) => a.check_nodes(len).and(b.check_nodes(len)),
            Kind::TruncBelow { inner, weight, .. } | Kind::TruncAbove { inner, weight, .. } => {
                check(weight)?;
                inner.check_nodes(len)
            }
            Kind::Reflect(inner) | Kind::Scale { inner, .. } => inner.check_nodes(len),
            Kind::Clamp { inner, lower, upper } => {
                for v in [lower, upper] {
                    if v.len() != len {
                        return Err(NonlinearityError::NodeCount { got: v.len(), expected: len });
                    }
                }
                inner.check_nodes(len)
            }
        }
    }

    pub fn describe(&self) -> String {
        match &*self.0 {
            Kind::Power { p, .. } => format!("power(p={p})"),
            Kind::Exp { .. } => "exp".into(),
            Kind::Bounded { shape, .. } => format!("bounded({shape:?})"),
            Kind::Tabulated { tables, .. } => format!("tabulated({} tables)", tables.len()),
            Kind::Custom { nonincreasing, .. } => format!("custom(nonincreasing={nonincreasing})"),
            Kind::Sum(a, b) => format!("{} + {}", a.describe(), b.describe()),
            Kind::TruncBelow { inner, level, .. } => format!("max({}, -{level} phi)", inner.describe()),
            Kind::TruncAbove { inner, level, .. } => format!("min({}, {level} phi)", inner.describe()),
            Kind::Reflect(inner) => format!("reflect({})", inner.describe()),
            Kind::Scale { inner, factor } => format!("{factor} * {}", inner.describe()),
            Kind::Clamp { inner, .. } => format!("clamp({})", inner.describe()),
        }
    }
}

fn table_for<'a>(tables: &'a [Table], group: &Option<Arc<[usize]>>, node: usize) -> &'a Table {
    match group {
        Some(g) => &tables[g[node]],
        None => &tables[0],
    }
}

/// Largest chord decrease over a fine sample, padded slightly.
fn sampled_decrease(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64, NonlinearityError> {
    const SAMPLES: usize = 2048;
    if hi == lo {
        return Ok(0.0);
    }
    let step = (hi - lo) / SAMPLES as f64;
    let mut worst = 0.0f64;
    let mut prev = f(lo);
    for k in 1..=SAMPLES {
        let next = f(lo + k as f64 * step);
        let slope = (prev - next) / step;
        if !slope.is_finite() {
            return Err(NonlinearityError::LipschitzUnavailable { lower: lo, upper: hi });
        }
        worst = worst.max(slope);
        prev = next;
    }
    Ok(worst * 1.01)
}

/// Outcome of the structural checks on a nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    /// `f(x, y) y <= 0`.
    pub sign: bool,
    /// Continuity in `y` (no jumps detected).
    pub caratheodory: bool,
    /// `sum_i sup_{|y| <= r} |f(i, y)| rho_i m_i < inf` for each probe radius.
    pub locally_bounded: bool,
    /// `f(u)` is finite for every finite `u`.
    pub integrable: bool,
    /// Quasi-continuity of the data; automatic on a finite space.
    pub quasi_continuous: bool,
    pub failures: Vec<String>,
}

impl ConditionReport {
    pub fn all_ok(&self) -> bool {
        self.sign && self.caratheodory && self.locally_bounded && self.integrable && self.quasi_continuous
    }
}

/// Probe the standing assumptions on `f` over `nodes` and magnitudes up to `radius`.
pub fn validate(f: &Nonlinearity, rho: &[f64], cells: &[f64], radius: f64) -> ConditionReport {
    let n = cells.len();
    let mut failures = Vec::new();
    let probes: Vec<f64> = (0..=200)
        .map(|k| radius * (k as f64 / 200.0).powi(2))
        .flat_map(|y| [y, -y])
        .collect();
    let mut sign = true;
    let mut integrable = true;
    let mut caratheodory = true;
    let mut sorted = probes.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    for node in sample_nodes(n) {
        for &y in &probes {
            let v = f.eval(node, y);
            if !v.is_finite() {
                integrable = false;
                failures.push(format!("f({node}, {y}) is not finite"));
                break;
            }
            if v * y > 1e-12 * (1.0 + v.abs() * y.abs()) {
                sign = false;
                failures.push(format!("sign condition fails at node {node}, y = {y}"));
                break;
            }
        }
        if !integrable {
            continue;
        }
        for pair in sorted.windows(2) {
            if let Some(at) = find_jump(|y| f.eval(node, y), pair[0], pair[1]) {
                caratheodory = false;
                failures.push(format!("jump at node {node}, y = {at}"));
                break;
            }
        }
    }
    let locally_bounded = [1.0, radius.max(1.0)].iter().all(|&r| {
        let total: f64 = (0..n).map(|i| f.envelope(i, -r, r) * rho[i] * cells[i]).sum();
        total.is_finite()
    });
    if !locally_bounded {
        failures.push("envelope is not summable".into());
    }
    ConditionReport { sign, caratheodory, locally_bounded, integrable, quasi_continuous: true, failures }
}

/// At most 64 evenly spaced nodes.
fn sample_nodes(n: usize) -> Vec<usize> {
    if n <= 64 {
        (0..n).collect()
    } else {
        (0..64).map(|k| k * (n - 1) / 63).collect()
    }
}

/// Bisect towards the larger increment; a continuous function's increments vanish.
fn find_jump(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> Option<f64> {
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = f(mid);
        if (fm - fa).abs() >= (fb - fm).abs() {
            b = mid;
            fb = fm;
        } else {
            a = mid;
            fa = fm;
        }
    }
    let scale = 1.0 + fa.abs().max(fb.abs());
    ((fb - fa).abs() > 1e-6 * scale).then_some(0.5 * (a + b))
}

/// Spot-check `c1 <= |g(x, y)| / |f(x, y)| <= c2` for `|y| >= r` on geometric samples up to `r * 1e3`.
pub fn check_equivalence(
    f: &Nonlinearity,
    g: &Nonlinearity,
    nodes: usize,
    c1: f64,
    c2: f64,
    r: f64,
) -> Result<(), NonlinearityError> {
    if !(c1 > 0.0 && c2 >= c1 && r > 0.0) {
        return Err(invalid(format!("equivalence constants c1 = {c1}, c2 = {c2}, r = {r} are invalid")));
    }
    for node in 0..nodes {
        for k in 0..=60 {
            let mag = r * 10f64.powf(3.0 * k as f64 / 60.0);
            for y in [mag, -mag] {
                let (fy, gy) = (f.eval(node, y).abs(), g.eval(node, y).abs());
                if fy == 0.0 && gy == 0.0 {
                    continue;
                }
                let ratio = gy / fy;
                if !(ratio >= c1 * (1.0 - 1e-12) && ratio <= c2 * (1.0 + 1e-12)) {
                    return Err(NonlinearityError::NotEquivalent { node, y, ratio, lower: c1, upper: c2 });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_values_and_bounds() {
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        assert_eq!(f.eval(0, 2.0), -8.0);
        assert_eq!(f.eval(0, -2.0), 8.0);
        assert_eq!(f.derivative(0, -2.0), -12.0);
        assert_eq!(f.one_sided_lipschitz(0, -1.0, 2.0).unwrap(), 12.0);
        assert_eq!(f.envelope(0, -3.0, 2.0), 27.0);
        assert!(f.is_nonincreasing() && f.abs_monotone());
    }

    #[test]
    fn sublinear_power_has_no_bound_at_zero() {
        let f = Nonlinearity::power(0.5, 1.0).unwrap();
        assert!(f.one_sided_lipschitz(0, -1.0, 1.0).is_err());
        assert!((f.one_sided_lipschitz(0, 0.25, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncation_and_reflection() {
        let f = Nonlinearity::power(3.0, 1.0).unwrap();
        let t = f.truncated_below(2.0, 1.0);
        assert_eq!(t.eval(0, 3.0), -2.0);
        assert_eq!(t.eval(0, -3.0), 27.0);
        assert_eq!(t.derivative(0, 3.0), 0.0);
        let r = Nonlinearity::exp(1.0).unwrap().reflected();
        assert_eq!(r.eval(0, 1.0), Nonlinearity::exp(1.0).unwrap().eval(0, 1.0));
    }

    #[test]
    fn table_interpolates_and_extrapolates() {
        let f = Nonlinearity::tabulated(vec![(-1.0, 2.0), (0.0, 0.0), (2.0, -1.0)]).unwrap();
        assert_eq!(f.eval(0, -0.5), 1.0);
        assert_eq!(f.eval(0, 5.0), -1.0);
        assert_eq!(f.eval(0, -5.0), 2.0);
        assert_eq!(f.one_sided_lipschitz(0, -2.0, 3.0).unwrap(), 2.0);
        assert!(f.is_nonincreasing());
        assert!(Nonlinearity::tabulated(vec![(0.0, 0.0)]).is_err());
    }

    #[test]
    fn envelope_of_rational_shape() {
        let f = Nonlinearity::bounded(1.0, BoundedShape::Rational).unwrap();
        assert!((f.envelope(0, -4.0, 3.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation_flags_sign_and_jumps() {
        let cells = [1.0; 3];
        let ok = validate(&Nonlinearity::power(3.0, 1.0).unwrap(), &cells, &cells, 10.0);
        assert!(ok.all_ok(), "{:?}", ok.failures);
        let wrong_sign = Nonlinearity::custom(|_, y| y, false);
        assert!(!validate(&wrong_sign, &cells, &cells, 10.0).sign);
        let step = Nonlinearity::custom(|_, y| if y > 0.3 { -1.0 } else { -y.max(0.0) }, true);
        assert!(!validate(&step, &cells, &cells, 10.0).caratheodory);
    }

    #[test]
    fn equivalence_spot_check() {
        let cubic = Nonlinearity::power(3.0, 1.0).unwrap();
        let linear = Nonlinearity::power(1.0, 1.0).unwrap();
        assert!(check_equivalence(&cubic, &linear, 2, 0.5, 2.0, 1.0).is_err());
        let perturbed = cubic.plus(&Nonlinearity::bounded(1.0, BoundedShape::Rational).unwrap());
        check_equivalence(&cubic, &perturbed, 2, 1.0, 2.0, 1.0).unwrap();
    }
}
