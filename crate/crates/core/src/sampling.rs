//! Seeded generators for random forms, measures and nonlinearities.
//!
//! Every instance draws from its own ChaCha stream keyed by `(seed, index)`,
//! so results do not depend on the order in which instances are evaluated.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{FormError, NonlinearityError};
use crate::form::{FormMatrix, Provenance};
use crate::green::Discretization;
use crate::measure::DiscreteMeasure;
use crate::nonlinearity::Nonlinearity;
use crate::space::StateSpace;

/// Independent generator for instance `index` of a run seeded with `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Transient Markov form on `n` abstract nodes.
///
/// A weighted path keeps the graph connected, random chords add jumps, and
/// killing sits on a random nonempty node set. Cell measures lie in `[0.5, 1.5]`.
pub fn random_form(rng: &mut impl Rng, n: usize) -> Result<FormMatrix, FormError> {
    let cells: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let space = StateSpace::from_points(1, (0..n).map(|i| vec![i as f64]).collect(), cells, None)?;
    let mut b = DMatrix::zeros(n, n);
    let chord = (3.0 / n as f64).min(1.0);
    for i in 0..n {
        for j in i + 1..n {
            let w = if j == i + 1 {
                rng.gen_range(0.2..1.0)
            } else if rng.gen_bool(chord) {
                rng.gen_range(0.05..1.0)
            } else {
                continue;
            };
            b[(i, j)] -= w;
            b[(j, i)] -= w;
            b[(i, i)] += w;
            b[(j, j)] += w;
        }
    }
    let anchor = rng.gen_range(0..n);
    for i in 0..n {
        if i == anchor || rng.gen_bool(0.3) {
            b[(i, i)] += rng.gen_range(0.05..1.0);
        }
    }
    FormMatrix::new(space, b, Provenance::Custom)
}

/// Signed measure with diffuse mass on about half the nodes and
/// concentrated atoms on about a third, masses uniform in `[-1, 1]`.
pub fn random_measure(rng: &mut impl Rng, disc: &Discretization) -> DiscreteMeasure {
    let n = disc.len();
    let mut draw = |p: f64| DVector::from_fn(n, |_, _| if rng.gen_bool(p) { rng.gen_range(-1.0..1.0) } else { 0.0 });
    let diffuse = draw(0.5);
    let concentrated = draw(0.35);
    DiscreteMeasure::from_parts(disc.form().space().clone(), diffuse, concentrated).expect("finite masses on the form's space")
}

/// Nonnegative measure with the same layout as [`random_measure`].
pub fn random_positive_measure(rng: &mut impl Rng, disc: &Discretization) -> DiscreteMeasure {
    random_measure(rng, disc).variation()
}

/// Diffuse-only measure with density uniform in `[-1, 1]` on about half the nodes.
pub fn random_diffuse_measure(rng: &mut impl Rng, disc: &Discretization) -> DiscreteMeasure {
    let (diffuse, _) = random_measure(rng, disc).split_dc();
    diffuse
}

/// Random node subset, each node kept with probability one half.
pub fn random_subset(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).filter(|_| rng.gen_bool(0.5)).collect()
}

/// Scale `mu` so that `max_i (R|mu|)_i` equals `target` (zero stays zero).
pub fn normalise(disc: &Discretization, mu: &DiscreteMeasure, target: f64) -> DiscreteMeasure {
    let top = disc.green().apply_masses(&mu.variation().node_masses()).amax();
    if top > 0.0 {
        mu.scale(target / top)
    } else {
        mu.clone()
    }
}

/// Absorption families used by the randomized suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `-c(x) y^3`.
    Cubic,
    /// `-c(x) sign(y) (e^|y| - 1)`.
    Exponential,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Self::Cubic => "cubic",
            Self::Exponential => "exp",
        }
    }
}

/// Family member with node coefficients uniform in `[0.5, 2]`.
pub fn random_nonlinearity(rng: &mut impl Rng, family: Family, n: usize) -> Result<(Nonlinearity, Vec<f64>), NonlinearityError> {
    let coeff: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let f = match family {
        Family::Cubic => Nonlinearity::power(3.0, coeff.clone())?,
        Family::Exponential => Nonlinearity::exp(coeff.clone())?,
    };
    Ok((f, coeff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u32> = (0..4).map(|_| instance_rng(7, 3).gen()).collect();
        let b: Vec<u32> = (0..4).map(|_| instance_rng(7, 3).gen()).collect();
        assert_eq!(a, b);
        assert_ne!(instance_rng(7, 3).gen::<u64>(), instance_rng(7, 4).gen::<u64>());
    }

    #[test]
    fn random_forms_are_transient() {
        let mut rng = instance_rng(1, 0);
        for n in [1, 2, 5, 32, 64] {
            let form = random_form(&mut rng, n).unwrap();
            let disc = Discretization::new(form).unwrap();
            assert!(disc.green().kernel().iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn normalisation_hits_target() {
        let mut rng = instance_rng(2, 0);
        let disc = Discretization::new(random_form(&mut rng, 8).unwrap()).unwrap();
        let mu = normalise(&disc, &random_measure(&mut rng, &disc), 1.5);
        let top = disc.green().apply_masses(&mu.variation().node_masses()).amax();
        assert!((top - 1.5).abs() < 1e-12 || top == 0.0);
    }
}
