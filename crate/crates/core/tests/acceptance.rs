//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Oracles here are computed independently of the library: LU inverses,
//! exhaustive active-set enumeration and brute-force grid search.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use measure_lab::capacity::{capacity, CapacityOptions};
use measure_lab::form::{assemble, FormMatrix, Provenance};
use measure_lab::green::{resolvent, Discretization};
use measure_lab::measure::{DiscreteMeasure, Tag};
use measure_lab::nonlinearity::Nonlinearity;
use measure_lab::operator::OperatorSpec;
use measure_lab::reduction::{reduce, ReductionOptions};
use measure_lab::sampling::{instance_rng, normalise, random_form, random_measure, random_nonlinearity, Family};
use measure_lab::scenario::{run_scenario, ScenarioConfig};
use measure_lab::solver::{solve, SolverOptions};
use measure_lab::space::{build_space, GridSpec, StateSpace};
use measure_lab::suite::{admissible_suite, apriori_suite, reduction_suite, PropertySuiteReport, SuiteOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SEED: u64 = 42;

/// Outcome of one criterion: failure messages and the CSV it produced.
#[derive(Default)]
struct Outcome {
    problems: Vec<String>,
    csv: String,
    note: String,
}

impl Outcome {
    fn check(&mut self, ok: bool, message: impl FnOnce() -> String) {
        if !ok {
            self.problems.push(message());
        }
    }

    fn within(&mut self, elapsed: Duration, budget: Duration) {
        self.check(elapsed <= budget, || format!("runtime {:.2?} exceeds {:.0?}", elapsed, budget));
    }
}

fn sup(v: &DVector<f64>) -> f64 {
    v.amax()
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn fix1() -> FormMatrix {
    FormMatrix::new(StateSpace::abstract_nodes(1).unwrap(), DMatrix::from_element(1, 1, 2.0), Provenance::Custom).unwrap()
}

fn fix2() -> FormMatrix {
    let space = build_space(&GridSpec::interval(-1.5, 1.5, 1.0)).unwrap();
    assemble(&space, &OperatorSpec::laplacian()).unwrap()
}

fn suite_csv(report: &PropertySuiteReport) -> String {
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn worst(report: &PropertySuiteReport, law: &str) -> Option<f64> {
    report.records.iter().filter(|r| r.law == law).map(|r| r.discrepancy).reduce(f64::max)
}

fn failing_laws(report: &PropertySuiteReport) -> Vec<String> {
    report.records.iter().filter(|r| !r.passed()).map(|r| format!("{}#{}={:.3e}", r.law, r.instance, r.discrepancy)).take(5).collect()
}

fn fixture_exactness() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let disc = Discretization::new(fix1()).unwrap();
    let f = Nonlinearity::power(3.0, 1.0).unwrap();
    let mu = DiscreteMeasure::zero(disc.form().space().clone()).with_atom(0, 3.0, Tag::Concentrated).unwrap();
    let opts = ReductionOptions::default();
    let report = reduce(&disc, &f, &mu, &DVector::from_element(1, 1.0), &opts).unwrap();
    for level in &report.levels {
        out.check((level.u[0] - 1.0).abs() <= 1e-10, || format!("u_{} = {}", level.level, level.u[0]));
    }
    // Every scheduled level, including those after the early stop.
    for &n in opts.schedule.levels() {
        let fn_ = f.truncated_below(n, 1.0);
        let u = solve(&disc, &fn_, &mu, &opts.solver).unwrap().u[0];
        out.check((u - 1.0).abs() <= 1e-10, || format!("truncated level {n}: u = {u}"));
    }
    out.check((report.u_star[0] - 1.0).abs() <= 1e-10, || format!("u* = {}", report.u_star[0]));
    let gap = report.mu_star.max_gap(&mu).unwrap();
    out.check(gap <= 1e-10, || format!("mu* differs from mu by {gap:e}"));
    out.within(started.elapsed(), Duration::from_millis(100));
    out.note = format!("{} levels checked", opts.schedule.levels().len());
    out
}

fn green_markov_suite() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let mut forms = vec![("FIX1".to_string(), fix1()), ("FIX2".to_string(), fix2())];
    for k in 0..50u64 {
        let mut rng = instance_rng(SEED, 1000 + k);
        let n = rng.gen_range(1..=64);
        forms.push((format!("random#{k}(N={n})"), random_form(&mut rng, n).unwrap()));
    }
    for (k, (name, form)) in forms.iter().enumerate() {
        let disc = Discretization::new(form.clone()).unwrap();
        let g = disc.green().kernel();
        let b = form.matrix();
        let n = form.len();
        let id = DMatrix::<f64>::identity(n, n);
        let asym = inf_norm(&(g - g.transpose()));
        out.check(asym <= 1e-12, || format!("{name}: asymmetry {asym:e}"));
        out.check(g.iter().all(|v| *v >= 0.0), || format!("{name}: negative Green entry"));
        let duality = inf_norm(&(b * g - &id));
        out.check(duality <= 1e-10, || format!("{name}: duality residual {duality:e}"));
        let oracle = b.clone().lu().try_inverse().expect("transient form");
        let gap = inf_norm(&(g - &oracle)) / inf_norm(&oracle);
        out.check(gap <= 1e-10, || format!("{name}: Green kernel differs from LU inverse by {gap:e}"));
        let ones = DVector::from_element(n, 1.0);
        for alpha in [0.1, 1.0, 10.0] {
            let r1 = alpha * resolvent(form, alpha, &ones).unwrap();
            out.check(r1.iter().all(|v| *v <= 1.0 + 1e-12), || format!("{name}: alpha R_alpha 1 exceeds 1 at alpha {alpha}"));
        }
        let mut rng = instance_rng(SEED, 2000 + k as u64);
        for _ in 0..20 {
            let (alpha, beta) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let g0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let lhs = resolvent(form, alpha, &g0).unwrap() - resolvent(form, beta, &g0).unwrap();
            let rhs = (beta - alpha) * resolvent(form, alpha, &resolvent(form, beta, &g0).unwrap()).unwrap();
            let residual = sup(&(lhs - rhs));
            out.check(residual <= 1e-10, || format!("{name}: resolvent identity residual {residual:e}"));
        }
    }
    out.within(started.elapsed(), Duration::from_secs(5));
    out.note = format!("{} forms", forms.len());
    out
}

/// Minimum of `w^T B w` subject to `w >= 1` on `set`, by enumerating active sets.
fn capacity_oracle(b: &DMatrix<f64>, set: &[usize]) -> (f64, DVector<f64>) {
    let n = b.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << set.len()) {
        let active: Vec<usize> = set.iter().enumerate().filter(|(k, _)| mask & (1 << k) != 0).map(|(_, &i)| i).collect();
        let free: Vec<usize> = (0..n).filter(|i| !active.contains(i)).collect();
        let mut w = DVector::zeros(n);
        for &i in &active {
            w[i] = 1.0;
        }
        if !free.is_empty() {
            let bff = DMatrix::from_fn(free.len(), free.len(), |r, c| b[(free[r], free[c])]);
            let rhs = DVector::from_fn(free.len(), |r, _| -active.iter().map(|&j| b[(free[r], j)]).sum::<f64>());
            let solution = bff.lu().solve(&rhs).expect("principal blocks of a definite matrix are invertible");
            for (r, &i) in free.iter().enumerate() {
                w[i] = solution[r];
            }
        }
        if set.iter().any(|&i| w[i] < 1.0 - 1e-12) {
            continue;
        }
        let value = w.dot(&(b * &w));
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, w));
        }
    }
    best.expect("the all-active set is always feasible")
}

fn capacity_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let opts = CapacityOptions::default();
    let r = capacity(&fix2(), &[0], opts).unwrap();
    out.check((r.value - 1.5).abs() <= 1e-8, || format!("FIX2 Cap({{1}}) = {}", r.value));
    let expected = DVector::from_vec(vec![1.0, 0.5]);
    out.check(sup(&(&r.potential - expected)) <= 1e-8, || format!("FIX2 equilibrium {:?}", r.potential.as_slice()));

    let mut oracle_cases = 0;
    for k in 0..50u64 {
        let mut rng = instance_rng(SEED, 3000 + k);
        let n = rng.gen_range(1..=6);
        let form = random_form(&mut rng, n).unwrap();
        let set: Vec<usize> = loop {
            let s: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
            if !s.is_empty() {
                break s;
            }
        };
        let got = capacity(&form, &set, opts).unwrap();
        let (value, w) = capacity_oracle(form.matrix(), &set);
        oracle_cases += 1;
        out.check((got.value - value).abs() <= 1e-8 * value.max(1.0), || format!("oracle #{k}: {} vs {value}", got.value));
        out.check(sup(&(&got.potential - &w)) <= 1e-8, || format!("oracle #{k}: potential mismatch"));
    }

    for k in 0..50u64 {
        let mut rng = instance_rng(SEED, 4000 + k);
        let n = rng.gen_range(2..=24);
        let form = random_form(&mut rng, n).unwrap();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            let first = rng.gen_range(0..n);
            (0..n).filter(|&i| i == first || rng.gen_bool(0.3)).collect()
        };
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        let mut union: Vec<usize> = a.iter().chain(&b).copied().collect();
        union.sort_unstable();
        union.dedup();
        let cap = |s: &[usize]| capacity(&form, s, opts).unwrap().value;
        let (ca, cb, cu) = (cap(&a), cap(&b), cap(&union));
        let slack = 1e-8 * cu.max(1.0);
        out.check(ca <= cu + slack && cb <= cu + slack, || format!("pair #{k}: monotonicity {ca} {cb} > {cu}"));
        out.check(cu <= ca + cb + slack, || format!("pair #{k}: subadditivity {cu} > {ca} + {cb}"));
    }
    out.within(started.elapsed(), Duration::from_secs(10));
    out.note = format!("{oracle_cases} oracle cases, 50 pairs");
    out
}

fn apriori_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let report = apriori_suite(&SuiteOptions::new(SEED, 200));
    let elapsed = started.elapsed();
    out.check(report.census.instances == 200, || format!("{} instances", report.census.instances));
    out.check(report.census.max_nodes <= 32, || format!("N up to {}", report.census.max_nodes));
    for family in [Family::Cubic, Family::Exponential] {
        out.check(report.records.iter().any(|r| r.family == family), || format!("no {} instances", family.label()));
    }
    for (law, bound) in [("apriori_pointwise", 1e-8), ("apriori_l1", 1e-8), ("subsolution_barrier", 1e-10)] {
        match worst(&report, law) {
            Some(w) => out.check(w <= bound, || format!("{law}: worst {w:e} > {bound:e}")),
            None => out.problems.push(format!("{law} not checked")),
        }
    }
    out.check(report.census.subsolutions > 0, || "no certified subsolutions".into());
    out.check(report.all_passed(), || format!("failing laws: {:?}", failing_laws(&report)));
    out.within(elapsed, Duration::from_secs(60));
    out.note = format!("{} subsolutions", report.census.subsolutions);
    out.csv = suite_csv(&report);
    out
}

/// Solution of `u = G (m f(u) + mu)` by nested grid search inside the
/// a-priori box `|u| <= G|mu|`.
fn brute_force(disc: &Discretization, f: &Nonlinearity, mu: &DiscreteMeasure) -> DVector<f64> {
    let n = disc.len();
    let b = disc.form().matrix();
    let cells = disc.cells();
    let masses = mu.node_masses();
    let bound = disc.green().kernel() * masses.abs();
    let residual = |u: &DVector<f64>| -> f64 {
        let fu = DVector::from_fn(n, |i, _| f.eval(i, u[i]));
        sup(&(b * u - fu.component_mul(cells) - &masses))
    };
    const STEPS: usize = 40;
    let mut center = DVector::zeros(n);
    let mut half = bound.map(|v| v.max(1e-12));
    let points = (STEPS + 1).pow(n as u32);
    for _ in 0..60 {
        let mut best = (f64::INFINITY, center.clone());
        for k in 0..points {
            let mut rem = k;
            let u = DVector::from_fn(n, |i, _| {
                let idx = rem % (STEPS + 1);
                rem /= STEPS + 1;
                center[i] - half[i] + 2.0 * half[i] * idx as f64 / STEPS as f64
            });
            let r = residual(&u);
            if r < best.0 {
                best = (r, u);
            }
        }
        center = best.1;
        half *= 0.4;
        if half.amax() < 1e-12 {
            break;
        }
    }
    center
}

fn oracle_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let mut csv = String::from("# schema: instance,nodes,family,max_abs_diff\ninstance,nodes,family,max_abs_diff\n");
    for k in 0..50u64 {
        let mut rng = instance_rng(SEED, 5000 + k);
        let n = rng.gen_range(1..=3);
        let disc = Discretization::new(random_form(&mut rng, n).unwrap()).unwrap();
        let family = if k % 2 == 0 { Family::Cubic } else { Family::Exponential };
        let (f, _) = random_nonlinearity(&mut rng, family, n).unwrap();
        let target = rng.gen_range(0.5..2.5);
        let mu = normalise(&disc, &random_measure(&mut rng, &disc), target);
        let solver = solve(&disc, &f, &mu, &SolverOptions::default()).unwrap().u;
        let oracle = brute_force(&disc, &f, &mu);
        let diff = sup(&(&solver - &oracle));
        out.check(diff <= 1e-6, || format!("instance {k}: solver and oracle differ by {diff:e}"));
        csv.push_str(&format!("{k},{n},{},{diff:.16e}\n", family.label()));
    }
    out.within(started.elapsed(), Duration::from_secs(60));
    out.note = "50 instances".into();
    out.csv = csv;
    out
}

const REDUCTION_LAWS: &[&str] = &[
    "meet",
    "join",
    "orthogonal_additivity",
    "restriction",
    "smooth_shift",
    "structure_formula",
    "monotone",
    "contraction",
    "diffuse_preserved",
    "projection_minimal",
];

fn reduction_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let report = reduction_suite(&SuiteOptions::new(SEED, 200));
    let elapsed = started.elapsed();
    out.check(report.census.instances == 200, || format!("{} instances", report.census.instances));
    for law in REDUCTION_LAWS {
        match worst(&report, law) {
            Some(w) => out.check(w <= 1e-8, || format!("{law}: worst {w:e}")),
            None => out.problems.push(format!("{law} not checked")),
        }
    }
    let projection_samples = report.records.iter().filter(|r| r.law == "projection_minimal").count();
    out.check(projection_samples >= 200, || format!("{projection_samples} projection checks"));
    out.check(report.census.good_samples >= 200 * 50, || format!("{} sampled good measures", report.census.good_samples));
    out.check(report.all_passed(), || format!("failing laws: {:?}", failing_laws(&report)));
    out.within(elapsed, Duration::from_secs(300));
    out.note = format!("{} records", report.records.len());
    out.csv = suite_csv(&report);
    out
}

fn admissible_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let report = admissible_suite(&SuiteOptions::new(SEED, 20));
    let elapsed = started.elapsed();
    out.check(report.census.instances == 20, || format!("{} instances", report.census.instances));
    match worst(&report, "decay_after_100") {
        Some(w) => out.check(w <= 0.1, || format!("decay ratio {w} > 0.1")),
        None => out.problems.push("decay not checked".into()),
    }
    let admissible = report.records.iter().filter(|r| r.law == "admissible").count();
    out.check(admissible == 20, || format!("{admissible} admissibility checks"));
    out.check(report.all_passed(), || format!("failing laws: {:?}", failing_laws(&report)));
    out.within(elapsed, Duration::from_secs(120));
    out.note = format!("worst decay ratio {:.3}", worst(&report, "decay_after_100").unwrap_or(f64::NAN));
    out.csv = suite_csv(&report);
    out
}

fn study_toml(operator: &str, p: u32) -> String {
    format!(
        r#"
        [space]
        lower = -1.0
        upper = 1.0
        [operator]
        {operator}
        [nonlinearity]
        family = "power"
        p = {p}
        [measure]
        atoms = [{{ site = [0.0], mass = 1.0 }}]
        [task]
        kind = "study"
        ladder = [0.0625, 0.03125, 0.015625, 0.0078125]
        "#
    )
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let var: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    cov / var
}

fn refinement_criterion() -> Outcome {
    let mut out = Outcome::default();
    let started = Instant::now();
    let local = run_scenario(&ScenarioConfig::parse(&study_toml("kind = \"local\"", 3)).unwrap()).unwrap();
    let retention = column(&local.csv, "retention");
    out.check(retention.len() == 4, || "local ladder incomplete".into());
    out.check(retention.iter().all(|r| *r >= 0.9), || format!("local retention {retention:?}"));

    let fractional =
        run_scenario(&ScenarioConfig::parse(&study_toml("kind = \"fractional\"\nalpha = 0.4", 7)).unwrap()).unwrap();
    let h = column(&fractional.csv, "h");
    let frac = column(&fractional.csv, "retention");
    let strictly_decreasing = frac.windows(2).all(|w| w[1] < w[0]);
    out.check(strictly_decreasing, || format!("fractional retention not strictly decreasing: {frac:?}"));
    let rho = spearman(&h, &frac);
    out.check(rho.abs() >= 0.8, || format!("Spearman {rho}"));
    out.check(column(&fractional.csv, "nodes").iter().all(|n| *n <= 2048.0), || "ladder exceeds 2048 nodes".into());
    out.within(started.elapsed(), Duration::from_secs(600));
    out.note = format!(
        "local min retention {:.4}, fractional {:.4} -> {:.4}, Spearman {rho:.2}",
        retention.iter().copied().fold(f64::INFINITY, f64::min),
        frac[0],
        frac[frac.len() - 1]
    );
    out.csv = format!("{}{}", local.csv, fractional.csv);
    out
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "fixture exactness", fixture_exactness),
    (2, "Green/Markov suite", green_markov_suite),
    (3, "capacity", capacity_criterion),
    (4, "solver a-priori bounds", apriori_criterion),
    (5, "brute-force oracle", oracle_criterion),
    (6, "reduction algebra", reduction_criterion),
    (7, "admissible approximation", admissible_criterion),
    (8, "refinement phenomenology", refinement_criterion),
];

fn report(id: usize, name: &str, problems: &[String], elapsed: Duration, note: &str) -> bool {
    let status = if problems.is_empty() { "PASS" } else { "FAIL" };
    println!("{status} criterion {id} ({name}) in {elapsed:.2?}: {note}");
    for p in problems.iter().take(10) {
        println!("    {p}");
    }
    problems.is_empty()
}

fn main() -> ExitCode {
    let mut all = true;
    let mut first_csvs = Vec::new();
    for &(id, name, run) in CRITERIA {
        let started = Instant::now();
        let outcome = run();
        all &= report(id, name, &outcome.problems, started.elapsed(), &outcome.note);
        first_csvs.push((id, outcome.csv));
    }

    let started = Instant::now();
    let mut problems = Vec::new();
    for (id, first) in first_csvs.iter().filter(|(id, _)| (4..=8).contains(id)) {
        let (_, _, run) = CRITERIA[id - 1];
        let again = run().csv;
        if first.is_empty() {
            problems.push(format!("criterion {id} produced no CSV"));
        } else if *first != again {
            problems.push(format!("criterion {id} CSV differs between runs"));
        }
    }
    all &= report(9, "determinism", &problems, started.elapsed(), "criteria 4-8 rerun with the same seed");

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
