use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab")).args(args).output().expect("lab runs")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn arg(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn fix1_scenario_solves_to_one() {
    let out = lab(&["run", arg(&scenario("fix1_solve.toml"))]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("# schema: node,u,f_of_u,Rmu,residual\n"));
    let u: f64 = csv.lines().nth(2).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((u - 1.0).abs() < 1e-10);
}

#[test]
fn missing_measure_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("fix1_solve.toml")).unwrap();
    let broken = text.replace("[measure]\natoms = [[0, 3.0, \"concentrated\"]]\n", "");
    assert_ne!(broken, text);
    let config = dir.path().join("broken.toml");
    std::fs::write(&config, broken).unwrap();
    let out_csv = dir.path().join("out.csv");
    let out = lab(&["run", arg(&config), "--out", arg(&out_csv)]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("\"kind\":\"validation\""), "{stderr}");
    let log = std::fs::read_to_string(dir.path().join("out.csv.log")).unwrap();
    assert!(log.contains("\"exit_code\":2"));
}

#[test]
fn suite_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for p in &paths {
        let out = lab(&["suite", "--seed", "42", "--instances", "12", "--out", arg(p)]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert!(a.starts_with(b"# schema: instance,suite,law"));
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());
    assert!(std::fs::read_to_string(dir.path().join("a.csv.log")).unwrap().contains("runtime_seconds"));
}

#[test]
fn flag_subcommands_merge_fragments() {
    let (form, nl, measure) = (scenario("form.toml"), scenario("cubic.toml"), scenario("measure.toml"));
    let out = lab(&["solve", "--form", arg(&form), "--nonlinearity", arg(&nl), "--measure", arg(&measure), "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);

    let phi = scenario("phi.toml");
    let out = lab(&[
        "reduce", "--form", arg(&form), "--nl", arg(&nl), "--measure", arg(&measure), "--phi", arg(&phi), "--schedule", "1:2:64",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("# schema: n,sup_change,l1rho_f,atom_mass_estimate"));

    let out = lab(&["capacity", "--form", arg(&form), "--set", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.contains("0,true,1.0000000000000000e0,1.5000000000000000e0"), "{csv}");
}

#[test]
fn inequivalent_absorptions_fail_the_spot_check() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("equiv_study.toml")).unwrap();
    let start = text.find("[task.compare.nonlinearity]").unwrap();
    let linear = format!("{}[task.compare.nonlinearity]\nfamily = \"linear\"\n", &text[..start]);
    let config = dir.path().join("linear.toml");
    std::fs::write(&config, linear).unwrap();
    let out = lab(&["equiv", arg(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("validation"));
}
