//! `lab`: run measure-data reduction scenarios from TOML configurations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use measure_lab::scenario::{log_path, read, run_scenario, write_file, ScenarioConfig, ScenarioError, TaskKind, SCHEMAS};

#[derive(Debug, Parser)]
#[command(name = "lab", version, about = "Semilinear equations with measure data on discrete state spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the task named in the configuration's [task] section.
    Run {
        config: PathBuf,
        /// CSV destination; overrides task.output. Without either, CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a refinement study (task kind forced to `study`).
    Study {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an asymptotic equivalence study (task kind forced to `equiv_study`).
    Equiv {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized property suites.
    Suite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// all, reduction, apriori or admissible.
        #[arg(long, default_value = "all")]
        suites: String,
        #[arg(long)]
        max_nodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Capacity of a node set.
    Capacity {
        /// TOML file with [space] and [operator].
        #[arg(long)]
        form: PathBuf,
        /// Comma-separated node indices.
        #[arg(long, value_delimiter = ',', required = true)]
        set: Vec<i64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the semilinear equation.
    Solve {
        /// TOML file with [space], [operator] and optionally [weights].
        #[arg(long)]
        form: PathBuf,
        /// TOML file with [nonlinearity].
        #[arg(long, alias = "nl")]
        nonlinearity: PathBuf,
        /// TOML file with [measure].
        #[arg(long)]
        measure: PathBuf,
        /// Subsolution as a `node:value` list.
        #[arg(long, requires = "sup")]
        sub: Option<String>,
        /// Supersolution as a `node:value` list.
        #[arg(long = "super", id = "sup", requires = "sub")]
        sup: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Truncate the absorption and pass to the limit.
    Reduce {
        #[arg(long)]
        form: PathBuf,
        #[arg(long, alias = "nonlinearity")]
        nl: PathBuf,
        #[arg(long)]
        measure: PathBuf,
        /// TOML file with [weights] (phi, rho).
        #[arg(long)]
        phi: Option<PathBuf>,
        /// Truncation levels as `start:ratio:end`.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn schema_help() -> String {
    let mut text = String::from("CSV schemas (each artifact starts with a `# schema:` comment):\n");
    for (task, columns) in SCHEMAS {
        text.push_str(&format!("  {task:<16} {columns}\n"));
    }
    text.push_str("\nExit codes: 0 success, 2 invalid input, 3 solver failure.");
    text
}

fn task_fragment(entries: Vec<(&str, toml::Value)>) -> String {
    let task: toml::Table = entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let mut root = toml::Table::new();
    root.insert("task".into(), toml::Value::Table(task));
    root.to_string()
}

fn optional(entries: &mut Vec<(&'static str, toml::Value)>, key: &'static str, value: Option<toml::Value>) {
    if let Some(v) = value {
        entries.push((key, v));
    }
}

fn with_kind(path: &Path, kind: TaskKind) -> Result<ScenarioConfig, ScenarioError> {
    let mut config = ScenarioConfig::from_path(path)?;
    config.task.kind = kind;
    Ok(config)
}

fn fragments(files: &[&Path], task: String) -> Result<ScenarioConfig, ScenarioError> {
    let mut texts = files.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
    texts.push(task);
    ScenarioConfig::from_fragments(&texts)
}

fn configure(command: Command) -> Result<(ScenarioConfig, Option<PathBuf>), ScenarioError> {
    use toml::Value::{Float, Integer, String as Text};
    Ok(match command {
        Command::Run { config, out } => (ScenarioConfig::from_path(&config)?, out),
        Command::Study { config, out } => (with_kind(&config, TaskKind::Study)?, out),
        Command::Equiv { config, out } => (with_kind(&config, TaskKind::EquivStudy)?, out),
        Command::Suite { seed, instances, suites, max_nodes, out } => {
            let seed = i64::try_from(seed).map_err(|_| ScenarioError::Invalid {
                field: "seed".into(),
                message: "must fit in a signed 64-bit integer".into(),
            })?;
            let mut task = vec![
                ("kind", Text("suite".into())),
                ("seed", Integer(seed)),
                ("instances", Integer(instances as i64)),
                ("suites", Text(suites)),
            ];
            optional(&mut task, "max_nodes", max_nodes.map(|n| Integer(n as i64)));
            (ScenarioConfig::from_fragments(&[task_fragment(task)])?, out)
        }
        Command::Capacity { form, set, tol, out } => {
            let mut task = vec![("kind", Text("capacity".into())), ("set", toml::Value::Array(set.into_iter().map(Integer).collect()))];
            optional(&mut task, "tol", tol.map(Float));
            (fragments(&[&form], task_fragment(task))?, out)
        }
        Command::Solve { form, nonlinearity, measure, sub, sup, tol, out } => {
            let mut task = vec![("kind", Text("solve".into()))];
            optional(&mut task, "sub", sub.map(Text));
            optional(&mut task, "sup", sup.map(Text));
            optional(&mut task, "tol", tol.map(Float));
            (fragments(&[&form, &nonlinearity, &measure], task_fragment(task))?, out)
        }
        Command::Reduce { form, nl, measure, phi, schedule, tol, out } => {
            let mut task = vec![("kind", Text("reduce".into()))];
            optional(&mut task, "schedule", schedule.map(Text));
            optional(&mut task, "tol", tol.map(Float));
            let mut files: Vec<&Path> = vec![&form, &nl, &measure];
            if let Some(phi) = &phi {
                files.push(phi);
            }
            (fragments(&files, task_fragment(task))?, out)
        }
    })
}

fn execute(config: &ScenarioConfig, out: Option<&Path>) -> Result<(), ScenarioError> {
    let artifacts = run_scenario(config)?;
    match out {
        Some(path) => artifacts.write(path),
        None => {
            print!("{}", artifacts.csv);
            eprintln!("{}", artifacts.summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(schema_help()).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let mut out = None;
    let result = configure(cli.command).and_then(|(config, cli_out)| {
        out = cli_out.or_else(|| config.task.output.clone());
        execute(&config, out.as_deref())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let block = err.to_json();
            eprintln!("{block}");
            if let Some(path) = out {
                // Best effort: the error block is already on stderr.
                let _ = write_file(&log_path(&path), &format!("{block}\n"));
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
