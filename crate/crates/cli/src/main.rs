mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use malm::config::{Provenance, RunConfig};
use malm::{MalmConfig, MalmError};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    MalmConfig::KEYS
        .iter()
        .map(|key| {
            let defaults = MalmConfig::desk_synthetic();
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .global(true)
                .help_heading("Config keys")
                .help(format!(
                    "desk default {}",
                    defaults.get(key).unwrap_or_default()
                ))
        })
        .collect()
}

fn data_arg(required: bool, help: &'static str) -> Arg {
    Arg::new("data")
        .long("data")
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .required(true)
}

pub fn cli() -> Command {
    Command::new("malm")
        .about("Image-recipe retrieval with two-level matching and masked self-distillation")
        .arg_required_else_help(true)
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("flat `key = value` TOML file; flags override it"),
        )
        .arg(
            Arg::new("preset")
                .long("preset")
                .value_parser(["desk", "paper"])
                .default_value("desk")
                .global(true)
                .help("base values before the file and flags"),
        )
        .arg(
            Arg::new("run-root")
                .long("run-root")
                .value_name("DIR")
                .value_parser(value_parser!(PathBuf))
                .default_value("run")
                .global(true)
                .help("outputs go to <run-root>/<timestamp>/"),
        )
        .args(config_args())
        .subcommand(
            Command::new("generate-data")
                .about("Write the synthetic train and test sets as Recipe1M-format directories"),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model; synthetic data unless --data is given")
                .arg(data_arg(false, "directory holding dataset.json and images"))
                .arg(
                    Arg::new("val")
                        .long("val")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("validation directory; selects the best epoch"),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Bagged retrieval metrics of a checkpoint")
                .arg(checkpoint_arg())
                .arg(data_arg(true, "directory holding dataset.json and images")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Loss-component and mask-ratio tables on synthetic data")
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .value_delimiter(',')
                        .value_parser(value_parser!(u64))
                        .default_value("0,1,2,3,4"),
                )
                .arg(
                    Arg::new("table")
                        .long("table")
                        .value_parser(["components", "mask-ratio", "both"])
                        .default_value("both"),
                ),
        )
        .subcommand(
            Command::new("retrieve")
                .about("Top-k corpus items for one recipe or image query")
                .arg(checkpoint_arg())
                .arg(
                    Arg::new("corpus")
                        .long("corpus")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(
                    Arg::new("query-recipe")
                        .long("query-recipe")
                        .value_name("JSON")
                        .value_parser(value_parser!(PathBuf))
                        .conflicts_with("query-image")
                        .required_unless_present("query-image"),
                )
                .arg(
                    Arg::new("query-image")
                        .long("query-image")
                        .value_name("IMAGE")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("k")
                        .long("k")
                        .value_parser(value_parser!(usize))
                        .default_value("5"),
                ),
        )
        .subcommand(
            Command::new("check")
                .about("Finite-difference, oracle and invariant suites; nonzero exit on failure")
                .arg(
                    Arg::new("quick")
                        .long("quick")
                        .action(ArgAction::SetTrue)
                        .help("fewer sampled coordinates and instances"),
                ),
        )
}

/// Defaults, then the file, then flags.
pub fn resolve(m: &ArgMatches) -> malm::Result<RunConfig> {
    let base = match m.get_one::<String>("preset").map(String::as_str) {
        Some("paper") => MalmConfig::default(),
        _ => MalmConfig::desk_synthetic(),
    };
    let mut rc = RunConfig::new(base);
    if let Some(path) = m.get_one::<PathBuf>("config") {
        rc.apply_file(path)?;
    }
    for key in MalmConfig::KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            let v = m.get_one::<String>(key).expect("present");
            rc.set(key, v, Provenance::Flag)?;
        }
    }
    rc.config.validate()?;
    Ok(rc)
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<MalmError>(),
        Some(MalmError::UnknownKey(_) | MalmError::BadValue { .. })
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let outcome: Result<bool> = resolve(sub)
        .map_err(anyhow::Error::from)
        .and_then(|rc| commands::dispatch(name, sub, rc));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if is_usage_error(&e) => {
            eprintln!("error: {e:#}\n\n{}", cli().render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
