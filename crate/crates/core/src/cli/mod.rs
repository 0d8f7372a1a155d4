//! The `jemlab` command line: `train`, `sample`, `eval`, `ood`, `attack`, `landscape`.
//!
//! Exit codes: 0 success, 1 divergence, 2 usage or config error, 3 I/O error.

pub mod commands;
pub mod config;
pub mod raster;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use crate::error::Error;
use commands::{AttackArgs, EvalArgs, LandscapeArgs, OodArgs, SampleArgs};
use config::{read_config_file, RunConfig, REGISTRY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGENCE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::UnboundInput(_) | Error::NotScalar(_) | Error::ForeignVar => EXIT_DIVERGENCE,
    }
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("PATH")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("checkpoint written by `train`")
}

fn out_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("output directory; nothing is written outside it")
}

fn data_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("SPEC").required(true).help(help)
}

fn seed_arg() -> Arg {
    Arg::new("seed").long("seed").value_name("N").default_value("1").value_parser(value_parser!(u64)).help("master seed")
}

fn num<T: Clone + Send + Sync + 'static>(m: &ArgMatches, name: &str) -> T {
    m.get_one::<T>(name).cloned().expect("argument has a default")
}

fn parsed<T: FromStr<Err = Error>>(m: &ArgMatches, name: &str) -> Result<T, Error> {
    let raw = m.get_one::<String>(name).expect("argument has a default");
    raw.parse().map_err(|e: Error| match e {
        Error::Config(msg) => Error::Config(format!("--{name}: {msg}")),
        other => Error::Config(format!("--{name}: {other}")),
    })
}

/// The full command tree; also the source of `--help`.
pub fn command() -> Command {
    let mut train = Command::new("train")
        .about("Train a hybrid classifier / energy model and write a run directory")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("`key = value` file; flags override it"),
        );
    for key in REGISTRY {
        train = train.arg(Arg::new(key.name).long(key.name).value_name("VALUE").help(key.help));
    }

    let sample = Command::new("sample")
        .about("Draw fresh SGLD samples from a checkpoint")
        .arg(checkpoint_arg())
        .arg(out_arg())
        .arg(Arg::new("n").long("n").default_value("64").value_parser(value_parser!(usize)).help("number of samples"))
        .arg(Arg::new("k").long("k").default_value("100").value_parser(value_parser!(usize)).help("SGLD steps"))
        .arg(Arg::new("alpha").long("alpha").default_value("1").value_parser(value_parser!(f64)).help("SGLD step size"))
        .arg(Arg::new("sigma").long("sigma").default_value("0").value_parser(value_parser!(f64)).help("SGLD noise scale"))
        .arg(
            Arg::new("class")
                .long("class")
                .value_parser(value_parser!(usize))
                .help("sample from p(x|y=class) instead of p(x)"),
        )
        .arg(seed_arg())
        .arg(
            Arg::new("rank")
                .long("rank")
                .default_value("none")
                .help("output order: none, px (lowest energy first) or pyx (most confident first)"),
        );

    let eval = Command::new("eval")
        .about("Accuracy, NLL, ECE and reliability diagram")
        .arg(checkpoint_arg())
        .arg(data_arg("data", "evaluation data spec"))
        .arg(out_arg());

    let ood = Command::new("ood")
        .about("Out-of-distribution AUROC and score histograms")
        .arg(checkpoint_arg())
        .arg(data_arg("in-data", "in-distribution data spec"))
        .arg(data_arg("out-data", "OOD data spec, or `interp` for midpoints of in-set pairs"))
        .arg(Arg::new("method").long("method").default_value("density").help("score: density (-E(x)) or maxprob"))
        .arg(Arg::new("n").long("n").default_value("2000").value_parser(value_parser!(usize)).help("samples per set"))
        .arg(Arg::new("bins").long("bins").default_value("50").value_parser(value_parser!(usize)).help("histogram bins"))
        .arg(seed_arg())
        .arg(out_arg());

    let attack = Command::new("attack")
        .about("PGD robust accuracy over a list of radii")
        .arg(checkpoint_arg())
        .arg(data_arg("data", "evaluation data spec"))
        .arg(out_arg())
        .arg(Arg::new("norm").long("norm").default_value("linf").help("linf or l2"))
        .arg(Arg::new("eps").long("eps").default_value("0").help("comma-separated radii"))
        .arg(Arg::new("steps").long("steps").default_value("40").value_parser(value_parser!(usize)).help("PGD iterations"))
        .arg(
            Arg::new("step-size")
                .long("step-size")
                .value_parser(value_parser!(f64))
                .help("PGD step (default 2.5·eps/steps)"),
        )
        .arg(Arg::new("random-start").long("random-start").action(ArgAction::SetTrue).help("start inside the ball at random"))
        .arg(seed_arg());

    let landscape = Command::new("landscape")
        .about("Energy along random parameter directions")
        .arg(checkpoint_arg())
        .arg(data_arg("data", "data spec the energy is summed over"))
        .arg(out_arg())
        .arg(Arg::new("directions").long("directions").default_value("1").value_parser(value_parser!(usize)).help("1 or 2"))
        .arg(Arg::new("points").long("points").default_value("41").value_parser(value_parser!(usize)).help("grid points per axis"))
        .arg(
            Arg::new("lo")
                .long("lo")
                .default_value("-1")
                .allow_negative_numbers(true)
                .value_parser(value_parser!(f64))
                .help("lowest offset"),
        )
        .arg(Arg::new("hi").long("hi").default_value("1").allow_negative_numbers(true).value_parser(value_parser!(f64)).help("highest offset"))
        .arg(Arg::new("norm").long("norm").default_value("filter").help("direction normalization: filter or none"))
        .arg(Arg::new("n").long("n").default_value("512").value_parser(value_parser!(usize)).help("data rows used"))
        .arg(seed_arg());

    Command::new("jemlab")
        .about("Joint energy-based model training and evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([train, sample, eval, ood, attack, landscape])
}

/// Resolved `train` configuration from parsed flags.
pub fn run_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let file = match m.get_one::<PathBuf>("config") {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let overrides: Vec<(String, String)> = REGISTRY
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(&file, &overrides)
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<String, Error> {
    let path = |n: &str| m.get_one::<PathBuf>(n).cloned().expect("required argument");
    match name {
        "train" => {
            let cfg = run_config(m)?;
            let s = commands::cmd_train(&cfg)?;
            let acc = s.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"));
            Ok(format!("trained {} epochs, test accuracy {acc}, run directory {}", s.epochs, s.out.display()))
        }
        "sample" => {
            let a = SampleArgs {
                checkpoint: path("checkpoint"),
                out: path("out"),
                n: num(m, "n"),
                steps: num(m, "k"),
                step_size: num(m, "alpha"),
                noise: num(m, "sigma"),
                class: m.get_one::<usize>("class").copied(),
                seed: num(m, "seed"),
                rank: parsed(m, "rank")?,
            };
            let r = commands::cmd_sample(&a)?;
            Ok(format!("wrote {} samples to {}", r.n, a.out.display()))
        }
        "eval" => {
            let a = EvalArgs {
                checkpoint: path("checkpoint"),
                data: parsed(m, "data")?,
                out: path("out"),
            };
            let r = commands::cmd_eval(&a)?;
            Ok(format!("accuracy {:.4} nll {:.4} ece {:.4} over {} samples", r.accuracy, r.nll, r.ece, r.samples))
        }
        "ood" => {
            let a = OodArgs {
                checkpoint: path("checkpoint"),
                in_data: parsed(m, "in-data")?,
                out_data: parsed(m, "out-data")?,
                method: parsed(m, "method")?,
                n: num(m, "n"),
                bins: num(m, "bins"),
                seed: num(m, "seed"),
                out: path("out"),
            };
            let r = commands::cmd_ood(&a)?;
            Ok(format!("auroc {:.4} ({} in, {} out)", r.auroc, r.n_in, r.n_out))
        }
        "attack" => {
            let eps = m
                .get_one::<String>("eps")
                .expect("default")
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("--eps: bad radius `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            let a = AttackArgs {
                checkpoint: path("checkpoint"),
                data: parsed(m, "data")?,
                out: path("out"),
                norm: parsed(m, "norm")?,
                eps,
                steps: num(m, "steps"),
                step_size: m.get_one::<f64>("step-size").copied(),
                random_start: m.get_flag("random-start"),
                seed: num(m, "seed"),
            };
            let r = commands::cmd_attack(&a)?;
            let mut s = format!("clean accuracy {:.4}", r.clean_accuracy);
            for p in &r.points {
                s.push_str(&format!("; eps {} -> {:.4}", p.eps, p.accuracy));
            }
            Ok(s)
        }
        "landscape" => {
            let a = LandscapeArgs {
                checkpoint: path("checkpoint"),
                data: parsed(m, "data")?,
                out: path("out"),
                directions: num(m, "directions"),
                points: num(m, "points"),
                lo: num(m, "lo"),
                hi: num(m, "hi"),
                normalization: parsed(m, "norm")?,
                seed: num(m, "seed"),
                n: num(m, "n"),
            };
            let r = commands::cmd_landscape(&a)?;
            Ok(format!("{} grid points, center energy {}", r.points.len(), r.center))
        }
        other => unreachable!("unregistered subcommand {other}"),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match dispatch(name, sub) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn dotted_flags_reach_the_config() {
        let m = command().get_matches_from(["jemlab", "train", "--sgld.k", "9", "--sam.rho", "0.05", "--epochs", "3"]);
        let cfg = run_config(m.subcommand_matches("train").unwrap()).unwrap();
        assert_eq!(cfg.train.sgld.steps, 9);
        assert_eq!(cfg.train.sam.rho, 0.05);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["jemlab", "train", "--nope", "1"]), EXIT_USAGE);
        assert_eq!(run(["jemlab", "train", "--epochs", "zero"]), EXIT_USAGE);
        assert_eq!(run(["jemlab"]), EXIT_USAGE);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Divergence { step: 3, reason: "x".into() }), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
    }
}
