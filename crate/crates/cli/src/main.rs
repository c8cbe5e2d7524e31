use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use sgrnn_cli::config::KEYS;
use sgrnn_cli::{
    cmd_eval, cmd_generate, cmd_inspect_bank, cmd_train, CliError, EvalOptions, GenerateOptions, RunConfig,
    TrainOptions,
};
use sgrnn_core::train::Split;

fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key = value configuration file; flags override it"),
    );
    for (key, help) in KEYS {
        let flag = key.replace('_', "-");
        let mut arg = Arg::new(*key).long(flag.clone()).value_name("VALUE").help(*help);
        if flag != *key {
            arg = arg.alias(*key);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let bank = || {
        Arg::new("bank")
            .long("bank")
            .value_name("DIR")
            .value_parser(value_parser!(PathBuf))
            .help("sample bank directory [default: <out>/bank]")
    };
    Command::new("sgrnn")
        .about("Recurrent networks trained with stochastic-gradient MCMC")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_args(
            Command::new("train")
                .about("Train a model and collect posterior samples")
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("continue the run in the output directory"),
                )
                .arg(
                    Arg::new("stop-after")
                        .long("stop-after")
                        .value_name("EPOCHS")
                        .value_parser(value_parser!(usize))
                        .help("stop once this many epochs are done (resumable)"),
                )
                .arg(
                    Arg::new("quiet")
                        .long("quiet")
                        .short('q')
                        .action(ArgAction::SetTrue)
                        .help("do not echo metrics to stderr"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("eval")
                .about("Score single samples and their ensemble")
                .arg(bank())
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "valid", "test"])
                        .default_value("test"),
                )
                .arg(
                    Arg::new("sweep")
                        .long("sweep")
                        .action(ArgAction::SetTrue)
                        .help("score every sample count under every strategy"),
                )
                .arg(
                    Arg::new("token-probs")
                        .long("token-probs")
                        .value_name("N")
                        .value_parser(value_parser!(usize))
                        .help("write predictive rows for the first N positions (LM)"),
                )
                .arg(
                    Arg::new("uncertainty")
                        .long("uncertainty")
                        .action(ArgAction::SetTrue)
                        .help("write per-example predictive mean and spread (classify)"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("generate")
                .about("Sample text from a trained language model")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("checkpoint directory [default: <out>/final]"),
                )
                .arg(Arg::new("prefix").long("prefix").default_value(""))
                .arg(
                    Arg::new("length")
                        .long("length")
                        .value_parser(value_parser!(usize))
                        .default_value("200"),
                )
                .arg(
                    Arg::new("temperature")
                        .long("temperature")
                        .value_parser(value_parser!(f64))
                        .default_value("1"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("inspect-bank")
                .about("Verify and list collected samples")
                .arg(bank()),
        ))
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(m: &ArgMatches) -> anyhow::Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub)?;
    match name {
        "train" => {
            let opts = TrainOptions {
                resume: sub.get_flag("resume"),
                stop_after: sub.get_one::<usize>("stop-after").copied(),
                verbose: !sub.get_flag("quiet"),
            };
            let r = cmd_train(&cfg, opts).with_context(|| format!("training into {}", cfg.out.display()))?;
            println!(
                "epochs {}{}  samples {}",
                r.epochs_completed,
                if r.stopped_early { " (stopped early)" } else { "" },
                r.samples_collected
            );
            for (k, v) in &r.last_metrics {
                println!("{k:<22} {v:.6}");
            }
        }
        "eval" => {
            let split = match sub.get_one::<String>("split").map(String::as_str) {
                Some("train") => Split::Train,
                Some("valid") => Split::Valid,
                _ => Split::Test,
            };
            let opts = EvalOptions {
                bank: sub.get_one::<PathBuf>("bank").cloned(),
                split,
                sweep: sub.get_flag("sweep"),
                token_probs: sub.get_one::<usize>("token-probs").copied().unwrap_or(0),
                uncertainty: sub.get_flag("uncertainty"),
            };
            let r = cmd_eval(&cfg, &opts)?;
            for row in &r.rows {
                println!("{:<12} S={:<4} {:<13} {:.6}", row.selection, row.samples, row.metric, row.value);
            }
        }
        "generate" => {
            let opts = GenerateOptions {
                checkpoint: sub.get_one::<PathBuf>("checkpoint").cloned(),
                prefix: sub.get_one::<String>("prefix").cloned().unwrap_or_default(),
                length: *sub.get_one::<usize>("length").expect("default"),
                temperature: *sub.get_one::<f64>("temperature").expect("default"),
            };
            println!("{}", cmd_generate(&cfg, &opts)?);
        }
        "inspect-bank" => {
            let rows = cmd_inspect_bank(&cfg, sub.get_one::<PathBuf>("bank").cloned())?;
            println!("index  epoch     step  algorithm  values  l2_norm");
            for r in &rows {
                println!(
                    "{:>5}  {:>5}  {:>7}  {:<9}  {:>6}  {:.6}",
                    r.index, r.epoch, r.step, r.algorithm, r.values, r.l2_norm
                );
            }
            println!("{} samples, checksums verified", rows.len());
        }
        _ => unreachable!("unknown subcommands are rejected by clap"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<CliError>()).map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_keys() {
        let m = cli()
            .try_get_matches_from(["sgrnn", "train", "--step-size", "0.5", "--batch_size", "4", "--seed", "9"])
            .unwrap();
        let cfg = resolve_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!((cfg.step_size, cfg.batch_size, cfg.seed), (0.5, 4, 9));
        assert!(cli().try_get_matches_from(["sgrnn", "train", "--no-such-key", "1"]).is_err());
    }
}
