//! `madation`: generate data, train, evaluate, score zero-shot, merge
//! adapters and build reports.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric. Failures print one
//! line `error category=<c> kind=<k> message=<m>` to stderr.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Command;
use madation::error::ErrorCategory;
use madation::{Error, Result};

use config::{with_keys, Key, RunConfig, COMMON};

type Handler = fn(&RunConfig) -> Result<()>;

const COMMANDS: &[(&str, &str, &[Key], Handler)] = &[
    ("gen-data", "write the synthetic morph benchmark", commands::GEN_DATA, commands::gen_data),
    ("train", "train a detector under one regime", commands::TRAIN, commands::train),
    ("eval", "score a manifest with a trained checkpoint", commands::EVAL, commands::eval),
    ("ti", "zero-shot scoring against label embeddings", commands::TI, commands::ti),
    ("merge", "fold adapters into the backbone", commands::MERGE, commands::merge),
    ("report", "metrics tables and DET curves from score files", commands::REPORT, commands::report_cmd),
];

fn cli() -> Command {
    let mut app = Command::new("madation")
        .about("LoRA-adapted vision transformers for morphing attack detection")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about, keys, _) in COMMANDS {
        app = app.subcommand(with_keys(Command::new(name).about(about), &[keys, COMMON]));
    }
    app
}

fn report(category: &str, kind: &str, message: &str) {
    let message = message.replace(['\n', '\r'], " ");
    eprintln!("error category={category} kind={kind} message={}", message.trim());
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e.category() {
        ErrorCategory::Usage => (2, "usage"),
        ErrorCategory::Data => (3, "data"),
        ErrorCategory::Numeric => (4, "numeric"),
    }
}

fn run(name: &str, keys: &[Key], handler: Handler, matches: &clap::ArgMatches) -> Result<()> {
    let cfg = RunConfig::resolve(name, &[keys, COMMON], matches)?;
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    handler(&cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            report("usage", "cli", first);
            return ExitCode::from(2);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let &(_, _, keys, handler) = COMMANDS.iter().find(|c| c.0 == name).expect("registered");
    match run(name, keys, handler, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            report(category, e.kind(), &e.to_string());
            ExitCode::from(code)
        }
    }
}
