mod args;
mod commands;
mod config;
mod failure;
mod manifest;

use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use failure::{Failure, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE};
use manifest::Recorder;

const SUBCOMMANDS: [&str; 8] = [
    "gen-map", "record", "train", "eval", "ablate", "bench", "stream", "rerun",
];

/// Value of `--name X` / `--name=X` anywhere in `argv`.
fn flag_value<'a>(argv: &'a [String], name: &str) -> Option<&'a str> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == &long {
            argv.get(i + 1).map(String::as_str)
        } else {
            a.strip_prefix(&eq)
        }
    })
}

/// Drops `--name X` / `--name=X`.
fn without_flag(argv: &[String], name: &str) -> Vec<String> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == &long {
            skip = true;
        } else if !a.starts_with(&eq) {
            out.push(a.clone());
        }
    }
    out
}

/// Splices config-file flags in right after the subcommand so that the
/// command line, which comes later, overrides them.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = flag_value(&argv, "config").map(str::to_string) else {
        return Ok(argv);
    };
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::data(format!("cannot read config {path}: {e}")))?;
    let cfg = config::parse(&text).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let flags = config::to_flags(&cfg, &argv[pos]).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let mut merged = argv[..=pos].to_vec();
    merged.extend(flags);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::GenMap(a) => &a.out.out,
        Command::Record(a) => &a.out.out,
        Command::Train(a) => &a.out.out,
        Command::Eval(a) => &a.out.out,
        Command::Ablate(a) => &a.out.out,
        Command::Bench(a) => &a.out.out,
        Command::Stream(a) => &a.out.out,
        Command::Rerun(a) => &a.out.out,
    }
}

fn execute(cmd: &Command, resolved: Vec<String>) -> Result<()> {
    if let Command::Rerun(a) = cmd {
        return rerun(&a.manifest, &a.out.out);
    }
    let config = serde_json::to_value(cmd)?;
    let mut rec = Recorder::new(cmd.name(), resolved, config, out_dir(cmd))?;
    match cmd {
        Command::GenMap(a) => commands::gen_map(a, &mut rec)?,
        Command::Record(a) => commands::record(a, &mut rec)?,
        Command::Train(a) => commands::train(a, &mut rec)?,
        Command::Eval(a) => commands::eval(a, &mut rec)?,
        Command::Ablate(a) => commands::ablate(a, &mut rec)?,
        Command::Bench(a) => commands::bench(a, &mut rec)?,
        Command::Stream(a) => commands::stream(a, &mut rec)?,
        Command::Rerun(_) => unreachable!("handled above"),
    }
    let path = rec.finish()?;
    let stream_to_stdout = matches!(cmd, Command::Stream(a) if a.transport == "stdout");
    if stream_to_stdout {
        eprintln!("manifest {}", path.display());
    } else {
        println!("manifest {}", path.display());
    }
    Ok(())
}

fn rerun(manifest_path: &Path, out: &Path) -> Result<()> {
    let m = manifest::load(manifest_path)?;
    let mut argv = vec!["vragent".to_string()];
    argv.extend(m.argv.iter().cloned());
    argv.push("--out".into());
    argv.push(out.display().to_string());
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        Failure::data(format!(
            "{}: stored arguments no longer parse: {e}",
            manifest_path.display()
        ))
    })?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Failure::usage("a manifest cannot replay another rerun").into());
    }
    execute(&cli.command, m.argv.clone())?;
    let mut differing = Vec::new();
    for (name, hash) in commands::expected_outputs(&m) {
        let now = manifest::file_record(&out.join(&name), true)?;
        let same = now.sha256 == hash;
        println!("{} {}", if same { "identical" } else { "DIFFERS" }, name.display());
        if !same {
            differing.push(name.display().to_string());
        }
    }
    if !differing.is_empty() {
        return Err(Failure::internal(format!("outputs differ from the manifest: {}", differing.join(", "))).into());
    }
    Ok(())
}

fn run(raw: Vec<String>) -> u8 {
    let argv = match merge_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return failure::exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let resolved = without_flag(&without_flag(&argv[1..], "config"), "out");
    match execute(&cli.command, resolved) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            failure::exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    match std::panic::catch_unwind(|| run(raw)) {
        Ok(code) => ExitCode::from(code),
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
