//! Flat key-value config files.
//!
//! ```text
//! # comment
//! seed = 7            # before any section: applies to every command
//! [train]
//! iterations = 4000
//! lr = 1e-3
//! ```
//!
//! Keys are long flag names (`budget-ms` or `budget_ms`). Boolean flags
//! take `true` or `false`. Values are turned into flags placed ahead of the
//! command-line ones, so the command line wins.

use std::fmt;

use clap::CommandFactory;

use crate::args::Cli;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: Vec<Entry>,
    pub sections: Vec<(String, usize, Vec<Entry>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = line
        .char_indices()
        .find(|&(i, c)| (c == '#' || c == ';') && (i == 0 || line[..i].ends_with(char::is_whitespace)))
        .map_or(line.len(), |(i, _)| i);
    line[..cut].trim()
}

pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
    let mut cfg = ConfigFile::default();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(ln, "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(err(ln, "empty section name"));
            }
            if let Some((_, first, _)) = cfg.sections.iter().find(|(n, _, _)| n == name) {
                return Err(err(ln, format!("section [{name}] already defined on line {first}")));
            }
            cfg.sections.push((name.to_string(), ln, Vec::new()));
            current = Some(cfg.sections.len() - 1);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(ln, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(err(ln, "missing key"));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value)
            .to_string();
        let entries = match current {
            Some(s) => &mut cfg.sections[s].2,
            None => &mut cfg.global,
        };
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(err(
                ln,
                format!("duplicate key '{key}' (first set on line {})", prev.line),
            ));
        }
        entries.push(Entry { line: ln, key, value });
    }
    Ok(cfg)
}

fn first_line(e: &clap::Error) -> String {
    let s = e.to_string();
    let line = s.lines().next().unwrap_or_default();
    line.trim_start_matches("error: ").to_string()
}

/// Flags for `command` from the file, validated against the command's own
/// arguments so bad keys and values are reported with their line.
pub fn to_flags(cfg: &ConfigFile, command: &str) -> Result<Vec<String>, ConfigError> {
    let root = Cli::command();
    let known: Vec<&str> = root.get_subcommands().map(|c| c.get_name()).collect();
    for (name, line, _) in &cfg.sections {
        if !known.contains(&name.as_str()) {
            return Err(err(
                *line,
                format!("unknown section [{name}] (expected one of {})", known.join(", ")),
            ));
        }
    }
    let sub = root
        .find_subcommand(command)
        .expect("command name comes from the parsed subcommand list");
    let lookup = |key: &str| {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(key) && a.get_id() != "config")
    };
    let probe = sub.clone().mut_args(|a| a.required(false));
    let mut flags = Vec::new();
    let mut push = |e: &Entry, arg: &clap::Arg| -> Result<(), ConfigError> {
        let long = format!("--{}", e.key);
        if arg.get_action().takes_values() {
            probe
                .clone()
                .try_get_matches_from([command, long.as_str(), e.value.as_str()])
                .map_err(|x| err(e.line, format!("invalid value for '{}': {}", e.key, first_line(&x))))?;
            flags.push(long);
            flags.push(e.value.clone());
        } else {
            match e.value.as_str() {
                "true" | "yes" | "1" => flags.push(long),
                "false" | "no" | "0" => {}
                v => {
                    return Err(err(
                        e.line,
                        format!("'{}' is a switch; expected true or false, got '{v}'", e.key),
                    ))
                }
            }
        }
        Ok(())
    };
    for e in &cfg.global {
        let anywhere = root
            .get_subcommands()
            .any(|c| c.get_arguments().any(|a| a.get_long() == Some(e.key.as_str())));
        if !anywhere {
            return Err(err(e.line, format!("unknown key '{}'", e.key)));
        }
        if let Some(arg) = lookup(&e.key) {
            push(e, arg)?;
        }
    }
    if let Some((_, _, entries)) = cfg.sections.iter().find(|(n, _, _)| n == command) {
        for e in entries {
            let arg = lookup(&e.key).ok_or_else(|| err(e.line, format!("unknown key '{}' in [{command}]", e.key)))?;
            push(e, arg)?;
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let cfg = parse("seed = 3 # trailing\n\n[gen-map]\n; note\ndensity=3.27\nid = \"a b\"\n").unwrap();
        assert_eq!(cfg.global.len(), 1);
        assert_eq!(cfg.sections[0].0, "gen-map");
        assert_eq!(cfg.sections[0].2[1].value, "a b");
        assert_eq!(cfg.sections[0].2[0].line, 5);
    }

    #[test]
    fn errors_carry_lines() {
        assert_eq!(parse("[train]\niterations 5\n").unwrap_err().line, 2);
        assert_eq!(parse("[a]\n[a]\n").unwrap_err().line, 2);
        assert_eq!(parse("x=1\nx=2\n").unwrap_err().line, 2);
        assert_eq!(parse("[train\n").unwrap_err().line, 1);
    }

    #[test]
    fn flags_are_validated() {
        let cfg = parse("[gen-map]\ndensity = 3.27\nseed = 7\n").unwrap();
        assert_eq!(to_flags(&cfg, "gen-map").unwrap(), ["--density", "3.27", "--seed", "7"]);
        let bad = parse("[gen-map]\n\ndensity = fast\n").unwrap();
        assert_eq!(to_flags(&bad, "gen-map").unwrap_err().line, 3);
        let unknown = parse("[gen-map]\nspeed = 1\n").unwrap();
        assert!(to_flags(&unknown, "gen-map").unwrap_err().message.contains("speed"));
        let section = parse("[gen]\n").unwrap();
        assert_eq!(to_flags(&section, "gen-map").unwrap_err().line, 1);
    }

    #[test]
    fn switches_and_globals() {
        let cfg = parse("seed = 1\nrepeats = 2\n[bench]\nno_fallback = true\n").unwrap();
        assert_eq!(to_flags(&cfg, "bench").unwrap(), ["--seed", "1", "--no-fallback"]);
        assert_eq!(to_flags(&cfg, "eval").unwrap(), ["--seed", "1", "--repeats", "2"]);
        let bad = parse("[bench]\nno-fallback = maybe\n").unwrap();
        assert_eq!(to_flags(&bad, "bench").unwrap_err().line, 2);
    }
}
