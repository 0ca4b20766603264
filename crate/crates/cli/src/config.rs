//! `key = value` config files, merged underneath command-line flags.
//!
//! Keys are long flag names (`_` and `-` are interchangeable). The file's
//! entries are spliced in front of the real arguments; since every command
//! lets a later flag override an earlier one, explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::error::{io_error, CliError, CliResult};

pub fn parse_config(text: &str, source: &Path) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{}:{}: expected key = value", source.display(), no + 1)));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(CliError::Usage(format!("{}:{}: empty key", source.display(), no + 1)));
        }
        out.push((key, value));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_config(&text, path)
}

/// Turns config entries into flags understood by subcommand `sub`.
pub fn entries_to_flags(sub: &Command, entries: &[(String, String)], source: &Path) -> CliResult<Vec<OsString>> {
    let mut flags = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage(format!("{}: config files cannot include other config files", source.display())));
        }
        let arg = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())).ok_or_else(|| {
            CliError::Usage(format!("{}: '{key}' is not an option of '{}'", source.display(), sub.get_name()))
        })?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool = value
                .parse()
                .map_err(|_| CliError::Usage(format!("{}: '{key}' expects true or false, got '{value}'", source.display())))?;
            if on {
                flags.push(format!("--{key}").into());
            }
        } else {
            flags.push(format!("--{key}={value}").into());
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_underscores() {
        let text = "# run\nepochs = 3\nhead_weights = \"1:1:1\"  # trailing comment\n\nseed=7\n";
        let got = parse_config(text, Path::new("x.cfg")).unwrap();
        assert_eq!(
            got,
            vec![
                ("epochs".into(), "3".into()),
                ("head-weights".into(), "1:1:1".into()),
                ("seed".into(), "7".into())
            ]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("epochs 3", Path::new("x.cfg")).is_err());
    }
}
