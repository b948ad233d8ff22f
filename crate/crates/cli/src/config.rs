//! `key=value` config files, spliced into the argument list ahead of the
//! command-line flags so that flags win.

use std::fs;

use anyhow::{bail, Context, Result};

/// Extracts `--config <path>` / `--config=<path>` from `argv`.
fn take_config_path(argv: &mut Vec<String>) -> Result<Option<String>> {
    let mut i = 1;
    while i < argv.len() {
        if argv[i] == "--" {
            break;
        }
        if argv[i] == "--config" {
            if i + 1 >= argv.len() {
                bail!("--config needs a file path");
            }
            let path = argv.remove(i + 1);
            argv.remove(i);
            return Ok(Some(path));
        }
        if let Some(path) = argv[i].strip_prefix("--config=") {
            let path = path.to_string();
            argv.remove(i);
            return Ok(Some(path));
        }
        i += 1;
    }
    Ok(None)
}

/// Turns config lines into long flags. Blank lines and `#` comments are
/// skipped; `true` becomes a bare switch and `false` drops the key.
pub fn parse_config(text: &str, origin: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{origin}:{}: expected key=value, got {line:?}", n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("{origin}:{}: empty key", n + 1);
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => out.push(format!("--{key}={v}")),
        }
    }
    Ok(out)
}

/// Expands a config file reference in `argv`, if any.
///
/// Config flags go right after the subcommand name, before the user's own
/// flags; clap keeps the last occurrence of a repeated flag.
pub fn expand_config(mut argv: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let Some(path) = take_config_path(&mut argv)? else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {path}"))?;
    let flags = parse_config(&text, &path)?;
    let Some(pos) = argv.iter().skip(1).position(|a| subcommands.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let at = pos + 2;
    argv.splice(at..at, flags);
    Ok(argv)
}
