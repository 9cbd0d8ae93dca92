//! Flat `key=value` config files layered under command-line flags.

use std::ffi::OsString;

use clap::{ArgAction, ArgMatches, Command};
use quasimix::Error;

/// Keys that never appear in a written config: they name files or tune
/// scheduling without changing any result.
const NOT_RECORDED: &[&str] = &["config", "out", "jobs", "help"];

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Argument(format!("config line {}: expected key=value", n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Locates `--config <path>` or `--config=<path>` in the raw arguments.
fn config_path(args: &[OsString]) -> Result<Option<(usize, usize, String)>, Error> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if let Some(v) = s.strip_prefix("--config=") {
            return Ok(Some((i, 1, v.to_string())));
        }
        if s == "--config" {
            let v = args
                .get(i + 1)
                .ok_or_else(|| Error::Argument("--config needs a path".into()))?;
            return Ok(Some((i, 2, v.to_string_lossy().into_owned())));
        }
    }
    Ok(None)
}

/// Expands a `--config` file into flags placed directly after the
/// subcommand name, so that explicit flags later on the line override them.
pub fn expand(args: Vec<OsString>, root: &Command) -> Result<Vec<OsString>, Error> {
    let Some((at, width, path)) = config_path(&args)? else {
        return Ok(args);
    };
    let sub_pos = args
        .iter()
        .skip(1)
        .position(|a| root.find_subcommand(a).is_some())
        .map(|i| i + 1)
        .ok_or_else(|| Error::Argument("--config given without a subcommand".into()))?;
    let sub = root
        .find_subcommand(&args[sub_pos])
        .expect("subcommand located above");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("{path}: {e}")))?;
    let mut injected = Vec::new();
    for (key, value) in parse_lines(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && key != "help")
            .ok_or_else(|| Error::Argument(format!("unknown config key `{key}` for `{}`", sub.get_name())))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(Error::Argument(format!("config key `{key}` expects true or false"))),
            },
            _ => injected.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let mut out: Vec<OsString> = Vec::with_capacity(args.len() + injected.len());
    for (i, a) in args.into_iter().enumerate() {
        if i >= at && i < at + width {
            continue;
        }
        out.push(a);
        if i == sub_pos {
            out.append(&mut injected);
        }
    }
    Ok(out)
}

/// The resolved settings of a subcommand, defaults included, in argument
/// declaration order.
pub fn resolved(sub: &Command, matches: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if NOT_RECORDED.contains(&long) {
            continue;
        }
        let id = arg.get_id().as_str();
        match arg.get_action() {
            ArgAction::SetTrue => {
                out.push((long.to_string(), matches.get_flag(id).to_string()));
            }
            _ => {
                if let Some(raw) = matches.get_raw(id) {
                    let joined: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
                    out.push((long.to_string(), joined.join(",")));
                }
            }
        }
    }
    out
}

pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let p = parse_lines("# note\n\nseed = 4\nx-cols=a,b\n").unwrap();
        assert_eq!(p, vec![("seed".into(), "4".into()), ("x-cols".into(), "a,b".into())]);
        assert!(parse_lines("seed").is_err());
    }
}
