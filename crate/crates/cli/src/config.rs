//! `--config FILE` support: `key = value` lines become `--key=value`
//! arguments unless the same flag is already on the command line.

use std::ffi::OsString;

use crate::CliError;

/// Parse a key=value file. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((k, v.trim().trim_matches('"').to_owned()));
    }
    Ok(out)
}

fn flag_present(argv: &[String], key: &str) -> bool {
    let long = format!("--{key}");
    argv.iter().any(|a| *a == long || a.starts_with(&format!("{long}=")))
}

/// Pull `--config` out of `argv` and splice the file's settings in.
pub fn expand_args(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let argv: Vec<String> = argv
        .into_iter()
        .map(|a| a.into_string().map_err(|_| CliError::Usage("arguments must be valid UTF-8".into())))
        .collect::<Result<_, _>>()?;
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| CliError::Usage("--config needs a path".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_owned());
        } else {
            rest.push(a);
        }
    }
    if let Some(path) = config {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
        let mut extra = Vec::new();
        for (k, v) in parse_config(&text)? {
            if flag_present(&rest, &k) {
                continue;
            }
            match v.as_str() {
                "true" => extra.push(format!("--{k}")),
                "false" => {}
                _ => extra.push(format!("--{k}={v}")),
            }
        }
        rest.extend(extra);
    }
    Ok(rest.into_iter().map(OsString::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_comments() {
        let p = parse_config("# c\nseed = 7\n\nsteps=10 # trailing\nmode = \"standard\"\n").unwrap();
        assert_eq!(
            p,
            vec![("seed".into(), "7".into()), ("steps".into(), "10".into()), ("mode".into(), "standard".into())]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("seed 7").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1\nepisodes = 4\nrobust = true\nsubpixel = false\n").unwrap();
        let argv = os(&["flowplan", "run-benchmark", "--seed", "9", "--config", path.to_str().unwrap()]);
        let out: Vec<String> = expand_args(argv).unwrap().into_iter().map(|s| s.into_string().unwrap()).collect();
        assert_eq!(out, vec!["flowplan", "run-benchmark", "--seed", "9", "--episodes=4", "--robust"]);
    }
}
