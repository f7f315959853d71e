//! `--config FILE` support. Each `key = value` line becomes `--key value`,
//! inserted right after the subcommand so flags given on the command line,
//! which come later, override it.

use std::fs;

pub fn expand(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let injected = parse(&text).map_err(|e| format!("{path}: {e}"))?;
    // Subcommand is the first argument after the program name that is not a flag.
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, injected);
    Ok(rest)
}

/// `key = value` lines; `#` starts a comment; a bare `key` is a switch.
pub fn parse(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (line, None),
        };
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("line {}: bad key '{key}'", n + 1));
        }
        out.push(format!("--{}", key.replace('_', "-")));
        if let Some(v) = value {
            out.push(v.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn lines_become_flags() {
        let got = parse("# run\nepisodes = 5\nout=data # here\n\nno_realtime\n").unwrap();
        assert_eq!(got, v(&["--episodes", "5", "--out", "data", "--no-realtime"]));
    }

    #[test]
    fn bad_key_rejected() {
        assert!(parse("a b = 1").is_err());
        assert!(parse("= 1").is_err());
    }

    #[test]
    fn injected_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "episodes=5\n").unwrap();
        let got = expand(v(&["bin", "--config", p.to_str().unwrap(), "teach", "--episodes", "7"])).unwrap();
        assert_eq!(got, v(&["bin", "teach", "--episodes", "5", "--episodes", "7"]));
    }

    #[test]
    fn without_config_unchanged() {
        let a = v(&["bin", "teach", "--out", "x"]);
        assert_eq!(expand(a.clone()).unwrap(), a);
    }
}
