//! Flat `key = value` configuration text.

use crate::error::{Error, Result};
use std::path::Path;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            row: i + 1,
            column: String::new(),
            message: format!("expected key = value, got '{line}'"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Splits a command-line `key=value` override.
pub fn split_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Invalid(format!("override '{s}' is not key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let kv = key_values("# head\n\na = 1\n b=two # tail\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(matches!(key_values("x\n"), Err(Error::Parse { row: 1, .. })));
        assert_eq!(split_override("k= v").unwrap(), ("k".into(), "v".into()));
        assert!(split_override("k").is_err());
    }
}
