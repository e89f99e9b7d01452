//! Flat `key=value` text used by config files and export manifests.

use crate::error::{Error, Result};

/// Parses `key=value` lines in order. Blank lines and `#` comments are
/// skipped; whitespace around keys and values is trimmed.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        let kv = parse_key_values("# c\nk = 3\n\nfusion=e1\nempty=\n").unwrap();
        assert_eq!(kv, [("k".into(), "3".into()), ("fusion".into(), "e1".into()), ("empty".into(), String::new())]);
        let text = format_key_values(kv.iter().map(|(k, v)| (k.as_str(), v.clone())));
        assert_eq!(parse_key_values(&text).unwrap(), kv);
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("=1\n").is_err());
    }
}
