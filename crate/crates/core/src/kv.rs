//! Line-oriented `key = value` text with `#` comments.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries; duplicate keys and lines without `=` are
/// errors tagged with `origin` and the 1-based line.
pub fn parse(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(error(origin, line, format!("expected key = value, found {body:?}")));
        };
        let key = key.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(error(origin, line, format!("duplicate key {key:?}")));
        }
        out.push(Entry { line, key, value: value.trim().to_string() });
    }
    Ok(out)
}

pub fn error(origin: &str, line: usize, message: String) -> Error {
    Error::Config { path: origin.to_string(), line, message }
}

pub fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found {v:?}")),
    }
}

pub fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

pub fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

pub fn parse_vec3(v: &str) -> std::result::Result<[f64; 3], String> {
    let xs: Vec<f64> = parse_list(v)?;
    xs.try_into().map_err(|_| format!("expected three comma-separated numbers, found {v:?}"))
}

pub fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_reports_lines() {
        let e = parse("a = 1\n# c\n\n b=x y # trailing\n", "f").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[1].line, e[1].key.as_str(), e[1].value.as_str()), (4, "b", "x y"));
        assert!(matches!(parse("a=1\na=2", "f"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse("a=1\nnope", "f"), Err(Error::Config { line: 2, .. })));
        assert_eq!(parse_vec3("1, 2,3.5"), Ok([1.0, 2.0, 3.5]));
        assert!(parse_vec3("1,2").is_err());
    }
}
