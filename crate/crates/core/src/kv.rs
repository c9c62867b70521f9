//! Flat `key = value` text format used for config files and checkpoint
//! sidecars. `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parses the text into an ordered map, rejecting malformed lines and
/// duplicate keys.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn format(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Hex SHA-256 of the canonical rendering, truncated to 16 characters.
pub fn hash(pairs: &BTreeMap<String, String>) -> String {
    digest(&format(pairs))
}

/// Truncated hex SHA-256 of arbitrary text.
pub fn digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Typed lookup helper over a parsed map.
pub fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
    raw.parse().map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = parse("# header\n a = 1 \n\nb=two # trailing\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        assert_eq!(get::<u32>(&m, "a").unwrap(), 1);
        assert!(get::<u32>(&m, "b").is_err());
        assert!(get::<u32>(&m, "c").is_err());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse("just words").is_err());
        assert!(parse("= 3").is_err());
        assert!(parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn round_trip_and_stable_hash() {
        let m = parse("z = 1\na = 2\n").unwrap();
        assert_eq!(parse(&format(&m)).unwrap(), m);
        assert_eq!(hash(&m), hash(&parse("a=2\nz=1").unwrap()));
        assert_ne!(hash(&m), hash(&parse("a=3\nz=1").unwrap()));
        assert_eq!(hash(&m).len(), 16);
    }
}
