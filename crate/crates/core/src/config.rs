//! Flat sectioned text: `[section]` headers over `key: value` lines.
//!
//! The format deliberately has no nesting, quoting, or escapes; it exists so
//! configs embed cleanly in checkpoints and diff line by line. `#` starts a
//! comment, blank lines are ignored, keys before any header land in the
//! unnamed section `""`.

use crate::error::invalid_arg;
use crate::Result;

pub type Section = (String, Vec<(String, String)>);

pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    let mut current: Section = (String::new(), Vec::new());
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return invalid_arg(format!("line {}: unterminated section header", lineno + 1));
            };
            if !current.0.is_empty() || !current.1.is_empty() {
                sections.push(current);
            }
            current = (name.trim().to_string(), Vec::new());
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return invalid_arg(format!("line {}: expected `key: value`, got {line:?}", lineno + 1));
        };
        let key = key.trim();
        if key.is_empty() {
            return invalid_arg(format!("line {}: empty key", lineno + 1));
        }
        current.1.push((key.to_string(), value.trim().to_string()));
    }
    if !current.0.is_empty() || !current.1.is_empty() {
        sections.push(current);
    }
    Ok(sections)
}

pub fn render_sections(sections: &[Section]) -> String {
    let mut out = String::new();
    for (i, (name, pairs)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if !name.is_empty() {
            out.push_str(&format!("[{name}]\n"));
        }
        for (k, v) in pairs {
            out.push_str(&format!("{k}: {v}\n"));
        }
    }
    out
}

/// First value for `key` inside any section named `section`.
pub fn lookup<'a>(sections: &'a [Section], section: &str, key: &str) -> Option<&'a str> {
    sections
        .iter()
        .filter(|(name, _)| name == section)
        .flat_map(|(_, pairs)| pairs.iter())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

pub fn require<'a>(sections: &'a [Section], section: &str, key: &str) -> Result<&'a str> {
    lookup(sections, section, key)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("missing config key [{section}] {key}")))
}

pub fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| crate::Error::InvalidArgument(format!("bad value for [{section}] {key}: {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_blanks() {
        let text = "# top comment\nroot_key: 1\n\n[model]\nsample_rate: 16000\nscheme: LowFreqNarrowSplit\n\n[separator]\nn: 128\n";
        let s = parse_sections(text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(lookup(&s, "", "root_key"), Some("1"));
        assert_eq!(lookup(&s, "model", "sample_rate"), Some("16000"));
        assert_eq!(lookup(&s, "separator", "n"), Some("128"));
        assert_eq!(lookup(&s, "model", "missing"), None);
    }

    #[test]
    fn round_trips_through_render() {
        let text = "[a]\nx: 1\ny: two words\n\n[b]\nz: 3\n";
        let s = parse_sections(text).unwrap();
        assert_eq!(render_sections(&s), text);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_sections("[unterminated\n").is_err());
        assert!(parse_sections("no separator here\n").is_err());
        assert!(parse_sections(": empty key\n").is_err());
    }

    #[test]
    fn duplicate_sections_merge_for_lookup() {
        let s = parse_sections("[m]\na: 1\n[other]\nb: 2\n[m]\nc: 3\n").unwrap();
        assert_eq!(lookup(&s, "m", "a"), Some("1"));
        assert_eq!(lookup(&s, "m", "c"), Some("3"));
    }
}
