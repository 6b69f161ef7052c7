//! Small string utilities shared by the pipeline stages.

use std::collections::HashSet;

use sha2::{Digest, Sha256};

/// Collapse every run of whitespace to a single space and trim the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercase, hyphenated slug. Falls back to `"metric"` for names with no
/// alphanumeric characters.
pub fn slugify(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_dash = false;
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.push(ch.to_ascii_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if out.is_empty() {
        "metric".to_string()
    } else {
        out
    }
}

/// Slug for `name` that is not yet in `taken`, using "-2", "-3", ... on
/// collision. The returned slug is inserted into `taken`.
pub fn unique_slug(name: &str, taken: &mut HashSet<String>) -> String {
    let base = slugify(name);
    let mut candidate = base.clone();
    let mut k = 2;
    while taken.contains(&candidate) {
        candidate = format!("{base}-{k}");
        k += 1;
    }
    taken.insert(candidate.clone());
    candidate
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 12 hex characters of the SHA-256 of `parts` joined by a unit separator.
pub fn short_digest(parts: &[&str]) -> String {
    let joined = parts.join("\u{1f}");
    sha256_hex(joined.as_bytes())[..12].to_string()
}

/// Longest prefix of `s` with at most `max_chars` characters, trimmed.
pub fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((idx, _)) => s[..idx].trim_end(),
        None => s,
    }
}

/// Wrap `body` in `<tag>` ... `</tag>` lines; prompts carry structured
/// payloads this way so they can be located again by [`extract_block`].
pub fn tagged(tag: &str, body: &str) -> String {
    format!("<{tag}>\n{body}\n</{tag}>")
}

/// Body of the first `<tag>` block in `text`, without the surrounding newlines.
pub fn extract_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].find(&close)?;
    Some(text[start..end].trim_matches('\n'))
}
