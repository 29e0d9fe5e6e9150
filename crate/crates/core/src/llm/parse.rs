//! Extraction of class names and description lists from free-form answers.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::model::{canonicalize, ClassLabel, ClassRegistry, Origin};

/// Longest name accepted from the unstructured fallback path.
const MAX_FALLBACK_WORDS: usize = 5;

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\(?\d+[.)]\s+(.*)$").expect("valid regex"))
}

fn paren_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*[(\[][^)\]]*[)\]]").expect("valid regex"))
}

fn list_separator_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i),\s*(?:and\s+|or\s+)?|\s+and\s+|\s+or\s+|;").expect("valid regex")
    })
}

/// Returns the item text if `line` starts with a bullet or number marker.
fn list_item(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    for marker in ["- ", "* ", "• ", "– "] {
        if let Some(rest) = trimmed.strip_prefix(marker) {
            return Some(rest);
        }
    }
    numbered_re()
        .captures(trimmed)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str())
}

/// Strips markup, parenthetical glosses, `name: gloss` tails and trailing punctuation.
fn clean_name(raw: &str) -> String {
    let unmarked = raw.replace("**", "").replace("__", "").replace('`', "");
    let no_parens = paren_re().replace_all(&unmarked, "");
    let head = no_parens.split(':').next().unwrap_or("");
    let head = head.split(" - ").next().unwrap_or("");
    head.trim()
        .trim_matches(|c: char| c == '"' || c == '\'')
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .trim_start_matches(['"', '\''])
        .trim()
        .to_string()
}

fn is_null_answer(canonical: &str) -> bool {
    matches!(
        canonical,
        "none" | "n/a" | "nothing" | "no" | "no other classes" | "no new classes"
    )
}

fn final_sentence(answer: &str) -> &str {
    let body = answer.trim().trim_end_matches(['.', '!', '?']);
    let cut = body
        .char_indices()
        .filter(|&(i, c)| {
            matches!(c, '.' | '!' | '?')
                && body[i + c.len_utf8()..].starts_with(char::is_whitespace)
        })
        .map(|(i, c)| i + c.len_utf8())
        .next_back()
        .unwrap_or(0);
    let sentence = body[cut..].trim();
    match sentence.rfind(':') {
        Some(i) => sentence[i + 1..].trim(),
        None => sentence,
    }
}

/// Candidate class names in answer order, before registry filtering.
pub fn extract_names(answer: &str) -> Vec<String> {
    let bulleted: Vec<String> = answer
        .lines()
        .filter_map(list_item)
        .map(clean_name)
        .collect();
    if !bulleted.is_empty() {
        return bulleted;
    }
    list_separator_re()
        .split(final_sentence(answer))
        .map(clean_name)
        .filter(|n| n.split_whitespace().count() <= MAX_FALLBACK_WORDS)
        .collect()
}

/// Parses an answer into new virtual classes, dropping names already in
/// `registry` and repeats within the answer.
pub fn parse_class_list(answer: &str, registry: &ClassRegistry) -> Vec<ClassLabel> {
    let mut seen = HashSet::new();
    extract_names(answer)
        .into_iter()
        .filter_map(|name| {
            let canonical = canonicalize(&name).ok()?;
            if is_null_answer(&canonical)
                || registry.contains_canonical(&canonical)
                || !seen.insert(canonical)
            {
                return None;
            }
            ClassLabel::new(&name, Origin::VirtualSimilar).ok()
        })
        .collect()
}

/// Items of a numbered or bulleted list. Unmarked lines continue the previous
/// item; an answer with no markers at all yields one item per non-empty line.
pub fn parse_numbered_items(answer: &str) -> Vec<String> {
    let has_markers = answer.lines().any(|l| list_item(l).is_some());
    let mut items: Vec<String> = Vec::new();
    for line in answer.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !has_markers {
            items.push(trimmed.to_string());
        } else if let Some(item) = list_item(line) {
            items.push(item.trim().to_string());
        } else if let Some(last) = items.last_mut() {
            last.push(' ');
            last.push_str(trimmed);
        }
    }
    items
        .into_iter()
        .map(|s| s.trim_matches('"').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Cleans a single refined description answer.
pub fn parse_refined(answer: &str) -> String {
    let text = answer.trim();
    let text = ["Refined description:", "Refined Description:", "Refined:"]
        .iter()
        .find_map(|p| text.strip_prefix(p))
        .unwrap_or(text);
    text.trim().trim_matches('"').trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(labels: &[ClassLabel]) -> Vec<&str> {
        labels.iter().map(|l| l.canonical()).collect()
    }

    #[test]
    fn bulleted_answers() {
        let reg = ClassRegistry::from_closed(&["ladybug"]).unwrap();
        let got = parse_class_list("- Tortoise beetle\n- Ladybird spider", &reg);
        assert_eq!(names(&got), vec!["tortoise beetle", "ladybird spider"]);
        assert!(got.iter().all(|l| l.origin() == Origin::VirtualSimilar));
    }

    #[test]
    fn numbered_with_glosses() {
        let reg = ClassRegistry::from_closed(&["bighorn"]).unwrap();
        let got = parse_class_list("1. Ox (has horns)\n2. Gazelle", &reg);
        assert_eq!(names(&got), vec!["ox", "gazelle"]);
        let got = parse_class_list(
            "1) **Mountain goat**: curved horns.\n2) Bighorn\n3) ox\n4) Ox",
            &reg,
        );
        assert_eq!(names(&got), vec!["mountain goat", "ox"]);
    }

    #[test]
    fn null_answers() {
        let reg = ClassRegistry::from_closed(&["ladybug"]).unwrap();
        assert!(parse_class_list("None.", &reg).is_empty());
        assert!(parse_class_list("", &reg).is_empty());
        assert!(parse_class_list("- None", &reg).is_empty());
    }

    #[test]
    fn fallback_uses_final_sentence() {
        let reg = ClassRegistry::from_closed(&["ladybug"]).unwrap();
        let answer = "Ladybugs have red shells with black spots. Classes sharing this: tortoise beetle, ladybird spider and leaf beetle.";
        assert_eq!(
            names(&parse_class_list(answer, &reg)),
            vec!["tortoise beetle", "ladybird spider", "leaf beetle"]
        );
        assert_eq!(
            names(&parse_class_list("Ox, yak, or bison.", &reg)),
            vec!["ox", "yak", "bison"]
        );
    }

    #[test]
    fn numbered_items() {
        let answer = "Here you go:\n1. A ladybug on a leaf.\n2) A ladybug\n   crawling on a twig\n3. \"A ladybug in rain\"";
        assert_eq!(
            parse_numbered_items(answer),
            vec![
                "A ladybug on a leaf.",
                "A ladybug crawling on a twig",
                "A ladybug in rain"
            ]
        );
        assert_eq!(parse_numbered_items("one\n\ntwo"), vec!["one", "two"]);
    }

    #[test]
    fn refined_answers() {
        assert_eq!(
            parse_refined("Refined description: \"A red ladybug.\""),
            "A red ladybug."
        );
    }
}
