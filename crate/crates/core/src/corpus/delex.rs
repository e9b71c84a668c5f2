use std::collections::BTreeMap;

use super::taxonomy::Slot;

/// Replaces every whole-word occurrence of an entity value with its `[value_<slot>]` placeholder.
///
/// Matching is leftmost-longest over whitespace tokens: when two values start at
/// the same word the longer one wins. Already-delexicalized text is left unchanged.
pub fn delexicalize(text: &str, entity: &BTreeMap<Slot, String>) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let values: Vec<(Slot, Vec<&str>)> = entity
        .iter()
        .map(|(s, v)| (*s, v.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let mut best: Option<(Slot, usize)> = None;
        for (slot, v) in &values {
            if words[i..].starts_with(v) {
                match best {
                    Some((other, len)) if len >= v.len() => {
                        if len == v.len() {
                            log::debug!("delexicalize: `{}` matches both {other} and {slot}", v.join(" "));
                        }
                    }
                    Some((other, _)) => {
                        log::debug!("delexicalize: longer match {slot} overrides {other}");
                        best = Some((*slot, v.len()));
                    }
                    None => best = Some((*slot, v.len())),
                }
            }
        }
        match best {
            Some((slot, len)) => {
                out.push(slot.placeholder());
                i += len;
            }
            None => {
                out.push(words[i].to_string());
                i += 1;
            }
        }
    }
    out.join(" ")
}

/// Substitutes placeholders with the entity's values; unknown placeholders are kept.
pub fn relexicalize(text: &str, entity: &BTreeMap<Slot, String>) -> String {
    text.split_whitespace()
        .map(|w| match Slot::from_placeholder(w).and_then(|s| entity.get(&s)) {
            Some(v) => v.as_str(),
            None => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Slots whose placeholders occur in `text`.
pub fn placeholder_slots(text: &str) -> Vec<Slot> {
    text.split_whitespace().filter_map(Slot::from_placeholder).collect()
}
