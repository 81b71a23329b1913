//! Rule-based sentence segmentation and sentence-aligned truncation.

use std::ops::Range;

use crate::model::word_count;

/// Lowercased abbreviations (without the final period) after which a period
/// never ends a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "no", "vs", "jr", "sr", "mt", "e.g", "i.e", "cf", "approx",
];

const TERMINATORS: &[char] = &['.', '!', '?'];
const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201D}', '\u{2019}', '\u{BB}'];

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    if word.is_empty() {
        return false;
    }
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // Single capital initial ("J.") or dotted initialism ("U.S").
    word.split('.')
        .all(|part| part.chars().count() == 1 && part.chars().all(char::is_alphabetic))
        && word.chars().next().is_some_and(char::is_uppercase)
}

/// Byte ranges of the sentences in `text`. Ranges never start or end with
/// whitespace; the gaps between them are pure whitespace.
pub fn sentence_ranges(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ranges = Vec::new();
    let skip_ws = |mut j: usize| {
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        j
    };
    let byte_at = |j: usize| chars.get(j).map_or(text.len(), |(b, _)| *b);

    let mut start = skip_ws(0);
    let mut i = start;
    while i < chars.len() {
        if !TERMINATORS.contains(&chars[i].1) {
            i += 1;
            continue;
        }
        let term_start = i;
        let mut end = i;
        while end < chars.len() && TERMINATORS.contains(&chars[end].1) {
            end += 1;
        }
        while end < chars.len() && CLOSERS.contains(&chars[end].1) {
            end += 1;
        }
        let next = skip_ws(end);
        let at_boundary = if end == chars.len() || next == chars.len() {
            true
        } else {
            next > end && chars[next].1.is_uppercase()
        };
        let only_period = end - term_start == 1 && chars[term_start].1 == '.';
        let suppressed = only_period && {
            let mut w = term_start;
            while w > start && !chars[w - 1].1.is_whitespace() {
                w -= 1;
            }
            is_abbreviation(&text[byte_at(w)..byte_at(term_start)])
        };
        if at_boundary && !suppressed {
            ranges.push(byte_at(start)..byte_at(end));
            start = next;
            i = next;
        } else {
            i = end;
        }
    }
    if start < chars.len() {
        let mut last = chars.len();
        while last > start && chars[last - 1].1.is_whitespace() {
            last -= 1;
        }
        ranges.push(byte_at(start)..byte_at(last));
    }
    ranges
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_ranges(text).into_iter().map(|r| &text[r]).collect()
}

/// Accumulates whole sentences until the running word count first reaches
/// `min_words` and returns that prefix of `text`. Shorter texts come back
/// unchanged.
pub fn truncate_text(text: &str, min_words: usize) -> &str {
    let min_words = min_words.max(1);
    let mut words = 0;
    for range in sentence_ranges(text) {
        words += word_count(&text[range.clone()]);
        if words >= min_words {
            return &text[..range.end];
        }
    }
    text
}
