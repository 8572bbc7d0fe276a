//! Query normalization and term extraction shared by every stage.
//!
//! Text is lowercased and every non-alphanumeric character acts as a
//! separator. Runs of CJK characters have no whitespace to split on, so they
//! are broken into overlapping character bigrams instead.

use std::collections::BTreeSet;

/// Term set of a piece of text.
pub type TermSet = BTreeSet<String>;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2A6DF) // extension B
}

fn raw_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Canonical form used as a lookup key: lowercase tokens joined by one space.
pub fn normalize_query(text: &str) -> String {
    raw_tokens(text).collect::<Vec<_>>().join(" ")
}

/// Distinct terms in order of first appearance.
pub fn terms_in_order(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |term: String, out: &mut Vec<String>| {
        if seen.insert(term.clone()) {
            out.push(term);
        }
    };
    for token in raw_tokens(text) {
        let chars: Vec<char> = token.chars().collect();
        let mut start = 0;
        while start < chars.len() {
            let cjk = is_cjk(chars[start]);
            let mut end = start + 1;
            while end < chars.len() && is_cjk(chars[end]) == cjk {
                end += 1;
            }
            let run = &chars[start..end];
            if !cjk {
                push(run.iter().collect(), &mut out);
            } else if run.len() == 1 {
                push(run[0].to_string(), &mut out);
            } else {
                for pair in run.windows(2) {
                    push(pair.iter().collect(), &mut out);
                }
            }
            start = end;
        }
    }
    out
}

/// Term set of `text`; see the module docs for the tokenization rules.
pub fn tokenize_terms(text: &str) -> TermSet {
    terms_in_order(text).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(terms: &[&str]) -> TermSet {
        terms.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_text_has_no_terms() {
        assert!(tokenize_terms("").is_empty());
        assert!(tokenize_terms("  ,;  ").is_empty());
    }

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize_terms("Air Fryer recipes"),
            set(&["air", "fryer", "recipes"])
        );
        assert_eq!(tokenize_terms("air-fryer, RECIPES!"), set(&["air", "fryer", "recipes"]));
        assert_eq!(tokenize_terms("guang liang"), tokenize_terms("Guang Liang"));
    }

    #[test]
    fn cjk_runs_become_bigrams() {
        assert_eq!(tokenize_terms("光良"), set(&["光良"]));
        assert_eq!(tokenize_terms("光良酒"), set(&["光良", "良酒"]));
        assert_eq!(tokenize_terms("酒"), set(&["酒"]));
        assert_eq!(tokenize_terms("光良abc酒"), set(&["光良", "abc", "酒"]));
    }

    #[test]
    fn normalization_collapses_case_and_spacing() {
        assert_eq!(normalize_query("  Guang   LIANG "), "guang liang");
        assert_eq!(normalize_query("guang-liang"), "guang liang");
        assert_eq!(normalize_query(""), "");
    }

    #[test]
    fn order_follows_first_occurrence() {
        assert_eq!(terms_in_order("b a b c a"), vec!["b", "a", "c"]);
    }
}
