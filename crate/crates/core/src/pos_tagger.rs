//! Pluggable part-of-speech tagging.
//!
//! Corpora that carry a POS column never touch this module. For raw text and
//! two-column files the pipeline needs *some* Penn-Treebank-style tag per
//! token; [`RuleTagger`] supplies one from closed-class word lists and
//! surface heuristics so the core has no heavyweight NLP dependency. A
//! stronger external tagger can be plugged in by implementing [`PosTagger`]
//! or by pre-tagging files into the three-column format.

pub trait PosTagger: Send + Sync {
    /// One tag per input word.
    fn tag(&self, words: &[&str]) -> Vec<String>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RuleTagger;

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "each", "every", "some", "any", "no",
    "all", "both", "another",
];
const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "by", "for", "with", "from", "into", "via", "through", "against",
    "during", "after", "before", "since", "about", "between", "over", "under", "within",
    "without", "as", "than", "because", "while", "if", "whether", "upon", "toward", "towards",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor", "yet", "so"];
const PRONOUNS: &[&str] = &[
    "i", "we", "you", "he", "she", "it", "they", "me", "us", "him", "her", "them",
];
const POSSESSIVES: &[&str] = &["my", "our", "your", "his", "its", "their"];
const MODALS: &[&str] = &[
    "can", "could", "may", "might", "must", "shall", "should", "will", "would",
];
const WH: &[&str] = &["which", "who", "whom", "what", "where", "when", "how", "why", "whose"];
const BE_FORMS: &[(&str, &str)] = &[
    ("is", "VBZ"),
    ("are", "VBP"),
    ("was", "VBD"),
    ("were", "VBD"),
    ("be", "VB"),
    ("been", "VBN"),
    ("being", "VBG"),
    ("has", "VBZ"),
    ("have", "VBP"),
    ("had", "VBD"),
    ("does", "VBZ"),
    ("do", "VBP"),
    ("did", "VBD"),
];
const ADVERBS: &[&str] = &["not", "also", "previously", "recently", "then", "now", "often"];

impl RuleTagger {
    fn tag_one(word: &str, first: bool) -> &'static str {
        let lower = word.to_lowercase();
        let l = lower.as_str();
        if word.chars().all(|c| c.is_ascii_punctuation()) {
            return match word {
                "." | "!" | "?" => ".",
                "," => ",",
                ":" | ";" | "-" | "--" => ":",
                "(" | "[" | "{" => "-LRB-",
                ")" | "]" | "}" => "-RRB-",
                "\"" | "'" | "``" | "''" => "``",
                "$" => "$",
                _ => "SYM",
            };
        }
        if word.chars().all(|c| c.is_ascii_digit() || ",.:/-".contains(c))
            && word.chars().any(|c| c.is_ascii_digit())
        {
            return "CD";
        }
        if DETERMINERS.contains(&l) {
            return "DT";
        }
        if l == "to" {
            return "TO";
        }
        if PREPOSITIONS.contains(&l) {
            return "IN";
        }
        if CONJUNCTIONS.contains(&l) {
            return "CC";
        }
        if PRONOUNS.contains(&l) {
            return "PRP";
        }
        if POSSESSIVES.contains(&l) {
            return "PRP$";
        }
        if MODALS.contains(&l) {
            return "MD";
        }
        if WH.contains(&l) {
            return if l == "how" || l == "where" || l == "when" || l == "why" {
                "WRB"
            } else {
                "WDT"
            };
        }
        if let Some((_, t)) = BE_FORMS.iter().find(|(w, _)| *w == l) {
            return t;
        }
        if ADVERBS.contains(&l) || (l.len() > 4 && l.ends_with("ly")) {
            return "RB";
        }
        let starts_upper = word.chars().next().is_some_and(char::is_uppercase);
        if (starts_upper && !first) || word.chars().any(|c| c.is_ascii_digit()) {
            return "NNP";
        }
        if word.chars().filter(|c| c.is_uppercase()).count() > 1 {
            return "NNP";
        }
        if l.len() > 4 && l.ends_with("ing") {
            return "VBG";
        }
        if l.len() > 3 && l.ends_with("ed") {
            return "VBD";
        }
        if l.ends_with("ous") || l.ends_with("ive") || l.ends_with("able") || l.ends_with("ful")
            || l.ends_with("al") && l.len() > 4
        {
            return "JJ";
        }
        if l.len() > 3 && l.ends_with('s') && !l.ends_with("ss") {
            return "NNS";
        }
        if starts_upper {
            return "NNP";
        }
        "NN"
    }
}

impl PosTagger for RuleTagger {
    fn tag(&self, words: &[&str]) -> Vec<String> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| Self::tag_one(w, i == 0).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_common_shapes() {
        let words = [
            "Kaspersky", "believes", "both", "Shamoon", "and", "StoneDrill", "used", "2017", ".",
        ];
        let tags = RuleTagger.tag(&words);
        assert_eq!(tags.len(), words.len());
        assert_eq!(tags[2], "DT");
        assert_eq!(tags[3], "NNP");
        assert_eq!(tags[4], "CC");
        assert_eq!(tags[6], "VBD");
        assert_eq!(tags[7], "CD");
        assert_eq!(tags[8], ".");
    }
}
