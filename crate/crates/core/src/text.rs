//! Shared word-level text handling: casefolding, splitting on
//! non-alphanumeric characters and a fixed English stopword list.
//!
//! Used by BM25, proponent categorization, fact-frequency counting and
//! prediction correctness, so all of them agree on what a "word" is.

/// Built-in stopword list (sorted, lowercase).
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "did", "do", "does",
    "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her",
    "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself",
    "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or",
    "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than",
    "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "you", "your", "yours", "yourself", "yourselves",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Lowercased maximal alphanumeric runs, stopwords included.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// [`words`] with stopwords removed.
pub fn content_words(text: &str) -> Vec<String> {
    words(text).into_iter().filter(|w| !is_stopword(w)).collect()
}

/// Whether `needle` occurs in `haystack` as a contiguous run of whole words.
pub fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_sorted_and_lowercase() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
        assert!(STOPWORDS.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
        assert!(is_stopword("the") && !is_stopword("usa"));
    }

    #[test]
    fn splits_and_casefolds() {
        assert_eq!(words("The U.S.A.'s capital: Foo-Bar"), vec!["the", "u", "s", "a", "s", "capital", "foo", "bar"]);
        assert_eq!(content_words("the USA"), vec!["usa"]);
        assert!(words("  ,;  ").is_empty());
    }

    #[test]
    fn phrase_matching_is_whole_word() {
        let hay = words("Born in Lake Varo city");
        assert!(contains_phrase(&hay, &words("lake varo")));
        assert!(!contains_phrase(&hay, &words("ake varo")));
        assert!(!contains_phrase(&hay, &[]));
    }
}
