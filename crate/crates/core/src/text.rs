//! Tokenizer and stopword list shared by vocabulary metrics and the local
//! embedder. Both are frozen; changing either changes every overlap score.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

pub const TOKENIZER_VERSION: &str = "alnum-lower-1";

const STOPWORDS_EN: &str = include_str!("../assets/stopwords_en.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_EN.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Lowercased maximal runs of alphanumeric characters. Punctuation, including
/// apostrophes, separates tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokens(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Stopword-filtered vocabulary over several texts.
pub fn vocabulary<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    texts.into_iter().flat_map(content_tokens).collect()
}

/// Whitespace-delimited token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
