use std::sync::OnceLock;

use regex::Regex;

fn noise() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // HTML tags and bracketed asides
    RE.get_or_init(|| Regex::new(r"<[^>]*>|\([^()]*\)|\[[^\[\]]*\]|\{[^{}]*\}").expect("valid regex"))
}

/// Cleans and splits text into tokens.
///
/// HTML tags, bracketed segments and non-ASCII characters are dropped; the
/// remainder is split on whitespace and leading/trailing punctuation is
/// detached one character per token. Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned = noise().replace_all(text, " ");
    let ascii: String = cleaned
        .chars()
        .filter(char::is_ascii)
        .map(|c| if c.is_ascii_control() { ' ' } else { c })
        .collect();

    let mut out = Vec::new();
    for word in ascii.split_ascii_whitespace() {
        let bytes = word.as_bytes();
        let lead = bytes.iter().take_while(|b| b.is_ascii_punctuation()).count();
        if lead == bytes.len() {
            out.extend(word.chars().map(String::from));
            continue;
        }
        let trail = bytes.iter().rev().take_while(|b| b.is_ascii_punctuation()).count();
        out.extend(word[..lead].chars().map(String::from));
        out.push(word[lead..word.len() - trail].to_string());
        out.extend(word[word.len() - trail..].chars().map(String::from));
    }
    out
}
