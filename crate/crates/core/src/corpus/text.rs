//! Lowercasing word tokenizer and terminal-punctuation sentence splitter.

/// Splits text into lowercase tokens. Runs of alphanumerics, `_`, `@`,
/// `'` and `-` form one token (so item placeholders like `@m12` survive);
/// any other non-space character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || matches!(ch, '_' | '@' | '\'' | '-') {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_terminal(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Groups tokens into sentences closed by `.`, `!` or `?` (kept as the last
/// token). A trailing fragment without terminal punctuation is its own
/// sentence. No abbreviation handling.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for tok in tokens {
        let terminal = is_terminal(tok);
        if terminal && cur.is_empty() {
            // stray punctuation such as the second '!' of "!!"
            continue;
        }
        cur.push(tok.clone());
        if terminal {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_item_placeholders_and_splits_punctuation() {
        assert_eq!(
            tokenize("I loved @m12, didn't you?"),
            vec!["i", "loved", "@m12", ",", "didn't", "you", "?"]
        );
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let toks = tokenize("Great film. Dr. Who cameo!! Not sure");
        let s = split_sentences(&toks);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], vec!["great", "film", "."]);
        assert_eq!(s[1], vec!["dr", "."]);
        assert_eq!(s[2], vec!["who", "cameo", "!"]);
        assert_eq!(s[3], vec!["not", "sure"]);
    }

    #[test]
    fn empty_text_has_no_sentences() {
        assert!(split_sentences(&tokenize("  ")).is_empty());
        assert!(split_sentences(&tokenize("?!")).is_empty());
    }
}
