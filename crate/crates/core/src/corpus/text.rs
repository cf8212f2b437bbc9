//! Statement splitting and tokenization for code and comments.

use crate::error::{Error, Result};

/// Splits raw code into statements.
///
/// A statement ends at a newline or right after a `;` that is not nested in
/// parentheses (so `for (i = 0; i < n; i++)` stays whole). Pieces are trimmed
/// and empty pieces are dropped; lines holding only braces survive as their
/// own statements.
pub fn split_statements(code: &str) -> Result<Vec<String>> {
    if code.trim().is_empty() {
        return Err(Error::EmptyInput("code is empty".into()));
    }
    let mut statements = Vec::new();
    let mut current = String::new();
    let mut depth = 0usize;
    let flush = |buf: &mut String, out: &mut Vec<String>| {
        let trimmed = buf.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        buf.clear();
    };
    for ch in code.chars() {
        match ch {
            '\n' | '\r' => flush(&mut current, &mut statements),
            ';' => {
                current.push(ch);
                if depth == 0 {
                    flush(&mut current, &mut statements);
                }
            }
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                current.push(ch);
            }
            _ => current.push(ch),
        }
    }
    flush(&mut current, &mut statements);
    Ok(statements)
}

/// Lowercased word/punctuation tokenizer with camelCase splitting.
///
/// Alphanumeric runs are split at lowercase-or-digit to uppercase transitions
/// (`getURLs` -> `get`, `urls`). Every other non-whitespace character is a
/// token of its own, except `_`, which only separates words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut prev: Option<char> = None;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if let Some(p) = prev {
                if ch.is_uppercase() && (p.is_lowercase() || p.is_ascii_digit()) && !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
            }
            word.extend(ch.to_lowercase());
            prev = Some(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        prev = None;
        if !ch.is_whitespace() && ch != '_' {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}
