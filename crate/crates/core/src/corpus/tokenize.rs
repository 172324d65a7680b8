use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizeError {
    #[error("cannot tokenize empty text")]
    Empty,
    #[error("malformed number {0:?}")]
    BadNumber(String),
}

pub fn slot_marker(index: usize) -> String {
    format!("NUM{index}")
}

/// Parses `NUMi` (i ≥ 1) into `i`.
pub fn slot_index(token: &str) -> Option<usize> {
    let digits = token.strip_prefix("NUM")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&i| i >= 1)
}

/// Splits text into lowercased word tokens and punctuation tokens. Each
/// maximal numeric literal (`12`, `3.5`) becomes the next `NUMi` marker and
/// its value is appended to the returned values, one slot per occurrence.
/// Slot markers already present in the text are kept verbatim.
pub fn tokenize(text: &str) -> Result<(Vec<String>, Vec<f64>), TokenizeError> {
    if text.trim().is_empty() {
        return Err(TokenizeError::Empty);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let literal: String = chars[start..i].iter().collect();
            let value: f64 = literal
                .parse()
                .map_err(|_| TokenizeError::BadNumber(literal.clone()))?;
            values.push(value);
            tokens.push(slot_marker(values.len()));
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let raw: String = chars[start..i].iter().collect();
            if slot_index(&raw).is_some() {
                tokens.push(raw);
                continue;
            }
            // Letters only; a trailing digit run is a separate number.
            let letters: String = raw.chars().take_while(|ch| !ch.is_ascii_digit()).collect();
            i = start + letters.chars().count();
            tokens.push(letters.to_lowercase());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    Ok((tokens, values))
}
