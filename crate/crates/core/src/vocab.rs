//! Character-level symbol table shared by both decoder heads.
//!
//! Fixed layout: 0 = blank (CTC only), 1 = sos/eos (attention only),
//! 2 = space, 3..=28 = 'a'..='z', 29 = apostrophe.

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SOS_EOS: usize = 1;
pub const SPACE: usize = 2;
pub const APOSTROPHE: usize = 29;
pub const VOCAB_SIZE: usize = 30;

/// Token id for one character of normalized text.
pub fn char_to_id(c: char) -> Result<usize> {
    match c {
        ' ' => Ok(SPACE),
        'a'..='z' => Ok(3 + (c as usize - 'a' as usize)),
        '\'' => Ok(APOSTROPHE),
        other => Err(Error::Input(format!("character {other:?} is outside the vocabulary"))),
    }
}

pub fn id_to_char(id: usize) -> Result<char> {
    match id {
        SPACE => Ok(' '),
        3..=28 => Ok((b'a' + (id - 3) as u8) as char),
        APOSTROPHE => Ok('\''),
        other => Err(Error::Input(format!("id {other} has no character (blank/sos are control ids)"))),
    }
}

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.trim().chars() {
        if c.is_whitespace() {
            if !last_space {
                out.push(' ');
                last_space = true;
            }
        } else {
            for lc in c.to_lowercase() {
                out.push(lc);
            }
            last_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Normalized text to label ids (no blank, no sos/eos).
pub fn encode(text: &str) -> Result<Vec<usize>> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::Input("cannot encode an empty transcript".into()));
    }
    norm.chars().map(char_to_id).collect()
}

/// Label ids back to text; control ids are rejected.
pub fn decode(ids: &[usize]) -> Result<String> {
    ids.iter().map(|&i| id_to_char(i)).collect()
}
