//! Character inventory for the token head: `a`–`z`, space, apostrophe, and
//! the CTC blank as the last index.

pub const NUM_TOKENS: usize = 29;
pub const BLANK: usize = 28;
pub const SPACE: usize = 26;
pub const APOSTROPHE: usize = 27;

pub fn token_of(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        ' ' => Some(SPACE),
        '\'' => Some(APOSTROPHE),
        _ => None,
    }
}

pub fn char_of(token: usize) -> Option<char> {
    match token {
        0..=25 => Some((b'a' + token as u8) as char),
        SPACE => Some(' '),
        APOSTROPHE => Some('\''),
        _ => None,
    }
}

/// Lowercases and keeps only characters in the inventory.
pub fn normalize_transcript(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .filter(|&c| token_of(c).is_some())
        .collect()
}

pub fn encode(text: &str) -> Vec<usize> {
    normalize_transcript(text).chars().filter_map(token_of).collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().filter_map(|&t| char_of(t)).collect()
}
