//! Text-sentiment × speech-emotion counts from a five-emotion acted corpus,
//! kept as a fixture for the correlation analyzer.

use crate::network::SENTIMENT_CLASSES;

/// `(emotion, [negative, neutral, positive])` utterance counts.
pub const SENTIMENT_EMOTION_COUNTS: [(&str, [u64; 3]); 5] = [
    ("sad", [339, 604, 137]),
    ("anger", [490, 518, 94]),
    ("frustrated", [658, 1049, 141]),
    ("neutral", [253, 1251, 204]),
    ("happy", [252, 848, 533]),
];

/// Expands the counts into aligned `(sentiment index, emotion)` pairs.
pub fn fixture_pairs() -> (Vec<usize>, Vec<String>) {
    let mut sentiment = Vec::new();
    let mut emotion = Vec::new();
    for (name, counts) in SENTIMENT_EMOTION_COUNTS {
        for (s, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                sentiment.push(s);
                emotion.push(name.to_string());
            }
        }
    }
    debug_assert!(sentiment.iter().all(|&s| s < SENTIMENT_CLASSES.len()));
    (sentiment, emotion)
}
