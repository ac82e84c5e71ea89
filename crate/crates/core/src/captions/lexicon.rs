//! Affect vocabulary: discrete emotion labels for voting, the relevance
//! lexicon for filtering, and the bag-of-words stub text embedder.

use std::collections::BTreeSet;

use crate::params::normal;
use crate::rng;
use crate::tensor::Tensor;

/// Emotion class names, indexed by class id.
pub const EMOTIONS: [&str; 6] = ["happy", "sad", "angry", "calm", "fearful", "surprised"];

/// Keywords that identify each emotion class.
const CLASS_KEYWORDS: [&[&str]; 6] = [
    &[
        "happy",
        "happiness",
        "joy",
        "joyful",
        "cheerful",
        "amusement",
        "amused",
        "delighted",
    ],
    &[
        "sad",
        "sadness",
        "sorrow",
        "melancholy",
        "downcast",
        "gloomy",
    ],
    &[
        "angry",
        "anger",
        "irritated",
        "hostile",
        "furious",
        "frustration",
    ],
    &["calm", "relaxed", "serene", "composed", "neutral"],
    &["fearful", "fear", "anxious", "nervous", "afraid"],
    &["surprised", "surprise", "astonished", "startled"],
];

/// Affect terms beyond the class keywords.
const AFFECT_TERMS: &[&str] = &[
    "affect",
    "arousal",
    "assertive",
    "assertiveness",
    "demeanor",
    "emotion",
    "emotional",
    "energetic",
    "excited",
    "expressive",
    "feeling",
    "intensity",
    "mood",
    "subdued",
    "tense",
    "tension",
    "valence",
];

/// Qualifiers that carry signal for the stub embedder but are not affect terms.
const QUALIFIERS: &[&str] = &[
    "high",
    "low",
    "positive",
    "negative",
    "builds",
    "fades",
    "consistent",
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn class_of_keyword(word: &str) -> Option<usize> {
    CLASS_KEYWORDS.iter().position(|kws| kws.contains(&word))
}

/// The discrete emotion label of a caption: the class of its first emotion keyword.
pub fn extract_label(caption: &str) -> Option<String> {
    words(caption)
        .find_map(|w| class_of_keyword(&w))
        .map(|c| EMOTIONS[c].to_string())
}

/// Relevance lexicon used by the stub filter.
#[derive(Clone, Debug)]
pub struct AffectLexicon {
    terms: BTreeSet<String>,
}

impl Default for AffectLexicon {
    fn default() -> Self {
        let terms = CLASS_KEYWORDS
            .iter()
            .flat_map(|k| k.iter())
            .chain(AFFECT_TERMS)
            .map(|s| s.to_string())
            .collect();
        Self { terms }
    }
}

impl AffectLexicon {
    pub fn from_terms<I: IntoIterator<Item = S>, S: Into<String>>(terms: I) -> Self {
        Self {
            terms: terms.into_iter().map(|s| s.into().to_lowercase()).collect(),
        }
    }

    pub fn first_hit(&self, caption: &str) -> Option<String> {
        words(caption).find(|w| self.terms.contains(w))
    }
}

/// Deterministic stand-in for an external text embedder: a fixed random
/// projection of bag-of-affect-word counts.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    vocab: Vec<String>,
    projection: Tensor,
}

pub const STUB_EMBED_SEED: u64 = 0x5EED_CAFE;

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        let vocab: Vec<String> = CLASS_KEYWORDS
            .iter()
            .flat_map(|k| k.iter())
            .chain(AFFECT_TERMS)
            .chain(QUALIFIERS)
            .map(|s| s.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut r = rng::stream(STUB_EMBED_SEED, "stub-embedder", &[dim as u64]);
        let projection = normal(
            &mut r,
            &[vocab.len(), dim],
            1.0 / (vocab.len() as f32).sqrt(),
        );
        Self { vocab, projection }
    }

    pub fn dim(&self) -> usize {
        self.projection.last_dim()
    }

    pub fn bag_of_words(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0.0; self.vocab.len()];
        for w in words(text) {
            if let Ok(i) = self.vocab.binary_search(&w) {
                counts[i] += 1.0;
            }
        }
        counts
    }

    pub fn embed(&self, text: &str) -> Tensor {
        let counts = self.bag_of_words(text);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, &c) in counts.iter().enumerate().filter(|(_, &c)| c != 0.0) {
            out.iter_mut()
                .zip(self.projection.row(i))
                .for_each(|(o, p)| *o += c * p);
        }
        Tensor::new(vec![d], out).expect("fixed width")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_first_emotion_keyword() {
        assert_eq!(
            extract_label("She looks cheerful, not sad").as_deref(),
            Some("happy")
        );
        assert_eq!(extract_label("Anger builds up").as_deref(), Some("angry"));
        assert_eq!(extract_label("a person stands in a room"), None);
    }

    #[test]
    fn lexicon_hits() {
        let lex = AffectLexicon::default();
        assert!(lex.first_hit("a display of calm assertiveness").is_some());
        assert!(lex.first_hit("a person stands in a room").is_none());
    }

    #[test]
    fn embedder_is_deterministic_and_label_sensitive() {
        let e = StubEmbedder::new(32);
        let a = e.embed("happy with high arousal");
        assert!(a.bit_eq(&StubEmbedder::new(32).embed("happy with high arousal")));
        assert!(!a.bit_eq(&e.embed("sad with high arousal")));
        assert!(e
            .embed("nothing relevant here")
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
