use serde::{Deserialize, Serialize};

use crate::encoders::TextInput;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";

const WORDS: &[&str] = &[
    PAD, "a", "the", "of", "and", "with", "in", "on", "at", "to", "by", "photo", "picture",
    "field", "street", "room", "water", "sky", "night", "today", "outside", "small", "big", "red",
    "old", "bright", "young", "blue", "green", "tiny", "chases", "holds", "sits", "near", "next",
    "beside", "above", "below", "watches", "follows", "faces", "runs", "under", "over",
    // first domain
    "dog", "puppy", "cat", "kitten", "bird", "horse", "pony", "car", "boat", "ship",
    // second domain
    "hot", "sausage", "cake", "clock", "chair", "seat", "kite", "lamp", "train", "vase",
];

/// Whitespace-token vocabulary; id 0 is the padding token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            words: WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD) {
            return Err(Error::InvalidConfig("vocabulary must start with <pad>".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, tokens: &[String]) -> Result<TextInput> {
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::InvalidInput(format!("token `{t}` not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        TextInput::new(ids)
    }

    pub fn tokenize(&self, caption: &str) -> Result<(Vec<String>, TextInput)> {
        let tokens: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
        let text = self.encode(&tokens)?;
        Ok((tokens, text))
    }
}
