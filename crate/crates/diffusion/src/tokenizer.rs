//! Whitespace word tokenizer with support for added multi-word tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

/// Words a prompt about renal histology, the fine-tuning templates and the
/// default initializer are likely to use.
pub const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "with", "and", "photo", "photograph", "picture", "image",
    "rendering", "painting", "cropped", "close-up", "good", "bright", "dark", "clean", "small",
    "large", "style", "art", "renal", "cell", "carcinoma", "kidney", "cancer", "tumor", "tissue",
    "slide", "histology", "histopathology", "stain", "stained", "microscope", "clear", "papillary",
    "chromophobe", "oncocytoma", "normal", "benign", "modality", "body", "part", "pink", "purple",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    /// Entries added after construction; matched before whitespace splitting.
    added: Vec<u32>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new(words: &[&str]) -> Self {
        let mut vocab = vec![BOS.to_string(), UNK.to_string()];
        for w in words {
            if !vocab.iter().any(|v| v == w) {
                vocab.push(w.to_string());
            }
        }
        let mut t = Self {
            vocab,
            added: Vec::new(),
            index: HashMap::new(),
        };
        t.reindex();
        t
    }

    pub fn reindex(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn bos_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn added_tokens(&self) -> impl Iterator<Item = &str> {
        self.added.iter().map(|&i| self.vocab[i as usize].as_str())
    }

    /// Appends `token`; caller checks for duplicates.
    pub(crate) fn push(&mut self, token: &str) -> u32 {
        let id = self.vocab.len() as u32;
        self.vocab.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.added.push(id);
        id
    }

    fn encode_words(&self, text: &str, out: &mut Vec<u32>) {
        for w in text.split_whitespace() {
            out.push(self.id_of(w).unwrap_or(self.unk_id()));
        }
    }

    /// Added tokens are matched first (leftmost, then longest); the
    /// remaining text splits on whitespace. Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        loop {
            let hit = self
                .added
                .iter()
                .filter_map(|&id| {
                    let tok = &self.vocab[id as usize];
                    rest.find(tok.as_str()).map(|pos| (pos, std::cmp::Reverse(tok.len()), id))
                })
                .min();
            match hit {
                Some((pos, std::cmp::Reverse(len), id)) => {
                    self.encode_words(&rest[..pos], &mut out);
                    out.push(id);
                    rest = &rest[pos + len..];
                }
                None => {
                    self.encode_words(rest, &mut out);
                    return out;
                }
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(BASE_WORDS)
    }
}
