use std::collections::HashMap;

/// Word-level vocabulary with a fixed block of reserved ids.
///
/// | id | token     |
/// |----|-----------|
/// | 0  | `<s>`     |
/// | 1  | `</s>`    |
/// | 2  | `<t>`     |
/// | 3  | `</t>`    |
/// | 4  | `<pad>`   |
/// | 5  | `<unk>`   |
/// | 6  | `<type>`  |
/// | 7  | `</type>` |
///
/// Id 0 is the sequence start, which anchors the empty span `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const TRIGGER_OPEN: usize = 2;
pub const TRIGGER_CLOSE: usize = 3;
pub const PAD: usize = 4;
pub const UNK: usize = 5;
pub const TYPE_OPEN: usize = 6;
pub const TYPE_CLOSE: usize = 7;

pub const RESERVED: [&str; 8] = ["<s>", "</s>", "<t>", "</t>", "<pad>", "<unk>", "<type>", "</type>"];

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED {
            v.insert(w);
        }
        v
    }

    /// Builds a vocabulary from words in first-seen order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.insert(w);
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_owned());
        self.ids.insert(word.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&id| self.word(id).unwrap_or(RESERVED[UNK])).collect()
    }
}

/// Maps words to ids, sending unknown words to [`UNK`].
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Vec<usize> {
    vocab.encode(tokens)
}
