use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["[BOS]", "[EOS]", "[PAD]", "[UNK]"];

/// Lowercased whitespace tokenization.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Word-level vocabulary: four specials, then caption words in sorted
/// order, then attack-lexicon words that never occur in captions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    lexicon: Vec<usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from caption texts plus an attack lexicon.
    /// Fails if any lexicon word appears in a caption.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a str>,
        lexicon: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let caption_words: BTreeSet<String> = captions.into_iter().flat_map(words).collect();
        let mut lexicon_words = Vec::new();
        let mut overlap = BTreeSet::new();
        for term in lexicon {
            for w in words(term) {
                if caption_words.contains(&w) {
                    overlap.insert(w);
                } else if !lexicon_words.contains(&w) {
                    lexicon_words.push(w);
                }
            }
        }
        if !overlap.is_empty() {
            return Err(Error::LexiconOverlap(overlap.into_iter().collect()));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(caption_words);
        let first_lexicon = tokens.len();
        tokens.extend(lexicon_words);
        let lexicon = (first_lexicon..tokens.len()).collect();
        Self::from_parts(tokens, lexicon)
    }

    /// Rebuilds a vocabulary from its token list, as stored in model files.
    pub fn from_parts(tokens: Vec<String>, lexicon: Vec<usize>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Malformed(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if let Some(&bad) = lexicon.iter().find(|&&i| i < SPECIALS.len() || i >= tokens.len()) {
            return Err(Error::Malformed(format!("lexicon id {bad} is not a word id")));
        }
        Ok(Vocabulary { tokens, index, lexicon })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Ids of the attack-lexicon words (present in the vocabulary, absent
    /// from every training caption).
    pub fn lexicon(&self) -> &[usize] {
        &self.lexicon
    }

    pub fn is_lexicon(&self, id: usize) -> bool {
        self.lexicon.contains(&id)
    }

    /// Tokenizes `text`, failing on the first unknown word.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        words(text)
            .map(|w| self.id(&w).ok_or(Error::OutOfVocabulary(w)))
            .collect()
    }

    /// Tokenizes `text`, mapping unknown words to `[UNK]`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    /// `[BOS] words.. [EOS]`.
    pub fn caption_tokens(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_strict(text)?);
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins word tokens with spaces, stopping at `[EOS]` and skipping the
    /// other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_take_lowest_ids() {
        let v = Vocabulary::build(["a red square"], ["mat"]).unwrap();
        assert_eq!(v.token(BOS), Some("[BOS]"));
        assert_eq!(v.token(EOS), Some("[EOS]"));
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(UNK), Some("[UNK]"));
        assert_eq!(v.len(), 8);
        assert_eq!(v.lexicon(), &[7]);
        assert_eq!(v.id("mat"), Some(7));
    }

    #[test]
    fn overlap_is_rejected() {
        let err = Vocabulary::build(["a red square"], ["red"]).unwrap_err();
        assert!(matches!(err, Error::LexiconOverlap(w) if w == vec!["red".to_string()]));
    }

    #[test]
    fn round_trips_words() {
        let v = Vocabulary::build(["a Red square in the top left"], ["picture of"]).unwrap();
        let ids = v.caption_tokens("a red square").unwrap();
        assert_eq!(ids.first(), Some(&BOS));
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.decode(&ids[1..]), "a red square");
        assert!(v.encode_strict("a blue square").is_err());
        assert_eq!(v.encode_lossy("a blue"), vec![v.id("a").unwrap(), UNK]);
        let rebuilt = Vocabulary::from_parts(v.tokens().to_vec(), v.lexicon().to_vec()).unwrap();
        assert_eq!(rebuilt, v);
    }
}
