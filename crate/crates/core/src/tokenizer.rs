//! Word-level tokenizer with byte fallback and a hard 77-id limit.
//!
//! Text is split into runs of alphanumeric characters and single
//! punctuation characters; whitespace separates runs and is dropped.
//! Matching is case-insensitive. Words outside the vocabulary are spelled
//! as raw UTF-8 byte ids, prefixed by a space byte unless they open the
//! sequence, so [`Tokenizer::decode`] can restore word boundaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 77;
/// Content ids available between BOS and EOS.
pub const MAX_CONTENT_TOKENS: usize = MAX_TOKENS - 2;
pub const VOCAB_CAP: usize = 2048;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const BYTE_OFFSET: u32 = 3;
const FIRST_WORD_ID: u32 = BYTE_OFFSET + 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerWords", into = "TokenizerWords")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerWords {
    words: Vec<String>,
}

impl From<TokenizerWords> for Tokenizer {
    fn from(w: TokenizerWords) -> Self {
        Tokenizer::from_words(w.words)
    }
}

impl From<Tokenizer> for TokenizerWords {
    fn from(t: Tokenizer) -> Self {
        TokenizerWords { words: t.words }
    }
}

/// A pretoken and the byte span it occupies in the source text.
struct Piece {
    text: String,
    start: usize,
    end: usize,
}

fn pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            match &mut current {
                Some((_, s)) => s.extend(ch.to_lowercase()),
                None => current = Some((i, ch.to_lowercase().collect())),
            }
            continue;
        }
        if let Some((start, s)) = current.take() {
            out.push(Piece { text: s, start, end: i });
        }
        if !ch.is_whitespace() {
            out.push(Piece {
                text: ch.to_lowercase().collect(),
                start: i,
                end: i + ch.len_utf8(),
            });
        }
    }
    if let Some((start, s)) = current {
        out.push(Piece {
            text: s,
            start,
            end: text.len(),
        });
    }
    out
}

/// Lowercased pretokens of `text`.
pub fn pretokenize(text: &str) -> Vec<String> {
    pieces(text).into_iter().map(|p| p.text).collect()
}

impl Tokenizer {
    /// Builds a vocabulary from the most frequent pretokens in `corpus`,
    /// capped so the total id space is at most `cap`.
    pub fn build<'a, I>(corpus: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for p in pretokenize(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = cap.saturating_sub(FIRST_WORD_ID as usize);
        Self::from_words(ranked.into_iter().take(room).map(|(w, _)| w).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn piece_ids(&self, piece: &str, first: bool, out: &mut Vec<u32>) {
        if let Some(&id) = self.index.get(piece) {
            out.push(id);
            return;
        }
        if !first {
            out.push(BYTE_OFFSET + u32::from(b' '));
        }
        out.extend(piece.bytes().map(|b| BYTE_OFFSET + u32::from(b)));
    }

    fn content_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for (i, p) in pieces(text).iter().enumerate() {
            self.piece_ids(&p.text, i == 0, &mut ids);
        }
        ids
    }

    /// `[BOS, t₁…t_k, EOS]` with `k ≤ 75`; longer inputs keep their first 75 ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot tokenize empty text".into()));
        }
        let mut content = self.content_ids(text);
        content.truncate(MAX_CONTENT_TOKENS);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS_ID);
        ids.extend(content);
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Number of content ids `text` would need before truncation.
    pub fn untruncated_len(&self, text: &str) -> usize {
        self.content_ids(text).len()
    }

    /// Longest prefix of `text` (cut at a character boundary) whose encoding
    /// fits in the id limit without truncation.
    pub fn truncate_text<'t>(&self, text: &'t str) -> &'t str {
        let mut used = 0;
        let mut end = 0;
        for (i, p) in pieces(text).iter().enumerate() {
            let mut ids = Vec::new();
            self.piece_ids(&p.text, i == 0, &mut ids);
            if used + ids.len() <= MAX_CONTENT_TOKENS {
                used += ids.len();
                end = p.end;
                continue;
            }
            // Partially fit an out-of-vocabulary word, one character at a time.
            let budget = MAX_CONTENT_TOKENS - used;
            let lead = usize::from(i != 0);
            let word = &text[p.start..p.end];
            for (ci, ch) in word.char_indices() {
                let cut = ci + ch.len_utf8();
                let mut ids = Vec::new();
                self.piece_ids(&word[..cut].to_lowercase(), lead == 0, &mut ids);
                if ids.len() > budget {
                    break;
                }
                end = p.start + cut;
            }
            break;
        }
        &text[..end]
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                id if id < FIRST_WORD_ID => bytes.push((id - BYTE_OFFSET) as u8),
                id => {
                    if let Some(w) = self.words.get((id - FIRST_WORD_ID) as usize) {
                        if !bytes.is_empty() {
                            bytes.push(b' ');
                        }
                        bytes.extend_from_slice(w.as_bytes());
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(Error::Validation(format!(
                "token sequence length {} outside 1..={MAX_TOKENS}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::Validation(format!("unknown token id {bad}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(
            ["the suspect is described as a male in his 40s with a square jaw and thick eyebrows ."],
            VOCAB_CAP,
        )
    }

    #[test]
    fn short_sentence_keeps_all_tokens() {
        let t = tok();
        let ids = t.encode("The suspect is described as a male with eyebrows .").unwrap();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(t.decode(&ids), "the suspect is described as a male with eyebrows .");
    }

    #[test]
    fn long_description_is_cut_to_77() {
        let t = tok();
        let text = (0..200).map(|i| if i % 2 == 0 { "square" } else { "jaw" }).collect::<Vec<_>>().join(" ");
        let ids = t.encode(&text).unwrap();
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        let full = t.content_ids(&text);
        assert_eq!(&ids[1..76], &full[..75]);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(tok().encode("   \n").is_err());
    }

    #[test]
    fn unknown_words_fall_back_to_bytes() {
        let t = tok();
        let ids = t.encode("male zq jaw").unwrap();
        // male, ' ', 'z', 'q', jaw
        assert_eq!(ids.len(), 2 + 5);
        assert_eq!(t.decode(&ids), "male zq jaw");
        let ids = t.encode("zq male").unwrap();
        assert_eq!(t.decode(&ids), "zq male");
    }

    #[test]
    fn vocabulary_respects_cap() {
        let corpus: Vec<String> = (0..5000).map(|i| format!("w{i}")).collect();
        let t = Tokenizer::build(corpus.iter().map(String::as_str), VOCAB_CAP);
        assert_eq!(t.vocab_size(), VOCAB_CAP);
    }

    #[test]
    fn truncate_text_cuts_inside_an_unknown_word() {
        let t = tok();
        let mut text = "male ".repeat(73);
        text.push_str("abcdefgh");
        let cut = t.truncate_text(&text);
        assert!(t.untruncated_len(cut) <= MAX_CONTENT_TOKENS);
        assert!(cut.ends_with('a'), "{cut:?}");
    }

    proptest! {
        #[test]
        fn encode_never_exceeds_limit(s in "\\PC{1,400}") {
            prop_assume!(!s.trim().is_empty());
            let t = tok();
            let ids = t.encode(&s).unwrap();
            prop_assert!(ids.len() <= MAX_TOKENS);
            prop_assert_eq!(ids.clone(), t.encode(&s).unwrap());
            prop_assert!(t.untruncated_len(t.truncate_text(&s)) <= MAX_CONTENT_TOKENS);
        }

        #[test]
        fn decode_recovers_in_vocabulary_prefix(words in proptest::collection::vec(
            proptest::sample::select(vec!["the", "male", "jaw", "square", "thick", "40s", "."]), 1..120)) {
            let t = tok();
            let text = words.join(" ");
            let ids = t.encode(&text).unwrap();
            let n = words.len().min(MAX_CONTENT_TOKENS);
            prop_assert_eq!(pretokenize(&t.decode(&ids)), words[..n].iter().map(|w| w.to_string()).collect::<Vec<_>>());
        }
    }
}
