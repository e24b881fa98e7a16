use std::collections::HashMap;

use crate::corpus::EmotionLabelSet;
use crate::features::stable_hash;
use crate::prompting::pretokenize;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// First id available to hashed words; everything below is reserved.
pub const FIRST_HASHED: u32 = 64;

/// Word-level tokenizer over [`pretokenize`] pieces. Placeholders and known
/// emotion labels get reserved ids so they never collide; other words are
/// lower-cased and hashed into the remaining range.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: u32,
    reserved: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > FIRST_HASHED as usize * 2, "vocabulary too small");
        let mut words: Vec<String> = ["<vid>", "<aud>"].iter().map(|s| s.to_string()).collect();
        let mut labels: Vec<String> = EmotionLabelSet::iemocap()
            .labels()
            .iter()
            .chain(EmotionLabelSet::meld().labels())
            .map(|l| l.to_lowercase())
            .collect();
        labels.sort();
        labels.dedup();
        words.extend(labels);
        let reserved = words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, 4 + i as u32))
            .collect();
        Self { vocab_size: vocab_size as u32, reserved }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let w = word.to_lowercase();
        if let Some(&id) = self.reserved.get(&w) {
            return id;
        }
        FIRST_HASHED + (stable_hash(&w) % (self.vocab_size - FIRST_HASHED) as u64) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text).into_iter().map(|w| self.word_id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_placeholders_are_reserved_and_distinct() {
        let t = Tokenizer::new(8192);
        let mut ids: Vec<u32> = EmotionLabelSet::meld()
            .labels()
            .iter()
            .chain(EmotionLabelSet::iemocap().labels())
            .map(|l| t.word_id(l))
            .collect();
        ids.push(t.word_id("<VID>"));
        ids.push(t.word_id("<AUD>"));
        assert!(ids.iter().all(|&i| i < FIRST_HASHED && i > UNK));
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 11 + 2);
    }

    #[test]
    fn hashing_is_case_insensitive_and_in_range() {
        let t = Tokenizer::new(512);
        assert_eq!(t.encode("Hello hello"), vec![t.word_id("hello"); 2]);
        assert!(t.encode("a quick brown fox, jumps!").iter().all(|&i| (FIRST_HASHED..512).contains(&i)));
    }
}
