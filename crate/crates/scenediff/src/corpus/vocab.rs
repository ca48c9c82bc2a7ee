//! Fixed template vocabulary for captions: token <-> id, one entry per line
//! in the external file format.

use std::path::Path;

use crate::error::{Error, Result};

pub const NUMBER_WORDS: [&str; 33] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
    "twentyone",
    "twentytwo",
    "twentythree",
    "twentyfour",
    "twentyfive",
    "twentysix",
    "twentyseven",
    "twentyeight",
    "twentynine",
    "thirty",
    "thirtyone",
    "thirtytwo",
];

const STRUCTURE_WORDS: &[&str] = &[
    "lane",
    "lanes",
    "straight",
    "road",
    "curved",
    "with",
    "and",
    "vehicle",
    "vehicles",
    "pedestrians",
    "in",
    "t",
    "intersection",
    "way",
    "metro",
    "suburb",
];

// Filler vocabulary: never emitted by the grammar but kept in-vocabulary so
// the prompt encoder has a realistically sized embedding table.
const FILLER_WORDS: &[&str] = &[
    "the", "a", "an", "is", "are", "on", "at", "near", "far", "busy", "quiet", "empty", "wide",
    "narrow", "long", "short", "traffic", "scene", "city", "rural", "urban", "highway", "street",
    "avenue", "crossing", "junction", "merge", "exit", "ramp", "bridge", "tunnel", "hill", "flat",
    "wet", "dry", "day", "night", "dawn", "dusk", "clear", "cloudy", "parked", "moving", "slow",
    "fast", "heavy", "light", "left", "right", "ahead", "behind", "north", "south", "east",
    "west", "turning", "stopped", "waiting", "passing", "arriving", "leaving", "signal", "sign",
    "stop", "yield", "zone", "area", "block", "corner", "curve", "bend", "split", "fork",
    "roundabout", "driveway", "alley", "path", "walkway",
];

/// Token <-> id table. Ids are stable: numbers, then structure, then filler.
pub struct Vocab {
    words: Vec<String>,
    index: std::collections::HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Vocab {
        let mut words: Vec<String> = Vec::new();
        words.extend(NUMBER_WORDS.iter().map(|s| s.to_string()));
        words.extend(STRUCTURE_WORDS.iter().map(|s| s.to_string()));
        words.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Input(format!("token id {id} out of vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    /// Number word for n (supported 0..=32).
    pub fn number_word(n: usize) -> Result<&'static str> {
        NUMBER_WORDS
            .get(n)
            .copied()
            .ok_or_else(|| Error::Input(format!("no number word for {n}")))
    }

    pub fn parse_number(word: &str) -> Option<usize> {
        NUMBER_WORDS.iter().position(|&w| w == word)
    }

    /// Plain-text export: one `word<TAB>id` entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (i, w) in self.words.iter().enumerate() {
            s.push_str(&format!("{w}\t{i}\n"));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut words = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let word = parts
                .next()
                .ok_or_else(|| Error::Input(format!("vocab line {lineno} malformed")))?;
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input(format!("vocab line {lineno} malformed")))?;
            if id != words.len() {
                return Err(Error::Input(format!(
                    "vocab ids must be dense and ordered (line {lineno})"
                )));
            }
            words.push(word.to_string());
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocab { words, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_size_near_128() {
        let v = Vocab::new();
        assert!(v.len() >= 120 && v.len() <= 136, "vocab size {}", v.len());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::new();
        let ids = v.encode("four way intersection with five lanes").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "four way intersection with five lanes");
    }

    #[test]
    fn unknown_word_is_input_error() {
        let v = Vocab::new();
        assert!(v.encode("banana").is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.len(), v2.len());
        assert_eq!(v2.id("intersection").unwrap(), v.id("intersection").unwrap());
    }
}
