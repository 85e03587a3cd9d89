//! Byte-level and fixed-vocabulary tokenizers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    /// One token per byte; vocabulary 256.
    Bytes,
    /// A fixed mapping from strings to ids, encoded by longest match.
    Vocab(VocabMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabMap {
    to_id: BTreeMap<Vec<u8>, usize>,
    from_id: BTreeMap<usize, Vec<u8>>,
    longest: usize,
}

impl VocabMap {
    pub fn new(entries: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        let mut to_id = BTreeMap::new();
        let mut from_id = BTreeMap::new();
        for (piece, id) in entries {
            if piece.is_empty() {
                return Err(Error::Tokenizer("empty vocabulary entry".into()));
            }
            if let Some(prev) = from_id.insert(id, piece.clone().into_bytes()) {
                return Err(Error::Tokenizer(format!(
                    "id {id} assigned to both {:?} and {piece:?}",
                    String::from_utf8_lossy(&prev)
                )));
            }
            to_id.insert(piece.into_bytes(), id);
        }
        let longest = to_id.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self { to_id, from_id, longest })
    }

    /// Reads a JSON object mapping token strings to ids.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        Self::new(map)
    }
}

impl Tokenizer {
    pub fn from_vocab_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::Vocab(VocabMap::from_json(&fs::read_to_string(path)?)?))
    }

    /// Smallest model vocabulary that covers every id.
    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Bytes => 256,
            Self::Vocab(v) => v.from_id.keys().next_back().map_or(0, |m| m + 1),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        match self {
            Self::Bytes => Ok(text.iter().map(|&b| b as usize).collect()),
            Self::Vocab(v) => {
                let mut out = Vec::new();
                let mut i = 0;
                while i < text.len() {
                    let max = v.longest.min(text.len() - i);
                    let hit = (1..=max).rev().find_map(|len| v.to_id.get(&text[i..i + len]).map(|&id| (id, len)));
                    let (id, len) = hit.ok_or_else(|| {
                        Error::Tokenizer(format!("no vocabulary entry matches at byte {i}"))
                    })?;
                    out.push(id);
                    i += len;
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match self {
                Self::Bytes => {
                    let b = u8::try_from(id).map_err(|_| Error::Tokenizer(format!("unknown token id {id}")))?;
                    out.push(b);
                }
                Self::Vocab(v) => {
                    let piece = v
                        .from_id
                        .get(&id)
                        .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?;
                    out.extend_from_slice(piece);
                }
            }
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8.
    pub fn decode_lossy(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};

    use super::*;

    #[test]
    fn byte_level_examples() {
        let t = Tokenizer::Bytes;
        assert_eq!(t.encode(b"").unwrap(), Vec::<usize>::new());
        assert_eq!(t.decode(&[]).unwrap(), b"");
        assert_eq!(t.encode(b"ab").unwrap(), vec![97, 98]);
        assert!(matches!(t.decode(&[256]), Err(Error::Tokenizer(_))));
    }

    #[test]
    fn megabyte_round_trip() {
        let mut data = vec![0u8; 1 << 20];
        rand_chacha::ChaCha8Rng::seed_from_u64(1).fill_bytes(&mut data);
        let t = Tokenizer::Bytes;
        assert_eq!(t.decode(&t.encode(&data).unwrap()).unwrap(), data);
    }

    #[test]
    fn vocab_longest_match() {
        let t = Tokenizer::Vocab(VocabMap::from_json(r#"{"a": 0, "b": 1, "ab": 2, " ": 4}"#).unwrap());
        assert_eq!(t.vocab_size(), 5);
        assert_eq!(t.encode(b"ab a b").unwrap(), vec![2, 4, 0, 4, 1]);
        assert_eq!(t.decode(&[2, 4, 1]).unwrap(), b"ab b");
        assert!(matches!(t.decode(&[3]), Err(Error::Tokenizer(m)) if m.contains('3')));
        assert!(t.encode(b"c").is_err());
        assert!(VocabMap::from_json(r#"{"a": 0, "b": 0}"#).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(data in proptest::collection::vec(any::<u8>(), 0..512)) {
            let t = Tokenizer::Bytes;
            prop_assert_eq!(t.decode(&t.encode(&data).unwrap()).unwrap(), data);
        }
    }
}
