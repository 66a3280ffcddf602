//! Byte-level pair-merge subword tokenizer.
//!
//! Every byte value has its own piece, so any input encodes. Learned pieces
//! come from repeatedly merging the most frequent adjacent pair inside
//! whitespace-delimited words (a leading space stays attached to its word).
//! Encoding is greedy longest-match, which keeps it deterministic.
//!
//! Piece `i` gets text-band id `RESERVED_TEXT + i`; pieces `0..256` are the
//! single bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{sentinel_index, VocabLayout, EOS_ID, NO_COORD_ID, PAD_ID, RESERVED_TEXT};

const BYTE_PIECES: usize = 256;
/// Pairs seen fewer times than this are never merged.
pub const MIN_PAIR_COUNT: usize = 2;
pub const FORMAT_NAME: &str = "uio-subword";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    pieces: Vec<Box<[u8]>>,
    lookup: HashMap<Box<[u8]>, u32>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    /// Hex-encoded learned pieces in id order, after the 256 byte pieces.
    merged: Vec<String>,
}

fn split_words(s: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..s.len() {
        if s[i] == b' ' && s[i - 1] != b' ' {
            out.push(&s[start..i]);
            start = i;
        }
    }
    if start < s.len() {
        out.push(&s[start..]);
    }
    out
}

impl SubwordModel {
    fn from_pieces(pieces: Vec<Box<[u8]>>) -> Self {
        let lookup = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let max_len = pieces.iter().map(|p| p.len()).max().unwrap_or(1);
        Self { pieces, lookup, max_len }
    }

    /// Byte-only model with no learned merges.
    pub fn bytes_only() -> Self {
        Self::from_pieces((0..=255u8).map(|b| vec![b].into_boxed_slice()).collect())
    }

    /// Learns up to `vocab_budget` pieces (byte pieces included).
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_budget: usize) -> Result<Self> {
        if vocab_budget < BYTE_PIECES {
            return Err(Error::Tokenizer(format!(
                "budget {vocab_budget} is smaller than the {BYTE_PIECES}-piece byte alphabet"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Tokenizer("empty training corpus".into()));
        }
        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for s in corpus {
            for w in split_words(s.as_ref().as_bytes()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> =
            counts.into_iter().map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c)).collect();
        words.sort();

        let mut model = Self::bytes_only();
        while model.pieces.len() < vocab_budget {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= MIN_PAIR_COUNT)
                .map(|(p, c)| (c, model.concat(p), p))
                .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
            let Some((_, bytes, (l, r))) = best else { break };
            let new_id = match model.lookup.get(bytes.as_slice()) {
                Some(&id) => id,
                None => {
                    let id = model.pieces.len() as u32;
                    let b: Box<[u8]> = bytes.into_boxed_slice();
                    model.lookup.insert(b.clone(), id);
                    model.max_len = model.max_len.max(b.len());
                    model.pieces.push(b);
                    id
                }
            };
            for (syms, _) in &mut words {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(syms[i]);
                        i += 1;
                    }
                }
                *syms = out;
            }
        }
        Ok(model)
    }

    fn concat(&self, (l, r): (u32, u32)) -> Vec<u8> {
        let mut v = self.pieces[l as usize].to_vec();
        v.extend_from_slice(&self.pieces[r as usize]);
        v
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Highest id the model can emit, plus one.
    pub fn id_limit(&self) -> usize {
        RESERVED_TEXT + self.pieces.len()
    }

    /// Checks that all pieces fit in the layout's text band.
    pub fn check_fits(&self, layout: &VocabLayout) -> Result<()> {
        if self.id_limit() > layout.text_size() {
            return Err(Error::Tokenizer(format!(
                "{} pieces + {RESERVED_TEXT} specials exceed text band of {}",
                self.pieces.len(),
                layout.text_size()
            )));
        }
        Ok(())
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.lookup.get(piece.as_bytes()).map(|&i| RESERVED_TEXT + i as usize)
    }

    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        id.checked_sub(RESERVED_TEXT).and_then(|i| self.pieces.get(i)).map(|p| &p[..])
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        self.encode_bytes(s.as_bytes())
    }

    pub fn encode_bytes(&self, s: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            let longest = self.max_len.min(s.len() - i);
            let (len, id) = (1..=longest)
                .rev()
                .find_map(|len| self.lookup.get(&s[i..i + len]).map(|&id| (len, id)))
                .expect("byte pieces cover every input");
            out.push(RESERVED_TEXT + id as usize);
            i += len;
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                PAD_ID => out.extend_from_slice(b"<pad>"),
                EOS_ID => out.extend_from_slice(b"</s>"),
                NO_COORD_ID => out.extend_from_slice(b"<no_coord>"),
                _ => {
                    if let Some(k) = sentinel_index(id) {
                        out.extend_from_slice(format!("<extra_{k}>").as_bytes());
                    } else if let Some(p) = self.piece(id) {
                        out.extend_from_slice(p);
                    } else {
                        return Err(Error::Tokenizer(format!("id {id} is not a text piece")));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        let merged = self.pieces[BYTE_PIECES..].iter().map(|p| hex_encode(p)).collect();
        let f = ModelFile { format: FORMAT_NAME.into(), version: FORMAT_VERSION, merged };
        serde_json::to_string_pretty(&f).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.format != FORMAT_NAME || f.version != FORMAT_VERSION {
            return Err(Error::Tokenizer(format!("unsupported model file {} v{}", f.format, f.version)));
        }
        let mut pieces: Vec<Box<[u8]>> = (0..=255u8).map(|b| vec![b].into_boxed_slice()).collect();
        for h in &f.merged {
            let p = hex_decode(h).ok_or_else(|| Error::Tokenizer(format!("bad hex piece {h:?}")))?;
            if p.len() < 2 {
                return Err(Error::Tokenizer(format!("merged piece {h:?} shorter than two bytes")));
            }
            pieces.push(p.into_boxed_slice());
        }
        Ok(Self::from_pieces(pieces))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn hex_encode(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::sentinel_id;
    use proptest::prelude::*;

    #[test]
    fn tiny_corpus_merges_most_frequent_pair() {
        let m = SubwordModel::train(&["aaab", "aab"], 260).unwrap();
        assert_eq!(m.num_pieces(), 257);
        let aa = m.piece_id("aa").unwrap();
        let (a, b) = (m.piece_id("a").unwrap(), m.piece_id("b").unwrap());
        assert_eq!(m.encode("aaab"), vec![aa, a, b]);
    }

    #[test]
    fn empty_corpus_string_gives_byte_model() {
        let m = SubwordModel::train(&[""], 1000).unwrap();
        assert_eq!(m, SubwordModel::bytes_only());
    }

    #[test]
    fn budget_errors() {
        assert!(SubwordModel::train(&["abc"], 255).is_err());
        assert!(SubwordModel::train::<&str>(&[], 300).is_err());
        let m = SubwordModel::train(&["ab ab ab ab cd cd cd"], 258).unwrap();
        assert_eq!(m.num_pieces(), 258);
    }

    #[test]
    fn empty_and_special_rendering() {
        let m = SubwordModel::bytes_only();
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert_eq!(m.decode(&[sentinel_id(0)]).unwrap(), "<extra_0>");
        assert_eq!(m.decode(&[NO_COORD_ID, EOS_ID]).unwrap(), "<no_coord></s>");
        assert!(m.decode(&[RESERVED_TEXT + 256]).is_err());
    }

    #[test]
    fn hello_world_round_trip() {
        let m = SubwordModel::train(&["hello world", "hello there", "world peace"], 300).unwrap();
        let ids = m.encode("hello, world");
        assert_eq!(m.decode(&ids).unwrap(), "hello, world");
        assert!(ids.iter().all(|&i| (RESERVED_TEXT..m.id_limit()).contains(&i)));
    }

    #[test]
    fn json_format_is_stable() {
        let m = SubwordModel::train(&["aaab", "aab"], 260).unwrap();
        assert_eq!(m.to_json(), "{\n  \"format\": \"uio-subword\",\n  \"version\": 1,\n  \"merged\": [\n    \"6161\"\n  ]\n}");
        assert_eq!(SubwordModel::from_json(&m.to_json()).unwrap(), m);
        assert!(SubwordModel::from_json(r#"{"format":"uio-subword","version":2,"merged":[]}"#).is_err());
    }

    #[test]
    fn fits_layout() {
        let m = SubwordModel::bytes_only();
        assert!(m.check_fits(&VocabLayout::new(359, 0, 0).unwrap()).is_ok());
        assert!(m.check_fits(&VocabLayout::new(358, 0, 0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_round_trip(s in proptest::collection::vec(any::<u8>(), 0..64)) {
            let m = SubwordModel::train(&["the cat sat on the mat", "a cat and a hat"], 320).unwrap();
            let ids = m.encode_bytes(&s);
            prop_assert_eq!(m.decode_bytes(&ids).unwrap(), s);
        }
    }
}
