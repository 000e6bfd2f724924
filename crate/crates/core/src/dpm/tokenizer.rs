//! Lower-cased byte-level BPE over a pinned 49,408-entry vocabulary.
//!
//! Vocabulary layout: 256 byte symbols, the same 256 with an end-of-word
//! marker, one entry per merge rule, then the start/end markers.

use std::collections::HashMap;
use std::io::Read;
use std::sync::OnceLock;

use flate2::read::GzDecoder;
use regex::Regex;
use sha2::{Digest, Sha256};

const MERGES_GZ: &[u8] = include_bytes!("../../data/bpe_merges.txt.gz");

/// SHA-256 of the decompressed merges file.
pub const MERGES_SHA256: &str = "9fd691f7c8039210e0fced15865466c65820d09b63988b0174bfe25de299051a";

pub const VOCAB_SIZE: usize = 49_408;
pub const SOS: u32 = 49_406;
pub const EOS: u32 = 49_407;
pub const PAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_text: String,
}

impl TokenSequence {
    /// Positions holding real tokens (everything up to and including EOS).
    pub fn content_len(&self) -> usize {
        self.ids
            .iter()
            .position(|&i| i == EOS)
            .map_or(self.ids.len(), |p| p + 1)
    }
}

pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
}

/// Byte-to-symbol table, plus the symbols in vocabulary order (printable
/// bytes first, then the remapped rest).
fn bytes_to_unicode() -> ([char; 256], Vec<char>) {
    let mut bs: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(u32::from('¡')..=u32::from('¬'))
        .chain(u32::from('®')..=u32::from('ÿ'))
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = ['\0'; 256];
    let mut order = Vec::with_capacity(256);
    for (b, c) in bs.into_iter().zip(cs) {
        let ch = char::from_u32(c).expect("valid scalar");
        table[b as usize] = ch;
        order.push(ch);
    }
    (table, order)
}

fn merges_text() -> String {
    let mut text = String::new();
    GzDecoder::new(MERGES_GZ)
        .read_to_string(&mut text)
        .expect("bundled merges decompress");
    text
}

impl BpeTokenizer {
    /// The shared instance built from the bundled merges.
    pub fn shared() -> &'static BpeTokenizer {
        static TOK: OnceLock<BpeTokenizer> = OnceLock::new();
        TOK.get_or_init(|| {
            let text = merges_text();
            let digest = format!("{:x}", Sha256::digest(text.as_bytes()));
            assert_eq!(digest, MERGES_SHA256, "bundled merges file checksum");
            BpeTokenizer::from_merges(&text)
        })
    }

    pub fn from_merges(text: &str) -> Self {
        let (byte_encoder, symbols) = bytes_to_unicode();
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let (a, b) = l.split_once(' ')?;
                Some((a.to_string(), b.to_string()))
            })
            .collect();
        let mut vocab: Vec<String> = symbols.iter().map(|c| c.to_string()).collect();
        vocab.extend(symbols.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<start_of_text>".into());
        vocab.push("<end_of_text>".into());
        let encoder = vocab
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i as u32))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<start_of_text>|<end_of_text>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("pattern compiles");
        Self {
            encoder,
            ranks,
            byte_encoder,
            pattern,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Content ids without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                // Every single-byte symbol is in the vocabulary, so lookups
                // cannot miss.
                ids.push(self.encoder[&piece]);
            }
        }
        ids
    }

    /// Fixed-length sequence: start marker, content, end marker, zero padding.
    /// Overlong content is cut so the end marker stays the last real id.
    pub fn tokenize(&self, text: &str, length: usize) -> TokenSequence {
        assert!(length >= 2, "sequence length must fit the start and end markers");
        let mut ids = Vec::with_capacity(length);
        ids.push(SOS);
        ids.extend(self.encode(text).into_iter().take(length - 2));
        ids.push(EOS);
        ids.resize(length, PAD);
        TokenSequence {
            ids,
            source_text: text.to_string(),
        }
    }
}

/// Tokenizes with the bundled vocabulary.
pub fn tokenize(text: &str, length: usize) -> TokenSequence {
    BpeTokenizer::shared().tokenize(text, length)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_size() {
        assert_eq!(BpeTokenizer::shared().vocab_size(), VOCAB_SIZE);
    }

    #[test]
    fn golden_ids() {
        // Frozen from an independent reference encoder run over the same merges.
        let t = BpeTokenizer::shared();
        assert_eq!(t.encode("epithelial"), vec![7219, 15277, 566]);
        assert_eq!(t.encode("lymphocyte"), vec![20087, 816, 1470, 756]);
        assert_eq!(t.encode("CoNSeP"), vec![616, 10434]);
        assert_eq!(t.encode("background-cell"), vec![5994, 268, 5533]);
        assert_eq!(t.encode("a photo of a cat"), vec![320, 1125, 539, 320, 2368]);
        assert_eq!(t.encode("eosinophil"), vec![16054, 1303, 676, 17927]);
        assert_eq!(
            tokenize("epithelial", 8).ids,
            vec![SOS, 7219, 15277, 566, EOS, PAD, PAD, PAD]
        );
    }

    #[test]
    fn deterministic() {
        assert_eq!(tokenize("Lizard", 77), tokenize("Lizard", 77));
    }

    #[test]
    fn truncation_keeps_end_marker() {
        let s = tokenize("a photo of a cat", 4);
        assert_eq!(s.ids, vec![SOS, 320, 1125, EOS]);
        assert_eq!(s.content_len(), 4);
    }

    #[test]
    fn ids_within_vocabulary() {
        let s = tokenize("naïve über-cells 123 ✓", 32);
        assert!(s.ids.iter().all(|&i| (i as usize) < VOCAB_SIZE));
        assert_eq!(s.ids[0], SOS);
        assert!(s.ids.contains(&EOS));
    }
}
