//! Closed-vocabulary word-level tokenizer.
//!
//! Protocol markers and control tokens are atomic; everything else is
//! lowercased, split on whitespace, with punctuation as standalone tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const IMG: u32 = 4;
pub const P_OPEN: u32 = 5;
pub const P_CLOSE: u32 = 6;
pub const SEG: u32 = 7;

/// Surface forms of the special tokens, indexed by id.
pub const SPECIALS: [&str; 8] = ["<bos>", "<eos>", "<pad>", "<unk>", "<img>", "<p>", "</p>", "[SEG]"];

const PUNCT: &[char] = &['.', ',', '?', '!', ':', ';', '(', ')', '"'];

/// Template lexicon. Order is part of the vocabulary contract: ids are
/// assigned specials first, then these words, then extra class names.
const LEXICON: &[&str] = &[
    // chat roles and punctuation
    "user", "assistant", ".", ",", "?", "!", ":", ";", "(", ")", "\"",
    // function words
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that",
    "these", "those", "there", "here", "in", "on", "of", "at", "to", "from", "with", "without",
    "and", "or", "but", "not", "no", "yes", "any", "some", "all", "each", "both", "one", "two",
    "three", "four", "five", "by", "for", "as", "into", "near", "than", "which", "what", "where",
    "how", "why", "who", "can", "could", "may", "might", "should", "would", "will", "do", "does",
    "did", "has", "have", "had", "i", "you", "we", "they", "me", "my", "your", "our", "their",
    "sure", "please", "also", "only", "other", "more", "most", "very", "well",
    // instructions and answers
    "segment", "identify", "show", "shows", "showing", "shown", "find", "found", "locate",
    "highlight", "indicate", "indicated", "indicates", "suggest", "suggests", "suggesting",
    "describe", "explain", "see", "seen", "visible", "appear", "appears", "present", "absent",
    "detected", "observed", "possible", "likely", "conditions", "condition", "examination",
    "exam", "scan", "image", "images", "medical", "region", "regions", "area", "areas",
    "finding", "findings", "abnormality", "abnormalities", "abnormal", "normal", "lesion",
    "lesions", "mass", "masses", "structure", "structures", "diagnosis", "diagnose",
    "diagnostic", "evidence", "clear", "healthy",
    // position and size
    "left", "right", "upper", "lower", "middle", "center", "central", "side", "bilateral",
    "small", "large", "round", "oval", "irregular", "bright", "dark", "dense", "faint",
    "largest", "smallest", "size", "shape", "first", "second", "next",
    // modalities
    "ct", "mri", "x-ray", "ultrasound", "chest", "abdominal", "abdomen", "lung", "lungs",
    "histological", "optical", "dermoscopy", "pathology", "slide",
    // findings
    "nodule", "nodules", "opacity", "opacities", "cyst", "cysts", "tumor", "tumors",
    "ground", "glass", "consolidation", "effusion", "infection", "infected", "covid-19",
    "pneumonia", "polyp", "skin", "cancer", "benign", "malignant",
    // organs
    "liver", "kidney", "kidneys", "spleen", "pancreas", "aorta", "inferior", "vena", "cava",
    "adrenal", "gland", "glands", "gallbladder", "esophagus", "stomach", "duodenum", "organ",
    "organs",
];

/// Splits raw text into token surfaces: special surfaces are atomic, the rest
/// is lowercased and split on whitespace and punctuation.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let next = SPECIALS
            .iter()
            .filter_map(|s| rest.find(s).map(|at| (at, *s)))
            .min_by_key(|&(at, s)| (at, std::cmp::Reverse(s.len())));
        let (plain, special) = match next {
            Some((at, s)) => (&rest[..at], Some(s)),
            None => (rest, None),
        };
        split_words(plain, &mut out);
        match special {
            Some(s) => {
                out.push(s.to_string());
                rest = &rest[plain.len() + s.len()..];
            }
            None => rest = "",
        }
    }
    out
}

fn split_words(text: &str, out: &mut Vec<String>) {
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let mut cur = String::new();
        for ch in lower.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials, the template lexicon, then `extra` words in first-seen order.
    pub fn build<S: AsRef<str>>(extra: &[S]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i as u32);
        }
        let words = LEXICON
            .iter()
            .map(|w| w.to_string())
            .chain(extra.iter().flat_map(|e| pre_tokenize(e.as_ref())));
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange {
                id: id as usize,
                size: self.size(),
            })
    }

    /// No BOS/EOS is added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, attaching punctuation to the previous
    /// word and capitalizing sentence starts. Encoding the result gives back
    /// the same ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut sentence_start = true;
        for &id in ids {
            let tok = self.token(id)?;
            let attach = matches!(tok, "." | "," | "?" | "!" | ":" | ";" | ")");
            if !out.is_empty() && !attach && !out.ends_with('(') {
                out.push(' ');
            }
            if sentence_start && tok.starts_with(|c: char| c.is_alphabetic()) {
                let mut chars = tok.chars();
                let first = chars.next().expect("non-empty token");
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            } else {
                out.push_str(tok);
            }
            sentence_start = matches!(tok, "." | "?" | "!");
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(json)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in &map {
            let slot = tokens
                .get_mut(*id as usize)
                .ok_or_else(|| Error::Checkpoint(format!("vocab ids are not dense: `{tok}` has id {id}")))?;
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocab id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Checkpoint("vocab ids are not dense".into())))
            .collect::<Result<_>>()?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Checkpoint(format!("special token `{s}` must have id {i}")));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Serialized form used inside checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct VocabList(pub Vec<String>);

impl From<&Vocab> for VocabList {
    fn from(v: &Vocab) -> Self {
        VocabList(v.tokens.clone())
    }
}

impl TryFrom<VocabList> for Vocab {
    type Error = Error;

    fn try_from(list: VocabList) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if list.0.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Checkpoint(format!("special token `{s}` must have id {i}")));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in list.0.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocab token `{t}`")));
            }
        }
        Ok(Self {
            tokens: list.0,
            index,
        })
    }
}
