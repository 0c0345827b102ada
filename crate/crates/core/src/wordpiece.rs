//! WordPiece tokenization for preprocessed (lowercase, alphabetic) log text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Words longer than this map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub pad_id: u32,
    pub unk_id: u32,
    pub cls_id: u32,
    pub sep_id: u32,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {t:?}")));
            }
        }
        let special = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocab lacks special token {s}")))
        };
        Ok(Self {
            pad_id: special(PAD)?,
            unk_id: special(UNK)?,
            cls_id: special(CLS)?,
            sep_id: special(SEP)?,
            tokens,
            ids,
        })
    }

    /// One token per line; the line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id || id == self.cls_id || id == self.sep_id
    }

    /// Greedy longest-match-first split of one word. `None` when some
    /// remainder has no matching piece.
    fn split_word(&self, word: &str, out: &mut Vec<u32>) -> bool {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return false;
        }
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::with_capacity(word.len() + 2);
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => out.push(id),
                None => {
                    out.truncate(mark);
                    return false;
                }
            }
            start = end;
        }
        true
    }

    /// `[CLS] pieces… [SEP]`, truncated to `max_seq_len` with `[SEP]` kept last.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> TokenSequence {
        assert!(max_seq_len >= 2, "max_seq_len must leave room for [CLS] and [SEP]");
        let mut ids = vec![self.cls_id];
        for word in text.split_whitespace() {
            if ids.len() >= max_seq_len - 1 {
                break;
            }
            if !self.split_word(word, &mut ids) {
                ids.push(self.unk_id);
            }
        }
        ids.truncate(max_seq_len - 1);
        ids.push(self.sep_id);
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }
}

/// Token ids with an attention mask (`false` = padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `[PAD]` positions up to `len`.
    pub fn pad_to(&mut self, len: usize, pad_id: u32) {
        while self.ids.len() < len {
            self.ids.push(pad_id);
            self.mask.push(false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        let toks = [PAD, UNK, CLS, SEP, "log", "##ging", "fail", "##ed", "##e", "a", "##b"];
        Vocab::new(toks.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn pieces(v: &Vocab, seq: &TokenSequence) -> Vec<String> {
        seq.ids.iter().map(|i| v.token(*i).unwrap().to_string()).collect()
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab();
        let seq = v.tokenize("logging failed", 128);
        assert_eq!(pieces(&v, &seq), ["[CLS]", "log", "##ging", "fail", "##ed", "[SEP]"]);
        assert!(seq.mask.iter().all(|m| *m));
    }

    #[test]
    fn unknown_word_is_unk() {
        let v = vocab();
        assert_eq!(pieces(&v, &v.tokenize("zebra", 128)), ["[CLS]", "[UNK]", "[SEP]"]);
        // partial match with an unmatched tail is a whole-word UNK
        assert_eq!(pieces(&v, &v.tokenize("logx", 128)), ["[CLS]", "[UNK]", "[SEP]"]);
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let v = vocab();
        let text = vec!["log"; 500].join(" ");
        let seq = v.tokenize(&text, 128);
        assert_eq!(seq.len(), 128);
        assert_eq!(*seq.ids.last().unwrap(), v.sep_id);
        assert_eq!(seq.ids[0], v.cls_id);
        // a multi-piece word straddling the limit is cut mid-word
        let seq = v.tokenize("a logging", 4);
        assert_eq!(pieces(&v, &seq), ["[CLS]", "a", "log", "[SEP]"]);
        let seq = v.tokenize("", 2);
        assert_eq!(pieces(&v, &seq), ["[CLS]", "[SEP]"]);
    }

    #[test]
    fn padding() {
        let v = vocab();
        let mut seq = v.tokenize("a", 16);
        seq.pad_to(6, v.pad_id);
        assert_eq!(seq.mask, [true, true, true, false, false, false]);
    }

    #[test]
    fn vocab_requires_specials() {
        assert!(Vocab::new(vec!["a".into(), "b".into()]).is_err());
        let dup = [PAD, UNK, CLS, SEP, "a", "a"];
        assert!(Vocab::new(dup.iter().map(|s| s.to_string()).collect()).is_err());
    }
}
