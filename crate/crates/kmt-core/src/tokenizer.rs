//! Closed-vocabulary word-level tokenizer with configurable atomization of
//! months, days, and years.
//!
//! The synthetic universe is finite, so a word-level vocabulary covers it
//! exactly; the atomization policy isolates the tokenization-granularity
//! variable (single-token months/years vs character/digit pieces) without
//! changing anything else about the pipeline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::MONTH_NAMES;
use crate::error::{Error, Result};

/// End-of-sequence / padding token id.
pub const EOS: u32 = 0;
/// Beginning-of-sequence token id.
pub const BOS: u32 = 1;
/// Control token appended to a question to request hint-then-answer decoding.
pub const HINT_MARKER: u32 = 2;
/// Control token appended to a question to request a direct answer.
pub const NOHINT_MARKER: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<eos>", "<bos>", "<hint>", "<nohint>"];

/// Prefix marking a continuation piece that joins to the previous token
/// without a space.
const CONT: &str = "##";

/// Punctuation peeled off token tails as standalone atoms.
const PUNCT: [char; 6] = ['.', ',', '?', ';', '!', ':'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumberMode {
    /// Whole word or number is one token.
    Single,
    /// Split into single-character continuation pieces.
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YearMode {
    Single,
    /// Four-digit years become four single-digit tokens.
    DigitSplit,
}

/// Which calendar atoms are split into pieces. The default mirrors a
/// tokenizer whose months, days, and years are single tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomizationPolicy {
    pub months: NumberMode,
    pub days: NumberMode,
    pub years: YearMode,
}

impl Default for AtomizationPolicy {
    fn default() -> Self {
        AtomizationPolicy {
            months: NumberMode::Single,
            days: NumberMode::Single,
            years: YearMode::Single,
        }
    }
}

impl AtomizationPolicy {
    /// Everything split: month names into characters, days and years into
    /// digits (the coarse analogue of byte-pair tokenizers).
    pub fn split_all() -> Self {
        AtomizationPolicy {
            months: NumberMode::Split,
            days: NumberMode::Split,
            years: YearMode::DigitSplit,
        }
    }
}

fn is_month(word: &str) -> bool {
    MONTH_NAMES.contains(&word)
}

fn is_day_number(word: &str) -> bool {
    (1..=2).contains(&word.len()) && word.bytes().all(|b| b.is_ascii_digit())
}

fn is_year_number(word: &str) -> bool {
    word.len() == 4 && word.bytes().all(|b| b.is_ascii_digit())
}

/// Split one whitespace-free word into policy atoms, appending to `out`.
fn push_word_atoms(word: &str, policy: &AtomizationPolicy, out: &mut Vec<String>) {
    let split_chars = |word: &str, out: &mut Vec<String>| {
        for (i, ch) in word.chars().enumerate() {
            if i == 0 {
                out.push(ch.to_string());
            } else {
                out.push(format!("{CONT}{ch}"));
            }
        }
    };
    let split = (is_month(word) && policy.months == NumberMode::Split)
        || (is_day_number(word) && policy.days == NumberMode::Split)
        || (is_year_number(word) && policy.years == YearMode::DigitSplit);
    if split {
        split_chars(word, out);
    } else {
        out.push(word.to_string());
    }
}

/// Deterministically split text into vocabulary atoms: whitespace words,
/// trailing punctuation peeled one character at a time, possessive "'s"
/// suffixes as their own atom, then policy splitting of calendar words.
pub fn atomize(text: &str, policy: &AtomizationPolicy) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut tail = Vec::new();
        let mut word = chunk;
        while let Some(last) = word.chars().last() {
            if PUNCT.contains(&last) {
                tail.push(last.to_string());
                word = &word[..word.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        if let Some(base) = word.strip_suffix("'s") {
            if !base.is_empty() {
                push_word_atoms(base, policy, &mut out);
            }
            out.push("'s".to_string());
        } else if !word.is_empty() {
            push_word_atoms(word, policy, &mut out);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    version: u32,
    policy: AtomizationPolicy,
    /// id -> token; ids 0..4 are the reserved tokens.
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary covering two text streams (biography lines first,
    /// then task lines). Ids are assigned by first occurrence, so extending
    /// the second stream never renumbers tokens from the first.
    pub fn build<'a>(
        corpus_lines: impl IntoIterator<Item = &'a str>,
        task_lines: impl IntoIterator<Item = &'a str>,
        policy: AtomizationPolicy,
    ) -> Vocab {
        let mut vocab = Vocab {
            version: 1,
            policy,
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
        };
        for (i, t) in vocab.tokens.iter().enumerate() {
            vocab.ids.insert(t.clone(), i as u32);
        }
        let add_line = |line: &str, vocab: &mut Vocab| {
            for atom in atomize(line, &vocab.policy) {
                if !vocab.ids.contains_key(&atom) {
                    let id = vocab.tokens.len() as u32;
                    vocab.ids.insert(atom.clone(), id);
                    vocab.tokens.push(atom);
                }
            }
        };
        for line in corpus_lines {
            add_line(line, &mut vocab);
        }
        for line in task_lines {
            add_line(line, &mut vocab);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn policy(&self) -> &AtomizationPolicy {
        &self.policy
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Encode text into token ids; every atom must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        atomize(text, &self.policy)
            .into_iter()
            .map(|atom| {
                self.ids.get(&atom).copied().ok_or_else(|| Error::UnknownToken {
                    atom: atom.clone(),
                    context: truncate_context(text),
                })
            })
            .collect()
    }

    /// Inverse of encode for canonically spaced text. Reserved tokens render
    /// as their literal names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::UnknownToken {
                    atom: format!("<id {id}>"),
                    context: "decode".into(),
                })?;
            if let Some(rest) = token.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                let no_space = matches!(
                    token.as_str(),
                    "." | "," | "?" | ";" | "!" | ":" | "'s"
                );
                if !out.is_empty() && !no_space {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }

    /// Serialize to the vocab.json wire format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Vocab> {
        let mut vocab: Vocab =
            serde_json::from_str(s).map_err(|e| Error::DataFile(format!("vocab: {e}")))?;
        if vocab.tokens.len() < RESERVED_TOKENS.len()
            || RESERVED_TOKENS
                .iter()
                .zip(&vocab.tokens)
                .any(|(expect, got)| expect != got)
        {
            return Err(Error::DataFile("vocab missing reserved tokens".into()));
        }
        vocab.ids = vocab
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::DataFile("vocab has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    /// Stable content hash over policy and token list; recorded in manifests
    /// and checkpoints for compatibility checking.
    pub fn content_hash(&self) -> String {
        let mut canon = serde_json::to_string(&self.policy).expect("policy serializes");
        for t in &self.tokens {
            canon.push('\n');
            canon.push_str(t);
        }
        crate::sha256_hex(canon.as_bytes())
    }
}

fn truncate_context(text: &str) -> String {
    const MAX: usize = 60;
    if text.len() <= MAX {
        text.to_string()
    } else {
        format!("{}...", &text[..MAX])
    }
}
