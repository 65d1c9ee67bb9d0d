//! Token normalization, vocabularies and label sets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use super::conll::RawCorpus;
use super::scheme::{bio_to_bioes, Role, Tag};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Chunk labels, trained in BIOES and scored by entity F1.
    #[default]
    Ner,
    /// Flat per-token labels scored by accuracy.
    Pos,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "pos" => Ok(Task::Pos),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Replace every Unicode decimal digit with `'0'`; lowercase if asked.
pub fn normalize_token(tok: &str, lowercase: bool) -> String {
    let digits_zeroed: String = tok
        .chars()
        .map(|c| {
            if get_general_category(c) == GeneralCategory::DecimalNumber {
                '0'
            } else {
                c
            }
        })
        .collect();
    if lowercase {
        digits_zeroed.to_lowercase()
    } else {
        digits_zeroed
    }
}

/// String-to-index map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from(vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()])
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(items: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            index.entry(it.clone()).or_insert(i);
        }
        Vocabulary { items, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.items
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of `item`, inserting it at the end if new.
    pub fn add(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        let i = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), i);
        i
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    /// Index of `item`, or `UNK`.
    pub fn lookup(&self, item: &str) -> usize {
        self.get(item).unwrap_or(UNK)
    }

    pub fn item(&self, i: usize) -> Option<&str> {
        self.items.get(i).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Closed tag inventory. Indices are dense and start at 0; unlike
/// [`Vocabulary`] there are no reserved entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSet {
    fn from(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelSet { labels, index }
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

impl LabelSet {
    /// First-occurrence order. For NER every seen entity type is completed
    /// with all four B/I/E/S roles so decoding can emit any of them.
    pub fn from_corpus(corpus: &RawCorpus, task: Task) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut kinds: Vec<String> = Vec::new();
        for s in &corpus.sentences {
            for l in &s.labels {
                if seen.insert(l.clone()) {
                    labels.push(l.clone());
                    if task == Task::Ner {
                        if let Some(k) = Tag::parse(l)?.kind() {
                            if !kinds.iter().any(|x| x == k) {
                                kinds.push(k.to_string());
                            }
                        }
                    }
                }
            }
        }
        if task == Task::Ner {
            if !seen.contains("O") {
                labels.push("O".to_string());
                seen.insert("O".to_string());
            }
            for k in &kinds {
                for role in [Role::Begin, Role::Inside, Role::End, Role::Single] {
                    let t = Tag::chunk(role, k).to_string();
                    if seen.insert(t.clone()) {
                        labels.push(t);
                    }
                }
            }
        }
        Ok(LabelSet::from(labels))
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Whether every label parses as a BIOES chunk tag.
    pub fn is_chunk_scheme(&self) -> bool {
        self.labels.iter().all(|l| Tag::parse(l).is_ok())
    }
}

/// Word, character and label inventories built from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub chars: Vocabulary,
    pub labels: LabelSet,
    /// Whether word lookup lowercases before the exact match.
    pub lowercase: bool,
}

impl Vocabs {
    /// Exact normalized form, then its lowercased form, then `UNK`.
    pub fn word_index(&self, token: &str) -> usize {
        let norm = normalize_token(token, self.lowercase);
        self.words
            .get(&norm)
            .or_else(|| self.words.get(&norm.to_lowercase()))
            .unwrap_or(UNK)
    }

    /// Raw surface characters; unseen characters map to `UNK`.
    pub fn char_indices(&self, token: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        token
            .chars()
            .map(|c| self.chars.lookup(c.encode_utf8(&mut buf)))
            .collect()
    }
}

/// Build vocabularies from an already label-converted training corpus.
/// Words seen fewer than `min_count` times are left out and resolve to
/// `UNK`.
pub fn build_vocabs(
    corpus: &RawCorpus,
    min_count: usize,
    lowercase: bool,
    task: Task,
) -> Result<Vocabs> {
    if corpus.is_empty() {
        return Err(Error::Contract(
            "cannot build vocabularies from an empty corpus".into(),
        ));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut chars = Vocabulary::new();
    let mut buf = [0u8; 4];
    for s in &corpus.sentences {
        for tok in &s.tokens {
            let norm = normalize_token(tok, lowercase);
            let c = counts.entry(norm.clone()).or_insert(0);
            if *c == 0 {
                order.push(norm);
            }
            *c += 1;
            for ch in tok.chars() {
                chars.add(ch.encode_utf8(&mut buf));
            }
        }
    }
    let mut words = Vocabulary::new();
    for w in order {
        if counts[&w] >= min_count.max(1) {
            words.add(&w);
        }
    }
    Ok(Vocabs {
        words,
        chars,
        labels: LabelSet::from_corpus(corpus, task)?,
        lowercase,
    })
}

/// Convert labels to the training scheme: BIO (or IOB1) chunk tags become
/// BIOES for NER; files already carrying E-/S- tags are kept as they are.
/// POS labels pass through.
pub fn prepare_labels(mut corpus: RawCorpus, task: Task) -> Result<RawCorpus> {
    if task == Task::Pos {
        return Ok(corpus);
    }
    let mut already_bioes = false;
    for s in &corpus.sentences {
        for l in &s.labels {
            if matches!(Tag::parse(l)?.role(), Some(Role::End | Role::Single)) {
                already_bioes = true;
            }
        }
    }
    if !already_bioes {
        for s in corpus.sentences.iter_mut() {
            s.labels = bio_to_bioes(&s.labels)?;
        }
    }
    Ok(corpus)
}
