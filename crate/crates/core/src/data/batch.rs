//! Index encoding and padded mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conll::{RawCorpus, Sentence};
use super::vocab::{Vocabs, PAD};
use crate::error::{Error, Result};

/// One sentence as vocabulary indices. `labels` is empty for unlabeled input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Encode tokens (and labels, when `with_labels`). A label outside the
/// label set is a vocabulary error naming the sentence.
pub fn encode_sentence(
    s: &Sentence,
    vocabs: &Vocabs,
    with_labels: bool,
) -> Result<EncodedSentence> {
    let words = s.tokens.iter().map(|t| vocabs.word_index(t)).collect();
    let chars = s.tokens.iter().map(|t| vocabs.char_indices(t)).collect();
    let labels = if with_labels {
        s.labels
            .iter()
            .map(|l| {
                vocabs
                    .labels
                    .index(l)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown label {l:?}")))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(EncodedSentence {
        words,
        chars,
        labels,
    })
}

pub fn encode_corpus(
    corpus: &RawCorpus,
    vocabs: &Vocabs,
    with_labels: bool,
) -> Result<Vec<EncodedSentence>> {
    corpus
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            encode_sentence(s, vocabs, with_labels).map_err(|e| match e {
                Error::Vocabulary(m) => Error::Vocabulary(format!("sentence {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// Padded batch. Matrices are row-major: `words` and `labels` are
/// `size x max_len`, `chars` is `size x max_len x max_word_len`. Every
/// padded cell holds `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the member sentences in the source slice.
    pub indices: Vec<usize>,
    pub max_len: usize,
    pub max_word_len: usize,
    pub words: Vec<usize>,
    pub chars: Vec<usize>,
    pub labels: Vec<usize>,
    pub sentence_lengths: Vec<usize>,
    /// `size x max_len`, 0 at padded positions.
    pub word_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sentences(indices: Vec<usize>, sentences: &[EncodedSentence]) -> Batch {
        let members: Vec<&EncodedSentence> = indices.iter().map(|&i| &sentences[i]).collect();
        let max_len = members.iter().map(|s| s.len()).max().unwrap_or(0);
        let max_word_len = members
            .iter()
            .flat_map(|s| s.chars.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let b = members.len();
        let mut words = vec![PAD; b * max_len];
        let mut labels = vec![PAD; b * max_len];
        let mut chars = vec![PAD; b * max_len * max_word_len];
        let mut word_lengths = vec![0; b * max_len];
        for (r, s) in members.iter().enumerate() {
            for t in 0..s.len() {
                words[r * max_len + t] = s.words[t];
                if let Some(&l) = s.labels.get(t) {
                    labels[r * max_len + t] = l;
                }
                word_lengths[r * max_len + t] = s.chars[t].len();
                let base = (r * max_len + t) * max_word_len;
                chars[base..base + s.chars[t].len()].copy_from_slice(&s.chars[t]);
            }
        }
        Batch {
            sentence_lengths: members.iter().map(|s| s.len()).collect(),
            indices,
            max_len,
            max_word_len,
            words,
            chars,
            labels,
            word_lengths,
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Member `r` cut back to its true sentence and word lengths.
    pub fn sentence(&self, r: usize) -> EncodedSentence {
        let n = self.sentence_lengths[r];
        let row = r * self.max_len;
        let chars = (0..n)
            .map(|t| {
                let base = (row + t) * self.max_word_len;
                self.chars[base..base + self.word_lengths[row + t]].to_vec()
            })
            .collect();
        EncodedSentence {
            words: self.words[row..row + n].to_vec(),
            chars,
            labels: self.labels[row..row + n].to_vec(),
        }
    }
}

/// Shuffle with `seed` (`None` keeps corpus order) and cut into batches of
/// `batch_size`; the last batch may be smaller.
pub fn make_batches(
    sentences: &[EncodedSentence],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch::from_sentences(c.to_vec(), sentences))
        .collect())
}
