//! Pretrained word vectors in whitespace text format
//! (`token v1 v2 ... v_dim` per line, no header).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct WordEmbeddings {
    /// `|V| x dim`.
    pub matrix: Tensor,
    pub pad_index: usize,
    pub unk_index: usize,
    /// Non-reserved vocabulary entries that received a pretrained vector.
    pub covered: usize,
    /// `covered / (|V| - 2)`, 0 for a vocabulary with no real words.
    pub coverage: f64,
}

/// `|V| x dim` matrix drawn from `uniform(-sqrt(3/dim), sqrt(3/dim))`.
pub fn random_embeddings<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let bound = (3.0 / dim as f64).sqrt();
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, dim, data).expect("finite by construction")
}

pub fn load_embeddings<R: Rng>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<WordEmbeddings> {
    let file = File::open(path)?;
    load_embeddings_from(BufReader::new(file), vocab, dim, rng)
}

/// Copy vectors for vocabulary entries found in `reader`; every other row
/// keeps its random initialization. A vocabulary entry with no exact match
/// falls back to its lowercased form. Duplicate file entries: first wins.
pub fn load_embeddings_from<B: BufRead, R: Rng>(
    reader: B,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<WordEmbeddings> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut matrix = random_embeddings(vocab.len(), dim, rng);

    let wanted: HashSet<String> = vocab
        .items()
        .iter()
        .skip(2)
        .flat_map(|w| [w.clone(), w.to_lowercase()])
        .collect();
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut fields = line.split_ascii_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Format {
                line: lineno,
                msg: format!(
                    "expected {dim} values for {token:?}, found {}",
                    values.len()
                ),
            });
        }
        if !wanted.contains(token) || found.contains_key(token) {
            continue;
        }
        let vec = values
            .iter()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Format {
                    line: lineno,
                    msg: format!("bad value {v:?}"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        found.insert(token.to_string(), vec);
    }

    let mut covered = 0;
    let data = matrix.data_mut();
    for (i, w) in vocab.items().iter().enumerate().skip(2) {
        let hit = found.get(w).or_else(|| found.get(&w.to_lowercase()));
        if let Some(v) = hit {
            data[i * dim..(i + 1) * dim].copy_from_slice(v);
            covered += 1;
        }
    }
    let real = vocab.len().saturating_sub(2);
    Ok(WordEmbeddings {
        matrix,
        pad_index: PAD,
        unk_index: UNK,
        covered,
        coverage: if real == 0 {
            0.0
        } else {
            covered as f64 / real as f64
        },
    })
}
