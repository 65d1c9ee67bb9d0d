//! Binary checkpoint: magic `SEQTAG01`, little-endian `u64` metadata
//! length, JSON metadata, then every tensor as little-endian `f64` values
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::Vocabs;
use crate::error::{Error, Result};
use crate::model::{Network, Tagger, VocabSizes};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SEQTAG01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: TrainConfig,
    vocabs: Vocabs,
    tensors: Vec<TensorEntry>,
    best_metric: f64,
    epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocabs: Vocabs,
    pub params: ParamSet,
    pub best_metric: f64,
    pub epoch: usize,
}

fn corrupt(field: &str, msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field: field.to_string(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            best_metric: self.best_metric,
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&meta)?;
        let payload: usize = self.params.iter().map(|(_, _, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(corrupt("magic", "not a seqtag checkpoint"));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("metadata_length", "file ends inside the header"))?;
        let meta_len = u64::from_le_bytes(len_bytes) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(
                    "metadata_length",
                    format!("{meta_len} bytes declared, file too short"),
                )
            })?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| corrupt("metadata", e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(corrupt(
                "format_version",
                format!("found {}, expected {FORMAT_VERSION}", meta.format_version),
            ));
        }

        let mut params = ParamSet::new();
        let mut offset = meta_end;
        for entry in &meta.tensors {
            let numel: usize = entry.shape.iter().product();
            let field = format!("tensor {}", entry.name);
            let end = offset
                .checked_add(numel * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    corrupt(
                        &field,
                        format!("payload too short for shape {:?}", entry.shape),
                    )
                })?;
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| corrupt(&field, e.to_string()))?;
            if params.id(&entry.name).is_some() {
                return Err(corrupt(&field, "duplicate tensor name"));
            }
            params.insert(&entry.name, t);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt(
                "payload",
                format!("{} trailing bytes", bytes.len() - offset),
            ));
        }

        let sizes = VocabSizes::of(&meta.vocabs);
        Network::bind(&meta.config.model, sizes, &params)
            .map_err(|e| corrupt("tensors", e.to_string()))?;
        if meta.config.model.freeze_embeddings {
            if let Some(id) = params.id("word.embeddings") {
                params.get_mut(id).set_requires_grad(false);
            }
        }
        Ok(Checkpoint {
            config: meta.config,
            vocabs: meta.vocabs,
            params,
            best_metric: meta.best_metric,
            epoch: meta.epoch,
        })
    }

    /// Write atomically: a sibling temporary file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn into_tagger(self) -> Result<Tagger> {
        let network = Network::bind(
            &self.config.model,
            VocabSizes::of(&self.vocabs),
            &self.params,
        )?;
        Ok(Tagger {
            network,
            params: self.params,
            vocabs: self.vocabs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::conll::{RawCorpus, Sentence};
    use crate::data::{build_vocabs, Task};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint() -> Checkpoint {
        let corpus = RawCorpus {
            sentences: vec![Sentence {
                tokens: vec!["Ann".into(), "runs".into()],
                labels: vec!["S-PER".into(), "O".into()],
            }],
            ..RawCorpus::default()
        };
        let vocabs = build_vocabs(&corpus, 1, false, Task::Ner).unwrap();
        let config = TrainConfig {
            model: ModelConfig {
                char_dim: 3,
                num_filters: 2,
                word_dim: 4,
                hidden_dim: 3,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, params) = Network::initialize(
            &config.model,
            VocabSizes::of(&vocabs),
            None,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        Checkpoint {
            config,
            vocabs,
            params,
            best_metric: 0.75,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = checkpoint();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SEQTAG01");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for ((_, n1, t1), (_, n2, t2)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.vocabs, c.vocabs);
        assert_eq!(back.config, c.config);
        assert_eq!((back.best_metric, back.epoch), (0.75, 3));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    fn field_of(bytes: &[u8]) -> String {
        match Checkpoint::from_bytes(bytes) {
            Err(Error::CorruptCheckpoint { field, .. }) => field,
            other => panic!("expected corrupt checkpoint, got {other:?}"),
        }
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field_of(&bad), "magic");
        assert_eq!(field_of(&bytes[..12]), "metadata_length");
        assert_eq!(field_of(&bytes[..bytes.len() - 8]), "tensor crf.end");
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(field_of(&long), "payload");
        assert_eq!(field_of(b""), "magic");
    }

    #[test]
    fn manifest_shape_mismatch_names_tensor() {
        let c = checkpoint();
        let t = c.vocabs.labels.len();
        let bytes = c.to_bytes().unwrap();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + meta_len]).unwrap();
        // crf.begin claims one extra value; the payload is then misread.
        let edited = json.replace(
            &format!(r#"{{"name":"crf.begin","shape":[{t}]}}"#),
            &format!(r#"{{"name":"crf.begin","shape":[{}]}}"#, t + 1),
        );
        assert_ne!(edited, json);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + meta_len..]);
        assert_eq!(field_of(&out), "tensor crf.end");

        let wrong_version = json.replace(r#""format_version":1"#, r#""format_version":9"#);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(wrong_version.len() as u64).to_le_bytes());
        out.extend_from_slice(wrong_version.as_bytes());
        out.extend_from_slice(&bytes[16 + meta_len..]);
        assert_eq!(field_of(&out), "format_version");
    }
}
