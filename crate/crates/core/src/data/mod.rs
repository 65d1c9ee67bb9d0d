//! Corpus ingestion, preprocessing, vocabularies and batching.

pub mod batch;
pub mod conll;
pub mod embeddings;
pub mod scheme;
pub mod vocab;

pub use batch::{encode_corpus, encode_sentence, make_batches, Batch, EncodedSentence};
pub use conll::{parse_conll, parse_tokens, ColumnLayout, RawCorpus, Sentence};
pub use embeddings::{load_embeddings, WordEmbeddings};
pub use scheme::{bio_to_bioes, bioes_to_bio, Scheme, Tag};
pub use vocab::{
    build_vocabs, normalize_token, prepare_labels, LabelSet, Task, Vocabs, Vocabulary,
};
