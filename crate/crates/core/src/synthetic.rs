//! Deterministic toy NER corpus.
//!
//! Tokens are written over a 30-symbol alphabet (`a`-`o` and `A`-`O`). An
//! entity is a run of capitalized words directly after one of four trigger
//! words, and the trigger fixes its type. Capitalized words anywhere else
//! are plain `O`, as are lowercase words after a trigger, so neither
//! capitalization nor context alone identifies an entity. Entity words are
//! freshly generated, so most dev entities are unseen in training.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::conll::Sentence;

pub const LOWER: &str = "abcdefghijklmno";
pub const UPPER: &str = "ABCDEFGHIJKLMNO";

/// Trigger word and the entity type it introduces.
pub const TRIGGERS: [(&str, &str); 4] = [
    ("dea", "PER"),
    ("ino", "LOC"),
    ("abo", "ORG"),
    ("fem", "MISC"),
];

const FILLER: [&str; 24] = [
    "ka", "lo", "mine", "beg", "hod", "jin", "cole", "fan", "gid", "nolo", "ebb", "maid", "ha",
    "li", "ogle", "deck", "bib", "kin", "ode", "lime", "gal", "node", "cab", "film",
];

fn random_word<R: Rng>(rng: &mut R, capitalized: bool) -> String {
    let lower: Vec<char> = LOWER.chars().collect();
    let upper: Vec<char> = UPPER.chars().collect();
    let len = rng.random_range(2..=6);
    let mut w = String::with_capacity(len);
    for i in 0..len {
        let pool = if i == 0 && capitalized {
            &upper
        } else {
            &lower
        };
        w.push(*pool.choose(rng).expect("nonempty"));
    }
    w
}

/// One BIO-labeled sentence.
pub fn sentence<R: Rng>(rng: &mut R) -> Sentence {
    let target = rng.random_range(5..=12);
    let mut s = Sentence::default();
    let push = |s: &mut Sentence, tok: String, label: String| {
        s.tokens.push(tok);
        s.labels.push(label);
    };
    while s.len() < target {
        let roll: f64 = rng.random();
        if roll < 0.3 {
            let (trigger, kind) = *TRIGGERS.choose(rng).expect("nonempty");
            push(&mut s, trigger.into(), "O".into());
            if rng.random_bool(0.2) {
                // Trigger followed by an ordinary word: no entity.
                push(
                    &mut s,
                    FILLER.choose(rng).expect("nonempty").to_string(),
                    "O".into(),
                );
            } else {
                let n = rng.random_range(1..=3);
                for i in 0..n {
                    let prefix = if i == 0 { "B" } else { "I" };
                    push(&mut s, random_word(rng, true), format!("{prefix}-{kind}"));
                }
            }
            // Close the run with a lowercase word so its end is unambiguous.
            push(
                &mut s,
                FILLER.choose(rng).expect("nonempty").to_string(),
                "O".into(),
            );
        } else if roll < 0.45 {
            push(&mut s, random_word(rng, true), "O".into());
        } else {
            push(
                &mut s,
                FILLER.choose(rng).expect("nonempty").to_string(),
                "O".into(),
            );
        }
    }
    s
}

pub fn corpus(n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&mut rng)).collect()
}

/// Seeds of the bundled `data/toy` files.
pub const TRAIN_SEED: u64 = 2024;
pub const DEV_SEED: u64 = 7;

/// The bundled 200-sentence training split.
pub fn toy_train() -> Vec<Sentence> {
    corpus(200, TRAIN_SEED)
}

/// The bundled 50-sentence dev split.
pub fn toy_dev() -> Vec<Sentence> {
    corpus(50, DEV_SEED)
}
