#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqtag::crf::{CrfParams, EmissionTable};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn toy(name: &str) -> PathBuf {
    data_dir().join("toy").join(name)
}

pub fn seqtag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqtag"))
        .args(args)
        .env_remove("SEQTAG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn seqtag")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Random lattice with emissions in [-3, 3] and CRF parameters in [-1, 1].
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, t: usize) -> (EmissionTable, CrfParams) {
    let mut draw =
        |k: usize, r: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(-r..r)).collect() };
    let em = EmissionTable::new(n, t, draw(n * t, 3.0)).unwrap();
    let p = CrfParams::new(t, draw(t * t, 1.0), draw(t, 1.0), draw(t, 1.0)).unwrap();
    (em, p)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random valid BIO sequence over four entity types.
pub fn random_bio(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    const TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if rng.random_bool(0.4) {
            let kind = TYPES[rng.random_range(0..4)];
            let span = rng.random_range(1..=4).min(len - out.len());
            out.push(format!("B-{kind}"));
            for _ in 1..span {
                out.push(format!("I-{kind}"));
            }
        } else {
            out.push("O".to_string());
        }
    }
    out
}
