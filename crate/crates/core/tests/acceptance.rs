//! Acceptance suite. Runs as a plain binary (`harness = false`) so every
//! criterion prints one PASS/FAIL/SKIP line; exits nonzero on any FAIL.
//!
//! `cargo test --test acceptance`. Set `SEQTAG_CONLL_DIR` to a directory
//! with CoNLL-2003 English files to enable criterion 10.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;

use common::*;
use seqtag::crf::oracle::enumerate_oracle;
use seqtag::crf::{
    constrained_decode, log_partition, sequence_score, tape_neg_log_likelihood, viterbi_decode,
    CrfVars, TransitionMask,
};
use seqtag::data::scheme::{bio_to_bioes, bioes_to_bio, first_bioes_violation};
use seqtag::data::{
    build_vocabs, encode_corpus, parse_conll, prepare_labels, ColumnLayout, RawCorpus, Task,
};
use seqtag::eval::{entity_f1, extract_entities, read_interchange};
use seqtag::train::{train_loop, TrainConfig};
use seqtag::{Execution, ParamSet, Tape, Tensor};

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn crf_oracle() -> Verdict {
    let start = Instant::now();
    let (mut worst_z, mut worst_score, mut mismatches) = (0f64, 0f64, 0usize);
    for n in 1..=5 {
        for t in 2..=5 {
            for seed in 0..20 {
                let mut r = rng(1000 * n as u64 + 100 * t as u64 + seed);
                let (em, p) = random_instance(&mut r, n, t);
                let e = enumerate_oracle(&em, &p).unwrap();
                worst_z = worst_z.max((log_partition(&em, &p).unwrap() - e.log_z).abs());
                let (path, score) = viterbi_decode(&em, &p).unwrap();
                mismatches += usize::from(path != e.best);
                worst_score =
                    worst_score.max((score - sequence_score(&em, &path, &p).unwrap()).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_z <= 1e-8 && worst_score <= 1e-10 && mismatches == 0 && elapsed < Duration::from_secs(5),
        format!(
            "400 instances, max |logZ - oracle| {worst_z:.1e}, max |viterbi score - sequence score| {worst_score:.1e}, \
             argmax mismatches {mismatches}, {:.2}s",
            secs(elapsed)
        ),
    )
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let out = seqtag(&["gradcheck", "--sizes", "tiny", "--seed", "0"]);
    let elapsed = start.elapsed();
    let text = stdout(&out);
    let groups = [
        "char.embeddings",
        "char.conv.weight",
        "char.conv.bias",
        "word.embeddings",
        "lstm.fwd.",
        "lstm.bwd.",
        "emission.",
        "crf.transitions",
        "crf.begin",
        "crf.end",
    ];
    let missing: Vec<&str> = groups
        .iter()
        .filter(|g| !text.contains(*g))
        .copied()
        .collect();
    let worst = text
        .lines()
        .filter_map(|l| l.split("max_rel_error=").nth(1))
        .filter_map(|v| v.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0f64, f64::max);
    check(
        out.status.code() == Some(0) && missing.is_empty() && worst <= 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "exit {:?}, {} tensors, worst relative error {worst:.2e}, missing groups {missing:?}, {:.2}s",
            out.status.code(),
            text.lines().count(),
            secs(elapsed)
        ),
    )
}

fn emission_gradient() -> Verdict {
    let mut worst = 0f64;
    let empty = ParamSet::new();
    for n in 1..=5 {
        for t in 2..=5 {
            for seed in 0..20 {
                let mut r = rng(1000 * n as u64 + 100 * t as u64 + seed);
                let (em, p) = random_instance(&mut r, n, t);
                let gold: Vec<usize> = (0..n).map(|_| r.random_range(0..t)).collect();
                let mut tape = Tape::new(&empty);
                let e = tape.input(Tensor::matrix(n, t, em.scores().to_vec()).unwrap());
                let crf = CrfVars {
                    transitions: tape
                        .constant(Tensor::matrix(t, t, p.transitions().to_vec()).unwrap()),
                    begin: tape.constant(Tensor::vector(p.begin().to_vec()).unwrap()),
                    end: tape.constant(Tensor::vector(p.end().to_vec()).unwrap()),
                };
                let nll = tape_neg_log_likelihood(&mut tape, e, &gold, &crf).unwrap();
                let (_, grads) = tape.backward_with_nodes(nll).unwrap();
                let analytic = grads.of(e).unwrap();
                let marginals = enumerate_oracle(&em, &p).unwrap().marginals(t);
                for i in 0..n {
                    for j in 0..t {
                        let expected = marginals[i * t + j] - if gold[i] == j { 1.0 } else { 0.0 };
                        worst = worst.max((analytic[i * t + j] - expected).abs());
                    }
                }
            }
        }
    }
    check(
        worst <= 1e-8,
        format!("400 instances, max |dNLL/ds - (marginal - onehot)| {worst:.1e}"),
    )
}

fn shift_invariance() -> Verdict {
    let mut r = rng(44);
    let (mut worst, mut changed) = (0f64, 0usize);
    for _ in 0..100 {
        let n = r.random_range(1..=8);
        let t = r.random_range(2..=6);
        let (em, p) = random_instance(&mut r, n, t);
        let row = r.random_range(0..n);
        let c = r.random_range(-5.0..5.0);
        let shifted = em.shifted_row(row, c);
        let dz = log_partition(&shifted, &p).unwrap() - log_partition(&em, &p).unwrap();
        worst = worst.max((dz - c).abs());
        changed += usize::from(
            viterbi_decode(&shifted, &p).unwrap().0 != viterbi_decode(&em, &p).unwrap().0,
        );
    }
    check(
        worst <= 1e-10 && changed == 0,
        format!("100 instances, max |dlogZ - c| {worst:.1e}, argmax changes {changed}"),
    )
}

/// `bioes_label_set` for four entity types plus `O`.
fn bioes_labels() -> Vec<String> {
    let mut labels = vec!["O".to_string()];
    for kind in ["PER", "LOC", "ORG", "MISC"] {
        for role in ["B", "I", "E", "S"] {
            labels.push(format!("{role}-{kind}"));
        }
    }
    labels
}

fn structural_decoding() -> Verdict {
    let labels = bioes_labels();
    let t = labels.len();
    let mask = TransitionMask::bioes(&labels).unwrap();
    let mut r = rng(66);
    let mut invalid = 0usize;
    for _ in 0..1000 {
        let n = r.random_range(1..=20);
        let (em, p) = random_instance(&mut r, n, t);
        let path = constrained_decode(&em, &p, &mask).unwrap();
        let tags: Vec<&str> = path.iter().map(|&i| labels[i].as_str()).collect();
        invalid += usize::from(first_bioes_violation(&tags).unwrap().is_some());
    }
    check(
        invalid == 0,
        format!("1000 tables over {t} tags, invalid sequences {invalid}"),
    )
}

fn scheme_round_trip() -> Verdict {
    let mut r = rng(77);
    let (mut bad_trip, mut bad_spans) = (0usize, 0usize);
    for _ in 0..10_000 {
        let len = r.random_range(1..=40);
        let bio = random_bio(&mut r, len);
        let bioes = bio_to_bioes(&bio).unwrap();
        bad_trip += usize::from(bioes_to_bio(&bioes).unwrap() != bio);
        bad_spans +=
            usize::from(extract_entities(&bio).unwrap() != extract_entities(&bioes).unwrap());
    }
    check(
        bad_trip == 0 && bad_spans == 0,
        format!("10000 sequences, round-trip failures {bad_trip}, span mismatches {bad_spans}"),
    )
}

fn round4(x: f64) -> i64 {
    (x * 1e4).round() as i64
}

fn scorer_parity() -> Verdict {
    let dir = data_dir().join("parity");
    let reference: BTreeMap<String, Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("reference.json")).unwrap()).unwrap();
    let mut problems = Vec::new();
    for (name, expected) in &reference {
        let path = dir.join(format!("{name}.txt"));
        let x = read_interchange(&fs::read_to_string(&path).unwrap(), &path).unwrap();
        let report = entity_f1(&x.gold, &x.pred).unwrap();
        let mut compare = |scope: &str, got: [f64; 3], want: &Value| {
            for (k, g) in ["precision", "recall", "f1"].iter().zip(got) {
                let w = want[k].as_f64().unwrap();
                if round4(g) != round4(w) {
                    problems.push(format!("{name}/{scope}/{k}: {g:.4} vs {w:.4}"));
                }
            }
        };
        let o = &report.overall;
        compare(
            "overall",
            [o.precision, o.recall, o.f1],
            &expected["overall"],
        );
        let want_types = expected["per_type"].as_object().unwrap();
        let got_types: Vec<&String> = report.per_type.keys().collect();
        if got_types != want_types.keys().collect::<Vec<_>>() {
            problems.push(format!("{name}: types {got_types:?}"));
            continue;
        }
        for (kind, prf) in &report.per_type {
            compare(kind, [prf.precision, prf.recall, prf.f1], &want_types[kind]);
        }
    }
    let half = &reference
        .get("half")
        .map(|v| v["overall"].clone())
        .unwrap_or_default();
    let has_half = ["precision", "recall", "f1"]
        .iter()
        .all(|k| half[k].as_f64() == Some(0.5));
    check(
        reference.len() >= 5 && has_half && problems.is_empty(),
        format!(
            "{} fixtures (P=R=F1=0.5 example present: {has_half}), mismatches {problems:?}",
            reference.len()
        ),
    )
}

fn desk_scale_learning(work: &Path) -> Verdict {
    let out_dir = work.join("toy");
    let start = Instant::now();
    let out = seqtag(&[
        "train",
        "--train",
        path_str(&toy("train.txt")),
        "--dev",
        path_str(&toy("dev.txt")),
        "--config",
        path_str(&toy("small.conf")),
        "--sequential",
        "--out",
        path_str(&out_dir),
    ]);
    let elapsed = start.elapsed();
    let text = stdout(&out);
    let f1 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("dev_f1="))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::NAN);
    let epochs = fs::read_to_string(out_dir.join("history.jsonl"))
        .map(|h| h.lines().count())
        .unwrap_or(0);

    let ablation_dir = work.join("toy-no-crf");
    let ablation = seqtag(&[
        "train",
        "--train",
        path_str(&toy("train.txt")),
        "--dev",
        path_str(&toy("dev.txt")),
        "--config",
        path_str(&toy("small.conf")),
        "--no-crf",
        "--out",
        path_str(&ablation_dir),
    ]);
    let ablation_ok = ablation.status.success() && ablation_dir.join("model.ckpt").is_file();
    check(
        out.status.success() && f1 >= 0.95 && epochs <= 30 && elapsed < Duration::from_secs(120) && ablation_ok,
        format!(
            "dev F1 {f1:.4} after {epochs} epochs in {:.1}s single-threaded; --no-crf run completed: {ablation_ok} ({})",
            secs(elapsed),
            stdout(&ablation).trim()
        ),
    )
}

fn determinism(work: &Path) -> Verdict {
    let conf = work.join("short.conf");
    fs::write(
        &conf,
        fs::read_to_string(toy("small.conf")).unwrap() + "max_epochs = 4\n",
    )
    .unwrap();
    let train = |name: &str| -> PathBuf {
        let dir = work.join(name);
        let out = seqtag(&[
            "train",
            "--train",
            path_str(&toy("train.txt")),
            "--dev",
            path_str(&toy("dev.txt")),
            "--config",
            path_str(&conf),
            "--seed",
            "9",
            "--out",
            path_str(&dir),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        dir
    };
    let (a, b) = (train("det-a"), train("det-b"));
    let same_history =
        fs::read(a.join("history.jsonl")).unwrap() == fs::read(b.join("history.jsonl")).unwrap();
    let same_ckpt =
        fs::read(a.join("model.ckpt")).unwrap() == fs::read(b.join("model.ckpt")).unwrap();

    // Tag, then save the checkpoint to a new file, reload it and tag again.
    let tag = |model: &Path, output: &Path| {
        let out = seqtag(&[
            "tag",
            "--model",
            path_str(model),
            "--input",
            path_str(&toy("dev.txt")),
            "--output",
            path_str(output),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(output).unwrap()
    };
    let before = tag(&a.join("model.ckpt"), &work.join("before.txt"));
    let copy = work.join("resaved.ckpt");
    seqtag::train::Checkpoint::load(&a.join("model.ckpt"))
        .unwrap()
        .save(&copy)
        .unwrap();
    let after = tag(&copy, &work.join("after.txt"));
    let same_tags = before == after && !before.is_empty();
    check(
        same_history && same_ckpt && same_tags,
        format!("identical history {same_history}, identical checkpoint {same_ckpt}, identical tagging {same_tags}"),
    )
}

/// CoNLL-2003 split files under `dir`, in either common naming.
fn conll_files(dir: &Path) -> Option<[PathBuf; 3]> {
    for names in [
        ["eng.train", "eng.testa", "eng.testb"],
        ["train.txt", "valid.txt", "test.txt"],
    ] {
        let paths = names.map(|n| dir.join(n));
        if paths.iter().all(|p| p.is_file()) {
            return Some(paths);
        }
    }
    None
}

fn full_scale_smoke() -> Verdict {
    let Some(dir) = std::env::var_os("SEQTAG_CONLL_DIR") else {
        return Skip("SEQTAG_CONLL_DIR not set".into());
    };
    let Some(paths) = conll_files(Path::new(&dir)) else {
        return Skip(format!(
            "no CoNLL-2003 files in {}",
            Path::new(&dir).display()
        ));
    };
    let corpora: Vec<RawCorpus> = paths
        .iter()
        .map(|p| parse_conll(p, ColumnLayout::default()).unwrap())
        .collect();
    let counts: Vec<(usize, usize)> = corpora.iter().map(|c| (c.len(), c.token_count())).collect();
    let expected = vec![(14_987, 203_621), (3_466, 51_362), (3_684, 46_435)];

    let mut config = TrainConfig::default();
    for (k, v) in [
        ("max_epochs", "1"),
        ("word_dim", "16"),
        ("hidden_dim", "16"),
        ("char_dim", "8"),
        ("num_filters", "8"),
    ] {
        config.set(k, v).unwrap();
    }
    let truncate = |c: &RawCorpus, n: usize| RawCorpus {
        sentences: c.sentences.iter().take(n).cloned().collect(),
        ..c.clone()
    };
    let train = prepare_labels(truncate(&corpora[0], 300), Task::Ner).unwrap();
    let dev = prepare_labels(corpora[1].clone(), Task::Ner).unwrap();
    let vocabs = build_vocabs(&train, 1, false, Task::Ner).unwrap();
    let dev = RawCorpus {
        sentences: dev
            .sentences
            .into_iter()
            .filter(|s| s.labels.iter().all(|l| vocabs.labels.index(l).is_some()))
            .take(200)
            .collect(),
        ..RawCorpus::default()
    };
    let train_enc = encode_corpus(&train, &vocabs, true).unwrap();
    let dev_enc = encode_corpus(&dev, &vocabs, true).unwrap();
    let outcome = train_loop(
        &config,
        &vocabs,
        None,
        &train_enc,
        &dev_enc,
        Execution::Parallel,
        &mut |_, _| Ok(()),
    );
    let f1 = outcome
        .as_ref()
        .map(|o| o.best.best_metric)
        .unwrap_or(f64::NAN);
    check(
        counts == expected && (0.0..=1.0).contains(&f1),
        format!("sentence/token counts {counts:?}, 1-epoch truncated run dev F1 {f1:.4}"),
    )
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("CRF oracle equivalence", Box::new(crf_oracle)),
        ("gradient integrity", Box::new(gradient_integrity)),
        (
            "CRF emission-gradient identity",
            Box::new(emission_gradient),
        ),
        ("shift/argmax invariance", Box::new(shift_invariance)),
        (
            "desk-scale learning",
            Box::new(|| desk_scale_learning(work.path())),
        ),
        (
            "structural decoding guarantee",
            Box::new(structural_decoding),
        ),
        ("scheme round-trip", Box::new(scheme_round_trip)),
        ("scorer parity", Box::new(scorer_parity)),
        (
            "determinism and persistence",
            Box::new(|| determinism(work.path())),
        ),
        ("full-scale smoke", Box::new(full_scale_smoke)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (status, detail) = match run() {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} {status} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
