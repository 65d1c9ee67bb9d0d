//! Entity-level scoring compatible with the CoNLL `conlleval` chunk rules,
//! plus token accuracy for tagging tasks without spans.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::data::conll::{parse_conll_str, ColumnLayout};
use crate::data::scheme::{Role, Tag};
use crate::error::{Error, Result};

/// Inclusive token span of one entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

fn ends_chunk(prev: &Tag, cur: &Tag) -> bool {
    use Role::*;
    match (prev.role(), cur) {
        (None, _) => false,
        (Some(End | Single), _) => true,
        (Some(Begin | Inside), Tag::Outside) => true,
        (
            Some(Begin | Inside),
            Tag::Chunk {
                role: Begin | Single,
                ..
            },
        ) => true,
        (Some(_), Tag::Chunk { kind, .. }) => prev.kind() != Some(kind.as_str()),
    }
}

fn starts_chunk(prev: &Tag, cur: &Tag) -> bool {
    use Role::*;
    match cur {
        Tag::Outside => false,
        Tag::Chunk {
            role: Begin | Single,
            ..
        } => true,
        Tag::Chunk { kind, .. } => match prev.role() {
            None | Some(End | Single) => true,
            Some(_) => prev.kind() != Some(kind.as_str()),
        },
    }
}

/// Spans of a BIO or BIOES sequence. Malformed continuations (an `I-` or
/// `E-` after `O`, or after a different type) open a new span.
pub fn extract_entities<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>> {
    let parsed = tags
        .iter()
        .map(|t| Tag::parse(t.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut prev = Tag::Outside;
    for (i, cur) in parsed
        .iter()
        .chain(std::iter::once(&Tag::Outside))
        .enumerate()
    {
        if ends_chunk(&prev, cur) {
            if let Some((start, kind)) = open.take() {
                spans.push(EntitySpan {
                    kind,
                    start,
                    end: i - 1,
                });
            }
        }
        if starts_chunk(&prev, cur) {
            open = Some((i, cur.kind().expect("chunk tag").to_string()));
        }
        prev = cur.clone();
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Prf {
    /// Ratios from counts; any 0/0 is 0.
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreReport {
    pub overall: Prf,
    pub per_type: BTreeMap<String, Prf>,
    pub tokens: usize,
    pub token_accuracy: f64,
}

impl fmt::Display for ScoreReport {
    /// `conlleval`-style summary, percentages with two decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.overall;
        writeln!(
            f,
            "processed {} tokens with {} phrases; found: {} phrases; correct: {}.",
            self.tokens, o.gold, o.predicted, o.correct
        )?;
        writeln!(
            f,
            "accuracy: {:6.2}%; precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            100.0 * self.token_accuracy,
            100.0 * o.precision,
            100.0 * o.recall,
            100.0 * o.f1
        )?;
        for (kind, p) in &self.per_type {
            writeln!(
                f,
                "{kind:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {}",
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1,
                p.predicted
            )?;
        }
        Ok(())
    }
}

fn check_aligned<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<()> {
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Alignment {
                sentence: i,
                msg: format!("gold has {} tokens, prediction has {}", g.len(), p.len()),
            });
        }
    }
    if gold.len() != pred.len() {
        return Err(Error::Alignment {
            sentence: gold.len().min(pred.len()),
            msg: format!(
                "gold has {} sentences, prediction has {}",
                gold.len(),
                pred.len()
            ),
        });
    }
    Ok(())
}

/// Fraction of positions where the tags agree; 0 for an empty corpus.
pub fn token_accuracy<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        total += g.len();
        hit += g
            .iter()
            .zip(p)
            .filter(|(a, b)| a.as_ref() == b.as_ref())
            .count();
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

/// Exact-match span scoring, micro-averaged, with a per-type breakdown.
pub fn entity_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<ScoreReport> {
    check_aligned(gold, pred)?;
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gs = extract_entities(g)?;
        let ps = extract_entities(p)?;
        let gset: HashSet<&EntitySpan> = gs.iter().collect();
        for s in &gs {
            counts.entry(s.kind.clone()).or_default().0 += 1;
        }
        for s in &ps {
            let c = counts.entry(s.kind.clone()).or_default();
            c.1 += 1;
            if gset.contains(s) {
                c.2 += 1;
            }
        }
    }
    let (g, p, c) = counts
        .values()
        .fold((0, 0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
    Ok(ScoreReport {
        overall: Prf::from_counts(g, p, c),
        per_type: counts
            .into_iter()
            .map(|(k, (g, p, c))| (k, Prf::from_counts(g, p, c)))
            .collect(),
        tokens: gold.iter().map(Vec::len).sum(),
        token_accuracy: token_accuracy(gold, pred)?,
    })
}

/// Tokens, gold tags and predicted tags of a three-column file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interchange {
    pub tokens: Vec<Vec<String>>,
    pub gold: Vec<Vec<String>>,
    pub pred: Vec<Vec<String>>,
}

/// Read `token ... gold pred` lines (the last two columns are the tags,
/// as in `conlleval` input), blank line between sentences.
pub fn read_interchange(text: &str, path: &Path) -> Result<Interchange> {
    let corpus = parse_conll_str(text, path, ColumnLayout::default(), true)?;
    let mut out = Interchange::default();
    let mut lines = text
        .strip_prefix('\u{feff}')
        .unwrap_or(text)
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let first = l.split_ascii_whitespace().next();
            first.is_some() && first != Some("-DOCSTART-")
        });
    for s in corpus.sentences {
        let mut gold = Vec::with_capacity(s.len());
        for _ in 0..s.len() {
            let (i, line) = lines.next().expect("parser saw the same lines");
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() < 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected token, gold and predicted columns".into(),
                });
            }
            gold.push(fields[fields.len() - 2].to_string());
        }
        out.tokens.push(s.tokens);
        out.gold.push(gold);
        out.pred.push(s.labels);
    }
    Ok(out)
}

/// Write `token gold pred` lines.
pub fn write_interchange<W: Write>(mut out: W, x: &Interchange) -> std::io::Result<()> {
    for ((toks, gold), pred) in x.tokens.iter().zip(&x.gold).zip(&x.pred) {
        for ((t, g), p) in toks.iter().zip(gold).zip(pred) {
            writeln!(out, "{t} {g} {p}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tags: &[&str]) -> Vec<String> {
        tags.iter().map(|t| t.to_string()).collect()
    }

    fn span(kind: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            kind: kind.into(),
            start,
            end,
        }
    }

    #[test]
    fn well_formed_spans() {
        let e = extract_entities(&["B-PER", "E-PER", "O", "S-LOC"]).unwrap();
        assert_eq!(e, vec![span("PER", 0, 1), span("LOC", 3, 3)]);
        assert!(extract_entities(&["O", "O", "O"]).unwrap().is_empty());
    }

    #[test]
    fn lenient_starts() {
        assert_eq!(
            extract_entities(&["I-ORG", "E-ORG"]).unwrap(),
            vec![span("ORG", 0, 1)]
        );
        assert_eq!(
            extract_entities(&["B-PER", "I-LOC", "E-LOC"]).unwrap(),
            vec![span("PER", 0, 0), span("LOC", 1, 2)]
        );
        // BIO input works too.
        assert_eq!(
            extract_entities(&["B-PER", "I-PER", "B-PER", "O", "I-MISC"]).unwrap(),
            vec![span("PER", 0, 1), span("PER", 2, 2), span("MISC", 4, 4)]
        );
        // A span closes at E even when followed by a same-type I.
        assert_eq!(
            extract_entities(&["B-X", "E-X", "I-X"]).unwrap(),
            vec![span("X", 0, 1), span("X", 2, 2)]
        );
        assert!(extract_entities(&["X-PER"]).is_err());
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![v(&["B-PER", "E-PER", "O", "S-LOC"])];
        let r = entity_f1(&gold, &gold).unwrap();
        assert_eq!(
            (r.overall.precision, r.overall.recall, r.overall.f1),
            (1.0, 1.0, 1.0)
        );
        assert!(r.to_string().contains("FB1: 100.00"));

        let none = vec![v(&["O", "O", "O", "O"])];
        let r = entity_f1(&gold, &none).unwrap();
        assert_eq!(
            (r.overall.precision, r.overall.recall, r.overall.f1),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn half_right() {
        let gold = vec![v(&["B-PER", "E-PER", "O", "S-LOC"])];
        let pred = vec![v(&["B-PER", "E-PER", "B-LOC", "E-LOC"])];
        let r = entity_f1(&gold, &pred).unwrap();
        assert_eq!(
            (r.overall.precision, r.overall.recall, r.overall.f1),
            (0.5, 0.5, 0.5)
        );
        assert_eq!(r.per_type["LOC"].f1, 0.0);
        assert_eq!(r.per_type["PER"].f1, 1.0);

        let swapped = entity_f1(&pred, &gold).unwrap();
        assert_eq!(swapped.overall.f1, r.overall.f1);
    }

    #[test]
    fn token_accuracy_cases() {
        let g = vec![v(&["A", "B", "C", "D"])];
        assert_eq!(token_accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(
            token_accuracy(&g, &[v(&["A", "B", "C", "X"])]).unwrap(),
            0.75
        );
        assert_eq!(
            token_accuracy(&g, &[v(&["W", "X", "Y", "Z"])]).unwrap(),
            0.0
        );
    }

    #[test]
    fn misalignment_names_sentence() {
        let g = vec![v(&["O"]), v(&["O", "O"])];
        let p = vec![v(&["O"]), v(&["O"])];
        match entity_f1(&g, &p) {
            Err(Error::Alignment { sentence, .. }) => assert_eq!(sentence, 1),
            other => panic!("unexpected {other:?}"),
        }
        match token_accuracy(&g, &g[..1]) {
            Err(Error::Alignment { sentence, .. }) => assert_eq!(sentence, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interchange_round_trip() {
        let text = "EU NNP B-ORG S-ORG\nrejects VBZ O O\n\nPeter NNP B-PER B-PER\nBlackburn NNP E-PER E-PER\n";
        let x = read_interchange(text, Path::new("mem")).unwrap();
        assert_eq!(x.gold[0], v(&["B-ORG", "O"]));
        assert_eq!(x.pred[0], v(&["S-ORG", "O"]));
        assert_eq!(x.tokens[1], v(&["Peter", "Blackburn"]));
        let mut buf = Vec::new();
        write_interchange(&mut buf, &x).unwrap();
        let back = read_interchange(std::str::from_utf8(&buf).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, x);
        assert!(read_interchange("a O\n", Path::new("mem")).is_err());
    }
}
