//! Whitespace-column CoNLL files: one token per line, blank lines between
//! sentences, `-DOCSTART-` lines ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which columns hold the token and the label. `label: None` means the last
/// column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ColumnLayout {
    pub token: usize,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCorpus {
    pub sentences: Vec<Sentence>,
    pub source: Option<PathBuf>,
    pub layout: ColumnLayout,
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn labels(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(|s| s.labels.clone()).collect()
    }
}

const DOCSTART: &str = "-DOCSTART-";

/// Parse a labeled CoNLL file.
pub fn parse_conll(path: &Path, layout: ColumnLayout) -> Result<RawCorpus> {
    let text = fs::read_to_string(path)?;
    parse_conll_str(&text, path, layout, true)
}

/// Parse a file for tagging: only the token column is required, so plain
/// one-token-per-line text works too. Labels are read when present.
pub fn parse_tokens(path: &Path) -> Result<RawCorpus> {
    let text = fs::read_to_string(path)?;
    parse_conll_str(&text, path, ColumnLayout::default(), false)
}

/// Parse CoNLL text; `path` only labels error messages.
pub fn parse_conll_str(
    text: &str,
    path: &Path,
    layout: ColumnLayout,
    require_label: bool,
) -> Result<RawCorpus> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    let mut width: Option<usize> = None;

    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if fields[0] == DOCSTART {
            continue;
        }
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(err(
                lineno,
                format!("ragged line: {} columns, expected {expected}", fields.len()),
            ));
        }
        let token = fields
            .get(layout.token)
            .ok_or_else(|| err(lineno, format!("no token column {}", layout.token)))?;
        current.tokens.push(token.to_string());

        let label = match layout.label {
            Some(c) => fields.get(c).copied(),
            None if fields.len() > 1 => fields.last().copied(),
            None => None,
        };
        match label {
            Some(l) => current.labels.push(l.to_string()),
            None if require_label => return Err(err(lineno, "missing label column".to_string())),
            None => {}
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }

    // Labels are all-or-nothing across a file.
    if !require_label && sentences.iter().any(|s| s.labels.len() != s.tokens.len()) {
        sentences.iter_mut().for_each(|s| s.labels.clear());
    }

    Ok(RawCorpus {
        sentences,
        source: Some(path.to_path_buf()),
        layout,
    })
}

/// Write `token label` lines (or just `token` when `labels` is empty),
/// blank line after every sentence.
pub fn write_conll<W: Write>(mut out: W, sentences: &[Sentence]) -> std::io::Result<()> {
    for s in sentences {
        for (i, tok) in s.tokens.iter().enumerate() {
            match s.labels.get(i) {
                Some(l) => writeln!(out, "{tok} {l}")?,
                None => writeln!(out, "{tok}")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawCorpus> {
        parse_conll_str(text, Path::new("mem"), ColumnLayout::default(), true)
    }

    #[test]
    fn blank_lines_delimit() {
        let c = parse("a O\nb B-PER\n\nc O\n").unwrap();
        assert_eq!(
            c.sentences.iter().map(Sentence::len).collect::<Vec<_>>(),
            vec![2, 1]
        );
        assert_eq!(c.sentences[0].labels, vec!["O", "B-PER"]);
    }

    #[test]
    fn docstart_only_is_empty() {
        let c = parse("-DOCSTART- -X- -X- O\n\n-DOCSTART- -X- -X- O\n\n\n").unwrap();
        assert!(c.is_empty());
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn crlf_and_multiple_blanks() {
        let c =
            parse("EU NNP B-NP B-ORG\r\nrejects VBZ B-VP O\r\n\r\n\r\nGerman JJ B-NP B-MISC\r\n")
                .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[1].labels, vec!["B-MISC"]);
        assert_eq!(c.token_count(), 3);
    }

    #[test]
    fn ragged_line_reports_line_number() {
        match parse("a x O\nb O\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_label_column() {
        let layout = ColumnLayout {
            token: 0,
            label: Some(1),
        };
        let c = parse_conll_str("w NN B-NP\n", Path::new("mem"), layout, true).unwrap();
        assert_eq!(c.sentences[0].labels, vec!["NN"]);
        let bad = ColumnLayout {
            token: 0,
            label: Some(5),
        };
        assert!(parse_conll_str("w NN B-NP\n", Path::new("mem"), bad, true).is_err());
    }

    #[test]
    fn token_only_files() {
        let c = parse_conll_str(
            "one\ntwo\n\nthree\n",
            Path::new("mem"),
            ColumnLayout::default(),
            false,
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.sentences[0].labels.is_empty());
        assert!(parse("one\ntwo\n").is_err());
    }
}
