//! Linear-chain CRF over per-token emission scores.
//!
//! A tag sequence `y` of length `n` scores
//!
//! ```text
//! score(y) = sum_i s_i[y_i] + sum_i T[y_i, y_{i+1}] + b[y_1] + e[y_n]
//! ```
//!
//! with transitions indexed `T[from, to]`. `log_partition` runs the forward
//! recursion in log space, `viterbi_decode` the matching max-product
//! recursion. The `tape_*` functions build the same quantities on an
//! autodiff [`Tape`] for training. [`oracle`] enumerates every sequence and
//! exists to check the dynamic programs.

use crate::data::scheme::{bioes_allows, Tag};
use crate::error::{Error, Result};
use crate::tape::{logsumexp_slice, Tape, Var};
use crate::tensor::{ParamId, ParamSet};

/// Transition, begin and end scores over `num_tags` tags.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    num_tags: usize,
    /// Row-major `[from, to]`.
    transitions: Vec<f64>,
    begin: Vec<f64>,
    end: Vec<f64>,
}

impl CrfParams {
    pub fn new(
        num_tags: usize,
        transitions: Vec<f64>,
        begin: Vec<f64>,
        end: Vec<f64>,
    ) -> Result<Self> {
        if transitions.len() != num_tags * num_tags {
            return Err(Error::dim(
                "CrfParams",
                &[num_tags, num_tags],
                &[transitions.len()],
            ));
        }
        if begin.len() != num_tags || end.len() != num_tags {
            return Err(Error::dim(
                "CrfParams",
                &[num_tags],
                &[begin.len(), end.len()],
            ));
        }
        if transitions
            .iter()
            .chain(&begin)
            .chain(&end)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite CRF parameter".into()));
        }
        Ok(CrfParams {
            num_tags,
            transitions,
            begin,
            end,
        })
    }

    pub fn zeros(num_tags: usize) -> Self {
        CrfParams {
            num_tags,
            transitions: vec![0.0; num_tags * num_tags],
            begin: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.num_tags + to]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    pub fn begin(&self) -> &[f64] {
        &self.begin
    }

    pub fn end(&self) -> &[f64] {
        &self.end
    }
}

/// `n x |T|` emission scores; row `i` scores every tag at position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionTable {
    len: usize,
    num_tags: usize,
    scores: Vec<f64>,
}

impl EmissionTable {
    pub fn new(len: usize, num_tags: usize, scores: Vec<f64>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Domain(
                "emission table needs at least one row".into(),
            ));
        }
        if scores.len() != len * num_tags {
            return Err(Error::dim(
                "EmissionTable",
                &[len, num_tags],
                &[scores.len()],
            ));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite emission score".into()));
        }
        Ok(EmissionTable {
            len,
            num_tags,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_tags..(i + 1) * self.num_tags]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Copy with `c` added to every score in row `i`.
    pub fn shifted_row(&self, i: usize, c: f64) -> Self {
        let mut out = self.clone();
        let t = self.num_tags;
        out.scores[i * t..(i + 1) * t]
            .iter_mut()
            .for_each(|v| *v += c);
        out
    }
}

fn check_compatible(em: &EmissionTable, p: &CrfParams) -> Result<()> {
    if em.num_tags != p.num_tags {
        return Err(Error::dim("crf", &[em.num_tags], &[p.num_tags]));
    }
    Ok(())
}

fn check_tags(em: &EmissionTable, tags: &[usize]) -> Result<()> {
    if tags.len() != em.len {
        return Err(Error::Contract(format!(
            "tag sequence has {} entries for {} positions",
            tags.len(),
            em.len
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= em.num_tags) {
        return Err(Error::Contract(format!(
            "tag index {bad} out of range for {} tags",
            em.num_tags
        )));
    }
    Ok(())
}

/// Global score of one tag sequence.
pub fn sequence_score(em: &EmissionTable, tags: &[usize], p: &CrfParams) -> Result<f64> {
    check_compatible(em, p)?;
    check_tags(em, tags)?;
    let emission: f64 = tags.iter().enumerate().map(|(i, &y)| em.row(i)[y]).sum();
    let transition: f64 = tags.windows(2).map(|w| p.transition(w[0], w[1])).sum();
    Ok(emission + transition + p.begin[tags[0]] + p.end[tags[em.len - 1]])
}

/// Log of the sum of `exp(score)` over every tag sequence (forward algorithm).
pub fn log_partition(em: &EmissionTable, p: &CrfParams) -> Result<f64> {
    check_compatible(em, p)?;
    let t = p.num_tags;
    let mut alpha: Vec<f64> = (0..t).map(|j| p.begin[j] + em.row(0)[j]).collect();
    let mut next = vec![0.0; t];
    let mut terms = vec![0.0; t];
    for i in 1..em.len {
        let row = em.row(i);
        for j in 0..t {
            for k in 0..t {
                terms[k] = alpha[k] + p.transition(k, j);
            }
            next[j] = row[j] + logsumexp_slice(&terms);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    for j in 0..t {
        terms[j] = alpha[j] + p.end[j];
    }
    Ok(logsumexp_slice(&terms))
}

/// `log Z - score(gold)`, never negative.
pub fn neg_log_likelihood(em: &EmissionTable, gold: &[usize], p: &CrfParams) -> Result<f64> {
    let score = sequence_score(em, gold, p)?;
    let log_z = log_partition(em, p)?;
    // Rounding can push a near-certain sequence a hair below zero.
    Ok((log_z - score).max(0.0))
}

/// Allowed transitions, plus which tags may open and close a sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMask {
    num_tags: usize,
    allowed: Vec<bool>,
    begin: Vec<bool>,
    end: Vec<bool>,
}

impl TransitionMask {
    pub fn allow_all(num_tags: usize) -> Self {
        TransitionMask {
            num_tags,
            allowed: vec![true; num_tags * num_tags],
            begin: vec![true; num_tags],
            end: vec![true; num_tags],
        }
    }

    pub fn new(
        num_tags: usize,
        allowed: Vec<bool>,
        begin: Vec<bool>,
        end: Vec<bool>,
    ) -> Result<Self> {
        if allowed.len() != num_tags * num_tags || begin.len() != num_tags || end.len() != num_tags
        {
            return Err(Error::dim(
                "TransitionMask",
                &[num_tags, num_tags],
                &[allowed.len()],
            ));
        }
        Ok(TransitionMask {
            num_tags,
            allowed,
            begin,
            end,
        })
    }

    /// Well-formedness mask for a BIOES label set.
    pub fn bioes<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let tags = labels
            .iter()
            .map(|l| Tag::parse(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let n = tags.len();
        let mut allowed = vec![false; n * n];
        for (i, from) in tags.iter().enumerate() {
            for (j, to) in tags.iter().enumerate() {
                allowed[i * n + j] = bioes_allows(Some(from), Some(to));
            }
        }
        let begin = tags.iter().map(|t| bioes_allows(None, Some(t))).collect();
        let end = tags.iter().map(|t| bioes_allows(Some(t), None)).collect();
        Ok(TransitionMask {
            num_tags: n,
            allowed,
            begin,
            end,
        })
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.num_tags + to]
    }

    pub fn allows_begin(&self, tag: usize) -> bool {
        self.begin[tag]
    }

    pub fn allows_end(&self, tag: usize) -> bool {
        self.end[tag]
    }

    pub fn set(&mut self, from: usize, to: usize, allowed: bool) {
        self.allowed[from * self.num_tags + to] = allowed;
    }

    pub fn set_begin(&mut self, tag: usize, allowed: bool) {
        self.begin[tag] = allowed;
    }

    pub fn set_end(&mut self, tag: usize, allowed: bool) {
        self.end[tag] = allowed;
    }

    /// Whether every transition in `tags` (and both boundaries) is allowed.
    pub fn admits(&self, tags: &[usize]) -> bool {
        match (tags.first(), tags.last()) {
            (Some(&f), Some(&l)) => {
                self.begin[f] && self.end[l] && tags.windows(2).all(|w| self.allows(w[0], w[1]))
            }
            _ => true,
        }
    }
}

/// Max-product recursion shared by plain and masked decoding. Masked cells
/// score `-inf`; returns `None` when every path is masked.
fn viterbi_core(
    em: &EmissionTable,
    p: &CrfParams,
    mask: Option<&TransitionMask>,
) -> Option<(Vec<usize>, f64)> {
    let t = p.num_tags;
    let n = em.len;
    let ok_begin = |j: usize| mask.is_none_or(|m| m.allows_begin(j));
    let ok_end = |j: usize| mask.is_none_or(|m| m.allows_end(j));
    let ok = |i: usize, j: usize| mask.is_none_or(|m| m.allows(i, j));

    let mut delta: Vec<f64> = (0..t)
        .map(|j| {
            if ok_begin(j) {
                p.begin[j] + em.row(0)[j]
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut backptr = vec![0usize; n * t];
    let mut next = vec![f64::NEG_INFINITY; t];

    for i in 1..n {
        let row = em.row(i);
        for j in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (k, &dk) in delta.iter().enumerate() {
                if !ok(k, j) || dk == f64::NEG_INFINITY {
                    continue;
                }
                let cand = dk + p.transition(k, j);
                if cand > best {
                    best = cand;
                    arg = k;
                }
            }
            next[j] = if best == f64::NEG_INFINITY {
                best
            } else {
                best + row[j]
            };
            backptr[i * t + j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, &dj) in delta.iter().enumerate() {
        if !ok_end(j) || dj == f64::NEG_INFINITY {
            continue;
        }
        let cand = dj + p.end[j];
        if cand > best {
            best = cand;
            last = j;
        }
    }
    if best == f64::NEG_INFINITY {
        return None;
    }

    let mut path = vec![0usize; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = backptr[i * t + path[i]];
    }
    Some((path, best))
}

/// Highest-scoring tag sequence and its score. Ties go to the lowest tag
/// index at every step.
pub fn viterbi_decode(em: &EmissionTable, p: &CrfParams) -> Result<(Vec<usize>, f64)> {
    check_compatible(em, p)?;
    Ok(viterbi_core(em, p, None).expect("unmasked lattice always has a path"))
}

/// Viterbi restricted to sequences the mask admits.
pub fn constrained_decode(
    em: &EmissionTable,
    p: &CrfParams,
    mask: &TransitionMask,
) -> Result<Vec<usize>> {
    check_compatible(em, p)?;
    if mask.num_tags != p.num_tags {
        return Err(Error::dim(
            "constrained_decode",
            &[mask.num_tags],
            &[p.num_tags],
        ));
    }
    viterbi_core(em, p, Some(mask))
        .map(|(path, _)| path)
        .ok_or(Error::Infeasible)
}

/// Parameter ids of the CRF inside a model's [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrfParamIds {
    pub transitions: ParamId,
    pub begin: ParamId,
    pub end: ParamId,
}

impl CrfParamIds {
    pub fn read(&self, params: &ParamSet) -> Result<CrfParams> {
        let t = params.get(self.begin).numel();
        CrfParams::new(
            t,
            params.get(self.transitions).data().to_vec(),
            params.get(self.begin).data().to_vec(),
            params.get(self.end).data().to_vec(),
        )
    }
}

/// CRF parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CrfVars {
    pub transitions: Var,
    pub begin: Var,
    pub end: Var,
}

impl CrfVars {
    pub fn from_params(tape: &mut Tape<'_>, ids: &CrfParamIds) -> Self {
        CrfVars {
            transitions: tape.param(ids.transitions),
            begin: tape.param(ids.begin),
            end: tape.param(ids.end),
        }
    }
}

fn tape_dims(tape: &Tape<'_>, emissions: Var, crf: &CrfVars) -> Result<(usize, usize)> {
    let (n, t) = match *tape.shape(emissions) {
        [n, t] => (n, t),
        ref s => {
            return Err(Error::Contract(format!(
                "emissions must be a matrix, got {s:?}"
            )))
        }
    };
    if n == 0 {
        return Err(Error::Domain(
            "emission table needs at least one row".into(),
        ));
    }
    if tape.shape(crf.transitions) != [t, t]
        || tape.value(crf.begin).len() != t
        || tape.value(crf.end).len() != t
    {
        return Err(Error::dim(
            "crf",
            tape.shape(emissions),
            tape.shape(crf.transitions),
        ));
    }
    Ok((n, t))
}

/// Differentiable sequence score.
pub fn tape_sequence_score(
    tape: &mut Tape<'_>,
    emissions: Var,
    tags: &[usize],
    crf: &CrfVars,
) -> Result<Var> {
    let (n, t) = tape_dims(tape, emissions, crf)?;
    if tags.len() != n || tags.iter().any(|&y| y >= t) {
        return Err(Error::Contract(format!(
            "tag sequence {tags:?} invalid for {n} positions and {t} tags"
        )));
    }
    let em_idx: Vec<usize> = tags.iter().enumerate().map(|(i, &y)| i * t + y).collect();
    let em = tape.select(emissions, &em_idx)?;
    let mut parts = vec![em];
    if n > 1 {
        let tr_idx: Vec<usize> = tags.windows(2).map(|w| w[0] * t + w[1]).collect();
        parts.push(tape.select(crf.transitions, &tr_idx)?);
    }
    parts.push(tape.select(crf.begin, &[tags[0]])?);
    parts.push(tape.select(crf.end, &[tags[n - 1]])?);
    let all = tape.concat_cols(&parts)?;
    tape.sum(all)
}

/// Differentiable forward algorithm.
pub fn tape_log_partition(tape: &mut Tape<'_>, emissions: Var, crf: &CrfVars) -> Result<Var> {
    let (n, t) = tape_dims(tape, emissions, crf)?;
    let first = tape.slice_rows(emissions, 0, 1)?;
    let first = tape.reshape(first, &[t])?;
    let mut alpha = tape.add(first, crf.begin)?;
    for i in 1..n {
        // scores[k, j] = alpha[k] + T[k, j]; reduce over k.
        let scores = tape.add_col(crf.transitions, alpha)?;
        let reduced = tape.logsumexp(scores, 0)?;
        let row = tape.slice_rows(emissions, i, 1)?;
        let row = tape.reshape(row, &[t])?;
        alpha = tape.add(reduced, row)?;
    }
    let last = tape.add(alpha, crf.end)?;
    tape.logsumexp(last, 0)
}

/// Differentiable negative log-likelihood of `gold`.
pub fn tape_neg_log_likelihood(
    tape: &mut Tape<'_>,
    emissions: Var,
    gold: &[usize],
    crf: &CrfVars,
) -> Result<Var> {
    let score = tape_sequence_score(tape, emissions, gold, crf)?;
    let log_z = tape_log_partition(tape, emissions, crf)?;
    tape.sub(log_z, score)
}

pub mod oracle {
    //! Exhaustive enumeration over all `|T|^n` tag sequences.

    use super::*;

    /// Largest lattice the oracle will enumerate.
    pub const MAX_SEQUENCES: u128 = 1_000_000;

    #[derive(Clone, Debug)]
    pub struct Enumeration {
        pub log_z: f64,
        pub best: Vec<usize>,
        pub best_score: f64,
        /// Every sequence in lexicographic order with its probability.
        pub distribution: Vec<(Vec<usize>, f64)>,
    }

    impl Enumeration {
        /// Posterior `P(y_i = j)` as an `n x |T|` row-major table.
        pub fn marginals(&self, num_tags: usize) -> Vec<f64> {
            let n = self.best.len();
            let mut out = vec![0.0; n * num_tags];
            for (seq, prob) in &self.distribution {
                for (i, &y) in seq.iter().enumerate() {
                    out[i * num_tags + y] += prob;
                }
            }
            out
        }

        pub fn probability(&self, tags: &[usize]) -> Option<f64> {
            self.distribution
                .iter()
                .find(|(s, _)| s.as_slice() == tags)
                .map(|(_, p)| *p)
        }
    }

    /// Score every sequence with [`sequence_score`] and normalize.
    pub fn enumerate_oracle(em: &EmissionTable, p: &CrfParams) -> Result<Enumeration> {
        check_compatible(em, p)?;
        let t = p.num_tags();
        let n = em.len();
        let total = (t as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
        if total > MAX_SEQUENCES {
            return Err(Error::TooLarge(total));
        }

        if t == 0 {
            return Err(Error::Domain("no tags to enumerate".into()));
        }

        let mut scored = Vec::with_capacity(total as usize);
        let mut seq = vec![0usize; n];
        loop {
            scored.push((seq.clone(), sequence_score(em, &seq, p)?));
            // Odometer increment, last position fastest.
            let mut wrapped = true;
            for pos in (0..n).rev() {
                seq[pos] += 1;
                if seq[pos] < t {
                    wrapped = false;
                    break;
                }
                seq[pos] = 0;
            }
            if wrapped {
                break;
            }
        }

        let max = scored
            .iter()
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scored.iter().map(|(_, s)| (s - max).exp()).sum();
        let log_z = max + sum.ln();

        let (best, best_score) =
            scored
                .iter()
                .fold((None, f64::NEG_INFINITY), |(b, bs), (s, sc)| {
                    if *sc > bs {
                        (Some(s.clone()), *sc)
                    } else {
                        (b, bs)
                    }
                });
        let distribution = scored
            .into_iter()
            .map(|(s, sc)| (s, (sc - log_z).exp()))
            .collect();
        Ok(Enumeration {
            log_z,
            best: best.expect("at least one sequence"),
            best_score,
            distribution,
        })
    }
}
