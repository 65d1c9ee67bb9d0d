//! Token encoder: character CNN with max-pooling, word embedding lookup,
//! bidirectional LSTM and the linear emission layer. Everything here records
//! onto a [`Tape`]; parameters are addressed by [`ParamId`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` so
/// inference needs no correction.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Dropout { rate, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Next raw draw, exposed for tests of stream independence.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CharCnn {
    /// `|C| x d_c`.
    pub embeddings: ParamId,
    /// `n_f x (k * d_c)`.
    pub weight: ParamId,
    /// `n_f`.
    pub bias: ParamId,
    pub kernel: usize,
    /// Pad characters added on each side of the word.
    pub padding: usize,
}

impl CharCnn {
    pub fn num_filters(&self, params: &ParamSet) -> usize {
        params.get(self.bias).numel()
    }
}

/// Character representation of one word: embed, pad, convolve with tanh,
/// max-pool over positions, then dropout if active. Output `[n_f]`.
pub fn char_cnn_forward(
    tape: &mut Tape<'_>,
    cnn: &CharCnn,
    chars: &[usize],
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if chars.is_empty() {
        return Err(Error::Domain("word with no characters".into()));
    }
    let mut padded = Vec::with_capacity(chars.len() + 2 * cnn.padding);
    padded.extend(std::iter::repeat_n(PAD, cnn.padding));
    padded.extend_from_slice(chars);
    padded.extend(std::iter::repeat_n(PAD, cnn.padding));

    let emb = tape.gather(cnn.embeddings, &padded)?;
    let windows = tape.unfold(emb, cnn.kernel)?;
    let w = tape.param(cnn.weight);
    let b = tape.param(cnn.bias);
    let pre = tape.linear(windows, w, b)?;
    let act = tape.tanh(pre)?;
    let (pooled, _) = tape.max_over_rows(act)?;
    maybe_dropout(tape, pooled, dropout)
}

/// Input rows `[r^w ; r^c]` for a whole sentence, word part first.
/// Without a CNN the rows are the word embeddings alone.
pub fn embed_tokens(
    tape: &mut Tape<'_>,
    word_embeddings: ParamId,
    words: &[usize],
    chars: &[Vec<usize>],
    cnn: Option<&CharCnn>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let wv = tape.gather(word_embeddings, words)?;
    let Some(cnn) = cnn else { return Ok(wv) };
    if chars.len() != words.len() {
        return Err(Error::Contract(format!(
            "{} character sequences for {} words",
            chars.len(),
            words.len()
        )));
    }
    let reps = chars
        .iter()
        .map(|c| char_cnn_forward(tape, cnn, c, dropout.as_deref_mut()))
        .collect::<Result<Vec<_>>>()?;
    let rc = tape.concat_rows(&reps)?;
    tape.concat_cols(&[wv, rc])
}

/// One LSTM direction. Gate blocks are stacked `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    /// `4h x d`.
    pub w_input: ParamId,
    /// `4h x h`.
    pub w_hidden: ParamId,
    /// `4h`.
    pub bias: ParamId,
}

impl LstmCell {
    pub fn hidden_size(&self, params: &ParamSet) -> usize {
        params.get(self.bias).numel() / 4
    }
}

/// Run one direction over `x: [n, d]` from zero state. Returns `[n, h]`
/// rows in sentence order regardless of direction.
pub fn lstm_forward(tape: &mut Tape<'_>, cell: &LstmCell, x: Var, reverse: bool) -> Result<Var> {
    let h = cell.hidden_size(tape.params());
    let n = tape.shape(x)[0];
    if n == 0 {
        return Err(Error::Domain("empty sequence".into()));
    }
    let w_ih = tape.param(cell.w_input);
    let bias = tape.param(cell.bias);
    let projected = tape.linear(x, w_ih, bias)?;
    let w_hh = tape.param(cell.w_hidden);
    let w_hh_t = tape.transpose(w_hh)?;

    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let mut outputs = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    for &t in &order {
        let mut z = tape.slice_rows(projected, t, 1)?;
        if let Some((h_prev, _)) = state {
            let rec = tape.matmul(h_prev, w_hh_t)?;
            z = tape.add(z, rec)?;
        }
        let zi = tape.slice_cols(z, 0, h)?;
        let zf = tape.slice_cols(z, h, h)?;
        let zg = tape.slice_cols(z, 2 * h, h)?;
        let zo = tape.slice_cols(z, 3 * h, h)?;
        let i = tape.sigmoid(zi)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.sigmoid(zf)?;
            let kept = tape.mul(f, c_prev)?;
            c = tape.add(c, kept)?;
        }
        let tc = tape.tanh(c)?;
        let h_t = tape.mul(o, tc)?;
        outputs[t] = Some(h_t);
        state = Some((h_t, c));
    }
    let rows: Vec<Var> = outputs
        .into_iter()
        .map(|o| o.expect("every step visited"))
        .collect();
    tape.concat_rows(&rows)
}

/// `[n, 2h]` rows `[forward_t ; backward_t]`, dropout on the output if active.
pub fn bilstm_forward(
    tape: &mut Tape<'_>,
    forward: &LstmCell,
    backward: &LstmCell,
    x: Var,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let f = lstm_forward(tape, forward, x, false)?;
    let b = lstm_forward(tape, backward, x, true)?;
    let h = tape.concat_cols(&[f, b])?;
    maybe_dropout(tape, h, dropout)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmissionLayer {
    /// `|T| x d_in`.
    pub weight: ParamId,
    /// `|T|`.
    pub bias: ParamId,
}

/// Tag scores `[n, |T|]`, row `t` is `W h_t + b`.
pub fn emissions(tape: &mut Tape<'_>, layer: &EmissionLayer, h: Var) -> Result<Var> {
    let w = tape.param(layer.weight);
    let b = tape.param(layer.bias);
    tape.linear(h, w, b)
}

/// `uniform(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols)))`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("finite by construction")
}

/// LSTM bias: zeros with the forget-gate block set to 1.
pub fn lstm_bias(hidden: usize) -> Tensor {
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    Tensor::vector(b).expect("finite")
}
