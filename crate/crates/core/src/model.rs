//! The full tagger: encoder + emission layer + CRF (or per-token softmax).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{
    constrained_decode, tape_neg_log_likelihood, viterbi_decode, CrfParamIds, CrfParams, CrfVars,
    EmissionTable, TransitionMask,
};
use crate::data::batch::EncodedSentence;
use crate::data::embeddings::random_embeddings;
use crate::data::{encode_sentence, Sentence, Vocabs};
use crate::encoder::{
    bilstm_forward, embed_tokens, emissions, glorot_uniform, lstm_bias, CharCnn, Dropout,
    EmissionLayer, LstmCell,
};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::tape::{Fault, Tape, Var};
use crate::tensor::{Gradients, ParamId, ParamSet, Tensor};

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub char_dim: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub use_char_cnn: bool,
    pub use_bilstm: bool,
    pub use_crf: bool,
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            char_dim: 30,
            num_filters: 30,
            kernel_size: 3,
            word_dim: 100,
            hidden_dim: 100,
            dropout: 0.5,
            use_char_cnn: true,
            use_bilstm: true,
            use_crf: true,
            freeze_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("char_dim", self.char_dim),
            ("num_filters", self.num_filters),
            ("kernel_size", self.kernel_size),
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of the per-token input `[r^w ; r^c]`.
    pub fn input_dim(&self) -> usize {
        self.word_dim
            + if self.use_char_cnn {
                self.num_filters
            } else {
                0
            }
    }

    fn feature_dim(&self) -> usize {
        if self.use_bilstm {
            2 * self.hidden_dim
        } else {
            self.input_dim()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabSizes {
    pub words: usize,
    pub chars: usize,
    pub tags: usize,
}

impl VocabSizes {
    pub fn of(vocabs: &Vocabs) -> Self {
        VocabSizes {
            words: vocabs.words.len(),
            chars: vocabs.chars.len(),
            tags: vocabs.labels.len(),
        }
    }
}

/// Parameter layout of a tagger. Holds ids only; values live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub sizes: VocabSizes,
    pub word_embeddings: ParamId,
    pub char_cnn: Option<CharCnn>,
    pub lstm: Option<(LstmCell, LstmCell)>,
    pub emission: EmissionLayer,
    pub crf: Option<CrfParamIds>,
}

/// Every parameter name with its expected shape, in storage order.
pub fn parameter_layout(config: &ModelConfig, sizes: VocabSizes) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![(
        "word.embeddings".to_string(),
        vec![sizes.words, config.word_dim],
    )];
    if config.use_char_cnn {
        out.push(("char.embeddings".into(), vec![sizes.chars, config.char_dim]));
        out.push((
            "char.conv.weight".into(),
            vec![config.num_filters, config.kernel_size * config.char_dim],
        ));
        out.push(("char.conv.bias".into(), vec![config.num_filters]));
    }
    if config.use_bilstm {
        let (d, h) = (config.input_dim(), config.hidden_dim);
        for dir in ["fwd", "bwd"] {
            out.push((format!("lstm.{dir}.w_input"), vec![4 * h, d]));
            out.push((format!("lstm.{dir}.w_hidden"), vec![4 * h, h]));
            out.push((format!("lstm.{dir}.bias"), vec![4 * h]));
        }
    }
    out.push((
        "emission.weight".into(),
        vec![sizes.tags, config.feature_dim()],
    ));
    out.push(("emission.bias".into(), vec![sizes.tags]));
    if config.use_crf {
        out.push(("crf.transitions".into(), vec![sizes.tags, sizes.tags]));
        out.push(("crf.begin".into(), vec![sizes.tags]));
        out.push(("crf.end".into(), vec![sizes.tags]));
    }
    out
}

fn crf_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

impl Network {
    /// Fresh parameters. `pretrained` replaces the random word embedding
    /// matrix when given.
    pub fn initialize<R: Rng>(
        config: &ModelConfig,
        sizes: VocabSizes,
        pretrained: Option<Tensor>,
        rng: &mut R,
    ) -> Result<(Network, ParamSet)> {
        config.validate()?;
        if sizes.tags == 0 {
            return Err(Error::Config("label set is empty".into()));
        }
        let mut params = ParamSet::new();
        for (name, shape) in parameter_layout(config, sizes) {
            let t = match name.as_str() {
                "word.embeddings" => match &pretrained {
                    Some(p) if p.shape() != shape.as_slice() => {
                        return Err(Error::dim("pretrained embeddings", p.shape(), &shape));
                    }
                    Some(p) => p.clone(),
                    None => random_embeddings(shape[0], shape[1], rng),
                },
                "char.embeddings" => random_embeddings(shape[0], shape[1], rng),
                n if n.ends_with("bias") && n.starts_with("lstm") => lstm_bias(config.hidden_dim),
                n if n.ends_with("bias") => Tensor::zeros(&shape),
                n if n.starts_with("crf") => crf_uniform(&shape, rng),
                _ => glorot_uniform(shape[0], shape[1], rng),
            };
            params.insert(&name, t);
        }
        if config.freeze_embeddings {
            let id = params.id("word.embeddings").expect("always present");
            params.get_mut(id).set_requires_grad(false);
        }
        let net = Network::bind(config, sizes, &params)?;
        Ok((net, params))
    }

    /// Resolve parameter ids by name, checking every shape.
    pub fn bind(config: &ModelConfig, sizes: VocabSizes, params: &ParamSet) -> Result<Network> {
        let layout = parameter_layout(config, sizes);
        if layout.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let t = params
                .by_name(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let char_cnn = config.use_char_cnn.then(|| CharCnn {
            embeddings: id("char.embeddings"),
            weight: id("char.conv.weight"),
            bias: id("char.conv.bias"),
            kernel: config.kernel_size,
            padding: config.kernel_size - 1,
        });
        let cell = |dir: &str| LstmCell {
            w_input: id(&format!("lstm.{dir}.w_input")),
            w_hidden: id(&format!("lstm.{dir}.w_hidden")),
            bias: id(&format!("lstm.{dir}.bias")),
        };
        let lstm = config.use_bilstm.then(|| (cell("fwd"), cell("bwd")));
        let crf = config.use_crf.then(|| CrfParamIds {
            transitions: id("crf.transitions"),
            begin: id("crf.begin"),
            end: id("crf.end"),
        });
        Ok(Network {
            config: config.clone(),
            sizes,
            word_embeddings: id("word.embeddings"),
            char_cnn,
            lstm,
            emission: EmissionLayer {
                weight: id("emission.weight"),
                bias: id("emission.bias"),
            },
            crf,
        })
    }

    /// Emission scores `[n, |T|]`. Dropout is active iff `dropout` is given.
    pub fn emissions(
        &self,
        tape: &mut Tape<'_>,
        s: &EncodedSentence,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if s.is_empty() {
            return Err(Error::Domain("empty sentence".into()));
        }
        let x = embed_tokens(
            tape,
            self.word_embeddings,
            &s.words,
            &s.chars,
            self.char_cnn.as_ref(),
            dropout.as_deref_mut(),
        )?;
        let h = match &self.lstm {
            Some((f, b)) => bilstm_forward(tape, f, b, x, dropout)?,
            None => x,
        };
        emissions(tape, &self.emission, h)
    }

    /// Sentence loss: CRF negative log-likelihood, or summed token
    /// cross-entropy without the CRF.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        s: &EncodedSentence,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if s.labels.len() != s.len() {
            return Err(Error::Contract(format!(
                "{} labels for {} tokens",
                s.labels.len(),
                s.len()
            )));
        }
        let em = self.emissions(tape, s, dropout)?;
        match &self.crf {
            Some(ids) => {
                let crf = CrfVars::from_params(tape, ids);
                tape_neg_log_likelihood(tape, em, &s.labels, &crf)
            }
            None => {
                let t = self.sizes.tags;
                if let Some(&y) = s.labels.iter().find(|&&y| y >= t) {
                    return Err(Error::Contract(format!("label index {y} outside {t} tags")));
                }
                let lse = tape.logsumexp(em, 1)?;
                let idx: Vec<usize> = s
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| i * t + y)
                    .collect();
                let gold = tape.select(em, &idx)?;
                let per_token = tape.sub(lse, gold)?;
                tape.sum(per_token)
            }
        }
    }

    /// Loss value with dropout off.
    pub fn sentence_loss(&self, params: &ParamSet, s: &EncodedSentence) -> Result<f64> {
        let mut tape = Tape::new(params);
        let l = self.loss(&mut tape, s, None)?;
        Ok(tape.scalar(l))
    }

    /// Loss and parameter gradients for one sentence.
    pub fn sentence_gradients(
        &self,
        params: &ParamSet,
        s: &EncodedSentence,
        dropout: Option<Dropout>,
        fault: Option<Fault>,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(params).with_fault(fault);
        let mut dropout = dropout;
        let l = self.loss(&mut tape, s, dropout.as_mut())?;
        let grads = tape.backward(l)?;
        Ok((tape.scalar(l), grads))
    }

    /// Mean loss and mean gradient over a batch. Sentences may be processed
    /// in parallel; the reduction always runs in batch order so the result
    /// does not depend on scheduling. Sentence `i` draws its dropout mask
    /// from stream `stream_base + i` of `seed`.
    pub fn batch_gradients(
        &self,
        params: &ParamSet,
        batch: &[EncodedSentence],
        dropout_seed: Option<(u64, u64)>,
        mode: Execution,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let rate = self.config.dropout;
        let per = exec::try_map(mode, batch, |i, s| {
            let d = dropout_seed.map(|(seed, base)| Dropout::new(rate, seed, base + i as u64));
            self.sentence_gradients(params, s, d, None)
        })?;
        let mut total = Gradients::new();
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += l;
            total.add_assign(g);
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv);
        Ok((loss * inv, total))
    }

    /// Emission scores for inference (dropout off).
    pub fn emission_table(&self, params: &ParamSet, s: &EncodedSentence) -> Result<EmissionTable> {
        let mut tape = Tape::new(params);
        let em = self.emissions(&mut tape, s, None)?;
        EmissionTable::new(s.len(), self.sizes.tags, tape.value(em).to_vec())
    }

    /// Best tag sequence: Viterbi with the CRF, per-token argmax without.
    /// A mask restricts the search to admissible sequences.
    pub fn decode(
        &self,
        params: &ParamSet,
        s: &EncodedSentence,
        mask: Option<&TransitionMask>,
    ) -> Result<Vec<usize>> {
        let em = self.emission_table(params, s)?;
        let crf = match &self.crf {
            Some(ids) => ids.read(params)?,
            None => CrfParams::zeros(self.sizes.tags),
        };
        match mask {
            Some(m) => constrained_decode(&em, &crf, m),
            None => Ok(viterbi_decode(&em, &crf)?.0),
        }
    }

    pub fn decode_all(
        &self,
        params: &ParamSet,
        sentences: &[EncodedSentence],
        mask: Option<&TransitionMask>,
        mode: Execution,
    ) -> Result<Vec<Vec<usize>>> {
        exec::try_map(mode, sentences, |_, s| self.decode(params, s, mask))
    }
}

/// A trained model with the vocabularies needed to tag raw text.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub network: Network,
    pub params: ParamSet,
    pub vocabs: Vocabs,
}

impl Tagger {
    /// Predicted label strings for each sentence; empty sentences stay empty.
    pub fn tag(
        &self,
        sentences: &[Sentence],
        constrained: bool,
        mode: Execution,
    ) -> Result<Vec<Vec<String>>> {
        let mask = if constrained {
            Some(TransitionMask::bioes(self.vocabs.labels.labels())?)
        } else {
            None
        };
        let encoded = sentences
            .iter()
            .map(|s| encode_sentence(s, &self.vocabs, false))
            .collect::<Result<Vec<_>>>()?;
        let ids = exec::try_map(mode, &encoded, |_, s| {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                self.network.decode(&self.params, s, mask.as_ref())
            }
        })?;
        Ok(ids
            .into_iter()
            .map(|seq| {
                seq.into_iter()
                    .map(|i| self.vocabs.labels.label(i).to_string())
                    .collect()
            })
            .collect())
    }
}
