//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::batch::EncodedSentence;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, VocabSizes};
use crate::tape::Fault;
use crate::tensor::{Gradients, ParamId, ParamSet};

/// Default pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter; small parameters are checked in full.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples_per_param: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

/// Smallest denominator in [`relative_error`]. Central differences with
/// `eps = 1e-5` on an O(1) loss carry roughly 1e-11 of rounding noise, so
/// gradients much smaller than this floor are judged by absolute error.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, DENOMINATOR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare `gradient(params)` against central differences of `loss` for
/// every parameter in `ids`. `params` is restored bit-exactly afterwards.
pub fn grad_check<F, G>(
    params: &mut ParamSet,
    ids: &[ParamId],
    loss: F,
    gradient: G,
    cfg: &GradCheckConfig,
) -> Result<Vec<GroupReport>>
where
    F: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<Gradients>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Domain(format!(
            "eps must be positive, got {}",
            cfg.eps
        )));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let v = loss(p)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective returned {v}")));
        }
        Ok(v)
    };
    eval(params)?;
    let grads = gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(ids.len());

    for &id in ids {
        let analytic = grads.dense_for(params, id);
        let numel = analytic.len();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            let mut picked = sample(&mut rng, numel, cfg.samples_per_param).into_vec();
            picked.sort_unstable();
            picked
        };

        let mut worst = (0.0f64, 0usize);
        for &i in &coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let err = relative_error(analytic[i], numeric);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        reports.push(GroupReport {
            name: params.name(id).to_string(),
            max_rel_error: worst.0,
            coords_checked: coords.len(),
            worst_index: worst.1,
        });
    }
    Ok(reports)
}

/// Model size for [`check_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSize {
    /// `d_c = 4, n_f = 4, d_w = 8, h = 8`, 5 tags, 3 tokens.
    Tiny,
    /// `d_c = 8, n_f = 8, d_w = 16, h = 16`, 7 tags, 6 tokens.
    Small,
}

impl ModelSize {
    /// Finite-difference step. The larger model has longer recurrences and
    /// more sub-1e-6 gradients, where a wider step keeps rounding noise down.
    pub fn eps(self) -> f64 {
        match self {
            ModelSize::Tiny => 1e-5,
            ModelSize::Small => 1e-4,
        }
    }
}

impl std::str::FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ModelSize::Tiny),
            "small" => Ok(ModelSize::Small),
            other => Err(Error::Config(format!(
                "unknown size {other:?} (tiny|small)"
            ))),
        }
    }
}

/// Randomly initialized model, a random labeled sentence and the whole
/// parameter set, all drawn from `seed`.
pub fn model_fixture(size: ModelSize, seed: u64) -> Result<(Network, ParamSet, EncodedSentence)> {
    let (dc, nf, dw, h, tags, n) = match size {
        ModelSize::Tiny => (4, 4, 8, 8, 5, 3),
        ModelSize::Small => (8, 8, 16, 16, 7, 6),
    };
    let config = ModelConfig {
        char_dim: dc,
        num_filters: nf,
        word_dim: dw,
        hidden_dim: h,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let sizes = VocabSizes {
        words: 10,
        chars: 12,
        tags,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, params) = Network::initialize(&config, sizes, None, &mut rng)?;
    let sentence = EncodedSentence {
        words: (0..n).map(|_| rng.random_range(1..sizes.words)).collect(),
        chars: (0..n)
            .map(|_| {
                let m = rng.random_range(1..=5);
                (0..m).map(|_| rng.random_range(1..sizes.chars)).collect()
            })
            .collect(),
        labels: (0..n).map(|_| rng.random_range(0..tags)).collect(),
    };
    Ok((net, params, sentence))
}

/// Check the sentence NLL gradient of every parameter tensor of a fresh
/// model. `fault` corrupts the backward pass (harness self-test).
pub fn check_model(size: ModelSize, seed: u64, fault: Option<Fault>) -> Result<Vec<GroupReport>> {
    let (net, mut params, sentence) = model_fixture(size, seed)?;
    let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
    let cfg = GradCheckConfig {
        eps: size.eps(),
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(
        &mut params,
        &ids,
        |p| net.sentence_loss(p, &sentence),
        |p| Ok(net.sentence_gradients(p, &sentence, None, fault)?.1),
        &cfg,
    )
}
