use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{clip_gradients, Sgd};
use crate::data::batch::{make_batches, EncodedSentence};
use crate::data::{Task, Vocabs};
use crate::error::{Error, Result};
use crate::eval::{entity_f1, token_accuracy};
use crate::exec::Execution;
use crate::model::{Network, VocabSizes};
use crate::tensor::{ParamSet, Tensor};

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

/// Strict-improvement early stopping.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record an epoch's metric; true when it beats every earlier one.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Dev-set metric: entity F1 for NER, token accuracy for POS.
pub fn dev_metric(
    network: &Network,
    params: &ParamSet,
    vocabs: &Vocabs,
    task: Task,
    dev: &[EncodedSentence],
    mode: Execution,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let pred_ids = network.decode_all(params, dev, None, mode)?;
    let label = |ids: &[usize]| -> Vec<String> {
        ids.iter()
            .map(|&i| vocabs.labels.label(i).to_string())
            .collect()
    };
    let pred: Vec<Vec<String>> = pred_ids.iter().map(|p| label(p)).collect();
    let gold: Vec<Vec<String>> = dev.iter().map(|s| label(&s.labels)).collect();
    match task {
        Task::Ner => Ok(entity_f1(&gold, &pred)?.overall.f1),
        Task::Pos => token_accuracy(&gold, &pred),
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub skipped_batches: usize,
}

/// Observer called after every epoch with the record and, when the epoch
/// improved on the best dev metric, the new best checkpoint.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, Option<&Checkpoint>) -> Result<()> + 'a;

/// Mini-batch SGD with momentum, clipping and early stopping on the dev
/// metric. All randomness derives from `config.seed`.
pub fn train_loop(
    config: &TrainConfig,
    vocabs: &Vocabs,
    pretrained: Option<Tensor>,
    train: &[EncodedSentence],
    dev: &[EncodedSentence],
    mode: Execution,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (network, mut params) =
        Network::initialize(&config.model, VocabSizes::of(vocabs), pretrained, &mut rng)?;
    let mut opt = Sgd::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut skipped = 0;

    for epoch in 1..=config.max_epochs {
        let shuffle_seed = rng.next_u64();
        let dropout_seed = rng.next_u64();
        let lr = config.learning_rate_at(epoch);
        let batches = make_batches(train, config.batch_size, Some(shuffle_seed))?;
        let (mut loss_sum, mut seen, mut failed) = (0.0, 0usize, 0usize);

        for (bi, batch) in batches.iter().enumerate() {
            let members: Vec<EncodedSentence> =
                (0..batch.size()).map(|r| batch.sentence(r)).collect();
            let stream = (bi * config.batch_size) as u64;
            let step = network
                .batch_gradients(&params, &members, Some((dropout_seed, stream)), mode)
                .and_then(|(loss, grads)| {
                    params.zero_grad();
                    params.accumulate(&grads);
                    clip_gradients(&mut params, config.clip_norm)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => {
                    opt.step(&mut params, lr, config.momentum);
                    loss_sum += loss * members.len() as f64;
                    seen += members.len();
                }
                Err(Error::Numeric(msg)) => {
                    warn!("epoch {epoch} batch {bi}: skipped ({msg})");
                    params.zero_grad();
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
        skipped += failed;
        if failed == batches.len() {
            return Err(Error::Numeric(format!(
                "every batch of epoch {epoch} failed"
            )));
        }

        let metric = dev_metric(&network, &params, vocabs, config.task, dev, mode)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            dev_metric: metric,
        };
        info!(
            "epoch {epoch}: train_loss {:.6} dev_metric {:.4}",
            record.train_loss, record.dev_metric
        );
        let improved = stopper.update(epoch, metric);
        if improved {
            best = Some(Checkpoint {
                config: config.clone(),
                vocabs: vocabs.clone(),
                params: params.clone(),
                best_metric: metric,
                epoch,
            });
        }
        on_epoch(&record, if improved { best.as_ref() } else { None })?;
        history.push(record);
        if stopper.should_stop() {
            info!(
                "no dev improvement for {} epochs; best epoch {}",
                config.patience, stopper.best_epoch
            );
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.expect("first epoch always improves"),
        history,
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_patience_epochs_after_peak() {
        let mut s = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            let metric = if epoch <= 7 { epoch as f64 * 0.1 } else { 0.7 };
            s.update(epoch, metric);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(17));
        assert_eq!(s.best_epoch, 7);
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopping::new(2);
        assert!(s.update(1, 0.5));
        assert!(!s.update(2, 0.5));
        assert!(!s.update(3, 0.4));
        assert!(s.should_stop());
    }
}
