//! Joint training of the adapter (and by default the item head) with the ID
//! model and backbone frozen.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::ADAPTER_PREFIX;
use crate::autodiff::Tape;
use crate::backbone::{HEAD_PREFIX, LLM_PREFIX};
use crate::dataset::{EvalCase, ExperimentData};
use crate::error::{Error, Result};
use crate::eval::{rank_of, Metrics, RankingResult};
use crate::id_model::ID_PREFIX;
use crate::optim::{AdamW, AdamWConfig, LinearDecay};
use crate::stack::{ModelStack, Prepared};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Keep the item head fixed along with the backbone.
    pub freeze_head: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            lr: 5e-4,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            max_steps: None,
            freeze_head: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_p")]
    pub prediction: f64,
    #[serde(rename = "L_m", skip_serializing_if = "Option::is_none", default)]
    pub alignment: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_p")]
    pub prediction: f64,
    #[serde(rename = "L_m", skip_serializing_if = "Option::is_none", default)]
    pub alignment: Option<f64>,
    pub val_hr5: Option<f64>,
    pub val_ndcg5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (the last one without validation).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub id_checksum: String,
    pub llm_checksum: String,
    pub final_checksum: String,
}

/// Ranks prepared validation cases; shared by training and evaluation.
pub fn rank_prepared(stack: &ModelStack, cases: &[Prepared]) -> Result<Vec<RankingResult>> {
    cases
        .iter()
        .map(|c| {
            let logits = stack.logits_prepared(c)?;
            Ok(RankingResult {
                user_id: c.user_id,
                target: c.target,
                rank: rank_of(logits.data(), c.target)?,
                top_k: Vec::new(),
            })
        })
        .collect()
}

/// Parameters of the best validation epoch so far, keyed by HR@5 then
/// NDCG@5.
struct Best {
    key: (f64, f64),
    epoch: usize,
    snapshot: Vec<(String, Tensor)>,
}

/// Sets the freeze bits for joint training.
pub fn freeze_for_training(stack: &mut ModelStack, freeze_head: bool) {
    stack.store.set_frozen_prefix(ID_PREFIX, true);
    stack.store.set_frozen_prefix(LLM_PREFIX, true);
    stack.store.set_frozen_prefix(HEAD_PREFIX, freeze_head);
    stack.store.set_frozen_prefix(ADAPTER_PREFIX, false);
}

/// Trains `stack` in place. With validation cases present, the parameters
/// of the best validation epoch (HR@5, then NDCG@5) are restored at the end.
pub fn train(
    stack: &mut ModelStack,
    data: &ExperimentData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    freeze_for_training(stack, cfg.freeze_head);
    let id_checksum = stack.store.checksum(ID_PREFIX);
    let llm_checksum = stack.store.checksum(LLM_PREFIX);

    let with_clean = cfg.lambda > 0.0;
    let cases = data.training_examples(stack.cfg.id.max_seq_len);
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples = prepare_all(stack, &cases, with_clean)?;
    let validation = prepare_all(stack, &data.validation, false)?;

    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let planned = (cfg.epochs * batches_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let schedule = LinearDecay {
        base_lr: cfg.lr,
        total_steps: planned,
    };
    let mut opt = AdamW::new(cfg.optimizer, &stack.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut steps = Vec::with_capacity(planned);
    let mut epochs = Vec::new();
    let mut best: Option<Best> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_l, mut sum_p, mut sum_m, mut n_steps) = (0.0, 0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if steps.len() >= planned {
                break;
            }
            let log = train_step(
                stack,
                &mut opt,
                &examples,
                batch,
                cfg.lambda,
                schedule.lr_at(steps.len()),
            )?;
            sum_l += log.loss;
            sum_p += log.prediction;
            sum_m += log.alignment.unwrap_or(0.0);
            n_steps += 1;
            steps.push(StepLog {
                step: steps.len(),
                ..log
            });
        }
        if n_steps == 0 {
            break;
        }
        let n = n_steps as f64;
        let val = if validation.is_empty() {
            None
        } else {
            Some(Metrics::from_results(
                &rank_prepared(stack, &validation)?,
                &[5],
            )?)
        };
        let record = EpochLog {
            epoch,
            steps: n_steps,
            loss: sum_l / n,
            prediction: sum_p / n,
            alignment: with_clean.then_some(sum_m / n),
            val_hr5: val.as_ref().map(|m| m.hr_at(5)),
            val_ndcg5: val.as_ref().map(|m| m.ndcg_at(5)),
        };
        info!(
            "epoch {epoch}: L {:.4} L_p {:.4} L_m {} val HR@5 {}",
            record.loss,
            record.prediction,
            record.alignment.map_or("-".into(), |v| format!("{v:.4}")),
            record.val_hr5.map_or("-".into(), |v| format!("{v:.4}")),
        );
        epochs.push(record);

        if let Some(m) = val {
            let key = (m.hr_at(5), m.ndcg_at(5));
            if best.as_ref().is_none_or(|b| key > b.key) {
                best = Some(Best {
                    key,
                    epoch,
                    snapshot: trainable_snapshot(stack),
                });
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    info!("no validation improvement for {since_best} epochs, stopping");
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
        if steps.len() >= planned {
            break;
        }
    }

    let best_epoch = match best {
        Some(Best {
            epoch, snapshot, ..
        }) => {
            stack.store.load_named(&snapshot)?;
            Some(epoch)
        }
        None => epochs.last().map(|e| e.epoch),
    };
    if stack.store.checksum(ID_PREFIX) != id_checksum
        || stack.store.checksum(LLM_PREFIX) != llm_checksum
    {
        return Err(Error::Contract(
            "frozen parameters changed during training".into(),
        ));
    }
    Ok(TrainReport {
        steps,
        epochs,
        best_epoch,
        stopped_early,
        id_checksum,
        llm_checksum,
        final_checksum: stack.trainable_checksum(),
    })
}

fn prepare_all(stack: &ModelStack, cases: &[EvalCase], with_clean: bool) -> Result<Vec<Prepared>> {
    cases.iter().map(|c| stack.prepare(c, with_clean)).collect()
}

fn trainable_snapshot(stack: &ModelStack) -> Vec<(String, Tensor)> {
    let mut out = stack.store.named_tensors(ADAPTER_PREFIX);
    out.extend(stack.store.named_tensors(HEAD_PREFIX));
    out
}

/// Accumulates the batch-mean loss gradient example by example, in batch
/// order, then applies one optimizer step.
pub fn train_step(
    stack: &mut ModelStack,
    opt: &mut AdamW,
    examples: &[Prepared],
    batch: &[usize],
    lambda: f64,
    lr: f64,
) -> Result<StepLog> {
    stack.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let (mut l, mut p, mut m) = (0.0, 0.0, 0.0);
    for &i in batch {
        let mut tape = Tape::new();
        let parts = stack.example_loss(&mut tape, &examples[i], lambda)?;
        l += tape.value(parts.total).item() * scale;
        p += tape.value(parts.prediction).item() * scale;
        if let Some(a) = parts.alignment {
            m += tape.value(a).item() * scale;
        }
        let loss = tape.scale(parts.total, scale);
        let grads = tape.backward(loss)?;
        stack.store.accumulate(&grads);
    }
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("training loss {l}")));
    }
    opt.step(&mut stack.store, lr)?;
    Ok(StepLog {
        step: 0,
        loss: l,
        prediction: p,
        alignment: (lambda > 0.0).then_some(m),
        lr,
    })
}
