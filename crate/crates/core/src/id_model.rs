//! Pre-trained ID-based sequential recommender.
//!
//! An item embedding table plus a sequence encoder mapping an interaction
//! prefix to a user vector `u`. Items are scored by `uᵀi` under a full
//! softmax over the catalog, and pretraining minimises next-item
//! cross-entropy.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, softmax_along, ParamId, ParamStore, Tape, Var};
use crate::dataset::{truncate_recent, Example, ExperimentData, ItemId};
use crate::error::{Error, Result};
use crate::init::small_init;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

/// Name prefix of every ID-model parameter.
pub const ID_PREFIX: &str = "id.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Single-interest self-attentive pooling.
    AttentionPool,
    /// Gated recurrent unit; `u` is the final hidden state.
    Gru,
    /// `u` is the embedding of the most recent item.
    LastItem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdModelConfig {
    pub dim: usize,
    pub encoder: EncoderKind,
    pub max_seq_len: usize,
    /// Hidden width of the attention scorer; `4 * dim` when unset.
    pub attn_hidden: Option<usize>,
}

impl Default for IdModelConfig {
    fn default() -> Self {
        IdModelConfig {
            dim: 64,
            encoder: EncoderKind::AttentionPool,
            max_seq_len: 20,
            attn_hidden: None,
        }
    }
}

#[derive(Clone, Debug)]
enum EncoderParams {
    AttentionPool {
        pos: ParamId,
        w1: ParamId,
        w2: ParamId,
    },
    Gru {
        w: [ParamId; 3],
        u: [ParamId; 3],
        b: [ParamId; 3],
    },
    LastItem,
}

/// Handles to the ID model's parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct IdModel {
    cfg: IdModelConfig,
    n_items: usize,
    items: ParamId,
    encoder: EncoderParams,
}

impl IdModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: IdModelConfig,
        n_items: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.dim == 0 || n_items == 0 || cfg.max_seq_len == 0 {
            return Err(Error::Config(format!(
                "id model needs positive dim, catalog and max_seq_len, got {cfg:?} with {n_items} items"
            )));
        }
        let d = cfg.dim;
        let items = store.register("id.item_emb", small_init(rng, &[n_items, d]))?;
        let encoder = match cfg.encoder {
            EncoderKind::AttentionPool => {
                let h = cfg.attn_hidden.unwrap_or(4 * d);
                EncoderParams::AttentionPool {
                    pos: store.register("id.pos_emb", small_init(rng, &[cfg.max_seq_len, d]))?,
                    w1: store.register("id.attn.w1", small_init(rng, &[d, h]))?,
                    w2: store.register("id.attn.w2", small_init(rng, &[h, 1]))?,
                }
            }
            EncoderKind::Gru => {
                let mut reg = |name: &str, shape: &[usize]| {
                    store.register(format!("id.gru.{name}"), small_init(rng, shape))
                };
                EncoderParams::Gru {
                    w: [
                        reg("w_z", &[d, d])?,
                        reg("w_r", &[d, d])?,
                        reg("w_h", &[d, d])?,
                    ],
                    u: [
                        reg("u_z", &[d, d])?,
                        reg("u_r", &[d, d])?,
                        reg("u_h", &[d, d])?,
                    ],
                    b: [
                        reg("b_z", &[1, d])?,
                        reg("b_r", &[1, d])?,
                        reg("b_h", &[1, d])?,
                    ],
                }
            }
            EncoderKind::LastItem => EncoderParams::LastItem,
        };
        Ok(IdModel {
            cfg,
            n_items,
            items,
            encoder,
        })
    }

    pub fn config(&self) -> &IdModelConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn item_embeddings(&self) -> ParamId {
        self.items
    }

    fn check_prefix(&self, prefix: &[ItemId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Contract("cannot encode an empty prefix".into()));
        }
        if let Some(&item) = prefix.iter().find(|&&i| i >= self.n_items) {
            return Err(Error::InvalidItem {
                item,
                size: self.n_items,
            });
        }
        Ok(())
    }

    /// Records the encoder on `tape`, returning the `1×d` user vector.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, prefix: &[ItemId]) -> Result<Var> {
        self.check_prefix(prefix)?;
        let prefix = truncate_recent(prefix, self.cfg.max_seq_len);
        let n = prefix.len();
        let table = tape.param(store, self.items);
        let emb = tape.gather_rows(table, prefix)?;
        match &self.encoder {
            EncoderParams::LastItem => tape.slice_rows(emb, n - 1, n),
            EncoderParams::AttentionPool { pos, w1, w2 } => {
                // Position 0 is the most recent item.
                let pos_ids: Vec<usize> = (0..n).rev().collect();
                let pos_table = tape.param(store, *pos);
                let pos_emb = tape.gather_rows(pos_table, &pos_ids)?;
                let keyed = tape.add(emb, pos_emb)?;
                let w1 = tape.param(store, *w1);
                let w2 = tape.param(store, *w2);
                let hidden = tape.matmul(keyed, w1)?;
                let hidden = tape.tanh(hidden);
                let scores = tape.matmul(hidden, w2)?;
                let weights = tape.softmax(scores, 0)?;
                let weights = tape.transpose(weights)?;
                tape.matmul(weights, emb)
            }
            EncoderParams::Gru { w, u, b } => {
                let d = self.cfg.dim;
                let [wz, wr, wh] = w.map(|p| tape.param(store, p));
                let [uz, ur, uh] = u.map(|p| tape.param(store, p));
                let [bz, br, bh] = b.map(|p| tape.param(store, p));
                let mut h = tape.constant(Tensor::zeros([1, d]));
                for t in 0..n {
                    let x = tape.slice_rows(emb, t, t + 1)?;
                    let z = gru_gate(tape, x, h, wz, uz, bz)?;
                    let z = tape.sigmoid(z);
                    let r = gru_gate(tape, x, h, wr, ur, br)?;
                    let r = tape.sigmoid(r);
                    let rh = tape.mul(r, h)?;
                    let cand = gru_gate(tape, x, rh, wh, uh, bh)?;
                    let cand = tape.tanh(cand);
                    // h = (1 - z) * h + z * cand
                    let keep = tape.one_minus(z);
                    let kept = tape.mul(keep, h)?;
                    let fresh = tape.mul(z, cand)?;
                    h = tape.add(kept, fresh)?;
                }
                Ok(h)
            }
        }
    }

    /// `1×M` logits `uᵀi` for every item.
    pub fn item_logits(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let table = tape.param(store, self.items);
        let table_t = tape.transpose(table)?;
        tape.matmul(u, table_t)
    }

    /// Encodes `prefix` without recording gradients.
    pub fn user_vector(&self, store: &ParamStore, prefix: &[ItemId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let u = self.encode(&mut tape, store, prefix)?;
        Ok(tape.value(u).clone())
    }

    /// `P(i|u)` over the full catalog.
    pub fn interaction_likelihood(&self, store: &ParamStore, u: &Tensor) -> Result<Tensor> {
        let logits = u.matmul(&store.value(self.items).transpose())?;
        softmax_along(&logits, 1, false)
    }

    /// Mean next-item cross-entropy over `examples`.
    pub fn mean_loss(&self, store: &ParamStore, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Contract("mean_loss over no examples".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new();
            let loss = self.example_loss(&mut tape, store, ex)?;
            total += tape.value(loss).item();
        }
        Ok(total / examples.len() as f64)
    }

    /// `-log P(target | prefix)` recorded on `tape`.
    pub fn example_loss(&self, tape: &mut Tape, store: &ParamStore, ex: &Example) -> Result<Var> {
        if ex.target >= self.n_items {
            return Err(Error::InvalidItem {
                item: ex.target,
                size: self.n_items,
            });
        }
        let u = self.encode(tape, store, &ex.prefix)?;
        let logits = self.item_logits(tape, store, u)?;
        let logp = tape.log_softmax(logits, 1)?;
        let picked = tape.pick(logp, &[(0, ex.target)])?;
        Ok(tape.scale(picked, -1.0))
    }

    /// User vectors of every training sequence, keyed by user id.
    pub fn export_user_embeddings(
        &self,
        store: &ParamStore,
        data: &ExperimentData,
    ) -> Result<BTreeMap<usize, Tensor>> {
        data.train
            .iter()
            .map(|s| Ok((s.user_id, self.user_vector(store, &s.items)?)))
            .collect()
    }
}

fn gru_gate(tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = affine(tape, x, w, b)?;
    let hu = tape.matmul(h, u)?;
    tape.add(xw, hu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            max_steps: None,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean loss over all training examples after the last step.
    pub final_loss: f64,
}

/// Minimises next-item cross-entropy over `examples` with a constant learning
/// rate. Parameters outside [`ID_PREFIX`] are left alone.
pub fn pretrain(
    model: &IdModel,
    store: &mut ParamStore,
    examples: &[Example],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    // Freeze everything outside the ID model for the duration.
    let others: Vec<ParamId> = store
        .trainable()
        .into_iter()
        .filter(|&id| !store.name(id).starts_with(ID_PREFIX))
        .collect();
    for &id in &others {
        store.set_frozen(id, true);
    }
    let result = pretrain_inner(model, store, examples, cfg, seed);
    for &id in &others {
        store.set_frozen(id, false);
    }
    result
}

fn pretrain_inner(
    model: &IdModel,
    store: &mut ParamStore,
    examples: &[Example],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.optimizer, store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = PretrainReport::default();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if report.steps >= max_steps {
                break 'epochs;
            }
            store.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = model.example_loss(&mut tape, store, &examples[i])?;
                let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                batch_loss += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                store.accumulate(&grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss at step {} (epoch {epoch})",
                    report.steps
                )));
            }
            opt.step(store, cfg.lr)?;
            report.step_losses.push(batch_loss);
            report.steps += 1;
        }
        debug!(
            "pretrain epoch {epoch}: last batch loss {:.4}",
            report.step_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    store.zero_grad();
    report.final_loss = model.mean_loss(store, examples)?;
    Ok(report)
}
