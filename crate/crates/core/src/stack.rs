//! The full recommender: ID model, frozen backbone, adapter and item head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapter::{Adapter, AdapterConfig, RefinedPrefixes, ADAPTER_PREFIX};
use crate::autodiff::{softmax_along, ParamStore, Tape, Var};
use crate::backbone::{
    Backbone, BackboneConfig, PredictionHead, PromptTemplate, Vocabulary, HEAD_PREFIX, LLM_PREFIX,
};
use crate::checkpoint::Checkpoint;
use crate::dataset::{truncate_recent, EvalCase, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::id_model::{IdModel, IdModelConfig, ID_PREFIX};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub id: IdModelConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Most recent history items rendered into the hard prompt.
    pub prompt_items: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            id: IdModelConfig::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            prompt_items: 20,
        }
    }
}

/// Random streams for each component, so that changing one component's
/// configuration leaves the others' initial values alone.
#[derive(Clone, Copy)]
enum Stream {
    Id = 1,
    Backbone = 2,
    Head = 3,
    Adapter = 4,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// One example with everything that does not depend on the adapter
/// precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub user_id: usize,
    pub target: ItemId,
    pub tokens: Vec<usize>,
    /// `u`, `1×d`.
    pub user: Tensor,
    /// Clean hidden states entering each layer, when alignment is needed.
    pub clean: Option<Vec<Tensor>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub prediction: Var,
    pub alignment: Option<Var>,
}

pub struct StackForward {
    pub logits: Var,
    pub pooled: Var,
    pub refined: RefinedPrefixes,
}

#[derive(Clone, Debug)]
pub struct ModelStack {
    pub cfg: StackConfig,
    pub store: ParamStore,
    pub id_model: IdModel,
    pub backbone: Backbone,
    pub head: PredictionHead,
    pub adapter: Adapter,
    pub catalog: ItemCatalog,
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
}

impl ModelStack {
    pub fn new(
        cfg: StackConfig,
        catalog: ItemCatalog,
        template: PromptTemplate,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        if cfg.prompt_items == 0 {
            return Err(Error::Config("prompt_items must be at least 1".into()));
        }
        let n_items = catalog.len();
        let mut store = ParamStore::new();
        let id_model = IdModel::new(
            &mut store,
            cfg.id.clone(),
            n_items,
            &mut stream(seed, Stream::Id),
        )?;
        let backbone = Backbone::new(
            &mut store,
            cfg.backbone.clone(),
            vocab.len(),
            &mut stream(seed, Stream::Backbone),
        )?;
        let d_model = cfg.backbone.d_model;
        let head = PredictionHead::new(
            &mut store,
            d_model,
            n_items,
            &mut stream(seed, Stream::Head),
        )?;
        let adapter = Adapter::new(
            &mut store,
            cfg.adapter.clone(),
            cfg.backbone.layers,
            cfg.id.dim,
            d_model,
            &mut stream(seed, Stream::Adapter),
        )?;
        Ok(ModelStack {
            cfg,
            store,
            id_model,
            backbone,
            head,
            adapter,
            catalog,
            template,
            vocab,
        })
    }

    /// A stack with a fresh adapter and head under `adapter`, sharing this
    /// stack's ID model and backbone values.
    pub fn with_adapter(&self, adapter: AdapterConfig, seed: u64) -> Result<Self> {
        let cfg = StackConfig {
            adapter,
            ..self.cfg.clone()
        };
        let mut out = ModelStack::new(
            cfg,
            self.catalog.clone(),
            self.template.clone(),
            self.vocab.clone(),
            seed,
        )?;
        out.store.load_named(&self.store.named_tensors(ID_PREFIX))?;
        out.store
            .load_named(&self.store.named_tensors(LLM_PREFIX))?;
        Ok(out)
    }

    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    /// Hard-prompt token ids for `prefix`. The oldest titles are dropped
    /// until the prompt fits the backbone's context.
    pub fn tokens(&self, prefix: &[ItemId]) -> Result<Vec<usize>> {
        let mut history = truncate_recent(prefix, self.cfg.prompt_items);
        let max = self.cfg.backbone.max_context;
        loop {
            let text = self.template.render(history, &self.catalog)?;
            let tokens = self.vocab.tokenize(&text);
            if tokens.len() <= max {
                return Ok(tokens);
            }
            if history.len() == 1 {
                return Err(Error::ContextOverflow {
                    tokens: tokens.len(),
                    max,
                });
            }
            history = &history[1..];
        }
    }

    pub fn prepare(&self, case: &EvalCase, with_clean: bool) -> Result<Prepared> {
        if case.target >= self.n_items() {
            return Err(Error::InvalidItem {
                item: case.target,
                size: self.n_items(),
            });
        }
        let tokens = self.tokens(&case.prefix)?;
        let user = self.id_model.user_vector(&self.store, &case.prefix)?;
        let clean = if with_clean {
            let mut states = self.backbone.forward_clean(&self.store, &tokens)?.states;
            states.pop();
            Some(states)
        } else {
            None
        };
        Ok(Prepared {
            user_id: case.user_id,
            target: case.target,
            tokens,
            user,
            clean,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        user: &Tensor,
    ) -> Result<StackForward> {
        let u = tape.constant(user.clone());
        let refined = self.adapter.build_prefixes(tape, &self.store, u)?;
        let out = self
            .backbone
            .forward(tape, &self.store, tokens, &refined.prefixes)?;
        let logits = self.head.logits(tape, &self.store, out.pooled)?;
        Ok(StackForward {
            logits,
            pooled: out.pooled,
            refined,
        })
    }

    /// `L_p + λ·L_m` for one example; the alignment term is recorded only
    /// when `lambda > 0`.
    pub fn example_loss(&self, tape: &mut Tape, ex: &Prepared, lambda: f64) -> Result<LossParts> {
        let fwd = self.forward(tape, &ex.tokens, &ex.user)?;
        let logp = tape.log_softmax(fwd.logits, 1)?;
        let picked = tape.pick(logp, &[(0, ex.target)])?;
        let prediction = tape.scale(picked, -1.0);
        if lambda == 0.0 {
            return Ok(LossParts {
                total: prediction,
                prediction,
                alignment: None,
            });
        }
        let clean = ex
            .clean
            .as_ref()
            .ok_or_else(|| Error::Contract("alignment needs clean states".into()))?;
        let align = self
            .adapter
            .alignment_loss(tape, &fwd.refined.prefixes, clean)?;
        let weighted = tape.scale(align, lambda);
        let total = tape.add(prediction, weighted)?;
        Ok(LossParts {
            total,
            prediction,
            alignment: Some(align),
        })
    }

    pub fn logits_prepared(&self, ex: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &ex.tokens, &ex.user)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// `ŷ` over the catalog for a history.
    pub fn predict_distribution(&self, prefix: &[ItemId]) -> Result<Tensor> {
        let logits = self.logits(prefix)?;
        softmax_along(&logits, 1, false)
    }

    pub fn logits(&self, prefix: &[ItemId]) -> Result<Tensor> {
        let case = EvalCase {
            user_id: 0,
            prefix: prefix.to_vec(),
            target: 0,
        };
        self.logits_prepared(&self.prepare(&case, false)?)
    }

    /// Checksum of the adapter and head, the parts that training changes.
    pub fn trainable_checksum(&self) -> String {
        format!(
            "{}{}",
            self.store.checksum(ADAPTER_PREFIX),
            self.store.checksum(HEAD_PREFIX)
        )
    }

    /// All parameters plus the stack configuration.
    pub fn checkpoint(&self, extra: Value) -> Result<Checkpoint> {
        let meta = json!({
            "stack": serde_json::to_value(&self.cfg)?,
            "n_items": self.n_items(),
            "vocab_size": self.vocab.len(),
            "extra": extra,
        });
        Ok(Checkpoint::new(self.store.named_tensors(""), meta))
    }

    /// Loads every tensor in `ckpt`; names and shapes must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.store.load_named(&ckpt.tensors)
    }

    /// The stack configuration recorded in a checkpoint.
    pub fn config_of(ckpt: &Checkpoint) -> Result<StackConfig> {
        let v = ckpt
            .metadata
            .get("stack")
            .ok_or_else(|| Error::Checkpoint {
                offset: 0,
                reason: "metadata lacks the stack configuration".into(),
            })?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

impl Scorer for ModelStack {
    fn n_items(&self) -> usize {
        self.catalog.len()
    }

    fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.logits(prefix)?.into_data())
    }
}
