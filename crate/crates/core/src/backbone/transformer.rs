//! Desk-scale pre-norm transformer encoder with optional per-layer
//! virtual-token prefixes on the attention keys and values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add_const, affine, layer_norm, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{fan_in_init, small_init};
use crate::tensor::Tensor;

pub const LLM_PREFIX: &str = "llm.";
pub const HEAD_PREFIX: &str = "head.";

const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state of the last prompt token.
    LastToken,
    /// Average of the final hidden states over prompt tokens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
    pub pooling: Pooling,
    /// Learned absolute positions for prompt tokens (never for prefixes).
    pub positional: bool,
    /// Prompt tokens attend only to earlier tokens; prefixes stay visible.
    pub causal: bool,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 2,
            d_model: 32,
            ffn_dim: 128,
            max_context: 128,
            pooling: Pooling::LastToken,
            positional: true,
            causal: false,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Handles to the frozen language backbone's parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    vocab_size: usize,
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

/// Hidden states `H^(0..=L)` of one pass, each `T×d′`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub states: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H^(0..=L)` on the tape.
    pub states: Vec<Var>,
    /// Final-norm pooled representation, `1×d′`.
    pub pooled: Var,
    /// Attention weights per layer, `T×(L′+T)`.
    pub attention: Vec<Tensor>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.d_model == 0 || cfg.ffn_dim == 0 || cfg.max_context == 0 {
            return Err(Error::Config(format!("degenerate backbone config {cfg:?}")));
        }
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let tok_emb = store.register("llm.tok_emb", fan_in_init(rng, &[vocab_size, d], 1))?;
        let pos_emb = if cfg.positional {
            Some(store.register("llm.pos_emb", small_init(rng, &[cfg.max_context, d]))?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("llm.h{l}.{s}");
            let ln = |store: &mut ParamStore, s: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.register(name(&format!("{s}.g")), Tensor::ones([1, d]))?,
                    store.register(name(&format!("{s}.b")), Tensor::zeros([1, d]))?,
                ))
            };
            let ln1 = ln(store, "ln1")?;
            let ln2 = ln(store, "ln2")?;
            blocks.push(Block {
                ln1,
                wq: store.register(name("attn.wq"), fan_in_init(rng, &[d, d], d))?,
                wk: store.register(name("attn.wk"), fan_in_init(rng, &[d, d], d))?,
                wv: store.register(name("attn.wv"), fan_in_init(rng, &[d, d], d))?,
                wo: store.register(name("attn.wo"), fan_in_init(rng, &[d, d], d))?,
                ln2,
                w1: store.register(name("ffn.w1"), fan_in_init(rng, &[d, f], d))?,
                b1: store.register(name("ffn.b1"), Tensor::zeros([1, f]))?,
                w2: store.register(name("ffn.w2"), fan_in_init(rng, &[f, d], f))?,
                b2: store.register(name("ffn.b2"), Tensor::zeros([1, d]))?,
            });
        }
        let ln_f = (
            store.register("llm.ln_f.g", Tensor::ones([1, d]))?,
            store.register("llm.ln_f.b", Tensor::zeros([1, d]))?,
        );
        Ok(Backbone {
            cfg,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn layers(&self) -> usize {
        self.cfg.layers
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Handles of the first layer norm's gain and bias in layer `l`.
    pub fn attn_norm(&self, l: usize) -> (ParamId, ParamId) {
        self.blocks[l].ln1
    }

    /// Runs the backbone over `tokens`. `prefixes` holds one `L′×d′` matrix
    /// per layer, or is empty for a clean pass.
    ///
    /// Queries come from the prompt tokens only; keys and values are
    /// computed over the prefix rows stacked above the (normalised) prompt
    /// rows. Residual and feed-forward paths touch prompt positions only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        prefixes: &[Var],
    ) -> Result<ForwardOutput> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Contract("empty prompt".into()));
        }
        if t > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                tokens: t,
                max: self.cfg.max_context,
            });
        }
        let d = self.cfg.d_model;
        if !prefixes.is_empty() && prefixes.len() != self.cfg.layers {
            return Err(Error::Contract(format!(
                "{} prefixes for {} layers",
                prefixes.len(),
                self.cfg.layers
            )));
        }
        let prefix_len = prefixes.first().map_or(0, |&p| tape.shape(p)[0]);
        for (l, &p) in prefixes.iter().enumerate() {
            let shape = tape.shape(p);
            if shape != [prefix_len, d] {
                return Err(Error::PrefixShape {
                    layer: l,
                    got: shape.to_vec(),
                    expected: vec![prefix_len, d],
                });
            }
        }

        let table = tape.param(store, self.tok_emb);
        let mut h = tape.gather_rows(table, tokens)?;
        if let Some(pos) = self.pos_emb {
            let pos_table = tape.param(store, pos);
            let ids: Vec<usize> = (0..t).collect();
            let pos = tape.gather_rows(pos_table, &ids)?;
            h = tape.add(h, pos)?;
        }

        let mask = self.cfg.causal.then(|| causal_mask(t, prefix_len));
        let scale = 1.0 / (d as f64).sqrt();

        let mut states = vec![h];
        let mut attention = Vec::with_capacity(self.cfg.layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let g1 = tape.param(store, block.ln1.0);
            let b1 = tape.param(store, block.ln1.1);
            let x = layer_norm(tape, h, g1, b1, self.cfg.ln_eps)?;

            let kv_in = match prefixes.get(l) {
                Some(&prefix) => tape.concat(prefix, x, 0)?,
                None => x,
            };
            let wq = tape.param(store, block.wq);
            let wk = tape.param(store, block.wk);
            let wv = tape.param(store, block.wv);
            let wo = tape.param(store, block.wo);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(kv_in, wk)?;
            let v = tape.matmul(kv_in, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = &mask {
                scores = add_const(tape, scores, mask.clone())?;
            }
            let weights = tape.softmax(scores, 1)?;
            attention.push(tape.value(weights).clone());
            let attn = tape.matmul(weights, v)?;
            let attn = tape.matmul(attn, wo)?;
            h = tape.add(h, attn)?;

            let g2 = tape.param(store, block.ln2.0);
            let b2 = tape.param(store, block.ln2.1);
            let x = layer_norm(tape, h, g2, b2, self.cfg.ln_eps)?;
            let w1 = tape.param(store, block.w1);
            let bias1 = tape.param(store, block.b1);
            let w2 = tape.param(store, block.w2);
            let bias2 = tape.param(store, block.b2);
            let hidden = affine(tape, x, w1, bias1)?;
            let hidden = tape.gelu(hidden);
            let ffn = affine(tape, hidden, w2, bias2)?;
            h = tape.add(h, ffn)?;
            states.push(h);
        }

        let gf = tape.param(store, self.ln_f.0);
        let bf = tape.param(store, self.ln_f.1);
        let normed = layer_norm(tape, h, gf, bf, self.cfg.ln_eps)?;
        let pooled = match self.cfg.pooling {
            Pooling::LastToken => tape.slice_rows(normed, t - 1, t)?,
            Pooling::Mean => {
                let avg = tape.constant(Tensor::full([1, t], 1.0 / t as f64));
                tape.matmul(avg, normed)?
            }
        };
        Ok(ForwardOutput {
            states,
            pooled,
            attention,
        })
    }

    /// Hidden states of a pass without any prefix.
    pub fn forward_clean(&self, store: &ParamStore, tokens: &[usize]) -> Result<LayerStates> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, tokens, &[])?;
        Ok(LayerStates {
            states: out.states.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Additive mask: prompt token `i` sees every prefix row and prompt tokens
/// `0..=i`.
fn causal_mask(t: usize, prefix_len: usize) -> Tensor {
    let cols = prefix_len + t;
    let mut data = vec![0.0; t * cols];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * cols + prefix_len + j] = MASKED;
        }
    }
    Tensor::new([t, cols], data).expect("mask shape")
}

/// The item-scoring matrix `W_y` (`d′×M`).
#[derive(Clone, Debug)]
pub struct PredictionHead {
    w: ParamId,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        n_items: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(PredictionHead {
            w: store.register("head.w_y", small_init(rng, &[d_model, n_items]))?,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    /// `1×M` item logits from a `1×d′` pooled state.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        tape.matmul(pooled, w)
    }
}
