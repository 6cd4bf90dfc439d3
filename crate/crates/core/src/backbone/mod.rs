//! Frozen language backbone: tokenizer, hard prompts and a small transformer.

mod prompt;
mod transformer;

pub use prompt::{
    build_hard_prompt, split_words, HardPrompt, PromptTemplate, Vocabulary, DEFAULT_TEMPLATE,
    TITLES_PLACEHOLDER, UNK_ID, UNK_TOKEN,
};
pub use transformer::{
    Backbone, BackboneConfig, ForwardOutput, LayerStates, Pooling, PredictionHead, HEAD_PREFIX,
    LLM_PREFIX,
};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, ParamStore, Tape};
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn small(cfg: BackboneConfig) -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Backbone::new(&mut store, cfg, 12, &mut rng).unwrap();
        (b, store)
    }

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            d_model: 6,
            ffn_dim: 10,
            max_context: 8,
            ..Default::default()
        }
    }

    fn prefix_values(layers: usize, rows: usize, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layers)
            .map(|_| crate::init::truncated_normal(&mut rng, &[rows, d], 1.0, 2.0))
            .collect()
    }

    #[test]
    fn empty_prefix_matches_clean_pass() {
        let (b, store) = small(tiny_cfg());
        let tokens = [1, 4, 2, 7];
        let clean = b.forward_clean(&store, &tokens).unwrap();
        let mut tape = Tape::new();
        let out = b.forward(&mut tape, &store, &tokens, &[]).unwrap();
        assert_eq!(clean.states.len(), 3);
        for (c, &v) in clean.states.iter().zip(&out.states) {
            assert_eq!(c, tape.value(v));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (b, store) = small(tiny_cfg());
        let mut tape = Tape::new();
        let prefixes: Vec<_> = prefix_values(2, 3, 6, 1)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let out = b.forward(&mut tape, &store, &[1, 2, 3], &prefixes).unwrap();
        for a in &out.attention {
            assert_eq!(a.shape(), &[3, 6]);
            for r in 0..3 {
                let s: f64 = a.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_changes_prediction() {
        let (b, store) = small(tiny_cfg());
        let tokens = [5, 6];
        let mut tape = Tape::new();
        let clean = b.forward(&mut tape, &store, &tokens, &[]).unwrap().pooled;
        let prefixes: Vec<_> = prefix_values(2, 2, 6, 9)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let steered = b
            .forward(&mut tape, &store, &tokens, &prefixes)
            .unwrap()
            .pooled;
        assert!(tape.value(clean).max_abs_diff(tape.value(steered)) > 1e-6);
    }

    #[test]
    fn causal_first_token_ignores_the_future() {
        let (b, store) = small(BackboneConfig {
            causal: true,
            ..tiny_cfg()
        });
        let a = b.forward_clean(&store, &[3, 1, 2]).unwrap();
        let c = b.forward_clean(&store, &[3, 9, 9]).unwrap();
        for (x, y) in a.states.iter().zip(&c.states) {
            assert_eq!(x.row_slice(0), y.row_slice(0));
        }
        let d = b.forward_clean(&store, &[3, 1, 9]).unwrap();
        assert_ne!(a.states[2].row_slice(2), d.states[2].row_slice(2));
    }

    #[test]
    fn without_positions_tokens_are_permutation_equivariant() {
        let (b, store) = small(BackboneConfig {
            positional: false,
            ..tiny_cfg()
        });
        let a = b.forward_clean(&store, &[1, 2, 3]).unwrap();
        let p = b.forward_clean(&store, &[3, 1, 2]).unwrap();
        let last = a.states.last().unwrap();
        let perm = p.states.last().unwrap();
        for (src, dst) in [(0, 1), (1, 2), (2, 0)] {
            let diff = last
                .row_slice(src)
                .iter()
                .zip(perm.row_slice(dst))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (b, store) = small(tiny_cfg());
        let mut tape = Tape::new();
        assert!(matches!(
            b.forward(&mut tape, &store, &[1; 9], &[]),
            Err(Error::ContextOverflow { tokens: 9, max: 8 })
        ));
        let good = tape.constant(Tensor::zeros([2, 6]));
        let bad = tape.constant(Tensor::zeros([2, 5]));
        assert!(matches!(
            b.forward(&mut tape, &store, &[1], &[good, bad]),
            Err(Error::PrefixShape { layer: 1, .. })
        ));
        assert!(b.forward(&mut tape, &store, &[1], &[good]).is_err());
        assert!(b.forward(&mut tape, &store, &[], &[]).is_err());
    }

    #[test]
    fn prefix_gradients_match_finite_differences() {
        for pooling in [Pooling::LastToken, Pooling::Mean] {
            let cfg = BackboneConfig {
                layers: 2,
                d_model: 4,
                ffn_dim: 6,
                max_context: 8,
                pooling,
                causal: true,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let b = Backbone::new(&mut store, cfg, 12, &mut rng).unwrap();
            let head = PredictionHead::new(&mut store, 4, 5, &mut rng).unwrap();
            store.set_frozen_prefix(LLM_PREFIX, true);
            let ids: Vec<_> = prefix_values(2, 2, 4, 5)
                .into_iter()
                .enumerate()
                .map(|(l, t)| store.register(format!("p{l}"), t).unwrap())
                .collect();
            let mut params = ids.clone();
            params.push(head.weight());
            let report = finite_diff_check(&mut store, &params, 1e-5, 1e-4, |tape, store| {
                let prefixes: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
                let out = b.forward(tape, store, &[1, 3, 2], &prefixes)?;
                let logits = head.logits(tape, store, out.pooled)?;
                let logp = tape.log_softmax(logits, 1)?;
                let picked = tape.pick(logp, &[(0, 2)])?;
                Ok(tape.scale(picked, -1.0))
            })
            .unwrap();
            assert!(report.failures.is_empty(), "{report:?}");
            assert_eq!(report.checked, 2 * 2 * 4 + 4 * 5);
        }
    }
}
