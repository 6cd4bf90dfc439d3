//! Planted-pattern corpora.
//!
//! Items are partitioned into disjoint cycles. Every user walks one cycle from
//! a random starting point, emitting each cycle item `pattern_order` times in a
//! row, so without noise the next item is a deterministic function of the
//! previous `pattern_order` items. Noise replaces an emitted item by a uniform
//! random one; the underlying walk is unaffected.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemCatalog, ItemId, UserSequence};
use crate::error::{Error, Result};

pub const CATEGORY_WORDS: [&str; 12] = [
    "shoe", "coat", "skirt", "guitar", "drum", "lamp", "book", "watch", "scarf", "camera", "mug",
    "tent",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub pattern_order: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Distinct items per cycle.
    pub cycle_len: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            n_items: 50,
            pattern_order: 1,
            noise_rate: 0.1,
            seed: 42,
            cycle_len: 10,
            min_len: 8,
            max_len: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub sequences: Vec<UserSequence>,
    pub catalog: ItemCatalog,
    /// The noise-free walk behind each sequence.
    pub clean: Vec<Vec<ItemId>>,
    pub cycles: Vec<Vec<ItemId>>,
}

impl SyntheticCorpus {
    /// The deterministic successor of `item` along its cycle.
    pub fn successor(&self, item: ItemId) -> Option<ItemId> {
        self.cycles.iter().find_map(|c| {
            c.iter()
                .position(|&i| i == item)
                .map(|p| c[(p + 1) % c.len()])
        })
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.pattern_order < 1 {
        return Err(Error::Config("pattern_order must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Config(format!(
            "noise_rate {} outside [0, 1)",
            cfg.noise_rate
        )));
    }
    if cfg.cycle_len < 2 {
        return Err(Error::Config("cycle_len must be at least 2".into()));
    }
    if cfg.n_items < cfg.cycle_len {
        return Err(Error::Config(format!(
            "{} items cannot hold a cycle of length {}",
            cfg.n_items, cfg.cycle_len
        )));
    }
    if cfg.n_users == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "need n_users > 0 and 0 < min_len <= max_len, got {} users, lengths {}..={}",
            cfg.n_users, cfg.min_len, cfg.max_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<ItemId> = (0..cfg.n_items).collect();
    perm.shuffle(&mut rng);
    let cycles: Vec<Vec<ItemId>> = perm
        .chunks_exact(cfg.cycle_len)
        .map(<[ItemId]>::to_vec)
        .collect();

    let mut category = vec![None; cfg.n_items];
    for (c, cycle) in cycles.iter().enumerate() {
        for &item in cycle {
            category[item] = Some(CATEGORY_WORDS[c % CATEGORY_WORDS.len()]);
        }
    }
    let titles = (0..cfg.n_items)
        .map(|i| format!("item-{i} {}", category[i].unwrap_or("misc")))
        .collect();
    let catalog = ItemCatalog::new(titles)?;

    let k = cfg.pattern_order;
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut clean = Vec::with_capacity(cfg.n_users);
    for user_id in 0..cfg.n_users {
        let cycle = &cycles[rng.gen_range(0..cycles.len())];
        let start = rng.gen_range(0..cycle.len() * k);
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut walk = Vec::with_capacity(len);
        let mut items = Vec::with_capacity(len);
        for t in 0..len {
            let item = cycle[((start + t) / k) % cycle.len()];
            walk.push(item);
            if rng.gen::<f64>() < cfg.noise_rate {
                items.push(rng.gen_range(0..cfg.n_items));
            } else {
                items.push(item);
            }
        }
        sequences.push(UserSequence { user_id, items });
        clean.push(walk);
    }

    Ok(SyntheticCorpus {
        sequences,
        catalog,
        clean,
        cycles,
    })
}
