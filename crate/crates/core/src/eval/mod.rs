//! Full-catalog ranking metrics, ablations and embedding dumps.

mod ablation;
mod embeddings;

pub use ablation::{ablation_run, run_variant, AblationReport, AblationRow, Variant};
pub use embeddings::{dump_embeddings, user_embeddings, EmbeddingRow, EmbeddingSource};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{EvalCase, ItemId};
use crate::error::{Error, Result};

/// Anything that scores every catalog item given a history. Higher is
/// better; only the order matters.
pub trait Scorer {
    fn n_items(&self) -> usize;
    fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user_id: usize,
    pub target: ItemId,
    /// 1-based rank of the target among all items.
    pub rank: usize,
    pub top_k: Vec<ItemId>,
}

/// 1-based rank of `target`: items with a higher score, or an equal score
/// and a lower id, come first.
pub fn rank_of(scores: &[f64], target: ItemId) -> Result<usize> {
    let s = *scores.get(target).ok_or(Error::InvalidItem {
        item: target,
        size: scores.len(),
    })?;
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN item score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count();
    Ok(ahead + 1)
}

/// The `k` best items under the same ordering as [`rank_of`].
pub fn top_k(scores: &[f64], k: usize) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

fn check(results: &[RankingResult], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Contract("no ranking results".into()));
    }
    Ok(())
}

pub fn hit_rate_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let hits = results.iter().filter(|r| r.rank <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let total: f64 = results
        .iter()
        .filter(|r| r.rank <= k)
        .map(|r| 1.0 / ((r.rank + 1) as f64).log2())
        .sum();
    Ok(total / results.len() as f64)
}

pub fn rank_cases(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    keep_top: usize,
) -> Result<Vec<RankingResult>> {
    cases
        .iter()
        .map(|c| {
            let scores = scorer.score(&c.prefix)?;
            if scores.len() != scorer.n_items() {
                return Err(Error::shape("score", &[scores.len()], &[scorer.n_items()]));
            }
            Ok(RankingResult {
                user_id: c.user_id,
                target: c.target,
                rank: rank_of(&scores, c.target)?,
                top_k: top_k(&scores, keep_top),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_results(results: &[RankingResult], ks: &[usize]) -> Result<Self> {
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            hr.insert(k, hit_rate_at_k(results, k)?);
            ndcg.insert(k, ndcg_at_k(results, k)?);
        }
        Ok(Metrics {
            users: results.len(),
            hr,
            ndcg,
        })
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// One line per K: `HR@K  N@K`.
    pub fn table(&self) -> String {
        let mut out = format!("{:>6} {:>8} {:>8}\n", "K", "HR", "NDCG");
        for (k, hr) in &self.hr {
            out.push_str(&format!("{k:>6} {hr:>8.4} {:>8.4}\n", self.ndcg[k]));
        }
        out
    }
}

pub const DEFAULT_KS: [usize; 2] = [5, 10];

pub fn evaluate(scorer: &dyn Scorer, cases: &[EvalCase], ks: &[usize]) -> Result<Metrics> {
    let keep = ks.iter().copied().max().unwrap_or(0);
    let results = rank_cases(scorer, cases, keep)?;
    Metrics::from_results(&results, ks)
}
