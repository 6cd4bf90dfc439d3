//! Interaction data: ingestion, filtering, leave-one-out splitting and
//! training-subsequence expansion.

mod io;
mod synthetic;

pub use io::{load_csv, load_interactions, parse_jsonl, write_jsonl};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus, CATEGORY_WORDS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = usize;

/// Default minimum interaction count per user.
pub const MIN_SEQUENCE_LEN: usize = 5;
/// Default maximum title length, in characters.
pub const MAX_TITLE_CHARS: usize = 200;

/// Chronologically ordered interactions of one user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: usize,
    pub items: Vec<ItemId>,
}

/// Dense item-id → title mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    titles: Vec<String>,
}

impl ItemCatalog {
    pub fn new(titles: Vec<String>) -> Result<Self> {
        if let Some(i) = titles.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::MissingTitle(i));
        }
        Ok(ItemCatalog { titles })
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn title(&self, item: ItemId) -> Result<&str> {
        self.titles
            .get(item)
            .map(String::as_str)
            .ok_or(Error::MissingTitle(item))
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }
}

/// One user's sequence after leave-one-out splitting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: usize,
    pub train: Vec<ItemId>,
    pub validation: ItemId,
    pub test: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
}

/// A ranking query: predict `target` after `prefix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user_id: usize,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

/// A training subsequence with its shifted target.
pub type Example = EvalCase;

/// Everything a training run consumes: sequences to expand into training
/// examples, plus validation and test queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentData {
    pub train: Vec<UserSequence>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

impl ExperimentData {
    pub fn training_examples(&self, max_seq_len: usize) -> Vec<Example> {
        self.train
            .iter()
            .flat_map(|s| {
                expand_subsequences(&s.items, max_seq_len).into_iter().map(
                    move |(prefix, target)| EvalCase {
                        user_id: s.user_id,
                        prefix,
                        target,
                    },
                )
            })
            .collect()
    }
}

/// The most recent `max_len` items of `items`.
pub fn truncate_recent(items: &[ItemId], max_len: usize) -> &[ItemId] {
    &items[items.len().saturating_sub(max_len)..]
}

/// Holds out the last item for testing and the second-to-last for validation.
pub fn leave_one_out_split(seqs: &[UserSequence]) -> Result<SplitDataset> {
    let users = seqs
        .iter()
        .map(|s| {
            let n = s.items.len();
            if n < 3 {
                return Err(Error::SequenceTooShort {
                    user: s.user_id,
                    len: n,
                    min: 3,
                });
            }
            Ok(UserSplit {
                user_id: s.user_id,
                train: s.items[..n - 2].to_vec(),
                validation: s.items[n - 2],
                test: s.items[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitDataset { users })
}

impl SplitDataset {
    /// Validation queries use the training prefix; test queries additionally
    /// see the validation item, so both predict the item that immediately
    /// follows their prefix.
    pub fn experiment(&self, max_seq_len: usize) -> ExperimentData {
        let train = self
            .users
            .iter()
            .map(|u| UserSequence {
                user_id: u.user_id,
                items: u.train.clone(),
            })
            .collect();
        let validation = self
            .users
            .iter()
            .map(|u| EvalCase {
                user_id: u.user_id,
                prefix: truncate_recent(&u.train, max_seq_len).to_vec(),
                target: u.validation,
            })
            .collect();
        let test = self
            .users
            .iter()
            .map(|u| {
                let mut full = u.train.clone();
                full.push(u.validation);
                EvalCase {
                    user_id: u.user_id,
                    prefix: truncate_recent(&full, max_seq_len).to_vec(),
                    target: u.test,
                }
            })
            .collect();
        ExperimentData {
            train,
            validation,
            test,
        }
    }
}

/// User-level random partition (alternative to leave-one-out). Held-out users
/// are queried on their last item given everything before it.
pub fn ratio_split(
    seqs: &[UserSequence],
    train_frac: f64,
    val_frac: f64,
    max_seq_len: usize,
    seed: u64,
) -> Result<ExperimentData> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0
    {
        return Err(Error::Config(format!(
            "invalid split fractions train={train_frac} validation={val_frac}"
        )));
    }
    if let Some(s) = seqs.iter().find(|s| s.items.len() < 2) {
        return Err(Error::SequenceTooShort {
            user: s.user_id,
            len: s.items.len(),
            min: 2,
        });
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (seqs.len() as f64 * train_frac).round() as usize;
    let n_val = (seqs.len() as f64 * val_frac).round() as usize;
    let to_case = |s: &UserSequence| {
        let n = s.items.len();
        EvalCase {
            user_id: s.user_id,
            prefix: truncate_recent(&s.items[..n - 1], max_seq_len).to_vec(),
            target: s.items[n - 1],
        }
    };
    let mut data = ExperimentData {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (rank, &i) in order.iter().enumerate() {
        let s = &seqs[i];
        if rank < n_train {
            data.train.push(s.clone());
        } else if rank < n_train + n_val {
            data.validation.push(to_case(s));
        } else {
            data.test.push(to_case(s));
        }
    }
    data.train.sort_by_key(|s| s.user_id);
    data.validation.sort_by_key(|c| c.user_id);
    data.test.sort_by_key(|c| c.user_id);
    Ok(data)
}

/// `(S[0..=k], S[k+1])` for every `k`, with prefixes cut to the `max_seq_len`
/// most recent items. Sequences shorter than two yield nothing.
pub fn expand_subsequences(seq: &[ItemId], max_seq_len: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    if seq.len() < 2 {
        return Vec::new();
    }
    (0..seq.len() - 1)
        .map(|k| {
            (
                truncate_recent(&seq[..=k], max_seq_len).to_vec(),
                seq[k + 1],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user_id: usize, items: &[usize]) -> UserSequence {
        UserSequence {
            user_id,
            items: items.to_vec(),
        }
    }

    #[test]
    fn leave_one_out_five_items() {
        let split = leave_one_out_split(&[seq(0, &[1, 2, 3, 4, 5])]).unwrap();
        let u = &split.users[0];
        assert_eq!(u.train, vec![1, 2, 3]);
        assert_eq!(u.validation, 4);
        assert_eq!(u.test, 5);
    }

    #[test]
    fn leave_one_out_minimal_and_too_short() {
        let split = leave_one_out_split(&[seq(0, &[7, 8, 9])]).unwrap();
        assert_eq!(split.users[0].train, vec![7]);
        assert!(matches!(
            leave_one_out_split(&[seq(3, &[1, 2])]),
            Err(Error::SequenceTooShort {
                user: 3,
                len: 2,
                ..
            })
        ));
    }

    #[test]
    fn expand_three() {
        let pairs = expand_subsequences(&[0, 1, 2], 20);
        assert_eq!(pairs, vec![(vec![0], 1), (vec![0, 1], 2)]);
        assert!(expand_subsequences(&[0], 20).is_empty());
    }

    #[test]
    fn expand_truncates_to_recent() {
        let s: Vec<usize> = (0..7).collect();
        let pairs = expand_subsequences(&s, 3);
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs.last().unwrap(), &(vec![3, 4, 5], 6));
        assert!(pairs.iter().all(|(p, _)| p.len() <= 3));
    }

    #[test]
    fn experiment_cases_follow_their_prefix() {
        let split = leave_one_out_split(&[seq(0, &[1, 2, 3, 4, 5])]).unwrap();
        let data = split.experiment(20);
        assert_eq!(data.validation[0].prefix, vec![1, 2, 3]);
        assert_eq!(data.validation[0].target, 4);
        assert_eq!(data.test[0].prefix, vec![1, 2, 3, 4]);
        assert_eq!(data.test[0].target, 5);
        let ex = data.training_examples(20);
        assert_eq!(ex.len(), 2);
        assert!(ex.iter().all(|e| e.target != 4 && e.target != 5));
    }

    #[test]
    fn ratio_split_partitions_users() {
        let seqs: Vec<_> = (0..20).map(|u| seq(u, &[u, u + 1, u + 2])).collect();
        let data = ratio_split(&seqs, 0.8, 0.1, 20, 1).unwrap();
        assert_eq!(data.train.len(), 16);
        assert_eq!(data.validation.len(), 2);
        assert_eq!(data.test.len(), 2);
        assert!(ratio_split(&seqs, 0.9, 0.2, 20, 1).is_err());
    }

    #[test]
    fn catalog_rejects_blank_titles() {
        assert!(ItemCatalog::new(vec!["a".into(), " ".into()]).is_err());
    }
}
