//! ε-greedy top-k token selection and the mask substitution it drives.
//!
//! The greedy branch masks the k highest-attention live tokens (lower index
//! wins ties); the explore branch masks a uniformly random k-subset. Either
//! way the selection's log-probability is scored as an ordered draw without
//! replacement proportional to the attention row, which is what the policy
//! gradient differentiates.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TokenId, MASK};
use crate::error::{AfaError, Result};
use crate::numerics::plackett_luce;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Greedy,
    Explore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSelection {
    /// Selected live positions in draw order.
    pub indices: Vec<usize>,
    pub mode: SelectionMode,
    /// Log-probability of `indices` as an ordered draw proportional to attention.
    pub log_prob: f64,
    /// Set when `k` exceeded the live length and every position was taken.
    pub truncated: bool,
}

impl MaskSelection {
    /// `ids` with MASK substituted at every selected position.
    pub fn masked_ids(&self, ids: &[TokenId]) -> Vec<TokenId> {
        let mut out = ids.to_vec();
        for &i in &self.indices {
            out[i] = MASK;
        }
        out
    }
}

/// Positions sorted by descending weight, lower index first on ties.
pub fn rank_by_weight(a: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    order
}

/// Draws one selection from the ε-greedy policy.
///
/// `branch_rng` decides greedy vs explore once per call; `sample_rng` draws
/// the random subset on the explore branch.
pub fn select<B: Rng, S: Rng>(
    a: &[f64],
    k: usize,
    epsilon: f64,
    branch_rng: &mut B,
    sample_rng: &mut S,
) -> Result<MaskSelection> {
    if k == 0 {
        return Err(AfaError::config("k", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AfaError::config("epsilon", format!("{epsilon} is outside [0, 1]")));
    }
    if a.is_empty() {
        return Err(AfaError::Input("attention row has no live positions".into()));
    }
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AfaError::Input("attention row is not a distribution".into()));
    }
    let n = a.len();
    let take = k.min(n);
    let explore = branch_rng.random::<f64>() < epsilon;
    let (indices, mode) = if explore {
        (index::sample(sample_rng, n, take).into_vec(), SelectionMode::Explore)
    } else {
        let mut ranked = rank_by_weight(a);
        ranked.truncate(take);
        (ranked, SelectionMode::Greedy)
    };
    let log_prob = plackett_luce(a, &indices);
    Ok(MaskSelection {
        indices,
        mode,
        log_prob,
        truncated: k > n,
    })
}

/// Log-probability of drawing `order` sequentially without replacement with
/// probability proportional to `a` (each weight floored at 1e-12).
pub fn log_policy_prob(a: &[f64], order: &[usize]) -> Result<f64> {
    if let Some(&bad) = order.iter().find(|&&i| i >= a.len()) {
        return Err(AfaError::Index {
            what: "selected position",
            index: bad,
            bound: a.len(),
        });
    }
    Ok(plackett_luce(a, order))
}

/// Substitutes MASK at each row's selection. Labels and padding are untouched.
pub fn apply_mask(batch: &Batch, selections: &[&MaskSelection]) -> Result<Batch> {
    if selections.len() != batch.len() {
        return Err(AfaError::contract(format!(
            "{} selections for a batch of {}",
            selections.len(),
            batch.len()
        )));
    }
    let mut out = batch.clone();
    for (r, sel) in selections.iter().enumerate() {
        let live = batch.live_len(r);
        for &i in &sel.indices {
            if i >= live {
                return Err(AfaError::contract(format!(
                    "row {r}: selection position {i} is padding (live length {live})"
                )));
            }
            out.token_ids[r][i] = MASK;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rngs() -> (ChaCha8Rng, ChaCha8Rng) {
        (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2))
    }

    #[test]
    fn greedy_fixtures() {
        let (mut b, mut s) = rngs();
        let a = [0.5, 0.3, 0.2];
        assert_eq!(select(&a, 1, 0.0, &mut b, &mut s).unwrap().indices, vec![0]);
        let two = select(&a, 2, 0.0, &mut b, &mut s).unwrap();
        assert_eq!(two.indices, vec![0, 1]);
        assert_eq!(two.mode, SelectionMode::Greedy);
        assert!(two.log_prob <= 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(rank_by_weight(&[0.25, 0.25, 0.5, 0.0]), vec![2, 0, 1, 3]);
    }

    #[test]
    fn oversized_k_takes_everything() {
        let (mut b, mut s) = rngs();
        let sel = select(&[0.7, 0.3], 5, 0.0, &mut b, &mut s).unwrap();
        assert!(sel.truncated);
        assert_eq!(sel.indices, vec![0, 1]);
        assert!((sel.log_prob - 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_arguments() {
        let (mut b, mut s) = rngs();
        assert!(select(&[1.0], 0, 0.0, &mut b, &mut s).is_err());
        assert!(select(&[1.0], 1, 1.5, &mut b, &mut s).is_err());
        assert!(select(&[], 1, 0.0, &mut b, &mut s).is_err());
        assert!(log_policy_prob(&[0.5, 0.5], &[2]).is_err());
    }

    #[test]
    fn policy_prob_fixtures() {
        assert_eq!(log_policy_prob(&[1.0], &[0]).unwrap(), 0.0);
        assert!((log_policy_prob(&[0.5, 0.5], &[0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let expected = 0.6f64.ln() + (0.3f64 / 0.4).ln();
        assert!((log_policy_prob(&[0.6, 0.3, 0.1], &[0, 1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn masking_changes_exactly_the_selection() {
        let batch = Batch::from_sequences(vec![vec![5, 6, 7, 8], vec![9, 10]], vec![0, 1]).unwrap();
        let s0 = MaskSelection {
            indices: vec![1, 3],
            mode: SelectionMode::Greedy,
            log_prob: 0.0,
            truncated: false,
        };
        let s1 = MaskSelection {
            indices: vec![0],
            ..s0.clone()
        };
        let out = apply_mask(&batch, &[&s0, &s1]).unwrap();
        assert_eq!(out.token_ids[0], vec![5, MASK, 7, MASK]);
        assert_eq!(out.token_ids[1][0], MASK);
        assert_eq!(out.pad_mask, batch.pad_mask);
        assert_eq!(out.labels, batch.labels);
        // idempotent on already-masked positions
        assert_eq!(apply_mask(&out, &[&s0, &s1]).unwrap(), out);
        assert_eq!(s0.masked_ids(&batch.token_ids[0]), out.token_ids[0]);
    }

    #[test]
    fn masking_padding_is_contract_error() {
        let batch = Batch::from_sequences(vec![vec![5, 6, 7], vec![9]], vec![0, 1]).unwrap();
        let ok = MaskSelection {
            indices: vec![0],
            mode: SelectionMode::Greedy,
            log_prob: 0.0,
            truncated: false,
        };
        let bad = MaskSelection {
            indices: vec![2],
            ..ok.clone()
        };
        assert!(matches!(apply_mask(&batch, &[&ok, &bad]), Err(AfaError::Contract(_))));
        assert!(apply_mask(&batch, &[&ok]).is_err());
    }
}
