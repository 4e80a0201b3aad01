//! Synthetic corpus whose label is carried by exactly one token.
//!
//! Every class owns a disjoint set of signal tokens. An example is a run of
//! uniformly drawn distractors with one signal token of its class dropped at a
//! uniform position, so the decisive position is known for every example and
//! a perfect classifier exists by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::Example;
use super::vocab::{TokenId, Vocab};
use crate::error::{AfaError, Result};

const FIRST_FREE_ID: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlantedSpec {
    pub num_examples: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub signal_per_class: usize,
    pub distractor_vocab_size: usize,
    pub seed: u64,
}

impl PlantedSpec {
    /// Distractor count that makes the whole vocabulary (reserved ids included)
    /// exactly `total_vocab` entries.
    pub fn distractors_for_total(total_vocab: usize, num_classes: usize, signal_per_class: usize) -> Result<usize> {
        let fixed = FIRST_FREE_ID + num_classes * signal_per_class;
        if total_vocab <= fixed {
            return Err(AfaError::config(
                "vocab_size",
                format!(
                    "{total_vocab} leaves no room for distractors after {} reserved and {} signal tokens",
                    FIRST_FREE_ID,
                    num_classes * signal_per_class
                ),
            ));
        }
        Ok(total_vocab - fixed)
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_FREE_ID + self.num_classes * self.signal_per_class + self.distractor_vocab_size
    }

    fn validate(&self) -> Result<()> {
        if self.signal_per_class == 0 {
            return Err(AfaError::config("signal_per_class", "must be at least 1"));
        }
        if self.seq_len < 4 {
            return Err(AfaError::config("seq_len", "must be at least 4"));
        }
        if self.num_classes < 2 {
            return Err(AfaError::config("num_classes", "must be at least 2"));
        }
        if self.distractor_vocab_size == 0 {
            return Err(AfaError::config(
                "distractor_vocab_size",
                "vocabulary budget leaves no distractor tokens",
            ));
        }
        if self.vocab_size() > TokenId::MAX as usize {
            return Err(AfaError::config(
                "distractor_vocab_size",
                "vocabulary exceeds the token id range",
            ));
        }
        Ok(())
    }

    pub fn signal_token(&self, class: usize, j: usize) -> TokenId {
        (FIRST_FREE_ID + class * self.signal_per_class + j) as TokenId
    }

    fn distractor(&self, j: usize) -> TokenId {
        (FIRST_FREE_ID + self.num_classes * self.signal_per_class + j) as TokenId
    }
}

#[derive(Clone, Debug)]
pub struct PlantedDataset {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
    /// Signal token ids owned by each class.
    pub signal_tokens: Vec<Vec<TokenId>>,
}

impl PlantedDataset {
    /// Class whose signal set contains `id`, if any.
    pub fn class_of(&self, id: TokenId) -> Option<usize> {
        self.signal_tokens.iter().position(|s| s.contains(&id))
    }
}

pub fn gen_planted(spec: &PlantedSpec) -> Result<PlantedDataset> {
    spec.validate()?;
    let mut names = Vec::with_capacity(spec.vocab_size() - FIRST_FREE_ID);
    for c in 0..spec.num_classes {
        for j in 0..spec.signal_per_class {
            names.push(format!("sig{c}x{j}"));
        }
    }
    for j in 0..spec.distractor_vocab_size {
        names.push(format!("w{j}"));
    }
    let vocab = Vocab::from_tokens(names)?;
    let signal_tokens: Vec<Vec<TokenId>> = (0..spec.num_classes)
        .map(|c| (0..spec.signal_per_class).map(|j| spec.signal_token(c, j)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.num_examples)
        .map(|_| {
            let label = rng.random_range(0..spec.num_classes);
            let pos = rng.random_range(0..spec.seq_len);
            let sig = signal_tokens[label][rng.random_range(0..spec.signal_per_class)];
            let ids = (0..spec.seq_len)
                .map(|i| {
                    if i == pos {
                        sig
                    } else {
                        spec.distractor(rng.random_range(0..spec.distractor_vocab_size))
                    }
                })
                .collect();
            Example {
                token_ids: ids,
                label,
                signal_positions: Some(vec![pos]),
            }
        })
        .collect();
    Ok(PlantedDataset {
        vocab,
        examples,
        signal_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn spec(n: usize, seed: u64) -> PlantedSpec {
        PlantedSpec {
            num_examples: n,
            seq_len: 12,
            num_classes: 2,
            signal_per_class: 1,
            distractor_vocab_size: 195,
            seed,
        }
    }

    #[test]
    fn class_signal_tokens_never_cross() {
        let d = gen_planted(&spec(2000, 3)).unwrap();
        assert_eq!(d.vocab.len(), 200);
        let (s0, s1) = (d.signal_tokens[0][0], d.signal_tokens[1][0]);
        for ex in &d.examples {
            let (own, other) = if ex.label == 0 { (s0, s1) } else { (s1, s0) };
            assert_eq!(ex.token_ids.iter().filter(|&&t| t == own).count(), 1);
            assert!(!ex.token_ids.contains(&other));
            let pos = ex.signal_positions.as_ref().unwrap()[0];
            assert_eq!(ex.token_ids[pos], own);
        }
    }

    #[test]
    fn label_is_a_function_of_the_signal_token() {
        let d = gen_planted(&PlantedSpec {
            num_classes: 4,
            signal_per_class: 3,
            ..spec(1000, 9)
        })
        .unwrap();
        for ex in &d.examples {
            let pos = ex.signal_positions.as_ref().unwrap()[0];
            assert_eq!(d.class_of(ex.token_ids[pos]), Some(ex.label));
            let signals = ex.token_ids.iter().filter(|&&t| d.class_of(t).is_some()).count();
            assert_eq!(signals, 1);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_planted(&spec(300, 5)).unwrap();
        let b = gen_planted(&spec(300, 5)).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = gen_planted(&spec(300, 6)).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn signal_position_is_uniform() {
        let d = gen_planted(&spec(10_000, 11)).unwrap();
        let mut counts = [0f64; 12];
        for ex in &d.examples {
            counts[ex.signal_positions.as_ref().unwrap()[0]] += 1.0;
        }
        let expected = 10_000.0 / 12.0;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(11.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} p {p}");
    }

    #[test]
    fn budget_errors() {
        assert!(PlantedSpec::distractors_for_total(5, 2, 1).is_err());
        assert_eq!(PlantedSpec::distractors_for_total(200, 2, 1).unwrap(), 195);
        assert!(gen_planted(&PlantedSpec {
            distractor_vocab_size: 0,
            ..spec(10, 1)
        })
        .is_err());
        assert!(gen_planted(&PlantedSpec {
            seq_len: 3,
            ..spec(10, 1)
        })
        .is_err());
        assert!(gen_planted(&PlantedSpec {
            signal_per_class: 0,
            ..spec(10, 1)
        })
        .is_err());
    }
}
