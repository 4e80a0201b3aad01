//! Single-block encoder with a sigmoid head that scores `P(sequence was masked)`.
//!
//! The interface takes token ids only; no task label ever reaches it.

use rand::Rng;

use crate::corpus::{Batch, MASK, UNK};
use crate::error::{AfaError, Result};
use crate::nn::{encode, glorot, init_encoder, EncoderDims, Mode, ParamSet};
use crate::numerics::{Graph, Tensor, Var, LOG_FLOOR};

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub dims: EncoderDims,
    pub params: ParamSet,
}

#[derive(Debug)]
pub struct DiscOutput {
    pub graph: Graph,
    /// One `B × 1` probability column per input batch.
    pub probs: Vec<Var>,
    param_vars: Vec<Var>,
}

impl DiscOutput {
    pub fn values(&self, i: usize) -> &[f64] {
        self.graph.value(self.probs[i]).data()
    }
}

/// Replaces MASK with UNK, hiding the literal mask symbol from the discriminator.
pub fn hide_mask_symbol(batch: &Batch) -> Batch {
    let mut out = batch.clone();
    for id in out.token_ids.iter_mut().flatten() {
        if *id == MASK {
            *id = UNK;
        }
    }
    out
}

impl Discriminator {
    pub fn new<R: Rng>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        init_encoder(&dims, &mut params, rng);
        params.push("head.w", glorot(dims.d_model, 1, rng));
        params.push("head.b", Tensor::zeros(&[1, 1]));
        Ok(Discriminator { dims, params })
    }

    /// Sets the scalar head to zero so every input scores exactly 0.5.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for p in &mut self.params.params[n - 2..] {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Scores each batch on one shared tape.
    pub fn forward(&self, batches: &[&Batch], mode: Mode<'_>) -> Result<DiscOutput> {
        let mut g = Graph::new();
        let (trainable, mut dropout) = match mode {
            Mode::Infer => (false, None),
            Mode::Train(d) => (true, d),
        };
        let vars = self.params.bind(&mut g, trainable);
        let head = self.params.len() - 2;
        let mut probs = Vec::with_capacity(batches.len());
        for batch in batches {
            if batch.max_id() as usize >= self.dims.vocab {
                return Err(AfaError::Index {
                    what: "token id",
                    index: batch.max_id() as usize,
                    bound: self.dims.vocab,
                });
            }
            let mut pooled = Vec::with_capacity(batch.len());
            for b in 0..batch.len() {
                let len = batch.live_len(b);
                let out = encode(&mut g, &vars, &self.dims, &batch.token_ids[b], len, dropout.as_mut())?;
                pooled.push(g.mean_rows(out.hidden, len)?);
            }
            let pooled = g.concat_rows(pooled)?;
            let logit = g.matmul(pooled, vars[head])?;
            let logit = g.add_row(logit, vars[head + 1])?;
            let p = g.sigmoid(logit);
            probs.push(g.clamp(p, LOG_FLOOR, 1.0 - LOG_FLOOR));
        }
        Ok(DiscOutput {
            graph: g,
            probs,
            param_vars: vars,
        })
    }

    /// Inference-mode probabilities for one batch.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let out = self.forward(&[batch], Mode::Infer)?;
        Ok(out.values(0).to_vec())
    }

    pub fn accumulate_grads(&mut self, out: &DiscOutput, loss: Var) -> Result<()> {
        let grads = out.graph.backward(loss)?;
        self.params.accumulate(&grads, &out.param_vars)
    }
}

/// `−[log(1 − p_orig) + log(p_masked)]`, batch-averaged; originals are
/// labelled 0 and masked sequences 1.
pub fn disc_loss(g: &mut Graph, p_orig: Var, p_masked: Var) -> Result<Var> {
    let n_orig = g.value(p_orig).numel();
    let n_masked = g.value(p_masked).numel();
    if n_orig != n_masked {
        return Err(AfaError::Shape {
            op: "disc_loss",
            left: g.value(p_orig).shape().to_vec(),
            right: g.value(p_masked).shape().to_vec(),
        });
    }
    let orig = g.binary_cross_entropy(p_orig, vec![0.0; n_orig])?;
    let masked = g.binary_cross_entropy(p_masked, vec![1.0; n_masked])?;
    g.add(orig, masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc() -> Discriminator {
        let dims = EncoderDims {
            vocab: 16,
            d_model: 8,
            heads: 2,
            d_ff: 8,
            positional: true,
        };
        Discriminator::new(dims, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn zeroed_head_scores_one_half() {
        let mut d = disc();
        d.zero_head();
        let batch = Batch::from_sequences(vec![vec![4, 5, 6], vec![MASK, 9]], vec![0, 0]).unwrap();
        assert_eq!(d.predict(&batch).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn identical_rows_identical_scores() {
        let d = disc();
        let batch = Batch::from_sequences(vec![vec![4, 5, 6], vec![4, 5, 6]], vec![0, 1]).unwrap();
        let p = d.predict(&batch).unwrap();
        assert_eq!(p[0], p[1]);
        assert!(p[0] > 0.0 && p[0] < 1.0);
    }

    #[test]
    fn loss_fixtures() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::full(&[3, 1], 0.5));
        let l = disc_loss(&mut g, half, half).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let lo = g.constant(Tensor::full(&[2, 1], LOG_FLOOR));
        let hi = g.constant(Tensor::full(&[2, 1], 1.0 - LOG_FLOOR));
        let l = disc_loss(&mut g, lo, hi).unwrap();
        assert!(g.value(l).item() < 1e-11);
    }

    #[test]
    fn loss_decreases_in_p_masked() {
        for &p in &[0.01, 0.2, 0.5, 0.8, 0.99] {
            let mut g = Graph::new();
            let orig = g.param(Tensor::full(&[1, 1], 0.3));
            let masked = g.param(Tensor::full(&[1, 1], p));
            let l = disc_loss(&mut g, orig, masked).unwrap();
            let grads = g.backward(l).unwrap();
            assert!(grads.get(masked).unwrap().item() < 0.0);
            assert!(grads.get(orig).unwrap().item() > 0.0);
        }
    }

    #[test]
    fn mask_symbol_can_be_hidden() {
        let b = Batch::from_sequences(vec![vec![4, MASK, 6]], vec![0]).unwrap();
        assert_eq!(hide_mask_symbol(&b).token_ids[0], vec![4, UNK, 6]);
    }
}
