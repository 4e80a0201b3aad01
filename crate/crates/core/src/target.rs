//! Transformer classifier whose last-token attention row is the token
//! importance distribution the adversary acts on.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TokenId};
use crate::error::{AfaError, Result};
use crate::nn::{encode, glorot, init_encoder, EncoderDims, Mode, ParamSet};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDims {
    pub encoder: EncoderDims,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub dims: TargetDims,
    pub params: ParamSet,
}

/// Everything one forward pass produces, including the tape so callers can
/// extend the loss and run backward.
#[derive(Debug)]
pub struct TargetOutput {
    pub graph: Graph,
    /// `B × C` classification logits.
    pub logits: Var,
    /// Per-row `1 × n` head-averaged attention of the last live token.
    pub attention_rows: Vec<Var>,
    /// Values of `attention_rows`, stacked `B × n`.
    pub attention: Tensor,
    /// `B × h × n × n` per-head attention matrices.
    pub full_attention: Tensor,
    pub live: Vec<usize>,
    param_vars: Vec<Var>,
}

impl TargetOutput {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.graph.value(self.logits))
    }

    /// Attention of row `b` restricted to its live positions.
    pub fn attention_row(&self, b: usize) -> &[f64] {
        &self.attention.row(b)[..self.live[b]]
    }
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl TargetModel {
    pub fn new<R: Rng>(dims: TargetDims, rng: &mut R) -> Result<Self> {
        dims.encoder.validate()?;
        if dims.num_classes < 2 {
            return Err(AfaError::config("num_classes", "must be at least 2"));
        }
        let mut params = ParamSet::new();
        init_encoder(&dims.encoder, &mut params, rng);
        params.push("classifier.w", glorot(dims.encoder.d_model, dims.num_classes, rng));
        params.push("classifier.b", Tensor::zeros(&[1, dims.num_classes]));
        Ok(TargetModel { dims, params })
    }

    pub fn forward(&self, batch: &Batch, mode: Mode<'_>) -> Result<TargetOutput> {
        let enc = &self.dims.encoder;
        if batch.max_id() as usize >= enc.vocab {
            return Err(AfaError::Index {
                what: "token id",
                index: batch.max_id() as usize,
                bound: enc.vocab,
            });
        }
        let mut g = Graph::new();
        let (trainable, mut dropout) = match mode {
            Mode::Infer => (false, None),
            Mode::Train(d) => (true, d),
        };
        let vars = self.params.bind(&mut g, trainable);
        let n = batch.width();
        let h = enc.heads;
        let mut pooled = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        let mut live = Vec::with_capacity(batch.len());
        let mut attention = Vec::with_capacity(batch.len() * n);
        let mut full = Vec::with_capacity(batch.len() * h * n * n);
        for b in 0..batch.len() {
            let len = batch.live_len(b);
            let out = encode(&mut g, &vars, enc, &batch.token_ids[b], len, dropout.as_mut())?;
            pooled.push(g.mean_rows(out.hidden, len)?);
            let mut terms = Vec::with_capacity(h);
            for &head in &out.head_attention {
                full.extend_from_slice(g.value(head).data());
                terms.push((g.select_row(head, len - 1)?, 1.0 / h as f64));
            }
            let a = g.combine(terms)?;
            attention.extend_from_slice(g.value(a).data());
            rows.push(a);
            live.push(len);
        }
        let pooled = g.concat_rows(pooled)?;
        let cls = self.params.len() - 2;
        let logits = g.matmul(pooled, vars[cls])?;
        let logits = g.add_row(logits, vars[cls + 1])?;
        Ok(TargetOutput {
            graph: g,
            logits,
            attention_rows: rows,
            attention: Tensor::new(vec![batch.len(), n], attention)?,
            full_attention: Tensor::new(vec![batch.len(), h, n, n], full)?,
            live,
            param_vars: vars,
        })
    }

    /// Mean cross-entropy of `labels` against the output logits.
    pub fn classification_loss(out: &mut TargetOutput, labels: &[usize]) -> Result<Var> {
        out.graph.cross_entropy(out.logits, labels)
    }

    /// Backpropagates `loss` through the output's tape into `grad` of every parameter.
    pub fn accumulate_grads(&mut self, out: &TargetOutput, loss: Var) -> Result<()> {
        let grads = out.graph.backward(loss)?;
        self.params.accumulate(&grads, &out.param_vars)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.forward(batch, Mode::Infer)?.predictions())
    }

    /// Overwrites embedding rows with externally trained vectors; returns how many were set.
    pub fn apply_embeddings(&mut self, rows: &BTreeMap<TokenId, Vec<f64>>) -> Result<usize> {
        let d = self.dims.encoder.d_model;
        let table = &mut self.params.params[0].value;
        let mut set = 0;
        for (&id, row) in rows {
            if row.len() != d {
                return Err(AfaError::Shape {
                    op: "apply_embeddings",
                    left: vec![d],
                    right: vec![row.len()],
                });
            }
            if (id as usize) < table.rows() {
                table.data_mut()[id as usize * d..(id as usize + 1) * d].copy_from_slice(row);
                set += 1;
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(positional: bool) -> TargetModel {
        let dims = TargetDims {
            encoder: EncoderDims {
                vocab: 20,
                d_model: 8,
                heads: 2,
                d_ff: 16,
                positional,
            },
            num_classes: 3,
        };
        TargetModel::new(dims, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = model(true);
        let batch = Batch::from_sequences(vec![vec![7]], vec![0]).unwrap();
        let out = m.forward(&batch, Mode::Infer).unwrap();
        assert_eq!(out.attention.data(), &[1.0]);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = model(true);
        let seq = vec![5, 9, 11, 3];
        let batch = Batch::from_sequences(vec![seq.clone(), seq], vec![0, 0]).unwrap();
        let out = m.forward(&batch, Mode::Infer).unwrap();
        let z = out.graph.value(out.logits);
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(out.attention.row(0), out.attention.row(1));
    }

    #[test]
    fn padding_gets_no_attention() {
        let m = model(true);
        let batch = Batch::from_sequences(vec![vec![5, 9, 11, 3, 4], vec![8, 6]], vec![0, 1]).unwrap();
        let out = m.forward(&batch, Mode::Infer).unwrap();
        let row = out.attention.row(1);
        assert!(row[2..].iter().all(|&v| v < 1e-12));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.full_attention.shape(), &[2, 2, 5, 5]);
    }

    #[test]
    fn out_of_vocab_id_is_index_error() {
        let m = model(true);
        let batch = Batch::from_sequences(vec![vec![5, 20]], vec![0]).unwrap();
        assert!(matches!(
            m.forward(&batch, Mode::Infer),
            Err(AfaError::Index { index: 20, .. })
        ));
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let m = model(true);
        let batch = Batch::from_sequences(vec![vec![5, 9, 11], vec![3, 4]], vec![0, 1]).unwrap();
        let a = m.forward(&batch, Mode::Infer).unwrap();
        let b = m.forward(&batch, Mode::Infer).unwrap();
        assert_eq!(a.graph.value(a.logits), b.graph.value(b.logits));
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn dims_must_split_across_heads() {
        let dims = TargetDims {
            encoder: EncoderDims {
                vocab: 20,
                d_model: 9,
                heads: 2,
                d_ff: 4,
                positional: false,
            },
            num_classes: 2,
        };
        assert!(TargetModel::new(dims, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn embeddings_overwrite_rows() {
        let mut m = model(false);
        let mut rows = BTreeMap::new();
        rows.insert(4, vec![0.25; 8]);
        assert_eq!(m.apply_embeddings(&rows).unwrap(), 1);
        assert_eq!(m.params.params[0].value.row(4), &[0.25; 8]);
        rows.insert(5, vec![1.0; 3]);
        assert!(m.apply_embeddings(&rows).is_err());
    }
}
