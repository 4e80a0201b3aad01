//! Single post-norm Transformer encoder block shared by both models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{AfaError, Result};
use crate::numerics::{Gradients, Graph, Parameter, Tensor, Var};

/// Additive attention logit at PAD keys.
pub const PAD_LOGIT: f64 = -1e9;

/// Standard deviation of the random embedding initialisation.
pub const EMBED_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub positional: bool,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= 3 {
            return Err(AfaError::config("vocab", "must exceed the three reserved ids"));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(AfaError::config(
                "d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.d_ff == 0 {
            return Err(AfaError::config("d_ff", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of parameter tensors in the block (embedding included).
    #[cfg(test)]
    pub(crate) fn param_count(&self) -> usize {
        1 + 3 * self.heads + 9
    }
}

/// Fixed parameter order: embedding, per-head (Q, K, V), output projection,
/// first norm, feed-forward (W1, b1, W2, b2), second norm.
struct Slots {
    heads: usize,
}

impl Slots {
    const EMBED: usize = 0;
    fn q(&self, h: usize) -> usize {
        1 + 3 * h
    }
    fn k(&self, h: usize) -> usize {
        2 + 3 * h
    }
    fn v(&self, h: usize) -> usize {
        3 + 3 * h
    }
    fn tail(&self, i: usize) -> usize {
        1 + 3 * self.heads + i
    }
}

/// Named, ordered list of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub(crate) fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.params.push(Parameter::new(value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Puts every tensor on the tape; as constants when `trainable` is false.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Adds the tape gradients of `vars` into each parameter's `grad`.
    pub(crate) fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = grads
                .get(v)
                .ok_or_else(|| AfaError::contract("parameter was bound as a constant"))?;
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

pub(crate) fn init_encoder<R: Rng>(dims: &EncoderDims, set: &mut ParamSet, rng: &mut R) {
    let (d, dk) = (dims.d_model, dims.head_dim());
    let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
    let emb = (0..dims.vocab * d).map(|_| normal.sample(rng)).collect();
    set.push(
        "embedding",
        Tensor::new(vec![dims.vocab, d], emb).expect("consistent shape"),
    );
    for h in 0..dims.heads {
        set.push(format!("head{h}.w_q"), glorot(d, dk, rng));
        set.push(format!("head{h}.w_k"), glorot(d, dk, rng));
        set.push(format!("head{h}.w_v"), glorot(d, dk, rng));
    }
    set.push("w_o", glorot(d, d, rng));
    set.push("norm1.gain", Tensor::full(&[1, d], 1.0));
    set.push("norm1.bias", Tensor::zeros(&[1, d]));
    set.push("ff.w1", glorot(d, dims.d_ff, rng));
    set.push("ff.b1", Tensor::zeros(&[1, dims.d_ff]));
    set.push("ff.w2", glorot(dims.d_ff, d, rng));
    set.push("ff.b2", Tensor::zeros(&[1, d]));
    set.push("norm2.gain", Tensor::full(&[1, d], 1.0));
    set.push("norm2.bias", Tensor::zeros(&[1, d]));
}

/// Sinusoidal position table, `n × d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(expo);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("consistent shape")
}

/// Inverted dropout driven by a caller-owned stream.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask = (0..g.value(x).numel())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        g.mul_const(x, mask)
    }
}

/// Whether a forward pass records gradients, and with which dropout.
pub enum Mode<'a> {
    /// Parameters enter the tape as constants; no dropout.
    Infer,
    /// Parameters are trainable leaves; dropout when provided.
    Train(Option<Dropout<'a>>),
}

impl<'a> Mode<'a> {
    pub fn train_without_dropout() -> Mode<'a> {
        Mode::Train(None)
    }
}

pub(crate) struct Encoded {
    /// `n × d` block output.
    pub hidden: Var,
    /// One `n × n` attention matrix per head.
    pub head_attention: Vec<Var>,
}

/// Runs the block over one right-padded row whose first `live` ids are real tokens.
pub(crate) fn encode(
    g: &mut Graph,
    vars: &[Var],
    dims: &EncoderDims,
    ids: &[TokenId],
    live: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Encoded> {
    let slots = Slots { heads: dims.heads };
    let n = ids.len();
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= dims.vocab) {
        return Err(AfaError::Index {
            what: "token id",
            index: bad as usize,
            bound: dims.vocab,
        });
    }
    let mut x = g.gather(vars[Slots::EMBED], ids.iter().map(|&i| i as usize).collect())?;
    if dims.positional {
        x = g.add_const(x, &positional_encoding(n, dims.d_model))?;
    }

    let mut key_mask = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in 0..n {
            if c >= live || ids[c] == PAD {
                key_mask.data_mut()[r * n + c] = PAD_LOGIT;
            }
        }
    }
    let inv_sqrt_dk = 1.0 / (dims.head_dim() as f64).sqrt();
    let mut head_out = Vec::with_capacity(dims.heads);
    let mut head_attention = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let q = g.matmul(x, vars[slots.q(h)])?;
        let k = g.matmul(x, vars[slots.k(h)])?;
        let v = g.matmul(x, vars[slots.v(h)])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt_dk);
        let scores = g.add_const(scores, &key_mask)?;
        let attn = g.softmax_rows(scores)?;
        head_out.push(g.matmul(attn, v)?);
        head_attention.push(attn);
    }
    let heads = g.concat_cols(head_out)?;
    let mut attn_out = g.matmul(heads, vars[slots.tail(0)])?;
    if let Some(d) = dropout.as_deref_mut() {
        attn_out = d.apply(g, attn_out)?;
    }
    let res1 = g.add(x, attn_out)?;
    let h1 = g.layer_norm(res1, vars[slots.tail(1)], vars[slots.tail(2)])?;

    let ff = g.matmul(h1, vars[slots.tail(3)])?;
    let ff = g.add_row(ff, vars[slots.tail(4)])?;
    let ff = g.relu(ff);
    let ff = g.matmul(ff, vars[slots.tail(5)])?;
    let mut ff = g.add_row(ff, vars[slots.tail(6)])?;
    if let Some(d) = dropout {
        ff = d.apply(g, ff)?;
    }
    let res2 = g.add(h1, ff)?;
    let hidden = g.layer_norm(res2, vars[slots.tail(7)], vars[slots.tail(8)])?;
    Ok(Encoded { hidden, head_attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn heads_must_divide_width() {
        let dims = EncoderDims {
            vocab: 10,
            d_model: 10,
            heads: 4,
            d_ff: 8,
            positional: false,
        };
        assert!(dims.validate().is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let dims = EncoderDims {
            vocab: 10,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            positional: true,
        };
        let mut set = ParamSet::new();
        init_encoder(&dims, &mut set, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(set.len(), dims.param_count());
        assert_eq!(set.names[Slots { heads: 2 }.tail(0)], "w_o");
    }

    #[test]
    fn positional_table_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(1, 3) - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn dropout_keeps_expected_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut drop = Dropout {
            rate: 0.3,
            rng: &mut rng,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[100, 100], 1.0));
        let y = drop.apply(&mut g, x).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v > 0.0).count();
        assert!((kept as f64 / 10_000.0 - 0.7).abs() < 0.02);
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03);
    }
}
