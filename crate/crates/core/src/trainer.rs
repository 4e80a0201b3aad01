//! Alternating target/discriminator training driven by masked-detection rewards.
//!
//! One step:
//! 1. forward the target, draw `samples` ε-greedy selections per input and
//!    build the masked batches;
//! 2. update the discriminator on (original, one masked sample) pairs;
//! 3. score every masked sample with the updated discriminator, turn the
//!    scores into baseline-subtracted rewards, and update the target on
//!    `L_cls + λ·L_adv`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{epoch_batches, Batch, Example};
use crate::discriminator::{disc_loss, hide_mask_symbol, Discriminator};
use crate::error::{AfaError, Result};
use crate::masking::{apply_mask, select, MaskSelection};
use crate::nn::{Dropout, Mode};
use crate::numerics::{Adam, Graph, Var, LOG_FLOOR};
use crate::rng::{stream, RngStreams, Stream};
use crate::target::TargetModel;

/// `−log(1 − p)`, with `1 − p` floored at 1e-12.
pub fn reward(p_masked: f64) -> f64 {
    -(1.0 - p_masked).max(LOG_FLOOR).ln()
}

/// Rewards minus their mean.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(AfaError::config("samples", "baseline needs at least 2 rewards"));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub selection: MaskSelection,
    pub raw_reward: f64,
    pub advantage: f64,
}

/// `−(1/M) Σ_m R_m · log π(S_m | a)` on the tape. Advantages enter as constants.
pub fn adversarial_loss(g: &mut Graph, attention: Var, live: usize, samples: &[RewardSample]) -> Result<Var> {
    if samples.is_empty() {
        return Err(AfaError::contract("adversarial loss needs at least one sample"));
    }
    let weight = -1.0 / samples.len() as f64;
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let lp = g.plackett_luce_log_prob(attention, &s.selection.indices, live)?;
        terms.push((lp, weight * s.advantage));
    }
    g.combine(terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_adv: f64,
    pub loss_disc: f64,
    pub mean_reward: f64,
    pub disc_accuracy: f64,
    /// Largest |Σ advantages| over the inputs of the step.
    pub max_advantage_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss_cls: f64,
    pub mean_loss_adv: f64,
    pub mean_loss_disc: f64,
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
}

impl History {
    /// One JSON object per step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Enables best-epoch selection on accuracy.
    pub valid: Option<&'a [Example]>,
    /// Where per-epoch checkpoints go.
    pub checkpoint_dir: Option<&'a Path>,
    /// Skip the discriminator entirely and train on `L_cls` alone.
    pub supervised_only: bool,
}

/// Both models, their optimizers and every random stream of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub target: TargetModel,
    pub disc: Discriminator,
    opt_target: Adam,
    opt_disc: Adam,
    rng: RngStreams,
    step: usize,
}

fn non_finite(quantity: &'static str, step: usize, batch: &Batch) -> AfaError {
    let mut dump = String::new();
    for (ids, label) in batch.token_ids.iter().zip(&batch.labels) {
        dump.push_str(&format!("  label={label} ids={ids:?}\n"));
    }
    AfaError::NonFinite { quantity, step, dump }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let target = TargetModel::new(cfg.target_dims(vocab_size), &mut stream(cfg.seed, Stream::TargetInit))?;
        let disc = Discriminator::new(cfg.disc_dims(vocab_size), &mut stream(cfg.seed, Stream::DiscInit))?;
        Ok(Trainer::from_models(cfg, target, disc))
    }

    pub fn from_models(cfg: TrainConfig, target: TargetModel, disc: Discriminator) -> Self {
        Trainer {
            opt_target: Adam::new(cfg.lr_target, &target.params.params),
            opt_disc: Adam::new(cfg.lr_disc, &disc.params.params),
            rng: RngStreams::new(cfg.seed),
            step: 0,
            cfg,
            target,
            disc,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn disc_view(&self, batch: &Batch) -> Batch {
        if self.cfg.mask_as_unk {
            hide_mask_symbol(batch)
        } else {
            batch.clone()
        }
    }

    /// Draws `samples` selections for every row of `attention`.
    fn draw_selections(&mut self, rows: &[&[f64]]) -> Result<Vec<Vec<MaskSelection>>> {
        let (k, eps, m) = (self.cfg.k, self.cfg.epsilon, self.cfg.samples);
        rows.iter()
            .map(|a| {
                (0..m)
                    .map(|_| select(a, k, eps, &mut self.rng.branch, &mut self.rng.sampling))
                    .collect()
            })
            .collect()
    }

    /// One full adversarial step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step;
        let dropout = self.cfg.dropout;
        let mut out = self.target.forward(
            batch,
            Mode::Train((dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut self.rng.target_dropout,
            })),
        )?;

        // mask-guided perturbation
        let rows: Vec<&[f64]> = (0..batch.len()).map(|b| out.attention_row(b)).collect();
        let selections = self.draw_selections(&rows)?;
        let m = self.cfg.samples;
        let masked: Vec<Batch> = (0..m)
            .map(|j| {
                let per_row: Vec<&MaskSelection> = selections.iter().map(|s| &s[j]).collect();
                apply_mask(batch, &per_row)
            })
            .collect::<Result<_>>()?;

        // discriminator update on (original, one sampled masked) pairs
        let pick: Vec<&MaskSelection> = selections
            .iter()
            .map(|s| &s[self.rng.sampling.random_range(0..m)])
            .collect();
        let paired = apply_mask(batch, &pick)?;
        let (orig_view, paired_view) = (self.disc_view(batch), self.disc_view(&paired));
        let mut dout = self.disc.forward(
            &[&orig_view, &paired_view],
            Mode::Train((dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut self.rng.disc_dropout,
            })),
        )?;
        let correct =
            dout.values(0).iter().filter(|&&p| p < 0.5).count() + dout.values(1).iter().filter(|&&p| p >= 0.5).count();
        let disc_accuracy = correct as f64 / (2 * batch.len()) as f64;
        let ld = disc_loss(&mut dout.graph, dout.probs[0], dout.probs[1])?;
        let loss_disc = dout.graph.value(ld).item();
        if !loss_disc.is_finite() {
            return Err(non_finite("discriminator loss", step, batch));
        }
        self.disc.accumulate_grads(&dout, ld)?;
        if self.target.params.params.iter().any(|p| p.grad.is_some()) {
            return Err(AfaError::contract("discriminator loss reached target parameters"));
        }
        self.opt_disc.step(&mut self.disc.params.params)?;

        // rewards from the updated discriminator
        let views: Vec<Batch> = masked.iter().map(|b| self.disc_view(b)).collect();
        let view_refs: Vec<&Batch> = views.iter().collect();
        let scored = self.disc.forward(&view_refs, Mode::Infer)?;
        let mut reward_sum = 0.0;
        let mut max_adv_sum: f64 = 0.0;
        let mut per_row = Vec::with_capacity(batch.len());
        for (b, sels) in selections.into_iter().enumerate() {
            let raw: Vec<f64> = (0..m).map(|j| reward(scored.values(j)[b])).collect();
            reward_sum += raw.iter().sum::<f64>();
            let adv = advantages(&raw)?;
            max_adv_sum = max_adv_sum.max(adv.iter().sum::<f64>().abs());
            let samples: Vec<RewardSample> = sels
                .into_iter()
                .zip(raw.into_iter().zip(adv))
                .map(|(selection, (raw_reward, advantage))| RewardSample {
                    selection,
                    raw_reward,
                    advantage,
                })
                .collect();
            per_row.push(samples);
        }

        // target update on L_cls + λ·L_adv
        let lcls = TargetModel::classification_loss(&mut out, &batch.labels)?;
        let mut adv_terms = Vec::with_capacity(batch.len());
        for (b, samples) in per_row.iter().enumerate() {
            let l = adversarial_loss(&mut out.graph, out.attention_rows[b], out.live[b], samples)?;
            adv_terms.push((l, 1.0 / batch.len() as f64));
        }
        let ladv = out.graph.combine(adv_terms)?;
        let total = out.graph.combine(vec![(lcls, 1.0), (ladv, self.cfg.lambda)])?;
        let loss_cls = out.graph.value(lcls).item();
        let loss_adv = out.graph.value(ladv).item();
        if !loss_cls.is_finite() {
            return Err(non_finite("classification loss", step, batch));
        }
        if !loss_adv.is_finite() {
            return Err(non_finite("adversarial loss", step, batch));
        }
        self.target.accumulate_grads(&out, total)?;
        if self.disc.params.params.iter().any(|p| p.grad.is_some()) {
            return Err(AfaError::contract("target loss reached discriminator parameters"));
        }
        self.opt_target.step(&mut self.target.params.params)?;
        self.step += 1;

        Ok(StepReport {
            step,
            loss_cls,
            loss_adv,
            loss_disc,
            mean_reward: reward_sum / (batch.len() * m) as f64,
            disc_accuracy,
            max_advantage_sum: max_adv_sum,
        })
    }

    /// Plain supervised step; draws from the same target streams as `train_step`.
    pub fn supervised_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step;
        let dropout = self.cfg.dropout;
        let mut out = self.target.forward(
            batch,
            Mode::Train((dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut self.rng.target_dropout,
            })),
        )?;
        let lcls = TargetModel::classification_loss(&mut out, &batch.labels)?;
        let loss_cls = out.graph.value(lcls).item();
        if !loss_cls.is_finite() {
            return Err(non_finite("classification loss", step, batch));
        }
        self.target.accumulate_grads(&out, lcls)?;
        self.opt_target.step(&mut self.target.params.params)?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss_cls,
            loss_adv: 0.0,
            loss_disc: 0.0,
            mean_reward: 0.0,
            disc_accuracy: 0.0,
            max_advantage_sum: 0.0,
        })
    }

    /// Epoch loop over seeded shuffles.
    ///
    /// With a validation set the target (and discriminator) from the epoch
    /// with the best validation accuracy are restored at the end; otherwise
    /// the final parameters are kept.
    pub fn fit(&mut self, train: &[Example], opts: FitOptions<'_>) -> Result<History> {
        let mut history = History::default();
        let mut best: Option<(f64, TargetModel, Discriminator)> = None;
        for epoch in 0..self.cfg.epochs {
            let batches = epoch_batches(train, self.cfg.batch_size, &mut self.rng.shuffle)?;
            let (mut cls, mut adv, mut dl) = (0.0, 0.0, 0.0);
            for batch in &batches {
                let report = if opts.supervised_only {
                    self.supervised_step(batch)?
                } else {
                    self.train_step(batch)?
                };
                cls += report.loss_cls;
                adv += report.loss_adv;
                dl += report.loss_disc;
                history.steps.push(report);
            }
            let nb = batches.len().max(1) as f64;
            let valid_accuracy = match opts.valid {
                Some(v) => Some(crate::evaluation::accuracy(&self.target, v, self.cfg.batch_size)?),
                None => None,
            };
            if let Some(acc) = valid_accuracy {
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, self.target.clone(), self.disc.clone()));
                    history.best_epoch = Some(epoch);
                }
            }
            if let Some(dir) = opts.checkpoint_dir {
                checkpoint::save(
                    &dir.join(format!("epoch{epoch:03}.afa")),
                    Some(&self.target),
                    Some(&self.disc),
                )?;
            }
            history.epochs.push(EpochSummary {
                epoch,
                mean_loss_cls: cls / nb,
                mean_loss_adv: adv / nb,
                mean_loss_disc: dl / nb,
                valid_accuracy,
            });
        }
        if let Some((_, target, disc)) = best {
            self.target = target;
            self.disc = disc;
        }
        if let Some(dir) = opts.checkpoint_dir {
            checkpoint::save(&dir.join("best.afa"), Some(&self.target), Some(&self.disc))?;
        }
        Ok(history)
    }
}

/// Builds fresh models from `cfg` and trains them.
pub fn fit(
    cfg: &TrainConfig,
    vocab_size: usize,
    train: &[Example],
    opts: FitOptions<'_>,
) -> Result<(Trainer, History)> {
    let mut trainer = Trainer::new(cfg.clone(), vocab_size)?;
    let history = trainer.fit(train, opts)?;
    Ok((trainer, history))
}
