//! Masked-autoencoder pre-training loop.
//!
//! Each step draws a batch from the current epoch's shuffled order, draws one
//! mask plan per sample, computes per-sample gradients (concurrently when
//! enabled), sums them in batch order, and applies one AdamW update.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::masking::{context_aware_mask, MaskPlan};
use crate::model::{self, ModelParams, PositionTables, ViTConfig};
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamWConfig, AdamWState, Schedule};
use crate::par::{self, Execution};
use crate::patch::patchify;
use crate::phantom::PhantomSample;
use crate::rng::{self, Purpose, Rng, RngCursor};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSettings {
    pub ratio: f64,
    pub inside_weight: f64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        MaskSettings {
            ratio: 0.75,
            inside_weight: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ViTConfig,
    pub optim: AdamWConfig,
    pub schedule: Schedule,
    /// `None` means 5% of the total step count, rounded.
    pub warmup_steps: Option<u64>,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `epochs` as the run length when set.
    pub max_steps: Option<u64>,
    /// Micro-batches per step. Changes peak memory, not results.
    pub accum_steps: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub mask: MaskSettings,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ViTConfig::default(),
            optim: AdamWConfig::default(),
            schedule: Schedule::Cosine,
            warmup_steps: None,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            accum_steps: 1,
            clip_norm: None,
            seed: 0,
            mask: MaskSettings::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::config("batch_size and accum_steps must be at least 1"));
        }
        if self.accum_steps > self.batch_size {
            return Err(Error::config("accum_steps cannot exceed batch_size"));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) {
            return Err(Error::config(format!("mask ratio {} must lie in (0, 1)", self.mask.ratio)));
        }
        if !(self.mask.inside_weight >= 1.0 && self.mask.inside_weight.is_finite()) {
            return Err(Error::config("inside_weight must be finite and at least 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(dataset_len))
    }

    pub fn warmup(&self, total: u64) -> u64 {
        self.warmup_steps.unwrap_or((total as f64 * 0.05).round() as u64)
    }
}

/// Samples and mask plans of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub plans: Vec<MaskPlan>,
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub inside_rate: f64,
    pub outside_rate: f64,
    /// Wall time of the step; the only non-deterministic column.
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,inside_rate,outside_rate,seconds";

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.step, r.lr, r.loss, r.inside_rate, r.outside_rate, r.seconds
        );
    }
    out
}

/// Mean masked-patch loss of a batch, from a forward pass only.
pub fn batch_loss(
    params: &ModelParams,
    cfg: &ViTConfig,
    data: &[PhantomSample],
    batch: &Batch,
) -> Result<f64> {
    let pos = PositionTables::<f32>::new(cfg)?;
    let mut total = 0.0;
    for (&i, plan) in batch.indices.iter().zip(&batch.plans) {
        let mut tape = Tape::no_grad();
        let vars = model::bind(&mut tape, params, false);
        let fwd = model::mae_forward(&mut tape, &vars, cfg, &pos, patchify(&data[i].image, &cfg.patch)?, plan)?;
        total += tape.value(fwd.loss).item() as f64;
    }
    Ok(total / batch.indices.len() as f64)
}

fn sample_gradient(
    params: &ModelParams,
    cfg: &ViTConfig,
    pos: &PositionTables<f32>,
    sample: &PhantomSample,
    plan: &MaskPlan,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = model::bind(&mut tape, params, true);
    let fwd = model::mae_forward(&mut tape, &vars, cfg, pos, patchify(&sample.image, &cfg.patch)?, plan)?;
    let loss = tape.value(fwd.loss).item() as f64;
    let mut grads = tape.backward(fwd.loss)?;
    let out = vars
        .fields()
        .into_iter()
        .zip(params.fields())
        .map(|((_, _, &v), (_, _, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss, out))
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d [PhantomSample],
    exec: Execution,
    pos: PositionTables<f32>,
    params: ModelParams,
    adam: AdamWState,
    step: u64,
    total: u64,
    order: Vec<usize>,
    epoch_cursor: RngCursor,
    data_rng: Rng,
    mask_rng: Rng,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d [PhantomSample], exec: Execution) -> Result<Self> {
        let params = model::init_params(&cfg.model, cfg.seed)?;
        let adam = AdamWState::new(&params);
        let rng = RngState {
            data: RngCursor::capture(rng::sub_seed(cfg.seed, Purpose::Data), &rng::stream(cfg.seed, Purpose::Data)),
            masking: RngCursor::capture(
                rng::sub_seed(cfg.seed, Purpose::Masking),
                &rng::stream(cfg.seed, Purpose::Masking),
            ),
        };
        Self::assemble(cfg, data, exec, params, adam, 0, rng)
    }

    /// Continues a run from a checkpoint; the remaining steps match an
    /// uninterrupted run exactly.
    pub fn resume(ckpt: Checkpoint, data: &'d [PhantomSample], exec: Execution) -> Result<Self> {
        Self::assemble(ckpt.config, data, exec, ckpt.params, ckpt.optimizer, ckpt.step, ckpt.rng)
    }

    fn assemble(
        cfg: TrainConfig,
        data: &'d [PhantomSample],
        exec: Execution,
        params: ModelParams,
        adam: AdamWState,
        step: u64,
        rng: RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let g = cfg.model.patch.grid_side();
        if let Some(s) = data.iter().find(|s| {
            s.image.side() != cfg.model.patch.image_side || s.region.grid_side() != g
        }) {
            return Err(Error::config(format!(
                "sample {} does not match the configured image and patch grid",
                s.seed
            )));
        }
        params.check_config(&cfg.model)?;
        let mut t = Trainer {
            pos: PositionTables::new(&cfg.model)?,
            total: cfg.total_steps(data.len()),
            data_rng: rng.data.restore()?,
            mask_rng: rng.masking.restore()?,
            epoch_cursor: rng.data,
            order: Vec::new(),
            cfg,
            data,
            exec,
            params,
            adam,
            step,
        };
        t.shuffle_epoch();
        Ok(t)
    }

    fn shuffle_epoch(&mut self) {
        self.epoch_cursor = RngCursor::capture(self.epoch_cursor.seed, &self.data_rng);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut self.data_rng);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    fn epoch(&self) -> u64 {
        self.step / self.cfg.steps_per_epoch(self.data.len())
    }

    fn draw_batch(&self, mask_rng: &mut Rng) -> Result<Batch> {
        let spe = self.cfg.steps_per_epoch(self.data.len());
        let start = (self.step % spe) as usize * self.cfg.batch_size;
        let indices: Vec<usize> = self.order[start..(start + self.cfg.batch_size).min(self.order.len())].to_vec();
        let plans = indices
            .iter()
            .map(|&i| context_aware_mask(&self.data[i].region, self.cfg.mask.ratio, self.cfg.mask.inside_weight, mask_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { indices, plans })
    }

    /// The batch the next step will use, without consuming any randomness.
    pub fn peek_batch(&self) -> Result<Batch> {
        self.draw_batch(&mut self.mask_rng.clone())
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::contract("training already finished"));
        }
        let started = Instant::now();
        let mut mask_rng = self.mask_rng.clone();
        let batch = self.draw_batch(&mut mask_rng)?;
        let b = batch.indices.len();
        let micro = b.div_ceil(self.cfg.accum_steps);

        let mut loss = 0.0;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for chunk in (0..b).collect::<Vec<_>>().chunks(micro) {
            let results = par::map_slice(self.exec, chunk, |&k| {
                let i = batch.indices[k];
                sample_gradient(&self.params, &self.cfg.model, &self.pos, &self.data[i], &batch.plans[k])
            });
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            a.add_assign(x)?;
                        }
                    }
                }
            }
        }
        let mut grads = ModelParams::from_slots(
            self.cfg.model.enc_depth,
            self.cfg.model.dec_depth,
            sum.expect("batch is never empty"),
        )?;
        for g in grads.slots_mut() {
            g.scale_in_place(1.0 / b as f32);
        }
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let warmup = self.cfg.warmup(self.total);
        let lr = lr_at(self.step, self.cfg.optim.lr, warmup, self.total, self.cfg.schedule);
        adamw_step(&mut self.params, &grads, &mut self.adam, &self.cfg.optim, lr)?;

        let (mut inside, mut inside_n, mut outside, mut outside_n) = (0usize, 0usize, 0usize, 0usize);
        for (&i, plan) in batch.indices.iter().zip(&batch.plans) {
            let region = &self.data[i].region;
            inside_n += region.inside_count();
            outside_n += region.outside_count();
            let hit = plan.masked().iter().filter(|&&t| region.is_inside(t)).count();
            inside += hit;
            outside += plan.masked().len() - hit;
        }
        let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };

        let record = StepRecord {
            step: self.step,
            lr,
            loss: loss / b as f64,
            inside_rate: rate(inside, inside_n),
            outside_rate: rate(outside, outside_n),
            seconds: started.elapsed().as_secs_f64(),
        };
        self.mask_rng = mask_rng;
        self.step += 1;
        if self.step % self.cfg.steps_per_epoch(self.data.len()) == 0 {
            self.shuffle_epoch();
        }
        log::debug!("step {} loss {:.6} lr {:.3e}", record.step, record.loss, record.lr);
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            optimizer: self.adam.clone(),
            step: self.step,
            epoch: self.epoch(),
            rng: RngState {
                data: self.epoch_cursor.clone(),
                masking: RngCursor::capture(rng::sub_seed(self.cfg.seed, Purpose::Masking), &self.mask_rng),
            },
        }
    }

    /// Runs to completion. With an output directory, writes
    /// `ckpt_<step>.bin` every `checkpoint_every` steps, `final.bin`, and
    /// `metrics.csv`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut log = Vec::new();
        while !self.is_done() {
            log.push(self.train_step()?);
            if let (Some(dir), Some(k)) = (out_dir, self.cfg.checkpoint_every) {
                if self.step % k == 0 && !self.is_done() {
                    save_checkpoint(&self.checkpoint(), dir.join(format!("ckpt_{:06}.bin", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), dir.join("final.bin"))?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&log))?;
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final checkpoint with the metric log.
pub fn train(
    cfg: TrainConfig,
    data: &[PhantomSample],
    exec: Execution,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut t = Trainer::new(cfg, data, exec)?;
    let log = t.run(out_dir)?;
    Ok((t.checkpoint(), log))
}
