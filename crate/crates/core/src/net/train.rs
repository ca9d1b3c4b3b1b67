//! Minibatch training over the annotated frames of a set of sequences.

use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, LrSchedule, TrainState};
use super::loss::loss;
use super::model::{backward, forward, update_running_stats, Batch, Mode};
use super::params::{ModelConfig, ModelParams};
use crate::data::ScanSequence;
use crate::error::{Error, Result};
use crate::preproc::{make_training_targets, temporal_cutouts_into, PointTarget, PreprocConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Decay length of the learning-rate schedule. `None` scales the
    /// default 40 + 10 shape to `epochs`.
    pub decay_epochs: Option<usize>,
    pub base_lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
    /// Foreground beams drawn per annotated frame and epoch; the same number
    /// of background beams is drawn alongside.
    pub samples_per_frame: usize,
    pub vote_weight: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            decay_epochs: None,
            base_lr: 1e-3,
            final_lr: 1e-6,
            batch_size: 128,
            samples_per_frame: 32,
            vote_weight: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.samples_per_frame == 0 {
            return Err(Error::Config("batch_size and samples_per_frame must be >= 1".into()));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::Config("need 0 < final_lr <= base_lr".into()));
        }
        if !(self.vote_weight >= 0.0) {
            return Err(Error::Config("vote_weight must be >= 0".into()));
        }
        if self.decay_epochs.is_some_and(|d| d > self.epochs) {
            return Err(Error::Config("decay_epochs exceeds epochs".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        let mut s = LrSchedule::compressed(self.epochs);
        if let Some(d) = self.decay_epochs {
            s.decay_epochs = d;
        }
        s.base_lr = self.base_lr;
        s.final_lr = self.final_lr;
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams<f32>,
    /// Mean minibatch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
}

struct Frame {
    sequence: usize,
    frame: usize,
    foreground: Vec<usize>,
    background: Vec<usize>,
    targets: Vec<PointTarget>,
}

fn check_configs(preproc: &PreprocConfig, model: &ModelConfig) -> Result<()> {
    preproc.validate()?;
    model.validate()?;
    if preproc.frames() != model.input_frames {
        return Err(Error::ConfigMismatch(format!(
            "preprocessing yields {} frames, model expects {}",
            preproc.frames(),
            model.input_frames
        )));
    }
    if preproc.num_cutout_points != model.input_points {
        return Err(Error::ConfigMismatch(format!(
            "preprocessing yields {} points, model expects {}",
            preproc.num_cutout_points, model.input_points
        )));
    }
    Ok(())
}

fn frames_of(sequences: &[ScanSequence], preproc: &PreprocConfig) -> Vec<Frame> {
    let mut frames = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        for &s in &seq.annotated_seqs {
            let Some(fi) = seq.index_of(s) else { continue };
            let targets = make_training_targets(
                &seq.scans[fi],
                &seq.geometry,
                seq.annotations_for(s),
                preproc.label_radius,
            );
            let (foreground, background) =
                (0..targets.len()).partition(|&b| targets[b].has_vote);
            frames.push(Frame {
                sequence: si,
                frame: fi,
                foreground,
                background,
                targets,
            });
        }
    }
    frames
}

/// Builds network inputs for `samples`, preserving their order.
pub(crate) fn assemble_batch(
    sequences: &[ScanSequence],
    preproc: &PreprocConfig,
    samples: &[(usize, usize, usize)],
) -> Result<Batch<f32>> {
    let frames = preproc.frames();
    let np = preproc.num_cutout_points;
    let mut data = vec![0.0f64; samples.len() * frames * np];
    for (&(si, fi, beam), out) in samples.iter().zip(data.chunks_mut(frames * np)) {
        let seq = &sequences[si];
        let w = seq.window_at(fi, preproc.time_window);
        temporal_cutouts_into(&w.scans, w.odometry(), &[beam], &seq.geometry, preproc, out)?;
    }
    Batch::from_f64(samples.len(), frames, np, &data)
}

/// Trains a fresh model. Deterministic for a fixed seed.
pub fn train(
    sequences: &[ScanSequence],
    preproc: &PreprocConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    check_configs(preproc, model)?;
    cfg.validate()?;
    let frames = frames_of(sequences, preproc);
    if frames.is_empty() {
        return Err(Error::Empty("no annotated frames to train on".into()));
    }
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::<f32>::init(*model, rng.random())?;
    let mut state = TrainState::new(params, seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_lrs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = schedule.lr(epoch);
        let mut samples: Vec<(usize, usize)> = Vec::new();
        for (fidx, f) in frames.iter().enumerate() {
            let take = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
                let mut v = pool.to_vec();
                let (chosen, _) = v.partial_shuffle(rng, cfg.samples_per_frame.min(pool.len()));
                chosen.to_vec()
            };
            for beam in take(&f.foreground, &mut rng)
                .into_iter()
                .chain(take(&f.background, &mut rng))
            {
                samples.push((fidx, beam));
            }
        }
        samples.shuffle(&mut rng);

        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(cfg.batch_size) {
            let keys: Vec<(usize, usize, usize)> = chunk
                .iter()
                .map(|&(f, b)| (frames[f].sequence, frames[f].frame, b))
                .collect();
            let targets: Vec<PointTarget> =
                chunk.iter().map(|&(f, b)| frames[f].targets[b]).collect();
            let batch = assemble_batch(sequences, preproc, &keys)?;
            let mode = Mode::Train {
                dropout_seed: rng.random(),
            };
            let (out, cache) = forward(&state.params, &batch, mode).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            let l = loss(&out, &targets, cfg.vote_weight)?;
            let value = l.value.to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let cache = cache.expect("training forward keeps a cache");
            let grads = backward(&state.params, Some(&cache), &l.d_logits, &l.d_votes)?;
            state
                .adam_step(&grads, lr, &cfg.adam)
                .map_err(|_| Error::Diverged { epoch, loss: value })?;
            update_running_stats(&mut state.params, &cache);
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count as f64;
        log::info!("epoch {epoch}: lr {lr:.3e} loss {mean:.5}");
        epoch_losses.push(mean);
        epoch_lrs.push(lr);
    }
    Ok(TrainReport {
        params: state.params,
        epoch_losses,
        epoch_lrs,
    })
}
