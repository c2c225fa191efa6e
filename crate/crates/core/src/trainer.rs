//! Training loop: stepped learning-rate schedule, seeded batching and
//! augmentation, fused multi-view evaluation, and run comparison.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::{fuse_scores, predict_class, Model};
use crate::optim::AdamState;
use crate::preprocess::{
    derive_seed, preprocess_sample, AugmentConfig, SampleMode, SamplerConfig,
};
use crate::skeleton::SkeletonSequence;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate is multiplied by `lr_decay` at each of these epochs.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// None disables rotation augmentation.
    pub augment: Option<AugmentConfig>,
    /// Random clip draws fused at evaluation time.
    pub eval_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 64,
            base_lr: 1e-3,
            lr_steps: vec![60, 90, 110],
            lr_decay: 0.1,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            eval_views: 5,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch number.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,lr,train_loss"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.lr, self.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// (correct, total) per class index.
    pub per_class: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Owns the model and optimizer state for a run.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    /// Last completed 1-based epoch.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let adam = AdamState::new(&model.params, cfg.base_lr, cfg.weight_decay);
        Trainer {
            model,
            adam,
            cfg,
            epoch: 0,
        }
    }

    /// Resume from restored pieces; `epoch` is the last completed epoch.
    pub fn resume(model: Model, adam: AdamState, cfg: TrainConfig, epoch: usize) -> Self {
        Trainer {
            model,
            adam,
            cfg,
            epoch,
        }
    }

    /// Sample every enabled clip length for a batch of records. Per-sample
    /// randomness depends only on (seed, record id, epoch, clip length), so
    /// runs replay exactly regardless of batch composition.
    fn build_clips(
        &self,
        data: &[SkeletonSequence],
        batch: &[usize],
        epoch: usize,
        mode: SampleMode,
        augment: Option<&AugmentConfig>,
    ) -> Result<Vec<Vec<f64>>> {
        let scales = self.model.cfg.scales.clone();
        let refj = self.model.cfg.reference_joint;
        let mut clips = Vec::with_capacity(scales.len());
        for (si, &t) in scales.iter().enumerate() {
            let sampler = SamplerConfig { clip_len: t, mode };
            let mut buf = Vec::with_capacity(batch.len() * t * self.model.cfg.joints * 3);
            for &id in batch {
                let seq = &data[id];
                if seq.joints != self.model.cfg.joints {
                    return Err(Error::Data(format!(
                        "record {id} has {} joints, model expects {}",
                        seq.joints, self.model.cfg.joints
                    )));
                }
                let seed = derive_seed(derive_seed(self.cfg.seed, id as u64, epoch as u64), si as u64, 0);
                buf.extend(preprocess_sample(seq, &sampler, refj, augment, seed)?);
            }
            clips.push(buf);
        }
        Ok(clips)
    }

    /// One pass over `train_ids` (indices into `data`). Returns the metrics
    /// row; a non-finite loss aborts naming the offending records.
    pub fn train_epoch(
        &mut self,
        data: &[SkeletonSequence],
        train_ids: &[usize],
    ) -> Result<EpochMetrics> {
        let epoch = self.epoch + 1;
        let lr = self.cfg.lr_at(epoch);
        let mut order = train_ids.to_vec();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.cfg.seed, u64::MAX, epoch as u64));
        order.shuffle(&mut rng);

        let mut total_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.batch_size.max(1)) {
            let clips = self.build_clips(
                data,
                batch,
                epoch,
                SampleMode::Random,
                self.cfg.augment.as_ref(),
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            self.model.params.zero_grad();
            let loss = self.model.loss_and_backward(
                &clips,
                batch.len(),
                &labels,
                self.cfg.label_smoothing,
            )?;
            if !loss.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite loss at epoch {epoch}; batch records {batch:?}"
                )));
            }
            self.adam.lr = lr;
            self.adam.step(&mut self.model.params);
            total_loss += loss;
            batches += 1;
        }
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            lr,
            train_loss: if batches == 0 { 0.0 } else { total_loss / batches as f64 },
        })
    }

    /// Fused evaluation: for each record, `eval_views` random clip draws are
    /// scored and averaged; records sharing a `source` (the bodies of one
    /// multi-person clip) are fused into a single prediction.
    pub fn evaluate(&mut self, data: &[SkeletonSequence], ids: &[usize]) -> Result<EvalReport> {
        let views = self.cfg.eval_views.max(1);
        let k = self.model.cfg.classes;
        // record id -> mean score over views
        let mut rec_scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for v in 0..views {
            // large eval batches keep graph construction overhead low
            for batch in ids.chunks(64) {
                let clips = self.build_clips(
                    data,
                    batch,
                    usize::MAX - v,
                    SampleMode::Random,
                    None,
                )?;
                let scores = self.model.predict_scores(&clips, batch.len())?;
                for (&id, row) in batch.iter().zip(scores) {
                    let acc = rec_scores.entry(id).or_insert_with(|| vec![0.0; k]);
                    for (a, s) in acc.iter_mut().zip(&row) {
                        *a += s / views as f64;
                    }
                }
            }
        }
        // group by source clip; records with an empty source stand alone
        let mut groups: BTreeMap<String, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
        for &id in ids {
            let r = &data[id];
            let key = if r.source.is_empty() {
                format!("\u{0}record-{id}")
            } else {
                r.source.clone()
            };
            let entry = groups.entry(key).or_insert_with(|| (r.label, Vec::new()));
            if entry.0 != r.label {
                return Err(Error::Data(format!(
                    "source {:?} has records with conflicting labels",
                    r.source
                )));
            }
            entry.1.push(rec_scores[&id].clone());
        }
        let mut per_class = vec![(0usize, 0usize); k];
        let mut correct = 0usize;
        let mut total = 0usize;
        for (label, rows) in groups.values() {
            let fused = fuse_scores(rows);
            let pred = predict_class(&fused);
            if *label >= k {
                return Err(Error::Data(format!("label {label} out of range")));
            }
            per_class[*label].1 += 1;
            total += 1;
            if pred == *label {
                per_class[*label].0 += 1;
                correct += 1;
            }
        }
        Ok(EvalReport {
            correct,
            total,
            per_class,
        })
    }
}

/// True when two metric histories are identical (loss compared bit-exactly).
pub fn compare_runs(a: &[EpochMetrics], b: &[EpochMetrics]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.epoch == y.epoch && x.lr == y.lr && x.train_loss == y.train_loss)
}
