//! PK-sampled training with Adam and step decay.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentationConfig, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{Batch, Model, ModelConfig};
use crate::nn::{Adam, Parameterized, StepSchedule};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    /// Batches per epoch; 0 means one pass worth of samples.
    pub steps_per_epoch: usize,
    /// Also keep `epoch_NNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub augment: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3.5e-4,
            lr_decay: 0.1,
            decay_every: 40,
            epochs: 100,
            batch_size: 32,
            p: 8,
            k: 4,
            seed: 0,
            steps_per_epoch: 0,
            checkpoint_every: 0,
            augment: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            factor: self.lr_decay,
            every: self.decay_every,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.p * self.k != self.batch_size {
            return Err(Error::Config(format!(
                "P*K = {}*{} differs from batch size {}",
                self.p, self.k, self.batch_size
            )));
        }
        if self.p < 2 || self.k == 0 {
            return Err(Error::Config("need P >= 2 identities and K >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        self.augment.validate(height, width)
    }
}

/// Sample indices grouped by training class.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    pub groups: Vec<Vec<usize>>,
}

impl IdentityIndex {
    /// Groups samples by class; `classes[i]` is the class of sample `i`.
    pub fn new(classes: &[usize]) -> Self {
        let n = classes.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); n];
        for (i, &c) in classes.iter().enumerate() {
            groups[c].push(i);
        }
        groups.retain(|g| !g.is_empty());
        Self { groups }
    }
}

/// `P` distinct identities with `K` samples each; identities with fewer than
/// `K` samples are drawn with replacement.
pub fn pk_sample_batch<R: Rng>(index: &IdentityIndex, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if index.groups.len() < p {
        return Err(Error::Sampling(format!(
            "{} identities available, {p} requested",
            index.groups.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for g in sample(rng, index.groups.len(), p).into_iter() {
        let group = &index.groups[g];
        if group.len() >= k {
            out.extend(sample(rng, group.len(), k).into_iter().map(|i| group[i]));
        } else {
            out.extend((0..k).map(|_| group[rng.gen_range(0..group.len())]));
        }
    }
    Ok(out)
}

/// Map from dataset person id to classifier index, in ascending id order.
pub fn class_map(samples: &[SampleRecord]) -> BTreeMap<usize, usize> {
    let mut ids: Vec<usize> = samples.iter().map(|s| s.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Validation(format!("bad log line: {e}"))))
        .collect()
}

/// Mean of a loss term per epoch, in epoch order.
pub fn epoch_means(records: &[LossRecord], term: impl Fn(&LossBreakdown) -> f64) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.epoch).or_default();
        e.0 += term(&r.loss);
        e.1 += 1;
    }
    acc.into_iter().map(|(ep, (s, n))| (ep, s / n as f64)).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_done: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains on the training split of `samples`, writing the loss log and
/// checkpoints under `out_dir`. With `resume`, continues from that
/// checkpoint's epoch count and appends to the log.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    samples: &[SampleRecord],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(model_cfg.height, model_cfg.width)?;
    let train: Vec<SampleRecord> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    if train.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let cmap = class_map(&train);
    let classes: Vec<usize> = train.iter().map(|s| cmap[&s.person_id]).collect();
    let index = IdentityIndex::new(&classes);
    if index.groups.len() < cfg.p {
        return Err(Error::Sampling(format!(
            "{} training identities, P = {}",
            index.groups.len(),
            cfg.p
        )));
    }
    let class_ids: Vec<usize> = cmap.keys().copied().collect();

    let (mut model, mut adam, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            if ckpt.header.class_ids != class_ids {
                return Err(Error::Checkpoint("checkpoint was trained on different identities".into()));
            }
            let (m, a) = ckpt.restore()?;
            (m, a, ckpt.header.epoch)
        }
        None => {
            let mc = ModelConfig {
                num_ids: cmap.len(),
                ..model_cfg.clone()
            };
            (Model::new(&mc, cfg.seed)?, Adam::default(), 0)
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        train.len().div_ceil(cfg.batch_size)
    };
    let schedule = cfg.schedule();
    let ckpt_path = out_dir.join(FINAL_CHECKPOINT);
    for epoch in start..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        for step in 0..steps {
            let picks = pk_sample_batch(&index, cfg.p, cfg.k, &mut rng)?;
            let batch_samples: Vec<SampleRecord> =
                picks.iter().map(|&i| augment(&train[i], &cfg.augment, &mut rng)).collect();
            let batch_classes = picks.iter().map(|&i| classes[i]).collect();
            let batch = Batch::new(&batch_samples, batch_classes, &model.config.identity_labels)?;
            model.zero_grad();
            let loss = model.train_step(&batch).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
            adam.step(&mut model, lr);
            let rec = LossRecord { epoch, step, lr, loss };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes"))
                .map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {epoch} done (lr {lr:.2e})");
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            Checkpoint::capture(&mut model, &adam, done, cfg.seed, &class_ids)
                .write(&out_dir.join(format!("epoch_{done:03}.ckpt")))?;
        }
    }
    let done = cfg.epochs.max(start);
    Checkpoint::capture(&mut model, &adam, done, cfg.seed, &class_ids).write(&ckpt_path)?;
    Ok(TrainOutcome {
        model,
        checkpoint: ckpt_path,
        log: log_path,
        epochs_done: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pk_counts_per_identity() {
        let index = IdentityIndex::new(&[0, 0, 0, 1, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = pk_sample_batch(&index, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        let from0 = b.iter().filter(|&&i| i < 3).count();
        assert_eq!(from0, 2);
    }

    #[test]
    fn single_image_identity_is_duplicated() {
        let index = IdentityIndex::new(&[0, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample_batch(&index, 2, 2, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|&&i| i == 0).count(), 2);
    }

    #[test]
    fn too_few_identities_is_a_sampling_error() {
        let index = IdentityIndex::new(&[0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(pk_sample_batch(&index, 2, 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn half_the_identities_cover_everything() {
        let classes: Vec<usize> = (0..10).flat_map(|c| [c; 3]).collect();
        let index = IdentityIndex::new(&classes);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = [false; 10];
            for _ in 0..1000 {
                for i in pk_sample_batch(&index, 5, 2, &mut rng).unwrap() {
                    seen[classes[i]] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn pk_must_equal_batch_size() {
        let cfg = TrainConfig {
            p: 4,
            k: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(64, 32), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate(64, 32).is_ok());
    }

    #[test]
    fn schedule_drops_every_forty_epochs() {
        let s = TrainConfig::default().schedule();
        assert!((s.lr_at(39) - 3.5e-4).abs() < 1e-18);
        assert!((s.lr_at(40) - 3.5e-5).abs() < 1e-18);
        assert!((s.lr_at(80) - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn epoch_means_group_by_epoch() {
        let rec = |epoch, m| LossRecord {
            epoch,
            step: 0,
            lr: 1.0,
            loss: crate::losses::total_loss(0.0, 0.0, 0.0, 0.0, m),
        };
        let means = epoch_means(&[rec(0, 1.0), rec(0, 3.0), rec(1, 0.5)], |l| l.matching);
        assert_eq!(means, vec![(0, 2.0), (1, 0.5)]);
    }
}
