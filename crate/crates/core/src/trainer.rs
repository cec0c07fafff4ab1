//! The training loop: sample a class-balanced batch, mine hard pairs through
//! the cascade, route gradients, take an SGD step.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeModel, ParamSet};
use crate::checkpoint::save_checkpoint;
use crate::data::{BatchSampler, Dataset, SamplerConfig};
use crate::error::{HdcError, Result};
use crate::mining::{backward_cascade, cascade_mine, hdc_loss, MiningOutcome, MiningPlan, RankBy};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every level trained on its own cascaded hard set.
    #[default]
    Hdc,
    /// Deepest path only, top half of the batch pairs by its loss.
    HardSingle,
    /// Deepest path only, every pair.
    PlainContrastive,
}

impl std::str::FromStr for TrainMode {
    type Err = HdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdc" => Ok(TrainMode::Hdc),
            "hard_single" => Ok(TrainMode::HardSingle),
            "plain_contrastive" => Ok(TrainMode::PlainContrastive),
            other => Err(HdcError::Config(format!(
                "mode must be hdc, hard_single or plain_contrastive, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Hdc => "hdc",
            TrainMode::HardSingle => "hard_single",
            TrainMode::PlainContrastive => "plain_contrastive",
        })
    }
}

impl TrainMode {
    /// Hard fractions and loss weights this mode trains with.
    pub fn mining_plan(self, config: &CascadeConfig, rank_by: RankBy) -> MiningPlan {
        let k = config.levels;
        let deepest_only = |h_last: f64| {
            let mut hard_fraction = vec![100.0; k];
            hard_fraction[k - 1] = h_last;
            let mut lambda = vec![0.0; k];
            lambda[k - 1] = 1.0;
            (hard_fraction, lambda)
        };
        let (hard_fraction, lambda) = match self {
            TrainMode::Hdc => (config.hard_fraction.clone(), config.lambda.clone()),
            TrainMode::HardSingle => deepest_only(50.0),
            TrainMode::PlainContrastive => deepest_only(100.0),
        };
        MiningPlan {
            hard_fraction,
            lambda,
            margin: config.margin,
            // Baselines rank by their single model's own loss.
            rank_by: if self == TrainMode::Hdc {
                rank_by
            } else {
                RankBy::Current
            },
        }
    }

    /// Level whose embedding this mode produces at retrieval time, or `None`
    /// for the concatenated descriptor.
    pub fn retrieval_level(self, config: &CascadeConfig) -> Option<usize> {
        match self {
            TrainMode::Hdc => None,
            _ => Some(config.levels - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub rank_by: RankBy,
    /// Worker threads for the inner loops; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // 2000 iterations stand in for 15 epochs; decay every 4 of them.
        Self {
            iterations: 2000,
            lr_initial: 0.01,
            lr_decay_every: 533,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            mode: TrainMode::Hdc,
            checkpoint_every: 0,
            rank_by: RankBy::Current,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(HdcError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(HdcError::Config(
                "lr_initial must be finite and >= 0".into(),
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(HdcError::Config(
                "lr_decay_factor must lie in (0, 1]".into(),
            ));
        }
        if self.lr_decay_every == 0 {
            return Err(HdcError::Config("lr_decay_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HdcError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr_initial · factor^⌊iteration / decay_every⌋`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    let steps = (iteration / config.lr_decay_every.max(1)) as i32;
    config.lr_initial * config.lr_decay_factor.powi(steps)
}

/// `v ← momentum·v + g`, then `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    velocity.zip_mut(grads, |v, g| {
        for (v, g) in v.iter_mut().zip(g) {
            *v = momentum * *v + g;
        }
    })?;
    params.zip_mut(velocity, |p, v| {
        for (p, v) in p.iter_mut().zip(v) {
            *p -= lr * v;
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    /// 0-based level.
    pub level: usize,
    pub mean_loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Weighted HDC loss of the batch.
    pub loss: f64,
    /// Levels with nonzero loss weight, shallowest first.
    pub levels: Vec<LevelRecord>,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn csv_header(records: &IterationRecord) -> String {
        let mut cols = vec!["iteration".to_string(), "lr".into(), "loss".into()];
        for l in &records.levels {
            let k = l.level + 1;
            cols.push(format!("level{k}_mean_loss"));
            cols.push(format!("level{k}_positives"));
            cols.push(format!("level{k}_negatives"));
        }
        cols.join(",")
    }

    /// One CSV row; wall time is left out so logs compare byte-for-byte.
    pub fn csv_row(r: &IterationRecord) -> String {
        let mut out = format!("{},{:?},{:?}", r.iteration, r.lr, r.loss);
        for l in &r.levels {
            out.push_str(&format!(
                ",{:?},{},{}",
                l.mean_loss, l.positives, l.negatives
            ));
        }
        out
    }
}

/// Hooks the loop calls on every batch, after every iteration, and when a
/// checkpoint is due.
pub trait TrainObserver: Send {
    /// Sees each batch's mining result before the parameter update.
    fn on_batch(&mut self, _iteration: usize, _outcome: &MiningOutcome) -> Result<()> {
        Ok(())
    }

    fn on_iteration(&mut self, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _model: &CascadeModel) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Streams the log as CSV and writes checkpoints into a directory:
/// `checkpoint_<iteration>.hdc` for periodic saves, `model.hdc` at the end.
pub struct FileObserver {
    log: BufWriter<File>,
    log_path: PathBuf,
    dir: PathBuf,
    header_written: bool,
}

impl FileObserver {
    pub const LOG_FILE: &'static str = "train_log.csv";
    pub const FINAL_CHECKPOINT: &'static str = "model.hdc";

    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| HdcError::io(&dir, e))?;
        let log_path = dir.join(Self::LOG_FILE);
        let file = File::create(&log_path).map_err(|e| HdcError::io(&log_path, e))?;
        Ok(Self {
            log: BufWriter::new(file),
            log_path,
            dir,
            header_written: false,
        })
    }

    pub fn finish(&mut self, model: &CascadeModel) -> Result<PathBuf> {
        self.log
            .flush()
            .map_err(|e| HdcError::io(&self.log_path, e))?;
        let path = self.dir.join(Self::FINAL_CHECKPOINT);
        save_checkpoint(model, &path)?;
        Ok(path)
    }
}

impl TrainObserver for FileObserver {
    fn on_iteration(&mut self, record: &IterationRecord) -> Result<()> {
        let mut text = String::new();
        if !self.header_written {
            text.push_str(&TrainLog::csv_header(record));
            text.push('\n');
            self.header_written = true;
        }
        text.push_str(&TrainLog::csv_row(record));
        text.push('\n');
        self.log
            .write_all(text.as_bytes())
            .map_err(|e| HdcError::io(&self.log_path, e))
    }

    fn on_checkpoint(&mut self, iteration: usize, model: &CascadeModel) -> Result<()> {
        save_checkpoint(model, self.dir.join(format!("checkpoint_{iteration}.hdc")))
    }
}

fn level_records(outcome: &MiningOutcome, plan: &MiningPlan) -> Vec<LevelRecord> {
    (0..plan.levels())
        .filter(|&k| plan.lambda[k] != 0.0)
        .map(|k| {
            let (pos, neg) = outcome.selected_losses(k);
            let n = pos.len() + neg.len();
            let sum: f64 = pos.iter().chain(&neg).sum();
            LevelRecord {
                level: k,
                mean_loss: if n == 0 { 0.0 } else { sum / n as f64 },
                positives: pos.len(),
                negatives: neg.len(),
            }
        })
        .collect()
}

pub fn train(
    model: CascadeModel,
    dataset: &Dataset,
    config: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<(CascadeModel, TrainLog)> {
    train_with_observer(model, dataset, config, sampler, &mut NoopObserver)
}

pub fn train_with_observer(
    model: CascadeModel,
    dataset: &Dataset,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(CascadeModel, TrainLog)> {
    config.validate()?;
    model.config.validate()?;
    if dataset.dim() != model.config.input_dim {
        return Err(HdcError::dim(
            "train",
            format!(
                "dataset has {} features, model expects {}",
                dataset.dim(),
                model.config.input_dim
            ),
        ));
    }
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| HdcError::Config(format!("thread pool: {e}")))?;
        pool.install(|| run(model, dataset, config, sampler, observer))
    } else {
        run(model, dataset, config, sampler, observer)
    }
}

fn run(
    mut model: CascadeModel,
    dataset: &Dataset,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(CascadeModel, TrainLog)> {
    let plan = config.mode.mining_plan(&model.config, config.rank_by);
    let mut batches = BatchSampler::new(sampler.clone())?;
    let mut velocity = model.params.zeros_like();
    let mut log = TrainLog::default();
    let started = Instant::now();

    for iteration in 0..config.iterations {
        let lr = lr_at(iteration, config);
        let batch = batches.next_batch(dataset)?;
        let x = dataset.features().select_rows(&batch)?;
        let labels: Vec<u32> = batch.iter().map(|&i| dataset.labels()[i]).collect();

        let outcome = cascade_mine(&model, &x, &labels, &plan)
            .map_err(|e| abort(iteration, &batch, e.to_string()))?;
        let loss = hdc_loss(&outcome.losses, &outcome.selection, &plan.lambda);
        if !loss.is_finite() {
            return Err(abort(iteration, &batch, format!("loss is {loss}")));
        }
        observer.on_batch(iteration, &outcome)?;
        let grads = backward_cascade(
            &model,
            &outcome.cache,
            &outcome.selection,
            &plan.lambda,
            plan.margin,
        )?;
        sgd_step(
            &mut model.params,
            &grads,
            &mut velocity,
            lr,
            config.momentum,
        )?;
        if model.params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(abort(
                iteration,
                &batch,
                "parameters became non-finite".into(),
            ));
        }

        let record = IterationRecord {
            iteration,
            lr,
            loss,
            levels: level_records(&outcome, &plan),
            wall_time: started.elapsed(),
        };
        observer.on_iteration(&record)?;
        log.records.push(record);
        if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(iteration + 1, &model)?;
        }
    }
    Ok((model, log))
}

fn abort(iteration: usize, batch: &[usize], reason: String) -> HdcError {
    HdcError::TrainingAbort {
        iteration,
        reason,
        batch: batch.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::init_model;
    use crate::data::{synth_clusters, SynthConfig};
    use crate::mining::{contrastive_losses, MiningPlan};

    fn small_setup() -> (CascadeConfig, Dataset, SamplerConfig) {
        let cascade = CascadeConfig {
            input_dim: 8,
            block_layers: vec![vec![12]; 3],
            embed_dim: vec![4; 3],
            ..CascadeConfig::default()
        };
        let data = synth_clusters(&SynthConfig {
            num_classes: 5,
            per_class: 12,
            dim: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let sampler = SamplerConfig {
            classes_per_batch: 4,
            images_per_class: 5,
            seed: 1,
        };
        (cascade, data, sampler)
    }

    #[test]
    fn sgd_examples() {
        let cfg = CascadeConfig {
            levels: 1,
            input_dim: 1,
            block_layers: vec![vec![1]],
            embed_dim: vec![1],
            lambda: vec![1.0],
            hard_fraction: vec![100.0],
            margin: 1.0,
            seed: 0,
        };
        let mut p = ParamSet::zeros(&cfg);
        p.assign_flat(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut g = p.zeros_like();
        g.assign_flat(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert!((p.flatten()[0] - 0.8).abs() < 1e-15);

        let before = p.clone();
        let mut v = p.zeros_like();
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, before);

        // θ₁ = −0.1, v₁ = 1; v₂ = 1.9, θ₂ = −0.1 − 0.19
        let mut p = ParamSet::zeros(&cfg);
        let mut g = p.zeros_like();
        g.assign_flat(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((p.flatten()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            lr_decay_every: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c), 0.01);
        assert!((lr_at(100, &c) - 0.001).abs() < 1e-18);
        assert_eq!(lr_at(99, &c), 0.01);
        let flat = TrainConfig {
            lr_decay_factor: 1.0,
            ..c
        };
        assert_eq!(lr_at(12345, &flat), 0.01);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (cascade, data, sampler) = small_setup();
        let model = init_model(&cascade).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            lr_initial: 0.0,
            ..TrainConfig::default()
        };
        let (trained, log) = train(model.clone(), &data, &cfg, &sampler).unwrap();
        assert_eq!(trained.params.digest(), model.params.digest());
        assert_eq!(log.records.len(), 1);
    }

    #[test]
    fn training_is_reproducible() {
        let (cascade, data, sampler) = small_setup();
        let cfg = TrainConfig {
            iterations: 20,
            ..TrainConfig::default()
        };
        let (a, la) = train(init_model(&cascade).unwrap(), &data, &cfg, &sampler).unwrap();
        let threaded = TrainConfig { threads: 3, ..cfg };
        let (b, lb) = train(init_model(&cascade).unwrap(), &data, &threaded, &sampler).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        let rows = |l: &TrainLog| l.records.iter().map(TrainLog::csv_row).collect::<Vec<_>>();
        assert_eq!(rows(&la), rows(&lb));
    }

    #[test]
    fn baselines_skip_untrained_heads() {
        let c = CascadeConfig::default();
        for mode in [TrainMode::HardSingle, TrainMode::PlainContrastive] {
            let plan = mode.mining_plan(&c, RankBy::Previous);
            assert_eq!(plan.rank_by, RankBy::Current);
            assert_eq!(
                (0..3).map(|k| plan.needs_head(k)).collect::<Vec<_>>(),
                [false, false, true]
            );
        }
        let plan = TrainMode::Hdc.mining_plan(&c, RankBy::Current);
        assert!((0..3).all(|k| plan.needs_head(k)));
    }

    #[test]
    fn logged_sizes_follow_ceiling_rule() {
        let (cascade, data, sampler) = small_setup();
        let cfg = TrainConfig {
            iterations: 5,
            ..TrainConfig::default()
        };
        let (_, log) = train(init_model(&cascade).unwrap(), &data, &cfg, &sampler).unwrap();
        // 4 classes × 5 images: 80 positives, 300 negatives
        for r in &log.records {
            let sizes: Vec<(usize, usize)> = r
                .levels
                .iter()
                .map(|l| (l.positives, l.negatives))
                .collect();
            assert_eq!(sizes, vec![(80, 300), (40, 150), (8, 30)]);
        }
    }

    #[test]
    fn baseline_modes_log_only_the_deepest_level() {
        let (cascade, data, sampler) = small_setup();
        for (mode, expected) in [
            (TrainMode::PlainContrastive, (80, 300)),
            (TrainMode::HardSingle, (40, 150)),
        ] {
            let cfg = TrainConfig {
                iterations: 2,
                mode,
                ..TrainConfig::default()
            };
            let (_, log) = train(init_model(&cascade).unwrap(), &data, &cfg, &sampler).unwrap();
            for r in &log.records {
                assert_eq!(r.levels.len(), 1);
                assert_eq!(r.levels[0].level, 2);
                assert_eq!((r.levels[0].positives, r.levels[0].negatives), expected);
            }
        }
    }

    #[test]
    fn plain_mode_matches_masked_hdc_level_loss() {
        let (mut cascade, data, sampler) = small_setup();
        cascade.hard_fraction = vec![100.0; 3];
        cascade.lambda = vec![0.0, 0.0, 1.0];
        let model = init_model(&cascade).unwrap();
        let one = |mode| TrainConfig {
            iterations: 1,
            mode,
            ..TrainConfig::default()
        };
        let (_, plain) = train(
            model.clone(),
            &data,
            &one(TrainMode::PlainContrastive),
            &sampler,
        )
        .unwrap();
        let (_, hdc) = train(model.clone(), &data, &one(TrainMode::Hdc), &sampler).unwrap();
        assert_eq!(plain.records[0].loss, hdc.records[0].loss);
        assert_eq!(plain.records[0].levels, hdc.records[0].levels);

        // and it is the plain contrastive sum over every batch pair
        let mut s = BatchSampler::new(sampler.clone()).unwrap();
        let batch = s.next_batch(&data).unwrap();
        let x = data.features().select_rows(&batch).unwrap();
        let labels: Vec<u32> = batch.iter().map(|&i| data.labels()[i]).collect();
        let pairs = crate::mining::enumerate_pairs(&labels).unwrap();
        let f = model.extract_level(&x, 2).unwrap();
        let l = contrastive_losses(&f, &pairs, 1.0, 2).unwrap();
        let sum: f64 = l.positive_losses.iter().chain(&l.negative_losses).sum();
        assert!((sum - plain.records[0].loss).abs() < 1e-9 * sum);
    }

    #[test]
    fn zero_lambda_freezes_its_head() {
        let (mut cascade, data, sampler) = small_setup();
        cascade.lambda = vec![1.0, 0.0, 1.0];
        let model = init_model(&cascade).unwrap();
        let cfg = TrainConfig {
            iterations: 10,
            ..TrainConfig::default()
        };
        let (trained, _) = train(model.clone(), &data, &cfg, &sampler).unwrap();
        assert_eq!(trained.params.heads[1], model.params.heads[1]);
        assert_ne!(trained.params.heads[0], model.params.heads[0]);
        assert_ne!(trained.params.blocks[1], model.params.blocks[1]);
    }

    #[test]
    fn hard_single_plan_shape() {
        let c = CascadeConfig::default();
        let p = TrainMode::HardSingle.mining_plan(&c, RankBy::Current);
        assert_eq!(p.hard_fraction, vec![100.0, 100.0, 50.0]);
        assert_eq!(p.lambda, vec![0.0, 0.0, 1.0]);
        let p: MiningPlan = TrainMode::Hdc.mining_plan(&c, RankBy::Previous);
        assert_eq!(p.hard_fraction, c.hard_fraction);
        assert_eq!(p.rank_by, RankBy::Previous);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_decay_factor: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
