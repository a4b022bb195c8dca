//! The optimisation loop, validation and resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{materialize, plan_epoch, Augmenter, Batch, BatchMode, BatchSpec, Dataset};
use super::config::TrainConfig;
use super::optim::{adam_step, schedule_lr, OptimizerState};
use crate::augment::{AugmentPolicy, NoiseCorpus, RirSet};
use crate::data::TrialList;
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::eval::{eer, min_dcf, score_trials, AudioSource, DcfParams, ModelEmbedder};
use crate::losses::LossHead;
use crate::nn::{build_trunk, load_checkpoint, save_checkpoint, Checkpoint, Graph, Mode, Model, ParamStore};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";

const HEAD_PREFIX: &str = "loss.";
const STORES: [&str; 2] = ["trunk", "loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub first_loss: f64,
    /// Optimiser steps taken so far, all epochs included.
    pub steps: u64,
    pub val_eer: Option<f64>,
    pub val_min_dcf: Option<f64>,
}

/// Held-out trials scored after every validation interval.
#[derive(Clone, Copy)]
pub struct Validation<'a> {
    pub trials: &'a TrialList,
    pub audio: &'a dyn AudioSource,
}

/// Model, loss head and optimiser state of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub head: LossHead<f32>,
    pub opt: OptimizerState<f32>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    /// Best validation EER so far and the epoch it was reached at.
    pub best: Option<(f64, usize)>,
    extractor: FeatureExtractor,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

fn moment_name(kind: &str, store: &str, param: &str) -> String {
    format!("adam.{kind}.{store}.{param}")
}

fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or invalid meta entry `{key}`")))
}

impl Trainer {
    /// Fresh model and head initialised from the configured seed.
    pub fn new(config: TrainConfig, n_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model: Model<f32> = build_trunk(&config.trunk, &mut rng)?;
        let head = LossHead::new(config.loss_config(), n_classes, config.trunk.embedding_dim, &mut rng)?;
        let opt = OptimizerState::new(&[&model.params, &head.params]);
        let extractor = FeatureExtractor::new(config.family().feature_config())?;
        Ok(Self {
            config,
            model,
            head,
            opt,
            epoch: 0,
            step: 0,
            best: None,
            extractor,
        })
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Batch shape for this loss. Metric batches are capped at the number of
    /// training speakers.
    pub fn batch_spec(&self, ds: &Dataset) -> BatchSpec {
        let c = &self.config;
        if c.loss.is_metric() {
            BatchSpec {
                mode: BatchMode::Metric,
                size: c.metric_batch.min(ds.n_speakers()),
                segment_s: c.segment_s,
                pairing: c.pairing,
            }
        } else {
            BatchSpec {
                mode: BatchMode::Classification,
                size: c.batch_size,
                segment_s: c.segment_s,
                pairing: c.pairing,
            }
        }
    }

    /// Metric batches per epoch: configured, or enough for about one
    /// segment per training utterance.
    pub fn metric_batches(&self, ds: &Dataset, spec: &BatchSpec) -> usize {
        self.config
            .metric_batches_per_epoch
            .unwrap_or_else(|| ((ds.len() as f64 / (2 * spec.size) as f64).round() as usize).max(1))
    }

    /// Forward, loss, backward and one Adam step. Returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let refs: Vec<_> = batch.feats.iter().collect();
        let mut g = Graph::new();
        let x = g.input(self.model.input_tensor(&refs)?);
        let fwd = self.model.forward(&mut g, x, Mode::Train)?;
        let loss = self.head.loss(&mut g, fwd.embedding, &batch.labels)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let origin = g
                .first_nonfinite()
                .map_or(String::new(), |(i, op)| format!(" (first produced by {op}, node {i})"));
            return Err(Error::Numeric(format!("loss is {value}{origin}")));
        }
        let grads = g.backward(loss)?;
        self.model.params.accumulate(&grads);
        self.head.params.accumulate(&grads);
        adam_step(
            &mut [&mut self.model.params, &mut self.head.params],
            &mut self.opt,
            lr,
            self.config.weight_decay,
        )?;
        self.head.clamp_scale();
        self.model.update_running_stats(&fwd.batch_stats);
        self.step += 1;
        Ok(value)
    }

    /// One pass of the epoch plan. `max_batches` truncates the plan.
    pub fn run_epoch(
        &mut self,
        ds: &Dataset,
        augment: Option<&Augmenter>,
        max_batches: Option<usize>,
    ) -> Result<EpochLog> {
        let spec = self.batch_spec(ds);
        let n_metric = self.metric_batches(ds, &spec);
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut plans = plan_epoch(&spec, ds, n_metric, &mut rng)?;
        if let Some(m) = max_batches {
            plans.truncate(m);
        }
        let lr = schedule_lr(&self.config.schedule(), self.epoch);
        let mut losses = Vec::with_capacity(plans.len());
        for plan in &plans {
            let batch = materialize(plan, ds, spec.segment_s, &self.extractor, augment)?;
            let l = self.train_step(&batch, lr).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {}, step {}: {m}", self.epoch + 1, self.step + 1)),
                other => other,
            })?;
            losses.push(l);
        }
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            first_loss: losses.first().copied().unwrap_or(f64::NAN),
            steps: self.step,
            val_eer: None,
            val_min_dcf: None,
        };
        self.epoch += 1;
        Ok(log)
    }

    /// EER and MinDCF of the current model on held-out trials.
    pub fn validate(&self, v: Validation<'_>) -> Result<(f64, f64)> {
        let embedder = ModelEmbedder::new(self.model.clone())?;
        let scores = score_trials(&embedder, v.trials, v.audio)?;
        Ok((
            eer(&scores, v.trials)?,
            min_dcf(&scores, v.trials, &DcfParams::default())?,
        ))
    }

    /// Everything needed to embed with the model or to resume training.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (_, p) in self.head.params.iter() {
            ck.push(format!("{HEAD_PREFIX}{}", p.name), p.value.clone());
        }
        let stores: [&ParamStore<f32>; 2] = [&self.model.params, &self.head.params];
        for (si, store) in stores.iter().enumerate() {
            for (pi, (_, p)) in store.iter().enumerate() {
                ck.push(moment_name("m", STORES[si], &p.name), self.opt.m[si][pi].clone());
                ck.push(moment_name("v", STORES[si], &p.name), self.opt.v[si][pi].clone());
            }
        }
        let meta = &mut ck.meta;
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("adam_step".into(), self.opt.step.to_string());
        meta.insert("loss".into(), self.config.loss.name().into());
        meta.insert("seed".into(), self.config.seed.to_string());
        if let Some(n) = self.head.n_classes() {
            meta.insert("n_classes".into(), n.to_string());
        }
        if let Some((e, ep)) = self.best {
            meta.insert("best_eer".into(), format!("{e}"));
            meta.insert("best_epoch".into(), ep.to_string());
        }
        ck
    }

    /// Restores a run saved by [`Trainer::checkpoint`]. The trunk and loss
    /// must match `config`.
    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint, n_classes: usize) -> Result<Self> {
        if ck.trunk != config.trunk {
            return Err(Error::Checkpoint(
                "checkpoint trunk differs from the configured trunk".into(),
            ));
        }
        let loss: String = meta_parse(ck, "loss")?;
        if loss != config.loss.name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with loss `{loss}`, config asks for `{}`",
                config.loss.name()
            )));
        }
        let mut t = Self::new(config, n_classes)?;
        t.model = ck.model()?;
        for p in t.head.params.iter_mut() {
            p.value = ck.expect(&format!("{HEAD_PREFIX}{}", p.name), p.value.shape())?.clone();
        }
        let stores: [&ParamStore<f32>; 2] = [&t.model.params, &t.head.params];
        for (si, store) in stores.iter().enumerate() {
            for (pi, (_, p)) in store.iter().enumerate() {
                let shape = p.value.shape();
                t.opt.m[si][pi] = ck.expect(&moment_name("m", STORES[si], &p.name), shape)?.clone();
                t.opt.v[si][pi] = ck.expect(&moment_name("v", STORES[si], &p.name), shape)?.clone();
            }
        }
        t.epoch = meta_parse(ck, "epoch")?;
        t.step = meta_parse(ck, "step")?;
        t.opt.step = meta_parse(ck, "adam_step")?;
        if ck.meta.contains_key("best_eer") {
            t.best = Some((meta_parse(ck, "best_eer")?, meta_parse(ck, "best_epoch")?));
        }
        Ok(t)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
}

impl FitOutcome {
    pub fn model(&self) -> &Model<f32> {
        &self.trainer.model
    }

    pub fn steps(&self) -> u64 {
        self.trainer.step
    }
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Directory for checkpoints and the loss log.
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Caps the batches of every epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Called after every epoch (after validation, when it ran).
    pub on_epoch: Option<&'a mut (dyn FnMut(&EpochLog) + Send)>,
}

/// Loads the noise and impulse-response corpora named by the config.
pub fn load_augmenter(config: &TrainConfig) -> Result<Option<Augmenter>> {
    if !config.augment {
        return Ok(None);
    }
    let (Some(noise), Some(rir)) = (&config.noise_manifest, &config.rir_manifest) else {
        return Err(Error::Config(
            "augment = on needs noise_manifest and rir_manifest".into(),
        ));
    };
    Ok(Some(Augmenter {
        policy: AugmentPolicy::default(),
        noise: NoiseCorpus::load_manifest(noise)?,
        rirs: RirSet::load_manifest(rir)?,
    }))
}

fn log_line(l: &EpochLog) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    format!(
        "{}\t{:.6e}\t{:.6}\t{}\t{}\t{}\n",
        l.epoch + 1,
        l.lr,
        l.mean_loss,
        l.steps,
        opt(l.val_eer),
        opt(l.val_min_dcf)
    )
}

fn write_log(out: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch\tlr\tloss\tsteps\tval_eer\tval_min_dcf\n");
    for l in log {
        let _ = write!(text, "{}", log_line(l));
    }
    let path = out.join(TRAIN_LOG);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Trains for the configured number of epochs, validating every
/// `val_every` epochs. With an output directory, the latest checkpoint is
/// rewritten at every validation interval, the best-EER checkpoint is kept
/// and a final checkpoint is written at the end. A diverging run returns a
/// numeric error and leaves the last good checkpoint in place.
///
/// Work runs on a pool of `config.workers` threads.
pub fn fit(
    config: &TrainConfig,
    ds: &Dataset,
    validation: Option<Validation<'_>>,
    opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", config.workers)))?;
    pool.install(|| fit_inner(config, ds, validation, opts))
}

fn fit_inner(
    config: &TrainConfig,
    ds: &Dataset,
    validation: Option<Validation<'_>>,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    let n_classes = ds.n_speakers();
    if config.loss.is_metric() && n_classes < 2 {
        return Err(Error::InsufficientSpeakers {
            needed: 2,
            found: n_classes,
        });
    }
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(config.clone(), &load_checkpoint(path)?, n_classes)?,
        None => Trainer::new(config.clone(), n_classes)?,
    };
    let augment = load_augmenter(config)?;
    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut log = Vec::new();
    while trainer.epoch < config.epochs {
        let mut entry = trainer.run_epoch(ds, augment.as_ref(), opts.max_batches_per_epoch)?;
        let interval = trainer.epoch % config.val_every == 0 || trainer.epoch == config.epochs;
        let mut improved = false;
        if interval {
            if let Some(v) = validation {
                let (e, d) = trainer.validate(v)?;
                entry.val_eer = Some(e);
                entry.val_min_dcf = Some(d);
                if trainer.best.is_none_or(|(b, _)| e < b) {
                    trainer.best = Some((e, entry.epoch));
                    improved = true;
                }
            }
        }
        if let Some(out) = &opts.out {
            if interval {
                let ck = trainer.checkpoint();
                save_checkpoint(out.join(LAST_CHECKPOINT), &ck)?;
                if improved {
                    save_checkpoint(out.join(BEST_CHECKPOINT), &ck)?;
                }
            }
        }
        log.push(entry);
        if let Some(out) = &opts.out {
            write_log(out, &log)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(log.last().expect("just pushed"));
        }
    }
    if let Some(out) = &opts.out {
        save_checkpoint(out.join(FINAL_CHECKPOINT), &trainer.checkpoint())?;
    }
    Ok(FitOutcome { trainer, log })
}

/// Tensor names a resumable checkpoint holds beyond the trunk.
pub fn optimizer_tensor_names(ck: &Checkpoint) -> Vec<&str> {
    ck.tensors
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| n.starts_with("adam.") || n.starts_with(HEAD_PREFIX))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Waveform;
    use crate::losses::LossKind;
    use crate::nn::{Family, TrunkConfig};

    fn toy(n_spk: usize, per: usize) -> Dataset {
        let mut items = Vec::new();
        for s in 0..n_spk {
            for u in 0..per {
                let f = 150.0 + 90.0 * s as f64;
                let n = 16000 * 2 + 800 * u;
                let wave = (0..n)
                    .map(|i| {
                        let t = i as f64 / 16000.0;
                        0.3 * (2.0 * std::f64::consts::PI * f * t).sin()
                            + 0.05 * (2.0 * std::f64::consts::PI * (f * 2.7 + 13.0 * u as f64) * t).sin()
                    })
                    .collect();
                items.push((format!("s{s}u{u}"), format!("spk{s}"), Waveform::new(wave, 16000)));
            }
        }
        Dataset::new(items).unwrap()
    }

    fn tiny_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            trunk: TrunkConfig::new(Family::ResNetQSap)
                .with_scale(0.0625)
                .with_embedding_dim(16),
            loss,
            batch_size: 6,
            metric_batch: 3,
            epochs: 1,
            workers: 1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_two_batches_two_steps() {
        let ds = toy(3, 4);
        let out = fit(&tiny_config(LossKind::AamSoftmax), &ds, None, FitOptions::default()).unwrap();
        assert_eq!(out.steps(), 2);
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].steps, 2);
    }

    #[test]
    fn metric_epoch_size_follows_the_data() {
        let ds = toy(3, 4);
        let t = Trainer::new(tiny_config(LossKind::Ap), 3).unwrap();
        let spec = t.batch_spec(&ds);
        assert_eq!((spec.mode, spec.size), (BatchMode::Metric, 3));
        // 12 utterances, 6 segments per batch.
        assert_eq!(t.metric_batches(&ds, &spec), 2);
        let mut capped = tiny_config(LossKind::Ap);
        capped.metric_batch = 10;
        assert_eq!(Trainer::new(capped, 3).unwrap().batch_spec(&ds).size, 3);
    }

    #[test]
    fn checkpoints_resume_the_same_trajectory() {
        let ds = toy(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(LossKind::ApSoftmax);
        cfg.epochs = 3;
        let full = fit(&cfg, &ds, None, FitOptions::default()).unwrap();

        cfg.epochs = 1;
        let opts = FitOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        fit(&cfg, &ds, None, opts).unwrap();
        cfg.epochs = 3;
        let opts = FitOptions {
            resume: Some(dir.path().join(FINAL_CHECKPOINT)),
            ..Default::default()
        };
        let resumed = fit(&cfg, &ds, None, opts).unwrap();
        assert_eq!(resumed.log.len(), 2);
        for (a, b) in full.log[1..].iter().zip(&resumed.log) {
            assert_eq!(a.mean_loss, b.mean_loss);
            assert_eq!(a.steps, b.steps);
        }
        for ((_, a), (_, b)) in full.model().params.iter().zip(resumed.model().params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn checkpoint_holds_head_and_moments() {
        let ds = toy(3, 2);
        let out = fit(&tiny_config(LossKind::ApSoftmax), &ds, None, FitOptions::default()).unwrap();
        let ck = out.trainer.checkpoint();
        let names = optimizer_tensor_names(&ck);
        assert!(names.contains(&"loss.head.weight"));
        assert!(names.contains(&"loss.ap.w"));
        assert!(names.contains(&"adam.m.trunk.conv1.weight"));
        assert!(names.contains(&"adam.v.loss.ap.b"));
        let mut other = tiny_config(LossKind::Softmax);
        other.seed = 7;
        assert!(Trainer::from_checkpoint(other, &ck, 3).is_err());
    }

    #[test]
    fn divergence_is_a_numeric_error_and_keeps_the_last_checkpoint() {
        let ds = toy(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(LossKind::AamSoftmax);
        let opts = FitOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let good = fit(&cfg, &ds, None, opts).unwrap();
        let before = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();

        let mut t = good.trainer.clone();
        let id = t.model.params.find("conv1.weight").unwrap();
        t.model.params.get_mut(id).value.data_mut()[0] = f32::NAN;
        let ck = t.checkpoint();
        let poisoned = dir.path().join("poisoned.ckpt");
        save_checkpoint(&poisoned, &ck).unwrap();
        cfg.epochs = 2;
        let opts = FitOptions {
            out: Some(dir.path().to_path_buf()),
            resume: Some(poisoned),
            ..Default::default()
        };
        let err = fit(&cfg, &ds, None, opts).unwrap_err();
        assert!(err.is_numeric(), "{err}");
        assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), before);
    }

    #[test]
    fn training_reduces_the_loss() {
        let ds = toy(4, 4);
        let mut cfg = tiny_config(LossKind::AamSoftmax);
        cfg.epochs = 8;
        cfg.batch_size = 8;
        cfg.margin = 0.1;
        cfg.lr = 0.005;
        let out = fit(&cfg, &ds, None, FitOptions::default()).unwrap();
        let first = out.log[0].mean_loss;
        let last = out.log.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
    }
}
