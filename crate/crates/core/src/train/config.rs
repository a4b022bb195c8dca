//! Flat `key = value` training configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, MarginConfig};
use crate::nn::{Family, Pooling, TrunkConfig};

use super::optim::SchedulePolicy;

/// How the two segments of a speaker in a metric batch are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Two different utterances when the speaker has more than one.
    Distinct,
    /// Two random crops of one utterance.
    Same,
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinct" => Ok(Pairing::Distinct),
            "same" => Ok(Pairing::Same),
            _ => Err(Error::Config(format!(
                "unknown pairing `{s}` (expected distinct or same)"
            ))),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Distinct => "distinct",
            Pairing::Same => "same",
        })
    }
}

/// Every knob of a training run. Defaults are desk-scale: 20 epochs,
/// classification batches of 64 utterances, metric batches of 32 speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub trunk: TrunkConfig,
    pub loss: LossKind,
    pub margin: f64,
    pub scale: f64,
    pub batch_size: usize,
    pub metric_batch: usize,
    /// Metric batches per epoch; by default enough to draw about one segment
    /// per training utterance.
    pub metric_batches_per_epoch: Option<usize>,
    pub pairing: Pairing,
    pub segment_s: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Per-family default when unset.
    pub lr_decay: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub weight_decay: f64,
    pub augment: bool,
    pub noise_manifest: Option<PathBuf>,
    pub rir_manifest: Option<PathBuf>,
    pub val_every: usize,
    pub seed: u64,
    pub workers: usize,
    pub manifest: Option<PathBuf>,
    pub val_trials: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::new(Family::ResNetQSap),
            loss: LossKind::AamSoftmax,
            margin: 0.2,
            scale: 30.0,
            batch_size: 64,
            metric_batch: 32,
            metric_batches_per_epoch: None,
            pairing: Pairing::Distinct,
            segment_s: 2.0,
            epochs: 20,
            lr: 0.001,
            lr_decay: None,
            lr_decay_every: None,
            weight_decay: 5e-5,
            augment: false,
            noise_manifest: None,
            rir_manifest: None,
            val_every: 1,
            seed: 0,
            workers: default_workers(),
            manifest: None,
            val_trials: None,
            out: None,
        }
    }
}

/// Machine core count capped at 8.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for `{key}` (expected on/off)"
        ))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

/// Splits config text into `(line, key, value)`. `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn family(&self) -> Family {
        self.trunk.family
    }

    /// Applies one setting. Changing the family resets the family-derived
    /// trunk fields (pooling, input dimension).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "family" => {
                let family: Family = value.parse()?;
                if family != self.trunk.family {
                    let t = &self.trunk;
                    self.trunk = TrunkConfig::new(family)
                        .with_scale(t.channel_scale)
                        .with_embedding_dim(t.embedding_dim)
                        .with_embedding_bn(t.batchnorm_after_embedding);
                }
            }
            "channel_scale" => self.trunk.channel_scale = parse_value(key, value)?,
            "embedding_dim" => self.trunk.embedding_dim = parse_value(key, value)?,
            "pooling" => self.trunk.pooling = value.parse::<Pooling>()?,
            "embedding_bn" => self.trunk.batchnorm_after_embedding = parse_bool(key, value)?,
            "loss" => self.loss = value.parse()?,
            "margin" => self.margin = parse_value(key, value)?,
            "scale" => self.scale = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "metric_batch" => self.metric_batch = parse_value(key, value)?,
            "metric_batches_per_epoch" => {
                self.metric_batches_per_epoch = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "pairing" => self.pairing = value.parse()?,
            "segment_s" => self.segment_s = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = Some(parse_value(key, value)?),
            "lr_decay_every" => self.lr_decay_every = Some(parse_value(key, value)?),
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "noise_manifest" => self.noise_manifest = opt_path(value),
            "rir_manifest" => self.rir_manifest = opt_path(value),
            "val_every" => self.val_every = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "manifest" => self.manifest = opt_path(value),
            "val_trials" => self.val_trials = opt_path(value),
            "out" => self.out = opt_path(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file on top of the current values. The family is
    /// applied first so the rest of the file refines it.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let pairs = parse_pairs(text, origin)?;
        let located = |line: usize, e: Error| match e {
            Error::Config(reason) => Error::Parse {
                path: origin.to_path_buf(),
                line,
                reason,
            },
            other => other,
        };
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k == "family") {
            self.set(k, v).map_err(|e| located(*line, e))?;
        }
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k != "family") {
            self.set(k, v).map_err(|e| located(*line, e))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            margin: MarginConfig {
                margin: self.margin,
                scale: self.scale,
            },
        }
    }

    /// Step decay: 5% every 5 epochs for Q, 25% every 16 for H, 25% every
    /// 8 for the TDNN, unless overridden.
    pub fn schedule(&self) -> SchedulePolicy {
        let (fraction, every) = match self.family() {
            Family::ResNetQSap => (0.05, 5),
            Family::ResNetHAsp => (0.25, 16),
            Family::TdnnLite => (0.25, 8),
        };
        SchedulePolicy {
            initial_lr: self.lr,
            decay_fraction: self.lr_decay.unwrap_or(fraction),
            decay_every: self.lr_decay_every.unwrap_or(every),
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.loss_config().margin.validate()?;
        self.schedule().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.metric_batch < 2 {
            return bad(format!("metric_batch must be at least 2, got {}", self.metric_batch));
        }
        if self.metric_batches_per_epoch == Some(0) {
            return bad("metric_batches_per_epoch must be at least 1".into());
        }
        if !(self.segment_s.is_finite() && self.segment_s > 0.0) {
            return bad(format!("segment_s must be positive, got {}", self.segment_s));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.augment && (self.noise_manifest.is_none() || self.rir_manifest.is_none()) {
            return bad("augment = on needs noise_manifest and rir_manifest".into());
        }
        Ok(())
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let s = self.schedule();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mbpe = self
            .metric_batches_per_epoch
            .map_or("auto".to_string(), |n| n.to_string());
        let rows: Vec<(&str, String)> = vec![
            ("family", self.family().to_string()),
            ("channel_scale", format!("{}", self.trunk.channel_scale)),
            ("embedding_dim", self.trunk.embedding_dim.to_string()),
            ("pooling", self.trunk.pooling.to_string()),
            ("embedding_bn", onoff(self.trunk.batchnorm_after_embedding).into()),
            ("loss", self.loss.name().into()),
            ("margin", format!("{}", self.margin)),
            ("scale", format!("{}", self.scale)),
            ("batch_size", self.batch_size.to_string()),
            ("metric_batch", self.metric_batch.to_string()),
            ("metric_batches_per_epoch", mbpe),
            ("pairing", self.pairing.to_string()),
            ("segment_s", format!("{}", self.segment_s)),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{}", self.lr)),
            ("lr_decay", format!("{}", s.decay_fraction)),
            ("lr_decay_every", s.decay_every.to_string()),
            ("weight_decay", format!("{}", self.weight_decay)),
            ("augment", onoff(self.augment).into()),
            ("noise_manifest", path(&self.noise_manifest)),
            ("rir_manifest", path(&self.rir_manifest)),
            ("val_every", self.val_every.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("manifest", path(&self.manifest)),
            ("val_trials", path(&self.val_trials)),
            ("out", path(&self.out)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.metric_batch), (20, 64, 32));
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.weight_decay, 5e-5);
        assert_eq!(c.segment_s, 2.0);
        c.validate().unwrap();
    }

    #[test]
    fn family_schedules() {
        let mut c = TrainConfig::default();
        assert_eq!((c.schedule().decay_fraction, c.schedule().decay_every), (0.05, 5));
        c.set("family", "resnet_h_asp").unwrap();
        assert_eq!((c.schedule().decay_fraction, c.schedule().decay_every), (0.25, 16));
        c.set("family", "tdnn_lite").unwrap();
        assert_eq!((c.schedule().decay_fraction, c.schedule().decay_every), (0.25, 8));
        c.set("lr_decay", "0.5").unwrap();
        assert_eq!(c.schedule().decay_fraction, 0.5);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# toy run\nloss = ap_softmax\nchannel_scale = 0.25\nfamily = tdnn_lite\n\nepochs = 3 # short\n";
        let mut c = TrainConfig::default();
        c.apply_text(text, Path::new("t.cfg")).unwrap();
        assert_eq!(c.family(), Family::TdnnLite);
        assert_eq!(c.trunk.input_dim, 80);
        assert_eq!(c.trunk.channel_scale, 0.25);
        assert_eq!(c.loss, LossKind::ApSoftmax);
        assert_eq!(c.epochs, 3);
        c.set_override("epochs=7").unwrap();
        assert_eq!(c.epochs, 7);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = TrainConfig::default();
        let e = c.apply_text("epochs = 2\nbogus = 1\n", Path::new("t.cfg")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = c.apply_text("epochs\n", Path::new("t.cfg")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        assert!(c.set_override("epochs").is_err());
        assert!(c.set("epochs", "many").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("loss", "ap").unwrap();
        c.set("family", "resnet_h_asp").unwrap();
        c.set("out", "runs/x").unwrap();
        c.set("augment", "off").unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text(), Path::new("r.cfg")).unwrap();
        // The resolved text pins the schedule explicitly.
        assert_eq!(back.schedule(), c.schedule());
        back.lr_decay = c.lr_decay;
        back.lr_decay_every = c.lr_decay_every;
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        for bad in ["batch_size=1", "augment=true", "lr_decay=1.0"] {
            let mut c = TrainConfig::default();
            c.set_override(bad).unwrap();
            assert!(c.validate().is_err(), "{bad}");
        }
    }
}
