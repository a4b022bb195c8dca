//! Training data in memory and batch construction.
//!
//! A batch is first planned (which utterances, which labels, one RNG seed
//! per segment) and then materialised. Each segment draws its crop and
//! augmentation from its own seed, so batch content does not depend on how
//! many threads build it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::Pairing;
use crate::augment::{apply_policy, AugmentPolicy, NoiseCorpus, RirSet};
use crate::data::{load_wav, resolve_path, sample_segment, UtteranceRecord, Waveform};
use crate::dsp::{FeatureExtractor, FeatureMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub wave: Waveform,
}

/// Training utterances with speakers mapped to dense class indices
/// (sorted by speaker id).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub speakers: Vec<String>,
    by_speaker: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(items: Vec<(String, String, Waveform)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (_, spk, _) in &items {
            index.entry(spk.clone()).or_insert(0usize);
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let speakers: Vec<String> = index.keys().cloned().collect();
        let mut by_speaker = vec![Vec::new(); speakers.len()];
        let utterances: Vec<Utterance> = items
            .into_iter()
            .enumerate()
            .map(|(i, (id, spk, wave))| {
                let speaker = index[&spk];
                by_speaker[speaker].push(i);
                Utterance { id, speaker, wave }
            })
            .collect();
        Ok(Self {
            utterances,
            speakers,
            by_speaker,
        })
    }

    /// Loads every manifest entry, resolving relative paths against `root`.
    pub fn load(records: &[UtteranceRecord], root: &Path) -> Result<Self> {
        let items = records
            .par_iter()
            .map(|r| {
                let wave = load_wav(resolve_path(root, &r.path))?;
                Ok((r.utterance_id.clone(), r.speaker_id.clone(), wave))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterances_of(&self, speaker: usize) -> &[usize] {
        &self.by_speaker[speaker]
    }
}

/// Noise and reverberation applied to training segments.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub policy: AugmentPolicy,
    pub noise: NoiseCorpus,
    pub rirs: RirSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Classification,
    Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub mode: BatchMode,
    /// Utterances per batch (classification) or speakers per batch (metric).
    pub size: usize,
    pub segment_s: f64,
    pub pairing: Pairing,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2, got {}",
                self.size
            )));
        }
        if !(self.segment_s.is_finite() && self.segment_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "segment length must be positive, got {}",
                self.segment_s
            )));
        }
        Ok(())
    }
}

/// Which utterances make up a batch, in row order, with one seed per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub rows: Vec<(usize, u64)>,
    pub labels: Vec<usize>,
}

/// Materialised batch. Metric batches hold all queries first, then the
/// supports in the same speaker order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: BatchMode,
    pub feats: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

fn classification_plan(ds: &Dataset, utts: &[usize], rng: &mut ChaCha8Rng) -> BatchPlan {
    BatchPlan {
        mode: BatchMode::Classification,
        rows: utts.iter().map(|&u| (u, rng.next_u64())).collect(),
        labels: utts.iter().map(|&u| ds.utterances[u].speaker).collect(),
    }
}

fn metric_plan(spec: &BatchSpec, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
    if ds.n_speakers() < 2 || ds.n_speakers() < spec.size {
        return Err(Error::InsufficientSpeakers {
            needed: spec.size.max(2),
            found: ds.n_speakers(),
        });
    }
    let speakers = sample(rng, ds.n_speakers(), spec.size).into_vec();
    let mut queries = Vec::with_capacity(spec.size);
    let mut supports = Vec::with_capacity(spec.size);
    for &s in &speakers {
        let utts = ds.utterances_of(s);
        let (q, p) = if spec.pairing == Pairing::Distinct && utts.len() >= 2 {
            let pair = sample(rng, utts.len(), 2);
            (utts[pair.index(0)], utts[pair.index(1)])
        } else {
            let u = utts[rng.random_range(0..utts.len())];
            (u, u)
        };
        queries.push((q, rng.next_u64()));
        supports.push((p, rng.next_u64()));
    }
    let labels = speakers.iter().chain(&speakers).copied().collect();
    queries.extend(supports);
    Ok(BatchPlan {
        mode: BatchMode::Metric,
        rows: queries,
        labels,
    })
}

/// One randomly drawn batch plan.
pub fn plan_batch(spec: &BatchSpec, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
    spec.validate()?;
    match spec.mode {
        BatchMode::Classification => {
            let utts = if spec.size <= ds.len() {
                sample(rng, ds.len(), spec.size).into_vec()
            } else {
                (0..spec.size).map(|_| rng.random_range(0..ds.len())).collect()
            };
            Ok(classification_plan(ds, &utts, rng))
        }
        BatchMode::Metric => metric_plan(spec, ds, rng),
    }
}

/// Plans one epoch. Classification makes one shuffled pass over every
/// utterance (a trailing single utterance joins the previous batch);
/// metric mode draws `metric_batches` independent speaker batches.
pub fn plan_epoch(
    spec: &BatchSpec,
    ds: &Dataset,
    metric_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchPlan>> {
    spec.validate()?;
    match spec.mode {
        BatchMode::Classification => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(rng);
            let mut chunks: Vec<Vec<usize>> = order.chunks(spec.size).map(<[usize]>::to_vec).collect();
            if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
                let tail = chunks.pop().unwrap_or_default();
                if let Some(prev) = chunks.last_mut() {
                    prev.extend(tail);
                }
            }
            Ok(chunks.iter().map(|c| classification_plan(ds, c, rng)).collect())
        }
        BatchMode::Metric => (0..metric_batches).map(|_| metric_plan(spec, ds, rng)).collect(),
    }
}

/// Crops, optionally augments and featurises every row of a plan.
pub fn materialize(
    plan: &BatchPlan,
    ds: &Dataset,
    segment_s: f64,
    extractor: &FeatureExtractor,
    augment: Option<&Augmenter>,
) -> Result<Batch> {
    let feats = plan
        .rows
        .par_iter()
        .map(|&(u, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seg = sample_segment(&ds.utterances[u].wave, segment_s, &mut rng);
            if let Some(a) = augment {
                seg = apply_policy(&seg, &a.policy, &a.noise, &a.rirs, &mut rng)?;
            }
            extractor.extract(&seg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        mode: plan.mode,
        feats,
        labels: plan.labels.clone(),
    })
}

/// Draws and materialises one batch.
pub fn sample_batch(
    spec: &BatchSpec,
    ds: &Dataset,
    extractor: &FeatureExtractor,
    augment: Option<&Augmenter>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let plan = plan_batch(spec, ds, rng)?;
    materialize(&plan, ds, spec.segment_s, extractor, augment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureConfig;

    fn toy(n_spk: usize, per: usize) -> Dataset {
        let mut items = Vec::new();
        for s in 0..n_spk {
            for u in 0..per {
                let n = 16000 * (1 + (s + u) % 3);
                let f = 100.0 + 50.0 * s as f64;
                let wave = (0..n)
                    .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin() * 0.1 + 0.001 * u as f64)
                    .collect();
                items.push((format!("s{s}u{u}"), format!("spk{s:02}"), Waveform::new(wave, 16000)));
            }
        }
        Dataset::new(items).unwrap()
    }

    fn spec(mode: BatchMode, size: usize) -> BatchSpec {
        BatchSpec {
            mode,
            size,
            segment_s: 2.0,
            pairing: Pairing::Distinct,
        }
    }

    #[test]
    fn metric_batch_layout() {
        let ds = toy(6, 3);
        let ex = FeatureExtractor::new(FeatureConfig::logmel64()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&spec(BatchMode::Metric, 4), &ds, &ex, None, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.labels[..4], b.labels[4..]);
        let mut distinct = b.labels[..4].to_vec();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn distinct_pairing_uses_two_utterances() {
        let ds = toy(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = plan_batch(&spec(BatchMode::Metric, 5), &ds, &mut rng).unwrap();
        for i in 0..5 {
            let (q, s) = (p.rows[i].0, p.rows[i + 5].0);
            assert_ne!(q, s);
            assert_eq!(ds.utterances[q].speaker, ds.utterances[s].speaker);
            assert_eq!(ds.utterances[q].speaker, p.labels[i]);
        }
        let same = BatchSpec {
            pairing: Pairing::Same,
            ..spec(BatchMode::Metric, 5)
        };
        let p = plan_batch(&same, &ds, &mut rng).unwrap();
        assert!((0..5).all(|i| p.rows[i].0 == p.rows[i + 5].0));
    }

    #[test]
    fn classification_segments_are_two_seconds() {
        let ds = toy(4, 5);
        let ex = FeatureExtractor::new(FeatureConfig::logmel64()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_batch(&spec(BatchMode::Classification, 12), &ds, &ex, None, &mut rng).unwrap();
        assert_eq!(b.len(), 12);
        // 32000 samples, 400-sample window, 160-sample hop.
        assert!(b.feats.iter().all(|f| f.frames == 198 && f.dims == 64));
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = toy(4, 3);
        let ex = FeatureExtractor::new(FeatureConfig::logmel64()).unwrap();
        for mode in [BatchMode::Classification, BatchMode::Metric] {
            let s = spec(mode, 3);
            let a = sample_batch(&s, &ds, &ex, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = sample_batch(&s, &ds, &ex, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.feats, b.feats);
        }
    }

    #[test]
    fn too_few_speakers() {
        let ds = toy(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            plan_batch(&spec(BatchMode::Metric, 4), &ds, &mut rng),
            Err(Error::InsufficientSpeakers { .. })
        ));
        let one = toy(1, 4);
        assert!(plan_batch(&spec(BatchMode::Metric, 2), &one, &mut rng).is_err());
        assert!(plan_batch(&spec(BatchMode::Metric, 1), &ds, &mut rng).is_err());
    }

    #[test]
    fn classification_epoch_covers_everything_once() {
        let ds = toy(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plans = plan_epoch(&spec(BatchMode::Classification, 10), &ds, 0, &mut rng).unwrap();
        // 21 = 10 + 11: the lone trailing utterance joins the second batch.
        assert_eq!(plans.iter().map(|p| p.rows.len()).collect::<Vec<_>>(), vec![10, 11]);
        let mut seen: Vec<usize> = plans.iter().flat_map(|p| p.rows.iter().map(|r| r.0)).collect();
        seen.sort();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn speaker_indices_follow_sorted_ids() {
        let w = Waveform::new(vec![0.1; 100], 16000);
        let ds = Dataset::new(vec![
            ("a".into(), "zed".into(), w.clone()),
            ("b".into(), "amy".into(), w.clone()),
            ("c".into(), "zed".into(), w),
        ])
        .unwrap();
        assert_eq!(ds.speakers, vec!["amy", "zed"]);
        assert_eq!(ds.utterances_of(1), &[0, 2]);
    }
}
