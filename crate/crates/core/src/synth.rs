//! Seeded toy corpus with acoustically separable speakers.
//!
//! Each speaker is a fixed stack of three sinusoids, lightly breathy,
//! shaped by a speaker-specific resonator. Each utterance varies pitch,
//! phase, amplitude envelope and length (3 to 6 s) and carries white
//! noise at 20 dB SNR.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::augment::snr_gain;
use crate::data::{
    write_manifest, write_trials, write_wav_pcm16, Trial, TrialList, UtteranceRecord, Waveform, DEFAULT_SAMPLE_RATE,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAIN_MANIFEST_FILE: &str = "train.txt";
pub const TRIALS_FILE: &str = "trials.txt";
pub const NOISE_SNR_DB: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_utts: usize,
    pub seed: u64,
    /// Speakers kept out of training and used for the trial list. With 0,
    /// the last quarter of every speaker's utterances is held out instead.
    pub holdout_speakers: usize,
    pub min_s: f64,
    pub max_s: f64,
}

impl SynthConfig {
    /// A quarter of the speakers (at least 2) are held out.
    pub fn new(n_speakers: usize, n_utts: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            n_utts,
            seed,
            holdout_speakers: (n_speakers / 4).max(2),
            min_s: 3.0,
            max_s: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.n_utts < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 speakers with 2 utterances each, got {} x {}",
                self.n_speakers, self.n_utts
            )));
        }
        if self.holdout_speakers == 1 || self.holdout_speakers + 2 > self.n_speakers && self.holdout_speakers > 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {} of {} speakers (need 2 or more held out and 2 or more for training)",
                self.holdout_speakers, self.n_speakers
            )));
        }
        if !(self.min_s > 0.0 && self.max_s >= self.min_s) {
            return Err(Error::InvalidArgument(format!(
                "invalid duration range {}..{}",
                self.min_s, self.max_s
            )));
        }
        Ok(())
    }
}

/// Identity of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub freqs: [f64; 3],
    pub amps: [f64; 3],
    pub formant_hz: f64,
    pub formant_r: f64,
}

impl Voice {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut freqs = [0.0; 3];
        for f in &mut freqs {
            // Log-uniform between 120 Hz and 2.4 kHz.
            *f = 120.0 * 20f64.powf(rng.random::<f64>());
        }
        freqs.sort_by(f64::total_cmp);
        let mut amps = [0.0; 3];
        for a in &mut amps {
            *a = rng.random_range(0.3..1.0);
        }
        Self {
            freqs,
            amps,
            formant_hz: rng.random_range(400.0..3000.0),
            formant_r: rng.random_range(0.93..0.98),
        }
    }

    /// One utterance of `len` samples.
    pub fn utter<R: Rng + ?Sized>(&self, len: usize, sr: u32, rng: &mut R) -> Vec<f64> {
        let sr = sr as f64;
        let jitter = 1.0 + rng.random_range(-0.02..0.02);
        let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let env_rate = rng.random_range(2.0..5.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let mut source: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / sr;
                let tones: f64 = (0..3)
                    .map(|k| self.amps[k] * (2.0 * PI * self.freqs[k] * jitter * t + phases[k]).sin())
                    .sum();
                let env = 0.6 + 0.4 * (2.0 * PI * env_rate * t + env_phase).sin();
                let breath: f64 = rng.sample(StandardNormal);
                env * (tones + 0.1 * breath)
            })
            .collect();
        // Two-pole resonator at the formant frequency, mixed with the dry path.
        let theta = 2.0 * PI * self.formant_hz / sr;
        let (a1, a2) = (2.0 * self.formant_r * theta.cos(), -self.formant_r * self.formant_r);
        let gain = 1.0 - self.formant_r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for x in &mut source {
            let y = gain * *x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *x = 0.5 * *x + 2.0 * y;
        }
        source
    }
}

fn add_white_noise<R: Rng + ?Sized>(signal: &mut [f64], snr_db: f64, rng: &mut R) {
    let noise: Vec<f64> = (0..signal.len()).map(|_| rng.sample(StandardNormal)).collect();
    let g = snr_gain(crate::data::rms(signal), crate::data::rms(&noise), snr_db);
    for (s, n) in signal.iter_mut().zip(noise) {
        *s += g * n;
    }
}

/// What [`synth_corpus`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub root: PathBuf,
    /// Every utterance.
    pub manifest: PathBuf,
    /// Utterances available for training.
    pub train_manifest: PathBuf,
    /// Held-out trials. Ids are wav paths relative to `root`.
    pub trials: PathBuf,
    pub records: Vec<UtteranceRecord>,
    pub train_records: Vec<UtteranceRecord>,
    pub trial_list: TrialList,
}

fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

/// Balanced trials over `groups` (utterance ids per speaker): every target
/// pair, and the same number of nontarget pairs drawn without replacement
/// (all of them when there are fewer).
pub fn balanced_trials<R: Rng + ?Sized>(groups: &[Vec<String>], rng: &mut R) -> TrialList {
    let mut targets = Vec::new();
    for g in groups {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                targets.push(Trial::new(true, g[i].clone(), g[j].clone()));
            }
        }
    }
    let mut pairs = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            for x in &groups[a] {
                for y in &groups[b] {
                    pairs.push((x, y));
                }
            }
        }
    }
    let n_non = targets.len().min(pairs.len());
    let targets_kept = if targets.len() > n_non + 1 {
        let mut idx = sample(rng, targets.len(), n_non).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| targets[i].clone()).collect()
    } else {
        targets
    };
    let mut idx = sample(rng, pairs.len(), n_non).into_vec();
    idx.sort_unstable();
    let nontargets = idx
        .into_iter()
        .map(|i| Trial::new(false, pairs[i].0.clone(), pairs[i].1.clone()));
    // Interleave so any prefix is roughly balanced too.
    let mut out = Vec::new();
    let mut t = targets_kept.into_iter();
    let mut n = nontargets;
    loop {
        match (t.next(), n.next()) {
            (None, None) => break,
            (a, b) => out.extend(a.into_iter().chain(b)),
        }
    }
    TrialList::new(out)
}

/// Writes `wav/<speaker>/<utterance>.wav`, the full manifest, the training
/// manifest and the held-out trial list under `out_dir`. The same seed
/// always yields the same bytes.
pub fn synth_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let sr = DEFAULT_SAMPLE_RATE;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut voice_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let voices: Vec<Voice> = (0..cfg.n_speakers).map(|_| Voice::random(&mut voice_rng)).collect();
    let jobs: Vec<(usize, usize)> = (0..cfg.n_speakers)
        .flat_map(|s| (0..cfg.n_utts).map(move |u| (s, u)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(s, u)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + (s * cfg.n_utts + u) as u64);
            let secs = rng.random_range(cfg.min_s..=cfg.max_s);
            let len = (secs * sr as f64).round() as usize;
            let mut x = voices[s].utter(len, sr, &mut rng);
            add_white_noise(&mut x, NOISE_SNR_DB, &mut rng);
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            x.iter_mut().for_each(|v| *v *= 0.5 / peak);
            let spk = speaker_id(s);
            let rel = PathBuf::from("wav").join(&spk).join(format!("{spk}_u{u:03}.wav"));
            let path = out_dir.join(&rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_wav_pcm16(&path, &Waveform::new(x, sr))?;
            Ok(UtteranceRecord {
                utterance_id: format!("{spk}_u{u:03}"),
                speaker_id: spk,
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let held_utts = cfg.n_utts.div_ceil(4);
    let held = |s: usize, u: usize| {
        if cfg.holdout_speakers > 0 {
            s >= cfg.n_speakers - cfg.holdout_speakers
        } else {
            u >= cfg.n_utts - held_utts
        }
    };
    let mut groups = vec![Vec::new(); cfg.n_speakers];
    let mut train_records = Vec::new();
    for (&(s, u), r) in jobs.iter().zip(&records) {
        if held(s, u) {
            groups[s].push(r.path.display().to_string());
        } else {
            train_records.push(r.clone());
        }
    }
    groups.retain(|g| !g.is_empty());
    // Voices use stream 0 and utterances streams 1.., trials the last one.
    let mut trial_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    trial_rng.set_stream(u64::MAX);
    let trial_list = balanced_trials(&groups, &mut trial_rng);

    let corpus = SynthCorpus {
        root: out_dir.to_path_buf(),
        manifest: out_dir.join(MANIFEST_FILE),
        train_manifest: out_dir.join(TRAIN_MANIFEST_FILE),
        trials: out_dir.join(TRIALS_FILE),
        records,
        train_records,
        trial_list,
    };
    write_manifest(&corpus.manifest, &corpus.records)?;
    write_manifest(&corpus.train_manifest, &corpus.train_records)?;
    write_trials(&corpus.trials, &corpus.trial_list)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_wav, parse_manifest, parse_trials};

    fn small() -> SynthConfig {
        SynthConfig {
            min_s: 0.5,
            max_s: 1.0,
            ..SynthConfig::new(8, 4, 11)
        }
    }

    #[test]
    fn writes_every_file_and_a_balanced_list() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(dir.path(), &small()).unwrap();
        assert_eq!(parse_manifest(&c.manifest).unwrap().len(), 32);
        assert_eq!(parse_manifest(&c.train_manifest).unwrap().len(), 24);
        let trials = parse_trials(&c.trials).unwrap();
        let nt = trials.n_targets();
        assert!(nt.abs_diff(trials.len() - nt) <= 1, "{nt} of {}", trials.len());
        // Held-out speakers never appear in training.
        let train_spk: Vec<_> = c.train_records.iter().map(|r| r.speaker_id.clone()).collect();
        for t in &trials.trials {
            for id in [&t.enroll_id, &t.test_id] {
                let w = load_wav(dir.path().join(id)).unwrap();
                assert!(w.duration_s() >= 0.5 && w.duration_s() <= 1.0);
                assert!(!train_spk.iter().any(|s| id.contains(s.as_str())));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = synth_corpus(a.path(), &small()).unwrap();
        synth_corpus(b.path(), &small()).unwrap();
        for r in &ca.records {
            assert_eq!(
                std::fs::read(a.path().join(&r.path)).unwrap(),
                std::fs::read(b.path().join(&r.path)).unwrap()
            );
        }
        for f in [MANIFEST_FILE, TRAIN_MANIFEST_FILE, TRIALS_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn closed_set_holds_out_late_utterances() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            holdout_speakers: 0,
            ..small()
        };
        let c = synth_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(c.train_records.len(), 24);
        assert!(c.train_records.iter().all(|r| !r.utterance_id.ends_with("u003")));
    }

    #[test]
    fn noise_sits_at_twenty_db() {
        let v = Voice::random(&mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = v.utter(16000, 16000, &mut rng);
        let mut noisy = clean.clone();
        add_white_noise(&mut noisy, NOISE_SNR_DB, &mut rng);
        let diff: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let snr = 20.0 * (crate::data::rms(&clean) / crate::data::rms(&diff)).log10();
        assert!((snr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SynthConfig::new(1, 10, 0).validate().is_err());
        let mut c = SynthConfig::new(4, 10, 0);
        c.holdout_speakers = 3;
        assert!(c.validate().is_err());
        c.holdout_speakers = 1;
        assert!(c.validate().is_err());
        c.holdout_speakers = 2;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn trial_balance_with_few_nontargets() {
        let groups = vec![
            vec!["a".to_string(), "b".into(), "c".into(), "d".into()],
            vec!["e".to_string()],
        ];
        let t = balanced_trials(&groups, &mut ChaCha8Rng::seed_from_u64(0));
        let nt = t.n_targets();
        assert!(nt.abs_diff(t.len() - nt) <= 1);
    }
}
