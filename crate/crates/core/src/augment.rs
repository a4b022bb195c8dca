//! Online augmentation for the data loader: additive noise at a sampled SNR
//! and room impulse response convolution. Every call draws fresh randomness
//! from the caller's RNG, so no augmented copy is ever materialized on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{self, Waveform};
use crate::error::{Error, Result};

/// Kernels longer than this are convolved through the FFT.
const DIRECT_CONV_MAX_TAPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoiseCategory {
    Noise,
    Music,
    Babble,
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "music" => Ok(Self::Music),
            "babble" | "speech" => Ok(Self::Babble),
            other => Err(Error::InvalidArgument(format!("unknown noise category `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Music => "music",
            Self::Babble => "babble",
        })
    }
}

#[derive(Debug, Clone)]
pub struct NoiseClip {
    pub wave: Arc<Waveform>,
    pub rms: f64,
}

impl NoiseClip {
    pub fn new(wave: Waveform) -> Result<Self> {
        let rms = wave.rms();
        if !(rms > 0.0) || !rms.is_finite() {
            return Err(Error::InvalidArgument("noise clip is silent".into()));
        }
        Ok(Self {
            wave: Arc::new(wave),
            rms,
        })
    }
}

/// Noise clips grouped by category. Babble clips are speech recordings that
/// get overlaid several at a time.
#[derive(Debug, Clone, Default)]
pub struct NoiseCorpus {
    pub categories: BTreeMap<NoiseCategory, Vec<NoiseClip>>,
}

impl NoiseCorpus {
    pub fn add(&mut self, category: NoiseCategory, wave: Waveform) -> Result<()> {
        self.categories.entry(category).or_default().push(NoiseClip::new(wave)?);
        Ok(())
    }

    pub fn clips(&self, category: NoiseCategory) -> &[NoiseClip] {
        self.categories.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Loads clips listed as `clip_id category path` lines. Relative paths
    /// resolve against the manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = data::base_dir(path);
        let mut corpus = Self::default();
        for rec in data::parse_manifest(path)? {
            let category: NoiseCategory = rec.speaker_id.parse()?;
            let wave = data::load_wav(data::resolve_path(&root, &rec.path))?;
            corpus
                .add(category, wave)
                .map_err(|_| Error::InvalidArgument(format!("noise clip `{}` is silent", rec.utterance_id)))?;
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RirSet {
    pub filters: Vec<Waveform>,
}

impl RirSet {
    pub fn new(filters: Vec<Waveform>) -> Result<Self> {
        for (i, f) in filters.iter().enumerate() {
            if peak_index(&f.samples).is_none() {
                return Err(Error::InvalidArgument(format!("impulse response {i} is all zero")));
            }
            if f.samples.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("impulse response {i} is not finite")));
            }
        }
        Ok(Self { filters })
    }

    /// Loads filters listed in a manifest (`rir_id room path`).
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = data::base_dir(path);
        let filters = data::parse_manifest(path)?
            .iter()
            .map(|rec| data::load_wav(data::resolve_path(&root, &rec.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(filters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Clean,
    Noise,
    Music,
    Babble,
    Reverb,
}

impl Branch {
    pub const ALL: [Branch; 5] = [
        Branch::Clean,
        Branch::Noise,
        Branch::Music,
        Branch::Babble,
        Branch::Reverb,
    ];
}

/// Branch probabilities and SNR ranges. Defaults follow the Kaldi x-vector
/// recipe: noise 0-15 dB, music 5-15 dB, babble 13-20 dB over 3-7 speakers,
/// all five branches equally likely.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub p_clean: f64,
    pub p_noise: f64,
    pub p_music: f64,
    pub p_babble: f64,
    pub p_reverb: f64,
    pub noise_snr: (f64, f64),
    pub music_snr: (f64, f64),
    pub babble_snr: (f64, f64),
    pub babble_speakers: (usize, usize),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_clean: 0.2,
            p_noise: 0.2,
            p_music: 0.2,
            p_babble: 0.2,
            p_reverb: 0.2,
            noise_snr: (0.0, 15.0),
            music_snr: (5.0, 15.0),
            babble_snr: (13.0, 20.0),
            babble_speakers: (3, 7),
        }
    }
}

impl AugmentPolicy {
    pub fn clean_only() -> Self {
        Self {
            p_clean: 1.0,
            p_noise: 0.0,
            p_music: 0.0,
            p_babble: 0.0,
            p_reverb: 0.0,
            ..Self::default()
        }
    }

    pub fn probability(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Clean => self.p_clean,
            Branch::Noise => self.p_noise,
            Branch::Music => self.p_music,
            Branch::Babble => self.p_babble,
            Branch::Reverb => self.p_reverb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = Branch::ALL.map(|b| self.probability(b));
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "branch probabilities must be nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "branch probabilities sum to {total}, expected 1"
            )));
        }
        for (name, (lo, hi)) in [
            ("noise", self.noise_snr),
            ("music", self.music_snr),
            ("babble", self.babble_snr),
        ] {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "{name} SNR range [{lo}, {hi}] is empty"
                )));
            }
        }
        let (lo, hi) = self.babble_speakers;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "babble speaker range [{lo}, {hi}] is invalid"
            )));
        }
        Ok(())
    }

    pub fn sample_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> Branch {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = Branch::Clean;
        for b in Branch::ALL {
            let p = self.probability(b);
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = b;
            if u < acc {
                return b;
            }
        }
        last
    }
}

/// Noise cut or tiled to `len` samples starting at a random offset.
fn fit_noise<R: Rng + ?Sized>(noise: &Waveform, len: usize, rng: &mut R) -> Vec<f64> {
    if noise.is_empty() {
        return vec![0.0; len];
    }
    let start = if noise.len() > len {
        rng.random_range(0..=noise.len() - len)
    } else {
        rng.random_range(0..noise.len())
    };
    noise.samples.iter().copied().cycle().skip(start).take(len).collect()
}

/// Result of [`mix_noise_parts`]: the mixture and the scaled noise addend.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub output: Waveform,
    pub scaled_noise: Vec<f64>,
    pub gain: f64,
}

/// Gain that puts noise of RMS `noise_rms` at `snr_db` below a signal of
/// RMS `signal_rms`.
pub fn snr_gain(signal_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    signal_rms / noise_rms * 10f64.powf(-snr_db / 20.0)
}

pub fn mix_noise_parts<R: Rng + ?Sized>(
    signal: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    let signal_rms = signal.rms();
    if !(signal_rms > 0.0) {
        return Err(Error::SilentSignal);
    }
    let fitted = fit_noise(noise, signal.len(), rng);
    let noise_rms = data::rms(&fitted);
    if !(noise_rms > 0.0) {
        return Err(Error::InvalidArgument("noise segment is silent".into()));
    }
    let gain = snr_gain(signal_rms, noise_rms, snr_db);
    let scaled_noise: Vec<f64> = fitted.iter().map(|n| gain * n).collect();
    let output = signal.samples.iter().zip(&scaled_noise).map(|(s, n)| s + n).collect();
    Ok(Mixture {
        output: Waveform::new(output, signal.sample_rate),
        scaled_noise,
        gain,
    })
}

/// `signal + g * noise` with `g` chosen so the two addends sit `snr_db` apart.
pub fn mix_noise<R: Rng + ?Sized>(signal: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<Waveform> {
    Ok(mix_noise_parts(signal, noise, snr_db, rng)?.output)
}

fn peak_index(x: &[f64]) -> Option<usize> {
    let (idx, peak) = x.iter().enumerate().fold(
        (0, 0.0f64),
        |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) },
    );
    (peak > 0.0).then_some(idx)
}

/// Samples `[offset, offset + len)` of the full linear convolution `x * h`.
fn convolve_window(x: &[f64], h: &[f64], offset: usize, len: usize) -> Vec<f64> {
    if h.len() <= DIRECT_CONV_MAX_TAPS {
        return (offset..offset + len)
            .map(|n| {
                let k_lo = n.saturating_sub(x.len() - 1);
                let k_hi = n.min(h.len() - 1);
                (k_lo..=k_hi).map(|k| h[k] * x[n - k]).sum()
            })
            .collect();
    }
    let full = x.len() + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut xf = pad(x);
    let mut hf = pad(h);
    fwd.process(&mut xf);
    fwd.process(&mut hf);
    for (a, b) in xf.iter_mut().zip(&hf) {
        *a *= b;
    }
    inv.process(&mut xf);
    let norm = 1.0 / size as f64;
    (offset..offset + len)
        .map(|n| if n < full { xf[n].re * norm } else { 0.0 })
        .collect()
}

/// Reverberates `signal` with `rir`, normalized by its peak magnitude and
/// aligned on the direct path so the output stays time-aligned with the
/// input. Output is rescaled only when its peak exceeds 1.
pub fn convolve_rir(signal: &Waveform, rir: &Waveform) -> Result<Waveform> {
    let peak = peak_index(&rir.samples).ok_or_else(|| Error::InvalidArgument("impulse response is all zero".into()))?;
    if signal.is_empty() {
        return Ok(signal.clone());
    }
    let scale = rir.samples[peak].abs();
    let h: Vec<f64> = rir.samples.iter().map(|v| v / scale).collect();
    let mut out = convolve_window(&signal.samples, &h, peak, signal.len());
    let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 1.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Waveform::new(out, signal.sample_rate))
}

/// Output of [`apply_policy_traced`]: the augmented signal and the branch taken.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub wave: Waveform,
    pub branch: Branch,
}

pub fn apply_policy_traced<R: Rng + ?Sized>(
    signal: &Waveform,
    policy: &AugmentPolicy,
    corpus: &NoiseCorpus,
    rirs: &RirSet,
    rng: &mut R,
) -> Result<Augmented> {
    let branch = policy.sample_branch(rng);
    let pick = |clips: &[NoiseClip], rng: &mut R| -> Result<Arc<Waveform>> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no clips available for the {branch:?} branch"
            )));
        }
        Ok(clips[rng.random_range(0..clips.len())].wave.clone())
    };
    let draw_snr = |(lo, hi): (f64, f64), rng: &mut R| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let wave = match branch {
        Branch::Clean => signal.clone(),
        Branch::Noise => {
            let clip = pick(corpus.clips(NoiseCategory::Noise), rng)?;
            let snr = draw_snr(policy.noise_snr, rng);
            mix_noise(signal, &clip, snr, rng)?
        }
        Branch::Music => {
            let clip = pick(corpus.clips(NoiseCategory::Music), rng)?;
            let snr = draw_snr(policy.music_snr, rng);
            mix_noise(signal, &clip, snr, rng)?
        }
        Branch::Babble => {
            let clips = corpus.clips(NoiseCategory::Babble);
            let (lo, hi) = policy.babble_speakers;
            let count = rng.random_range(lo..=hi);
            let mut babble = vec![0.0; signal.len()];
            for _ in 0..count {
                let clip = pick(clips, rng)?;
                for (acc, v) in babble.iter_mut().zip(fit_noise(&clip, signal.len(), rng)) {
                    *acc += v;
                }
            }
            let snr = draw_snr(policy.babble_snr, rng);
            mix_noise(signal, &Waveform::new(babble, signal.sample_rate), snr, rng)?
        }
        Branch::Reverb => {
            if rirs.filters.is_empty() {
                return Err(Error::InvalidArgument("no impulse responses available".into()));
            }
            let rir = &rirs.filters[rng.random_range(0..rirs.filters.len())];
            convolve_rir(signal, rir)?
        }
    };
    debug_assert!(wave.samples.iter().all(|v| v.is_finite()));
    Ok(Augmented { wave, branch })
}

/// Draws one branch and applies it. Output length always equals input length.
pub fn apply_policy<R: Rng + ?Sized>(
    signal: &Waveform,
    policy: &AugmentPolicy,
    corpus: &NoiseCorpus,
    rirs: &RirSet,
    rng: &mut R,
) -> Result<Waveform> {
    Ok(apply_policy_traced(signal, policy, corpus, rirs, rng)?.wave)
}
