//! Feature frontend: pre-emphasis, Hamming-windowed power spectrogram,
//! mel filterbank, log-mel, MFCC and per-utterance normalization.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::data::Waveform;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-5;

/// Power spectrogram, one row of `n_fft / 2 + 1` bins per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramMatrix {
    pub frames: usize,
    pub bins: usize,
    pub n_fft: usize,
    pub values: Vec<f64>,
}

impl SpectrogramMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    InstanceNorm,
    MeanNorm,
    None,
}

/// `frames x dims` feature matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dims: usize,
    pub values: Vec<f64>,
    pub kind: FeatureKind,
    pub normalization: Normalization,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f64>, kind: FeatureKind) -> Self {
        assert_eq!(frames * dims, values.len());
        Self {
            frames,
            dims,
            values,
            kind,
            normalization: Normalization::None,
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    /// Writes `(T, D)` as two little-endian u32 followed by `T*D` little-endian f32.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(8 + 4 * self.values.len());
        buf.extend_from_slice(&(self.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: impl AsRef<Path>, kind: FeatureKind) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 8 {
            return Err(bad("feature dump shorter than its header"));
        }
        let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * frames * dims {
            return Err(bad("feature dump size does not match (T, D)"));
        }
        let values = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self::new(frames, dims, values, kind))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
    /// `n_mels x (n_fft/2 + 1)` row-major.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let b = self.bins();
        &self.weights[m * b..(m + 1) * b]
    }

    /// Center frequency in Hz of each filter.
    pub fn centers_hz(&self) -> Vec<f64> {
        mel_points(self.n_mels, self.f_min, self.f_max)[1..=self.n_mels]
            .iter()
            .map(|&m| mel_to_hz(m))
            .collect()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn mel_points(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    (0..n_mels + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)
        .collect()
}

/// `y[0] = x[0]`, `y[n] = x[n] - coeff * x[n-1]`.
pub fn pre_emphasis(w: &Waveform, coeff: f64) -> Waveform {
    assert!(
        (0.0..1.0).contains(&coeff),
        "pre-emphasis coefficient must lie in [0, 1)"
    );
    let x = &w.samples;
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    for n in 1..x.len() {
        y.push(x[n] - coeff * x[n - 1]);
    }
    Waveform::new(y, w.sample_rate)
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (W - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Frame count for `n` samples: `1 + floor((n - win) / hop)`.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win {
        0
    } else {
        1 + (n - win) / hop
    }
}

/// Reusable power-spectrogram engine (window, FFT plan).
#[derive(Clone)]
pub struct Spectrogrammer {
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Spectrogrammer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectrogrammer")
            .field("win", &self.win)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl Spectrogrammer {
    pub fn new(sample_rate: u32, win_ms: f64, hop_ms: f64, n_fft: usize) -> Result<Self> {
        let win = (win_ms * sample_rate as f64 / 1000.0).round() as usize;
        let hop = (hop_ms * sample_rate as f64 / 1000.0).round() as usize;
        if win == 0 || hop == 0 {
            return Err(Error::InvalidArgument(
                "window and hop must be at least one sample".into(),
            ));
        }
        if n_fft < win {
            return Err(Error::InvalidArgument(format!(
                "n_fft {n_fft} is shorter than the {win}-sample window"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            win,
            hop,
            n_fft,
            window: hamming(win),
            fft,
        })
    }

    pub fn window_len(&self) -> usize {
        self.win
    }

    pub fn hop_len(&self) -> usize {
        self.hop
    }

    pub fn compute(&self, samples: &[f64]) -> Result<SpectrogramMatrix> {
        if samples.len() < self.win {
            return Err(Error::InvalidArgument(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                samples.len(),
                self.win
            )));
        }
        let frames = frame_count(samples.len(), self.win, self.hop);
        let bins = self.n_fft / 2 + 1;
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.win {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            values.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(SpectrogramMatrix {
            frames,
            bins,
            n_fft: self.n_fft,
            values,
        })
    }
}

/// `|FFT(hamming * frame)|^2` over bins `0..=n_fft/2` for every frame.
pub fn spectrogram(w: &Waveform, win_ms: f64, hop_ms: f64, n_fft: usize) -> Result<SpectrogramMatrix> {
    Spectrogrammer::new(w.sample_rate, win_ms, hop_ms, n_fft)?.compute(&w.samples)
}

/// Triangular filters with centers equally spaced on the HTK mel scale.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "mel range [{f_min}, {f_max}] Hz must satisfy 0 <= f_min < f_max <= {nyquist}"
        )));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::InvalidArgument("need n_mels >= 1 and n_fft >= 2".into()));
    }
    let bins = n_fft / 2 + 1;
    let edges: Vec<f64> = mel_points(n_mels, f_min, f_max).into_iter().map(mel_to_hz).collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mel filter {m} covers no FFT bin; use fewer bands or a larger n_fft"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_fft,
        sample_rate,
        f_min,
        f_max,
        weights,
    })
}

/// `out[t][m] = ln(sum_k fb[m][k] * spec[t][k] + eps)`.
pub fn logmel(spec: &SpectrogramMatrix, fb: &MelFilterbank) -> Result<FeatureMatrix> {
    logmel_with_floor(spec, fb, LOG_FLOOR)
}

pub fn logmel_with_floor(spec: &SpectrogramMatrix, fb: &MelFilterbank, eps: f64) -> Result<FeatureMatrix> {
    if spec.n_fft != fb.n_fft || spec.bins != fb.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has n_fft {} but filterbank expects {}",
            spec.n_fft, fb.n_fft
        )));
    }
    let mut values = Vec::with_capacity(spec.frames * fb.n_mels);
    for t in 0..spec.frames {
        let row = spec.row(t);
        for m in 0..fb.n_mels {
            let energy: f64 = fb.row(m).iter().zip(row).map(|(w, p)| w * p).sum();
            values.push((energy + eps).ln());
        }
    }
    Ok(FeatureMatrix::new(spec.frames, fb.n_mels, values, FeatureKind::LogMel))
}

/// Orthonormal DCT-II basis, `n_coeff x n` row-major.
pub fn dct_matrix(n: usize, n_coeff: usize) -> Vec<f64> {
    let mut basis = Vec::with_capacity(n * n_coeff);
    for k in 0..n_coeff {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            basis.push(scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    basis
}

fn apply_dct(features: &FeatureMatrix, basis: &[f64], n_coeff: usize) -> FeatureMatrix {
    let n = features.dims;
    let mut values = Vec::with_capacity(features.frames * n_coeff);
    for t in 0..features.frames {
        let row = features.row(t);
        for k in 0..n_coeff {
            let b = &basis[k * n..(k + 1) * n];
            values.push(b.iter().zip(row).map(|(c, x)| c * x).sum());
        }
    }
    FeatureMatrix::new(features.frames, n_coeff, values, FeatureKind::Mfcc)
}

/// Per-frame orthonormal DCT-II of the log-mel vector, first `n_coeff` kept.
pub fn mfcc(features: &FeatureMatrix, n_coeff: usize) -> Result<FeatureMatrix> {
    if n_coeff > features.dims {
        return Err(Error::InvalidArgument(format!(
            "{n_coeff} coefficients requested from {} mel bands",
            features.dims
        )));
    }
    Ok(apply_dct(features, &dct_matrix(features.dims, n_coeff), n_coeff))
}

/// Inverse of a full-rank [`mfcc`] (orthonormal DCT-III).
pub fn inverse_mfcc(coeffs: &FeatureMatrix) -> FeatureMatrix {
    let n = coeffs.dims;
    let basis = dct_matrix(n, n);
    let mut values = Vec::with_capacity(coeffs.frames * n);
    for t in 0..coeffs.frames {
        let row = coeffs.row(t);
        for i in 0..n {
            values.push((0..n).map(|k| basis[k * n + i] * row[k]).sum());
        }
    }
    FeatureMatrix::new(coeffs.frames, n, values, FeatureKind::LogMel)
}

/// Per-dimension normalization over the time axis of one utterance.
pub fn normalize(features: &FeatureMatrix, mode: Normalization) -> FeatureMatrix {
    normalize_with_eps(features, mode, NORM_EPS)
}

pub fn normalize_with_eps(features: &FeatureMatrix, mode: Normalization, eps: f64) -> FeatureMatrix {
    let mut out = features.clone();
    out.normalization = mode;
    if mode == Normalization::None || features.frames == 0 {
        return out;
    }
    let (t_len, d_len) = (features.frames, features.dims);
    for d in 0..d_len {
        let mean = (0..t_len).map(|t| features.get(t, d)).sum::<f64>() / t_len as f64;
        let denom = if mode == Normalization::InstanceNorm {
            let var = (0..t_len).map(|t| (features.get(t, d) - mean).powi(2)).sum::<f64>() / t_len as f64;
            var.sqrt() + eps
        } else {
            1.0
        };
        for t in 0..t_len {
            out.values[t * d_len + d] = (features.get(t, d) - mean) / denom;
        }
    }
    out
}

/// Frontend settings. Defaults give 64-band log-mel at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub normalization: Normalization,
    pub sample_rate: u32,
    pub pre_emphasis: f64,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    /// Output dimension; equals `n_mels` for log-mel.
    pub dims: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub norm_eps: f64,
}

impl FeatureConfig {
    pub fn logmel64() -> Self {
        Self {
            kind: FeatureKind::LogMel,
            normalization: Normalization::InstanceNorm,
            sample_rate: 16_000,
            pre_emphasis: 0.97,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 64,
            dims: 64,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: LOG_FLOOR,
            norm_eps: NORM_EPS,
        }
    }

    pub fn mfcc80() -> Self {
        Self {
            kind: FeatureKind::Mfcc,
            normalization: Normalization::MeanNorm,
            n_mels: 80,
            dims: 80,
            ..Self::logmel64()
        }
    }

    /// Frames produced for a segment of `duration_s` seconds.
    pub fn frames_for(&self, duration_s: f64) -> usize {
        let sr = self.sample_rate as f64;
        let n = (duration_s * sr).round() as usize;
        let win = (self.win_ms * sr / 1000.0).round() as usize;
        let hop = (self.hop_ms * sr / 1000.0).round() as usize;
        frame_count(n, win, hop)
    }
}

/// Complete waveform-to-features pipeline with cached filterbank, window
/// and DCT basis. Immutable, so one instance can serve many threads.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    spec: Spectrogrammer,
    filterbank: MelFilterbank,
    dct: Option<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let spec = Spectrogrammer::new(config.sample_rate, config.win_ms, config.hop_ms, config.n_fft)?;
        let filterbank = mel_filterbank(
            config.n_mels,
            config.n_fft,
            config.sample_rate,
            config.f_min,
            config.f_max,
        )?;
        let dct = match config.kind {
            FeatureKind::LogMel => {
                if config.dims != config.n_mels {
                    return Err(Error::InvalidArgument("log-mel dims must equal n_mels".into()));
                }
                None
            }
            FeatureKind::Mfcc => {
                if config.dims > config.n_mels {
                    return Err(Error::InvalidArgument(format!(
                        "{} MFCCs need at least as many mel bands (have {})",
                        config.dims, config.n_mels
                    )));
                }
                Some(dct_matrix(config.n_mels, config.dims))
            }
        };
        Ok(Self {
            config,
            spec,
            filterbank,
            dct,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} Hz does not match the configured {} Hz",
                w.sample_rate, self.config.sample_rate
            )));
        }
        let emphasized = pre_emphasis(w, self.config.pre_emphasis);
        let power = self.spec.compute(&emphasized.samples)?;
        let mut feats = logmel_with_floor(&power, &self.filterbank, self.config.log_floor)?;
        if let Some(basis) = &self.dct {
            feats = apply_dct(&feats, basis, self.config.dims);
        }
        Ok(normalize_with_eps(
            &feats,
            self.config.normalization,
            self.config.norm_eps,
        ))
    }
}
