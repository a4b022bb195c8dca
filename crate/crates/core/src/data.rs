//! Audio and metadata ingestion: waveforms, manifests, trial lists,
//! score files and random segment cropping.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Number of samples covering `duration_s` seconds at this rate.
    pub fn samples_for(&self, duration_s: f64) -> usize {
        (duration_s * self.sample_rate as f64).round() as usize
    }

    /// Cyclically repeats the signal until it is exactly `len` samples long.
    /// Longer signals are truncated.
    pub fn tiled(&self, len: usize) -> Waveform {
        let samples = if self.samples.is_empty() {
            vec![0.0; len]
        } else {
            self.samples.iter().copied().cycle().take(len).collect()
        };
        Waveform::new(samples, self.sample_rate)
    }

    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
/// Multichannel input is averaged down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{format:?} with {bits} bits per sample"),
            })
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let samples: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    if let Some(bad) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: format!("non-finite sample at index {bad}"),
        });
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "truncated file".into(),
        },
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(reason) => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: reason.into(),
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "unsupported wave format".into(),
        },
        other => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Writes mono 16-bit PCM. Samples are clipped to [-1, 1).
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &x in &wave.samples {
        let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Writes mono 32-bit IEEE float samples.
pub fn write_wav_f32(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &x in &wave.samples {
        writer.write_sample(x as f32).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Random crop of exactly `round(duration_s * sample_rate)` samples.
///
/// Utterances shorter than the requested duration are cyclically tiled to
/// the required length and returned from offset 0.
pub fn sample_segment<R: Rng + ?Sized>(w: &Waveform, duration_s: f64, rng: &mut R) -> Waveform {
    assert!(duration_s > 0.0, "segment duration must be positive");
    let needed = w.samples_for(duration_s);
    if w.len() <= needed {
        return w.tiled(needed);
    }
    let start = rng.random_range(0..=w.len() - needed);
    w.slice(start, needed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `utterance_id speaker_id path` lines. Blank lines are skipped.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    parse_manifest_str(&read_text(path)?, path)
}

pub fn parse_manifest_str(text: &str, origin: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::DuplicateId {
                path: origin.to_path_buf(),
                line: lineno,
                id: fields[0].to_string(),
            });
        }
        records.push(UtteranceRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            path: PathBuf::from(fields[2]),
        });
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{} {} {}", r.utterance_id, r.speaker_id, r.path.display()).unwrap();
    }
    write_text(path.as_ref(), &out)
}

/// Resolves a manifest or trial path relative to `root`.
pub fn resolve_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Directory that relative paths inside `file` are resolved against.
pub fn base_dir(file: &Path) -> PathBuf {
    file.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    /// true for a target (same speaker) trial.
    pub label: bool,
    pub enroll_id: String,
    pub test_id: String,
}

impl Trial {
    pub fn new(label: bool, enroll_id: impl Into<String>, test_id: impl Into<String>) -> Self {
        Self {
            label,
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.label).count()
    }

    /// Distinct utterance ids in order of first appearance.
    pub fn utterances(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.trials {
            for id in [&t.enroll_id, &t.test_id] {
                if seen.insert(id.as_str()) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            writeln!(out, "{} {} {}", u8::from(t.label), t.enroll_id, t.test_id).unwrap();
        }
        out
    }
}

/// Parses VoxCeleb-style `label enroll test` lines with label in {0, 1}.
pub fn parse_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    parse_trials_str(&read_text(path)?, path)
}

pub fn parse_trials_str(text: &str, origin: &Path) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            reason,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let label = match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, found `{other}`"))),
        };
        trials.push(Trial::new(label, fields[1], fields[2]));
    }
    Ok(TrialList::new(trials))
}

pub fn write_trials(path: impl AsRef<Path>, trials: &TrialList) -> Result<()> {
    write_text(path.as_ref(), &trials.to_text())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
}

/// Per-trial scores, in the order of the trial list they score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    /// Pairs raw scores with the ids of `trials`.
    pub fn from_scores(trials: &TrialList, scores: &[f64]) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::TrialMismatch(format!(
                "{} trials but {} scores",
                trials.len(),
                scores.len()
            )));
        }
        Ok(Self::new(
            trials
                .trials
                .iter()
                .zip(scores)
                .map(|(t, &score)| ScoreEntry {
                    enroll_id: t.enroll_id.clone(),
                    test_id: t.test_id.clone(),
                    score,
                })
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Checks that this set scores exactly `trials`, entry by entry.
    pub fn check_against(&self, trials: &TrialList) -> Result<()> {
        if self.len() != trials.len() {
            return Err(Error::TrialMismatch(format!(
                "{} scores for {} trials",
                self.len(),
                trials.len()
            )));
        }
        for (i, (e, t)) in self.entries.iter().zip(&trials.trials).enumerate() {
            if e.enroll_id != t.enroll_id || e.test_id != t.test_id {
                return Err(Error::TrialMismatch(format!(
                    "entry {} is ({}, {}) but trial is ({}, {})",
                    i + 1,
                    e.enroll_id,
                    e.test_id,
                    t.enroll_id,
                    t.test_id
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::Numeric(format!("non-finite score at entry {}", i + 1)));
            }
        }
        Ok(())
    }

    /// One `enroll test score` line per entry. Scores use the shortest
    /// representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{} {} {}", e.enroll_id, e.test_id, format_score(e.score)).unwrap();
        }
        out
    }
}

fn format_score(score: f64) -> String {
    let short = format!("{score}");
    // Shortest round-trip output can drop below six significant digits
    // (e.g. `0.5`); pad those to a fixed six-digit mantissa.
    let digits = short.chars().filter(char::is_ascii_digit).count();
    if digits >= 6 || score == 0.0 {
        short
    } else {
        format!("{score:.5e}")
    }
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("invalid score `{}`", fields[2])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        entries.push(ScoreEntry {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            score,
        });
    }
    Ok(ScoreSet::new(entries))
}

pub fn write_scores(path: impl AsRef<Path>, scores: &ScoreSet) -> Result<()> {
    write_text(path.as_ref(), &scores.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn origin() -> PathBuf {
        PathBuf::from("mem.txt")
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(-16384i16).unwrap();
        w.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert_eq!(wave.samples, vec![0.5, -0.5]);
        assert_eq!(wave.sample_rate, 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert_eq!(wave.samples, vec![0.375]);
        assert_eq!(wave.sample_rate, 8000);
    }

    #[test]
    fn stereo_spec_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.2f32).unwrap();
        w.write_sample(0.4f32).unwrap();
        w.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert!((wave.samples[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_wav(dir.path().join("nope.wav")),
            Err(Error::MissingFile(_))
        ));

        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"this is not a riff file at all").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::MalformedHeader { .. })));

        let empty = dir.path().join("empty.wav");
        write_wav_pcm16(&empty, &Waveform::new(vec![], 16000)).unwrap();
        let err = load_wav(&empty).unwrap_err();
        assert!(matches!(err, Error::EmptyAudio(_)));
        assert!(err.to_string().contains("empty audio"));

        let pcm24 = dir.path().join("pcm24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&pcm24, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&pcm24), Err(Error::UnsupportedEncoding { .. })));
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wav");
        let wave = Waveform::new((0..500).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(), 16000);
        write_wav_f32(&path, &wave).unwrap();
        let a = load_wav(&path).unwrap();
        let b = load_wav(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_parsing() {
        let recs = parse_manifest_str("u1 s1 a.wav\n", &origin()).unwrap();
        assert_eq!(
            recs,
            vec![UtteranceRecord {
                utterance_id: "u1".into(),
                speaker_id: "s1".into(),
                path: "a.wav".into()
            }]
        );
        assert!(parse_manifest_str("", &origin()).unwrap().is_empty());

        match parse_manifest_str("u1 s1 a.wav\nu1 s2 b.wav\n", &origin()) {
            Err(Error::DuplicateId { line, id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "u1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        match parse_manifest_str("u1 s1\n", &origin()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trial_parsing() {
        let t = parse_trials_str("1 a.wav b.wav\n0 a.wav a.wav\n", &origin()).unwrap();
        assert_eq!(t.trials[0], Trial::new(true, "a.wav", "b.wav"));
        assert_eq!(t.trials[1], Trial::new(false, "a.wav", "a.wav"));
        assert!(parse_trials_str("2 a.wav b.wav\n", &origin()).is_err());
        assert!(parse_trials_str("1 a.wav\n", &origin()).is_err());
    }

    #[test]
    fn segment_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let long = Waveform::new((0..80000).map(|i| i as f64).collect(), 16000);
        for _ in 0..50 {
            let seg = sample_segment(&long, 2.0, &mut rng);
            assert_eq!(seg.len(), 32000);
            let start = seg.samples[0] as usize;
            assert!(start <= 48000);
            assert_eq!(seg.samples[31999] as usize, start + 31999);
        }

        let exact = Waveform::new((0..32000).map(|i| i as f64).collect(), 16000);
        assert_eq!(sample_segment(&exact, 2.0, &mut rng), exact);

        let short = Waveform::new((0..16000).map(|i| i as f64).collect(), 16000);
        let tiled = sample_segment(&short, 2.0, &mut rng);
        assert_eq!(tiled.len(), 32000);
        assert_eq!(&tiled.samples[..16000], &short.samples[..]);
        assert_eq!(&tiled.samples[16000..], &short.samples[..]);
    }

    #[test]
    fn score_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = TrialList::new(vec![Trial::new(true, "a", "b"), Trial::new(false, "a", "c")]);
        let set = ScoreSet::from_scores(&trials, &[0.123456789, -0.5]).unwrap();
        let path = dir.path().join("s.txt");
        write_scores(&path, &set).unwrap();
        let back = read_scores(&path).unwrap();
        assert_eq!(back, set);
        back.check_against(&trials).unwrap();
        assert!(set.to_text().contains("-5.00000e-1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_trial() -> impl Strategy<Value = Trial> {
            (any::<bool>(), "[a-z0-9_/.]{1,12}", "[a-z0-9_/.]{1,12}").prop_map(|(l, a, b)| Trial::new(l, a, b))
        }

        proptest! {
            #[test]
            fn trials_roundtrip(trials in prop::collection::vec(arb_trial(), 0..40)) {
                let list = TrialList::new(trials);
                let back = parse_trials_str(&list.to_text(), Path::new("x")).unwrap();
                prop_assert_eq!(back, list);
            }

            #[test]
            fn segment_length_is_exact(len in 1usize..5000, dur in 0.001f64..0.5, seed in any::<u64>()) {
                let w = Waveform::new(vec![0.25; len], 8000);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let seg = sample_segment(&w, dur, &mut rng);
                prop_assert_eq!(seg.len(), (dur * 8000.0).round() as usize);
            }
        }
    }
}
