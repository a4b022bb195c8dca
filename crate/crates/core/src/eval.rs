//! Verification scoring and detection metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{load_wav, resolve_path, ScoreSet, TrialList, Waveform};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::nn::Model;

pub const TTA_SEGMENTS: usize = 10;
pub const TTA_SEGMENT_S: f64 = 4.0;
const COSINE_EPS: f64 = 1e-8;

/// Ten 4-second segments at regular intervals. Utterances shorter than
/// 4 seconds are tiled first.
pub fn tta_segments(w: &Waveform) -> Vec<Waveform> {
    tta_segments_with(w, TTA_SEGMENTS, TTA_SEGMENT_S)
}

/// `n` segments of `seg_s` seconds starting at `round(k (L - seg) / (n - 1))`.
pub fn tta_segments_with(w: &Waveform, n: usize, seg_s: f64) -> Vec<Waveform> {
    let seg = w.samples_for(seg_s);
    let src = if w.len() < seg { w.tiled(seg) } else { w.clone() };
    tta_offsets(src.len(), seg, n)
        .into_iter()
        .map(|o| src.slice(o, seg))
        .collect()
}

/// Start offsets (in samples) of the regular segment grid.
pub fn tta_offsets(len: usize, seg: usize, n: usize) -> Vec<usize> {
    let span = len.saturating_sub(seg) as f64;
    if n <= 1 {
        return vec![0; n];
    }
    (0..n)
        .map(|k| (k as f64 * span / (n - 1) as f64).round() as usize)
        .collect()
}

/// Maps waveform segments to embedding vectors.
pub trait Embedder: Sync {
    fn embed_segments(&self, segments: &[Waveform]) -> Result<Vec<Vec<f64>>>;
}

/// Embeds with a trained model through the feature front end its family expects.
pub struct ModelEmbedder {
    pub model: Model<f32>,
    extractor: FeatureExtractor,
}

impl ModelEmbedder {
    pub fn new(model: Model<f32>) -> Result<Self> {
        let extractor = FeatureExtractor::new(model.config().family.feature_config())?;
        Ok(Self { model, extractor })
    }
}

impl Embedder for ModelEmbedder {
    fn embed_segments(&self, segments: &[Waveform]) -> Result<Vec<Vec<f64>>> {
        let feats = segments
            .par_iter()
            .map(|s| self.extractor.extract(s))
            .collect::<Result<Vec<_>>>()?;
        let emb = self.model.embed_batch(&feats)?;
        let e = self.model.embedding_dim();
        Ok(emb
            .data()
            .chunks(e)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }
}

/// Mean of L2-normalised vectors. Its dot product with another such mean
/// equals the mean pairwise cosine used for scoring.
pub fn mean_unit_embedding(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x / n;
        }
    }
    acc.iter_mut().for_each(|a| *a /= vs.len().max(1) as f64);
    acc
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

/// Mean cosine over all cross pairs of two embedding sets.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// TTA score of two utterances: mean of the 10 x 10 segment cosines.
pub fn score_pair<E: Embedder + ?Sized>(embedder: &E, wa: &Waveform, wb: &Waveform) -> Result<f64> {
    let ea = embedder.embed_segments(&tta_segments(wa))?;
    let eb = embedder.embed_segments(&tta_segments(wb))?;
    Ok(mean_cosine(&ea, &eb))
}

/// Resolves utterance ids to audio.
pub trait AudioSource: Sync {
    fn load(&self, id: &str) -> Result<Waveform>;
}

/// Utterance ids are paths, relative ones resolved against `root`.
#[derive(Debug, Clone)]
pub struct AudioDir {
    pub root: PathBuf,
}

impl AudioDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl AudioSource for AudioDir {
    fn load(&self, id: &str) -> Result<Waveform> {
        load_wav(resolve_path(&self.root, Path::new(id)))
    }
}

impl AudioSource for HashMap<String, Waveform> {
    fn load(&self, id: &str) -> Result<Waveform> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::MissingFile(PathBuf::from(id)))
    }
}

/// Scores every trial. Each distinct utterance is loaded and embedded once
/// (utterances are processed in parallel); trial order is preserved.
pub fn score_trials<E: Embedder + ?Sized, A: AudioSource + ?Sized>(
    embedder: &E,
    trials: &TrialList,
    audio: &A,
) -> Result<ScoreSet> {
    let mut first_line: HashMap<&str, usize> = HashMap::new();
    for (i, t) in trials.trials.iter().enumerate() {
        first_line.entry(&t.enroll_id).or_insert(i + 1);
        first_line.entry(&t.test_id).or_insert(i + 1);
    }
    let ids = trials.utterances();
    let embedded: Vec<Vec<Vec<f64>>> = ids
        .par_iter()
        .map(|id| {
            let at = |e: Error| Error::AtTrial {
                line: first_line[id.as_str()],
                source: Box::new(e),
            };
            let w = audio.load(id).map_err(at)?;
            embedder.embed_segments(&tta_segments(&w)).map_err(at)
        })
        .collect::<Result<_>>()?;
    let cache: HashMap<&str, &Vec<Vec<f64>>> = ids.iter().map(String::as_str).zip(&embedded).collect();
    let scores: Vec<f64> = trials
        .trials
        .iter()
        .map(|t| mean_cosine(cache[t.enroll_id.as_str()], cache[t.test_id.as_str()]))
        .collect();
    ScoreSet::from_scores(trials, &scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.05,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid detection cost parameters {self:?}"
            )));
        }
        Ok(())
    }

    /// Cost of the better of the two trivial systems (accept all, reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_dcf(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)) / self.normalizer()
    }
}

/// One operating point. Trials scoring `>= threshold` are accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetCurve {
    /// Ordered by increasing threshold, ending at `+inf`.
    pub points: Vec<DetPoint>,
}

/// Target and nontarget scores of a scored trial list.
pub fn split_scores(scores: &ScoreSet, trials: &TrialList) -> Result<(Vec<f64>, Vec<f64>)> {
    scores.check_against(trials)?;
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for (e, t) in scores.entries.iter().zip(&trials.trials) {
        if t.label {
            tar.push(e.score);
        } else {
            non.push(e.score);
        }
    }
    Ok((tar, non))
}

fn check_degenerate(tar: &[f64], non: &[f64]) -> Result<()> {
    if tar.is_empty() || non.is_empty() {
        return Err(Error::DegenerateTrials(format!(
            "{} target and {} nontarget trials; need at least one of each",
            tar.len(),
            non.len()
        )));
    }
    if tar.iter().chain(non).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

/// Error rates at every observed score and at `+inf`, by a single sorted sweep.
pub fn det_from(tar: &[f64], non: &[f64]) -> Result<DetCurve> {
    check_degenerate(tar, non)?;
    let mut all: Vec<(f64, bool)> = tar
        .iter()
        .map(|&s| (s, true))
        .chain(non.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = Vec::new();
    // Counts of scores strictly below the current threshold.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(DetPoint {
            threshold: t,
            p_fa: (non.len() - non_below) as f64 / nn,
            p_miss: tar_below as f64 / nt,
        });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(DetCurve { points })
}

pub fn det_points(scores: &ScoreSet, trials: &TrialList) -> Result<DetCurve> {
    let (tar, non) = split_scores(scores, trials)?;
    det_from(&tar, &non)
}

/// Equal error rate and the threshold where it is attained (the first
/// candidate threshold at or past the crossing).
pub fn eer_with_threshold(curve: &DetCurve) -> (f64, f64) {
    crossing(&curve.points)
}

/// Locates where `P_fa` (falling) meets `P_miss` (rising) along the
/// threshold sweep, interpolating linearly between the bracketing points.
pub fn crossing(points: &[DetPoint]) -> (f64, f64) {
    for (i, p) in points.iter().enumerate() {
        if p.p_miss >= p.p_fa {
            if p.p_miss == p.p_fa || i == 0 {
                return (p.p_miss, p.threshold);
            }
            let q = &points[i - 1];
            let d0 = q.p_fa - q.p_miss;
            let d1 = p.p_fa - p.p_miss;
            let lambda = d0 / (d0 - d1);
            return (q.p_fa + lambda * (p.p_fa - q.p_fa), p.threshold);
        }
    }
    unreachable!("the +inf point always has p_miss = 1 >= p_fa = 0")
}

pub fn eer_from(tar: &[f64], non: &[f64]) -> Result<f64> {
    Ok(crossing(&det_from(tar, non)?.points).0)
}

pub fn eer(scores: &ScoreSet, trials: &TrialList) -> Result<f64> {
    let (tar, non) = split_scores(scores, trials)?;
    eer_from(&tar, &non)
}

/// Normalised minimum detection cost over the candidate thresholds.
pub fn min_dcf_from(tar: &[f64], non: &[f64], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let curve = det_from(tar, non)?;
    Ok(curve
        .points
        .iter()
        .map(|p| params.normalized_dcf(p.p_miss, p.p_fa))
        .fold(f64::INFINITY, f64::min))
}

pub fn min_dcf(scores: &ScoreSet, trials: &TrialList, params: &DcfParams) -> Result<f64> {
    let (tar, non) = split_scores(scores, trials)?;
    min_dcf_from(&tar, &non, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetFormat {
    Csv,
    Svg,
}

impl DetFormat {
    /// Chooses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => Ok(DetFormat::Csv),
            Some("svg") => Ok(DetFormat::Svg),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer DET format from {}; use .csv or .svg",
                path.display()
            ))),
        }
    }
}

pub fn det_csv(curve: &DetCurve) -> String {
    let mut out = String::from("p_fa,p_miss\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{}", p.p_fa, p.p_miss);
    }
    out
}

/// Parses the CSV written by [`det_csv`]. Thresholds are not stored in the
/// file and come back as NaN.
pub fn parse_det_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let origin = PathBuf::from("<det csv>");
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "p_fa,p_miss")) => {}
        _ => {
            return Err(Error::Parse {
                path: origin,
                line: 1,
                reason: "expected header `p_fa,p_miss`".into(),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let bad = || Error::Parse {
                path: origin.clone(),
                line: i + 1,
                reason: format!("bad row `{l}`"),
            };
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        })
        .collect()
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 60.0;
const PROBIT_CLIP: f64 = 1e-4;
const SVG_TICKS: [f64; 9] = [0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.95];
const SVG_COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// DET plot on normal-deviate axes, one polyline per labelled curve.
pub fn det_svg(curves: &[(String, &DetCurve)]) -> String {
    let normal = Normal::standard();
    let lo = normal.inverse_cdf(PROBIT_CLIP);
    let hi = normal.inverse_cdf(1.0 - PROBIT_CLIP);
    let plot = SVG_SIZE - 2.0 * SVG_MARGIN;
    let to_px = |p: f64| {
        let z = normal.inverse_cdf(p.clamp(PROBIT_CLIP, 1.0 - PROBIT_CLIP));
        (z - lo) / (hi - lo) * plot
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#
    );
    let (x0, y0) = (SVG_MARGIN, SVG_SIZE - SVG_MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{SVG_MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    for &t in &SVG_TICKS {
        let d = to_px(t);
        let label = format!("{}", t * 100.0);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{SVG_MARGIN}" x2="{:.2}" y2="{y0}" stroke="#dddddd"/>"##,
            x0 + d,
            x0 + d
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            y0 - d,
            x0 + plot,
            y0 - d
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{label}</text>"#,
            x0 + d,
            y0 + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{label}</text>"#,
            x0 - 4.0,
            y0 - d + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">False alarm probability (%)</text>"#,
        x0 + plot / 2.0,
        SVG_SIZE - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">Miss probability (%)</text>"#,
        SVG_MARGIN + plot / 2.0,
        SVG_MARGIN + plot / 2.0
    );
    for (k, (label, curve)) in curves.iter().enumerate() {
        let colour = SVG_COLOURS[k % SVG_COLOURS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x0 + to_px(p.p_fa), y0 - to_px(p.p_miss)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = SVG_MARGIN + 16.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/>"#,
            x0 + plot - 120.0,
            x0 + plot - 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            x0 + plot - 96.0,
            ly + 4.0,
            escape_xml(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one or more labelled curves; CSV holds only the first curve.
pub fn emit_det(curves: &[(String, &DetCurve)], path: &Path, format: DetFormat) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|(_, c)| c.points.is_empty()) {
        return Err(Error::InvalidArgument("empty DET curve".into()));
    }
    let text = match format {
        DetFormat::Csv => det_csv(curves[0].1),
        DetFormat::Svg => det_svg(curves),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trial;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn wave(secs: f64) -> Waveform {
        let n = (secs * 16000.0).round() as usize;
        Waveform::new((0..n).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect(), 16000)
    }

    #[test]
    fn thirteen_second_grid() {
        let w = wave(13.0);
        let offs = tta_offsets(w.len(), 64000, 10);
        assert_eq!(offs, (0..10).map(|k| k * 16000).collect::<Vec<_>>());
        let segs = tta_segments(&w);
        assert_eq!(segs.len(), 10);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.len(), 64000);
            assert_eq!(s.samples[..], w.samples[k * 16000..k * 16000 + 64000]);
        }
    }

    #[test]
    fn four_second_and_short_inputs() {
        let w = wave(4.0);
        let segs = tta_segments(&w);
        assert!(segs.iter().all(|s| s == &w));
        let short = wave(1.5);
        let segs = tta_segments(&short);
        assert!(segs
            .iter()
            .all(|s| s.len() == 64000 && s.samples[..24000] == short.samples[..]));
    }

    struct Constant(Vec<f64>);

    impl Embedder for Constant {
        fn embed_segments(&self, s: &[Waveform]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); s.len()])
        }
    }

    /// Embeds by the sign of the first sample, counting calls.
    struct BySign(AtomicUsize);

    impl Embedder for BySign {
        fn embed_segments(&self, s: &[Waveform]) -> Result<Vec<Vec<f64>>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(s.iter()
                .map(|w| {
                    if w.samples[0] >= 0.0 {
                        vec![1.0, 0.0]
                    } else {
                        vec![0.0, 1.0]
                    }
                })
                .collect())
        }
    }

    #[test]
    fn stub_embedders() {
        let (a, b) = (wave(5.0), wave(6.0).tiled(90000));
        assert!((score_pair(&Constant(vec![0.3, -2.0, 1.0]), &a, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg = Waveform::new(a.samples.iter().map(|v| -v - 1.0).collect(), 16000);
        let pos = Waveform::new(a.samples.iter().map(|v| v + 1.0).collect(), 16000);
        let s = BySign(AtomicUsize::new(0));
        assert_eq!(score_pair(&s, &pos, &neg).unwrap(), 0.0);
    }

    #[test]
    fn scoring_embeds_each_utterance_once() {
        let mut audio = HashMap::new();
        for (id, shift) in [("a", 1.0), ("b", -1.0), ("c", 1.0)] {
            audio.insert(id.to_string(), Waveform::new(vec![shift; 20000], 16000));
        }
        let trials = TrialList::new(vec![
            Trial::new(true, "a", "c"),
            Trial::new(false, "a", "b"),
            Trial::new(false, "c", "b"),
            Trial::new(true, "a", "c"),
        ]);
        let e = BySign(AtomicUsize::new(0));
        let scores = score_trials(&e, &trials, &audio).unwrap();
        assert_eq!(scores.scores(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.0.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn missing_audio_names_the_trial_line() {
        let audio: HashMap<String, Waveform> = HashMap::new();
        let trials = TrialList::new(vec![Trial::new(true, "x", "y")]);
        let err = score_trials(&Constant(vec![1.0]), &trials, &audio).unwrap_err();
        assert!(matches!(err, Error::AtTrial { line: 1, .. }), "{err}");
        assert!(matches!(err.root(), Error::MissingFile(_)));
    }

    #[test]
    fn eer_fixtures() {
        assert_eq!(eer_from(&[0.9, 0.8], &[0.7, 0.1]).unwrap(), 0.0);
        assert_eq!(eer_from(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.5);
        assert!((eer_from(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn min_dcf_fixtures() {
        let p = DcfParams::default();
        assert_eq!(min_dcf_from(&[0.9, 0.8], &[0.7, 0.1], &p).unwrap(), 0.0);
        let v = min_dcf_from(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1], &p).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
        assert!((min_dcf_from(&[0.5, 0.5], &[0.5, 0.5, 0.5], &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_lists_are_rejected() {
        assert!(matches!(eer_from(&[0.1], &[]), Err(Error::DegenerateTrials(_))));
        assert!(matches!(
            min_dcf_from(&[], &[0.3], &DcfParams::default()),
            Err(Error::DegenerateTrials(_))
        ));
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let nt = rng.random_range(1..n);
        // Coarse rounding produces plenty of ties.
        let tar = (0..nt)
            .map(|_| (rng.random_range(-1.0..2.0f64) * 20.0).round() / 20.0)
            .collect();
        let non = (0..n - nt)
            .map(|_| (rng.random_range(-2.0..1.0f64) * 20.0).round() / 20.0)
            .collect();
        (tar, non)
    }

    #[test]
    fn metrics_are_rank_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (tar, non) = random_set(&mut rng, 200);
            let f = |v: &[f64]| v.iter().map(|s| 2.0 * s + 1.0).collect::<Vec<_>>();
            assert_eq!(eer_from(&tar, &non).unwrap(), eer_from(&f(&tar), &f(&non)).unwrap());
            let p = DcfParams::default();
            assert_eq!(
                min_dcf_from(&tar, &non, &p).unwrap(),
                min_dcf_from(&f(&tar), &f(&non), &p).unwrap()
            );
        }
    }

    #[test]
    fn eer_is_symmetric_under_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (tar, non) = random_set(&mut rng, 150);
            let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
            let a = eer_from(&tar, &non).unwrap();
            let b = eer_from(&neg(&non), &neg(&tar)).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn min_dcf_is_below_dcf_at_eer_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = DcfParams::default();
        for _ in 0..50 {
            let (tar, non) = random_set(&mut rng, 300);
            let curve = det_from(&tar, &non).unwrap();
            let (_, t) = eer_with_threshold(&curve);
            let at = curve.points.iter().find(|q| q.threshold == t).unwrap();
            assert!(min_dcf_from(&tar, &non, &p).unwrap() <= p.normalized_dcf(at.p_miss, at.p_fa));
        }
    }

    #[test]
    fn det_is_monotone_with_endpoints() {
        let curve = det_from(&[0.9, 0.9, 0.1], &[0.1]).unwrap();
        assert_eq!(curve.points.len(), 3);
        assert_eq!((curve.points[0].p_fa, curve.points[0].p_miss), (1.0, 0.0));
        let last = curve.points.last().unwrap();
        assert_eq!((last.p_fa, last.p_miss), (0.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (tar, non) = random_set(&mut rng, 500);
        let c = det_from(&tar, &non).unwrap();
        for w in c.points.windows(2) {
            assert!(w[1].p_fa <= w[0].p_fa && w[1].p_miss >= w[0].p_miss);
            assert!(w[1].threshold > w[0].threshold);
        }
    }

    #[test]
    fn eer_point_is_where_the_rates_meet() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let (tar, non) = random_set(&mut rng, 100);
            let c = det_from(&tar, &non).unwrap();
            let (e, t) = eer_with_threshold(&c);
            let i = c.points.iter().position(|q| q.threshold == t).unwrap();
            // The EER lies between the bracketing points' rates.
            let lo = if i == 0 { &c.points[0] } else { &c.points[i - 1] };
            let hi = &c.points[i];
            assert!(e <= lo.p_fa.max(hi.p_fa) + 1e-12 && e >= hi.p_fa.min(lo.p_miss) - 1e-12);
            let best = c
                .points
                .iter()
                .map(|q| (q.p_fa - q.p_miss).abs())
                .fold(f64::INFINITY, f64::min);
            assert!((hi.p_fa - hi.p_miss).abs() == best || (lo.p_fa - lo.p_miss).abs() == best);
        }
    }

    #[test]
    fn csv_round_trip_and_svg_shape() {
        let c = det_from(&[0.9, 0.3, 0.77], &[0.1, 0.3]).unwrap();
        let csv = det_csv(&c);
        assert_eq!(csv.lines().count(), c.points.len() + 1);
        let back = parse_det_csv(&csv).unwrap();
        assert_eq!(back, c.points.iter().map(|p| (p.p_fa, p.p_miss)).collect::<Vec<_>>());
        let svg = det_svg(&[("a & b".to_string(), &c), ("second".to_string(), &c)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &amp; b"));
    }

    #[test]
    fn det_format_from_extension() {
        assert_eq!(DetFormat::from_path(Path::new("x/curve.CSV")).unwrap(), DetFormat::Csv);
        assert_eq!(DetFormat::from_path(Path::new("curve.svg")).unwrap(), DetFormat::Svg);
        assert!(DetFormat::from_path(Path::new("curve.png")).is_err());
    }
}
