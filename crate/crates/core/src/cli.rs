//! The `veriforge` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Results go to standard output; diagnostics, progress and the resolved
//! configuration of every run go to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{base_dir, load_wav, parse_manifest, parse_trials, read_scores, resolve_path, write_scores};
use crate::error::{Error, Result};
use crate::eval::{
    det_points, eer, emit_det, mean_unit_embedding, min_dcf, score_trials, tta_segments, AudioDir, DcfParams, DetCurve,
    DetFormat, Embedder, ModelEmbedder,
};
use crate::fusion::{evaluate, fuse_scores, search_weights, standardize, FusionWeights, Objective};
use crate::nn::load_checkpoint;
use crate::synth::{synth_corpus, SynthConfig};
use crate::train::{default_workers, fit, Dataset, EpochLog, FitOptions, TrainConfig, Validation};

pub const SEED_ENV: &str = "VERIFORGE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "veriforge",
    version,
    about = "Speaker verification: train, score, evaluate and fuse"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Random seed; falls back to $VERIFORGE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: core count, capped at 8).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and check that every file decodes.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        /// Root for relative paths (default: the manifest's directory).
        #[arg(long)]
        audio_root: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val_trials: Option<PathBuf>,
        /// Root for validation audio (default: the trial list's directory).
        #[arg(long)]
        val_audio_root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write one embedding per utterance (mean of the L2-normalised
    /// test-time segment embeddings).
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// Manifest of utterances to embed.
        #[arg(long, conflicts_with = "wavs")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// WAV files to embed.
        wavs: Vec<PathBuf>,
    },
    /// Score a trial list with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Root for trial audio (default: the trial list's directory).
        #[arg(long)]
        audio_root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print EER and normalised MinDCF of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
    },
    /// Write a DET curve as CSV or SVG (chosen by extension).
    Det {
        /// Score files; SVG output draws one curve per file.
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Legend labels, one per score file (default: file stems).
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
    },
    /// Fuse systems by weighted score averaging.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "eer")]
        objective: String,
        /// Fixed weights such as `3,1,0` instead of a search.
        #[arg(long)]
        weights: Option<String>,
        /// Standardise each system's scores before fusing.
        #[arg(long)]
        standardize: bool,
        /// Where to write the fused scores.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the seeded toy corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        utts: usize,
        /// Speakers held out for the trial list (0 holds out utterances instead).
        #[arg(long)]
        holdout: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runs the CLI on `argv` (including the program name) with the process
/// streams and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    // Unlocked handles: training reports progress from worker threads.
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> CliResult<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn print_resolved(err: &mut dyn Write, command: &str, rows: &[(&str, String)]) {
    let _ = writeln!(err, "# {command}");
    for (k, v) in rows {
        let _ = writeln!(err, "# {k} = {v}");
    }
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| usage(format!("cannot start {workers} worker threads: {e}")))
}

fn write_out(path: Option<&Path>, text: &str, out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Run(Error::io(p, e))),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Run(Error::io("<stdout>", e))),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(cli.global.seed)?;
    if cli.global.workers == Some(0) {
        return Err(usage("--workers must be at least 1"));
    }
    let workers = cli.global.workers.unwrap_or_else(default_workers);
    let common = |rows: &mut Vec<(&str, String)>| {
        rows.push(("seed", seed.unwrap_or(0).to_string()));
        rows.push(("workers", workers.to_string()));
    };
    match cli.command {
        Command::Prep { manifest, audio_root } => {
            let root = audio_root.unwrap_or_else(|| base_dir(&manifest));
            let mut rows = vec![
                ("manifest", manifest.display().to_string()),
                ("audio_root", root.display().to_string()),
            ];
            common(&mut rows);
            print_resolved(err, "prep", &rows);
            let records = parse_manifest(&manifest)?;
            let durations = pool(workers)?.install(|| {
                use rayon::prelude::*;
                records
                    .par_iter()
                    .map(|r| load_wav(resolve_path(&root, &r.path)).map(|w| w.duration_s()))
                    .collect::<Result<Vec<f64>>>()
            })?;
            let mut speakers: Vec<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
            speakers.sort_unstable();
            speakers.dedup();
            let _ = writeln!(
                out,
                "utterances={} speakers={} hours={:.4}",
                records.len(),
                speakers.len(),
                durations.iter().sum::<f64>() / 3600.0
            );
            Ok(())
        }
        Command::Train {
            config,
            manifest,
            val_trials,
            val_audio_root,
            out: out_dir,
            resume,
            overrides,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(s) = seed.filter(|_| cli.global.seed.is_none()) {
                cfg.seed = s;
            }
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                cfg.apply_text(&text, path)?;
            }
            for kv in &overrides {
                cfg.set_override(kv).map_err(|e| usage(e.to_string()))?;
            }
            if let Some(s) = cli.global.seed {
                cfg.seed = s;
            }
            if let Some(w) = cli.global.workers {
                cfg.workers = w;
            }
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if val_trials.is_some() {
                cfg.val_trials = val_trials;
            }
            if out_dir.is_some() {
                cfg.out = out_dir;
            }
            let _ = writeln!(err, "# train");
            for line in cfg.to_text().lines() {
                let _ = writeln!(err, "# {line}");
            }
            cfg.validate()?;
            let manifest = cfg.manifest.clone().ok_or_else(|| usage("train needs --manifest"))?;
            let records = parse_manifest(&manifest)?;
            let ds = Dataset::load(&records, &base_dir(&manifest))?;
            let trials = cfg.val_trials.as_ref().map(parse_trials).transpose()?;
            let audio = cfg
                .val_trials
                .as_ref()
                .map(|t| AudioDir::new(val_audio_root.clone().unwrap_or_else(|| base_dir(t))));
            let validation = match (&trials, &audio) {
                (Some(trials), Some(audio)) => Some(Validation { trials, audio }),
                _ => None,
            };
            let _ = writeln!(
                err,
                "training on {} utterances of {} speakers",
                ds.len(),
                ds.n_speakers()
            );
            let mut progress = |l: &EpochLog| {
                let v = l.val_eer.map_or(String::new(), |e| {
                    format!(" val_eer={e:.6} val_min_dcf={:.6}", l.val_min_dcf.unwrap_or(f64::NAN))
                });
                eprintln!(
                    "epoch {} lr={:.6e} loss={:.6} steps={}{v}",
                    l.epoch + 1,
                    l.lr,
                    l.mean_loss,
                    l.steps
                );
            };
            let opts = FitOptions {
                out: cfg.out.clone(),
                resume,
                max_batches_per_epoch: None,
                on_epoch: Some(&mut progress),
            };
            let outcome = fit(&cfg, &ds, validation, opts)?;
            let last = outcome.log.last();
            let _ = writeln!(
                out,
                "epochs={} steps={} loss={:.6}{}",
                outcome.trainer.epoch,
                outcome.steps(),
                last.map_or(f64::NAN, |l| l.mean_loss),
                outcome.trainer.best.map_or(String::new(), |(e, ep)| format!(
                    " best_eer={e:.6} best_epoch={}",
                    ep + 1
                ))
            );
            Ok(())
        }
        Command::Embed {
            model,
            manifest,
            out: out_path,
            wavs,
        } => {
            let mut rows = vec![
                ("model", model.display().to_string()),
                ("manifest", show(&manifest)),
                ("files", wavs.len().to_string()),
                ("out", show(&out_path)),
            ];
            common(&mut rows);
            print_resolved(err, "embed", &rows);
            let items: Vec<(String, PathBuf)> = match &manifest {
                Some(m) => {
                    let root = base_dir(m);
                    parse_manifest(m)?
                        .into_iter()
                        .map(|r| (r.utterance_id, resolve_path(&root, &r.path)))
                        .collect()
                }
                None if !wavs.is_empty() => wavs.iter().map(|p| (p.display().to_string(), p.clone())).collect(),
                None => return Err(usage("embed needs --manifest or WAV files")),
            };
            let embedder = ModelEmbedder::new(load_checkpoint(&model)?.model()?)?;
            let lines = pool(workers)?.install(|| {
                use rayon::prelude::*;
                items
                    .par_iter()
                    .map(|(id, path)| {
                        let segs = embedder.embed_segments(&tta_segments(&load_wav(path)?))?;
                        let v = mean_unit_embedding(&segs);
                        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                        Ok(format!("{id} {}\n", vals.join(" ")))
                    })
                    .collect::<Result<Vec<String>>>()
            })?;
            write_out(out_path.as_deref(), &lines.concat(), out)
        }
        Command::Score {
            model,
            trials,
            audio_root,
            out: out_path,
        } => {
            let root = audio_root.unwrap_or_else(|| base_dir(&trials));
            let mut rows = vec![
                ("model", model.display().to_string()),
                ("trials", trials.display().to_string()),
                ("audio_root", root.display().to_string()),
                ("out", show(&out_path)),
            ];
            common(&mut rows);
            print_resolved(err, "score", &rows);
            let list = parse_trials(&trials)?;
            let embedder = ModelEmbedder::new(load_checkpoint(&model)?.model()?)?;
            let scores = pool(workers)?.install(|| score_trials(&embedder, &list, &AudioDir::new(root)))?;
            match &out_path {
                Some(p) => write_scores(p, &scores)?,
                None => write_out(None, &scores.to_text(), out)?,
            }
            Ok(())
        }
        Command::Eval {
            scores,
            trials,
            p_target,
            c_miss,
            c_fa,
        } => {
            let params = DcfParams { c_miss, c_fa, p_target };
            params.validate().map_err(|e| usage(e.to_string()))?;
            let mut rows = vec![
                ("scores", scores.display().to_string()),
                ("trials", trials.display().to_string()),
                ("p_target", p_target.to_string()),
                ("c_miss", c_miss.to_string()),
                ("c_fa", c_fa.to_string()),
            ];
            common(&mut rows);
            print_resolved(err, "eval", &rows);
            let list = parse_trials(&trials)?;
            let set = read_scores(&scores)?;
            let e = eer(&set, &list)?;
            let d = min_dcf(&set, &list, &params)?;
            let _ = writeln!(out, "EER={e:.6} MinDCF={d:.6}");
            Ok(())
        }
        Command::Det {
            scores,
            trials,
            out: out_path,
            labels,
        } => {
            if !labels.is_empty() && labels.len() != scores.len() {
                return Err(usage(format!(
                    "{} labels for {} score files",
                    labels.len(),
                    scores.len()
                )));
            }
            let format = DetFormat::from_path(&out_path).map_err(|e| usage(e.to_string()))?;
            let mut rows = vec![
                (
                    "scores",
                    scores
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                ("trials", trials.display().to_string()),
                ("out", out_path.display().to_string()),
            ];
            common(&mut rows);
            print_resolved(err, "det", &rows);
            let list = parse_trials(&trials)?;
            let curves: Vec<(String, DetCurve)> = scores
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let label = labels.get(i).cloned().unwrap_or_else(|| {
                        p.file_stem()
                            .map_or(format!("system {}", i + 1), |s| s.to_string_lossy().into_owned())
                    });
                    Ok((label, det_points(&read_scores(p)?, &list)?))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<(String, &DetCurve)> = curves.iter().map(|(l, c)| (l.clone(), c)).collect();
            emit_det(&refs, &out_path, format)?;
            let _ = writeln!(
                out,
                "wrote {} ({} points)",
                out_path.display(),
                curves[0].1.points.len()
            );
            Ok(())
        }
        Command::Fuse {
            scores,
            trials,
            objective,
            weights,
            standardize: zscore,
            out: out_path,
        } => {
            let objective: Objective = objective.parse().map_err(|e: Error| usage(e.to_string()))?;
            let fixed = weights
                .as_deref()
                .map(str::parse::<FusionWeights>)
                .transpose()
                .map_err(|e| usage(e.to_string()))?;
            if let Some(w) = &fixed {
                if w.0.len() != scores.len() {
                    return Err(usage(format!("{} weights for {} score files", w.0.len(), scores.len())));
                }
            }
            let mut rows = vec![
                (
                    "scores",
                    scores
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                ("trials", trials.display().to_string()),
                ("objective", objective.to_string()),
                ("weights", fixed.as_ref().map_or("search".into(), ToString::to_string)),
                ("standardize", zscore.to_string()),
                ("out", show(&out_path)),
            ];
            common(&mut rows);
            print_resolved(err, "fuse", &rows);
            let list = parse_trials(&trials)?;
            let mut sets = scores.iter().map(read_scores).collect::<Result<Vec<_>>>()?;
            if zscore {
                sets = sets.iter().map(standardize).collect();
            }
            for (p, s) in scores.iter().zip(&sets) {
                let v = evaluate(s, &list, objective)?;
                let _ = writeln!(err, "{}: {objective}={v:.6}", p.display());
            }
            let (w, value) = match fixed {
                Some(w) => {
                    let fused = fuse_scores(&sets, &w)?;
                    let v = evaluate(&fused, &list, objective)?;
                    (w, v)
                }
                None => pool(workers)?.install(|| search_weights(&sets, &list, objective))?,
            };
            if let Some(p) = &out_path {
                write_scores(p, &fuse_scores(&sets, &w)?)?;
            }
            let name = match objective {
                Objective::Eer => "EER",
                Objective::MinDcf => "MinDCF",
            };
            let _ = writeln!(out, "weights={w} {name}={value:.6}");
            Ok(())
        }
        Command::Synth {
            out: dir,
            speakers,
            utts,
            holdout,
        } => {
            let mut cfg = SynthConfig::new(speakers, utts, seed.unwrap_or(0));
            if let Some(h) = holdout {
                cfg.holdout_speakers = h;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let mut rows = vec![
                ("out", dir.display().to_string()),
                ("speakers", speakers.to_string()),
                ("utts", utts.to_string()),
                ("holdout", cfg.holdout_speakers.to_string()),
            ];
            common(&mut rows);
            print_resolved(err, "synth", &rows);
            let corpus = pool(workers)?.install(|| synth_corpus(&dir, &cfg))?;
            let _ = writeln!(
                out,
                "wavs={} train={} trials={} manifest={} train_manifest={} trial_list={}",
                corpus.records.len(),
                corpus.train_records.len(),
                corpus.trial_list.len(),
                corpus.manifest.display(),
                corpus.train_manifest.display(),
                corpus.trials.display()
            );
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut argv = vec!["veriforge"];
        argv.extend_from_slice(args);
        let code = run_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_exits_zero_for_every_subcommand() {
        for sub in ["prep", "train", "embed", "score", "eval", "det", "fuse", "synth"] {
            let (code, out, _) = run_capture(&[sub, "--help"]);
            assert_eq!(code, EXIT_OK, "{sub}");
            assert!(out.contains("Usage"), "{sub}");
        }
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn unknown_flag_is_usage() {
        assert_eq!(run_capture(&["eval", "--bogus", "1"]).0, EXIT_USAGE);
    }

    #[test]
    fn eval_fixture_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("t.txt");
        let s = dir.path().join("s.txt");
        std::fs::write(&t, "1 a b\n1 a c\n0 a d\n0 a e\n").unwrap();
        std::fs::write(&s, "a b 0.9\na c 0.8\na d 0.7\na e 0.1\n").unwrap();
        let (code, out, err) = run_capture(&["eval", "--scores", s.to_str().unwrap(), "--trials", t.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert_eq!(out, "EER=0.000000 MinDCF=0.000000\n");
        assert!(err.contains("# eval"));
        let missing = dir.path().join("nope.txt");
        let (code, _, err) = run_capture(&[
            "eval",
            "--scores",
            missing.to_str().unwrap(),
            "--trials",
            t.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("nope.txt"), "{err}");
    }

    #[test]
    fn mean_unit_matches_mean_cosine() {
        let a = vec![vec![1.0, 2.0], vec![-0.5, 0.3]];
        let b = vec![vec![0.2, -1.0], vec![3.0, 1.0], vec![0.0, 1.0]];
        let (ma, mb) = (mean_unit_embedding(&a), mean_unit_embedding(&b));
        let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
        assert!((dot - crate::eval::mean_cosine(&a, &b)).abs() < 1e-12);
    }
}
