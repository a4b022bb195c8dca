//! Score-level fusion by weighted averaging with exhaustive weight search.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{ScoreEntry, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::eval::{eer_from, min_dcf_from, split_scores, DcfParams};

pub const MAX_WEIGHT: u8 = 3;

/// One integer weight in `0..=3` per system, not all zero.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FusionWeights(pub Vec<u8>);

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidArgument("no fusion weights".into()));
        }
        if let Some(w) = self.0.iter().find(|&&w| w > MAX_WEIGHT) {
            return Err(Error::InvalidArgument(format!(
                "fusion weight {w} is outside 0..={MAX_WEIGHT}"
            )));
        }
        if self.0.iter().all(|&w| w == 0) {
            return Err(Error::InvalidArgument("fusion weights are all zero".into()));
        }
        Ok(())
    }

    /// Every valid weighting of `k` systems in lexicographic order.
    pub fn enumerate(k: usize) -> Vec<FusionWeights> {
        let base = MAX_WEIGHT as usize + 1;
        let total = base.pow(k as u32);
        (1..total)
            .map(|mut code| {
                let mut w = vec![0u8; k];
                for slot in w.iter_mut().rev() {
                    *slot = (code % base) as u8;
                    code /= base;
                }
                FusionWeights(w)
            })
            .collect()
    }
}

impl FromStr for FusionWeights {
    type Err = Error;

    /// Comma-separated, e.g. `3,1,0`.
    fn from_str(s: &str) -> Result<Self> {
        let w = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::InvalidArgument(format!("invalid fusion weight `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let w = FusionWeights(w);
        w.validate()?;
        Ok(w)
    }
}

impl fmt::Display for FusionWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u8::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Eer,
    MinDcf,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eer" => Ok(Objective::Eer),
            "mindcf" | "min_dcf" => Ok(Objective::MinDcf),
            _ => Err(Error::InvalidArgument(format!(
                "unknown objective `{s}` (expected eer or mindcf)"
            ))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Eer => "eer",
            Objective::MinDcf => "mindcf",
        })
    }
}

fn check_aligned(sets: &[ScoreSet]) -> Result<()> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score sets to fuse".into()))?;
    for (k, s) in sets.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(Error::TrialMismatch(format!(
                "system {} has {} scores, system 1 has {}",
                k + 1,
                s.len(),
                first.len()
            )));
        }
        for (i, (a, b)) in first.entries.iter().zip(&s.entries).enumerate() {
            if a.enroll_id != b.enroll_id || a.test_id != b.test_id {
                return Err(Error::TrialMismatch(format!(
                    "system {} line {} scores `{} {}`, system 1 scores `{} {}`",
                    k + 1,
                    i + 1,
                    b.enroll_id,
                    b.test_id,
                    a.enroll_id,
                    a.test_id
                )));
            }
        }
    }
    Ok(())
}

fn gcd(a: u8, b: u8) -> u8 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Weights divided by their greatest common divisor, so proportional
/// weightings fuse to bitwise-identical scores.
pub fn reduced(w: &FusionWeights) -> FusionWeights {
    let g = w.0.iter().fold(0, |g, &x| gcd(g, x)).max(1);
    FusionWeights(w.0.iter().map(|&x| x / g).collect())
}

fn fuse_raw(columns: &[Vec<f64>], w: &FusionWeights) -> Vec<f64> {
    let w = &reduced(w);
    let total: f64 = w.0.iter().map(|&x| x as f64).sum();
    (0..columns[0].len())
        .map(|i| {
            columns
                .iter()
                .zip(&w.0)
                .filter(|(_, &wk)| wk > 0)
                .map(|(c, &wk)| wk as f64 * c[i])
                .sum::<f64>()
                / total
        })
        .collect()
}

/// `sum_k w_k s_k[i] / sum_k w_k` for every trial.
pub fn fuse_scores(sets: &[ScoreSet], weights: &FusionWeights) -> Result<ScoreSet> {
    weights.validate()?;
    check_aligned(sets)?;
    if weights.0.len() != sets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} systems",
            weights.0.len(),
            sets.len()
        )));
    }
    let columns: Vec<Vec<f64>> = sets.iter().map(ScoreSet::scores).collect();
    let fused = fuse_raw(&columns, weights);
    Ok(ScoreSet::new(
        sets[0]
            .entries
            .iter()
            .zip(fused)
            .map(|(e, score)| ScoreEntry { score, ..e.clone() })
            .collect(),
    ))
}

/// Scales each system's scores to zero mean and unit variance. Constant
/// systems are only centred.
pub fn standardize(set: &ScoreSet) -> ScoreSet {
    let s = set.scores();
    let n = s.len().max(1) as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    ScoreSet::new(
        set.entries
            .iter()
            .map(|e| ScoreEntry {
                score: (e.score - mean) / sd,
                ..e.clone()
            })
            .collect(),
    )
}

fn objective_value(scores: &[f64], labels: &[bool], objective: Objective) -> Result<f64> {
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            tar.push(s);
        } else {
            non.push(s);
        }
    }
    match objective {
        Objective::Eer => eer_from(&tar, &non),
        Objective::MinDcf => min_dcf_from(&tar, &non, &DcfParams::default()),
    }
}

/// Objective of one system on its own.
pub fn evaluate(set: &ScoreSet, trials: &TrialList, objective: Objective) -> Result<f64> {
    let (tar, non) = split_scores(set, trials)?;
    match objective {
        Objective::Eer => eer_from(&tar, &non),
        Objective::MinDcf => min_dcf_from(&tar, &non, &DcfParams::default()),
    }
}

/// Evaluates every weighting in `{0..3}^K` except all-zero and returns the
/// best one. Ties go to the lexicographically smallest weight vector.
pub fn search_weights(sets: &[ScoreSet], trials: &TrialList, objective: Objective) -> Result<(FusionWeights, f64)> {
    check_aligned(sets)?;
    for s in sets {
        s.check_against(trials)?;
    }
    let labels = trials.labels();
    let columns: Vec<Vec<f64>> = sets.iter().map(ScoreSet::scores).collect();
    let candidates = FusionWeights::enumerate(sets.len());
    let values = candidates
        .par_iter()
        .map(|w| objective_value(&fuse_raw(&columns, w), &labels, objective))
        .collect::<Result<Vec<f64>>>()?;
    // Candidates are in lexicographic order, so a strict comparison keeps
    // the first of any tie.
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    Ok((candidates[best].clone(), values[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trial;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trials(labels: &[bool]) -> TrialList {
        TrialList::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Trial::new(l, format!("e{i}"), format!("t{i}")))
                .collect(),
        )
    }

    fn set(t: &TrialList, s: &[f64]) -> ScoreSet {
        ScoreSet::from_scores(t, s).unwrap()
    }

    #[test]
    fn scalar_average() {
        let t = trials(&[true]);
        let f = fuse_scores(&[set(&t, &[0.2]), set(&t, &[0.8])], &"3,1".parse().unwrap()).unwrap();
        assert!((f.scores()[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn identity_and_scale_invariance() {
        let t = trials(&[true, false, true]);
        let a = set(&t, &[0.1, -0.4, 0.77]);
        let b = set(&t, &[0.3, 0.2, -0.1]);
        let sets = [a.clone(), b];
        assert_eq!(fuse_scores(&sets, &FusionWeights(vec![1, 0])).unwrap(), a);
        assert_eq!(
            fuse_scores(&sets, &FusionWeights(vec![2, 2])).unwrap(),
            fuse_scores(&sets, &FusionWeights(vec![1, 1])).unwrap()
        );
        assert_eq!(
            fuse_scores(&sets, &FusionWeights(vec![3, 3])).unwrap(),
            fuse_scores(&sets, &FusionWeights(vec![1, 1])).unwrap()
        );
    }

    #[test]
    fn invalid_inputs() {
        let t = trials(&[true, false]);
        let a = set(&t, &[0.1, 0.2]);
        assert!(fuse_scores(std::slice::from_ref(&a), &FusionWeights(vec![0])).is_err());
        assert!(fuse_scores(std::slice::from_ref(&a), &FusionWeights(vec![4])).is_err());
        assert!(fuse_scores(std::slice::from_ref(&a), &FusionWeights(vec![1, 1])).is_err());
        let other = set(&trials(&[true, false, true]), &[0.0, 0.0, 0.0]);
        assert!(matches!(
            fuse_scores(&[a.clone(), other], &FusionWeights(vec![1, 1])),
            Err(Error::TrialMismatch(_))
        ));
        let mut renamed = a.clone();
        renamed.entries[1].test_id = "zzz".into();
        assert!(matches!(
            fuse_scores(&[a, renamed], &FusionWeights(vec![1, 1])),
            Err(Error::TrialMismatch(_))
        ));
        assert!(search_weights(&[], &t, Objective::Eer).is_err());
        assert!("1,x".parse::<FusionWeights>().is_err());
        assert!("0,0".parse::<FusionWeights>().is_err());
    }

    #[test]
    fn reduction() {
        assert_eq!(reduced(&FusionWeights(vec![2, 0, 2])), FusionWeights(vec![1, 0, 1]));
        assert_eq!(reduced(&FusionWeights(vec![3, 2])), FusionWeights(vec![3, 2]));
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        let all = FusionWeights::enumerate(3);
        assert_eq!(all.len(), 63);
        assert_eq!(all[0], FusionWeights(vec![0, 0, 1]));
        assert_eq!(all[62], FusionWeights(vec![3, 3, 3]));
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_system_picks_weight_one() {
        let t = trials(&[true, false, true, false]);
        let (w, v) = search_weights(&[set(&t, &[0.9, 0.1, 0.4, 0.5])], &t, Objective::Eer).unwrap();
        assert_eq!(w, FusionWeights(vec![1]));
        assert_eq!(v, 0.5);
    }

    #[test]
    fn separating_system_wins_over_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let t = trials(&labels);
        let good: Vec<f64> = labels
            .iter()
            .map(|&l| if l { 1.0 } else { -1.0 } + rng.random_range(-0.5..0.5))
            .collect();
        let noise: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (w, v) = search_weights(&[set(&t, &good), set(&t, &noise)], &t, Objective::Eer).unwrap();
        assert_eq!(v, 0.0);
        assert!(w.0[0] > 0);
        assert_eq!(w, FusionWeights(vec![1, 0]));
    }

    #[test]
    fn standardize_moments() {
        let t = trials(&[true, false, true]);
        let z = standardize(&set(&t, &[1.0, 2.0, 6.0])).scores();
        let m = z.iter().sum::<f64>() / 3.0;
        let v = z.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert_eq!(standardize(&set(&t, &[2.0, 2.0, 2.0])).scores(), vec![0.0; 3]);
    }
}
