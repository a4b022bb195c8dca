//! Training objectives on speaker embeddings.
//!
//! Metric-learning batches stack the query half above the support half:
//! rows `0..B` are queries and row `B + i` is the support utterance of the
//! same speaker as query `i`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, MarginKind, ParamId, ParamStore, Real, Tensor, Var};

/// Length-normalisation guard for embeddings and class weights.
pub const NORM_EPS: f64 = 1e-8;
pub const AP_INIT_W: f64 = 10.0;
pub const AP_INIT_B: f64 = -5.0;
pub const AP_MIN_W: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    AmSoftmax,
    AamSoftmax,
    Ap,
    ApSoftmax,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Softmax,
        LossKind::AmSoftmax,
        LossKind::AamSoftmax,
        LossKind::Ap,
        LossKind::ApSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::AmSoftmax => "amsoftmax",
            LossKind::AamSoftmax => "aamsoftmax",
            LossKind::Ap => "ap",
            LossKind::ApSoftmax => "ap_softmax",
        }
    }

    /// Metric losses consume query/support pairs rather than labelled rows.
    pub fn is_metric(self) -> bool {
        matches!(self, LossKind::Ap | LossKind::ApSoftmax)
    }

    fn has_classifier(self) -> bool {
        self != LossKind::Ap
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// Cosine similarity of every row of `x: [N, E]` with every row of `w: [K, E]`.
pub fn cosine_matrix<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    let xn = g.l2_normalize_rows(x, T::lit(NORM_EPS))?;
    let wn = g.l2_normalize_rows(w, T::lit(NORM_EPS))?;
    g.matmul(xn, wn, true)
}

/// Mean cross-entropy of unnormalised logits `x * W^T`.
pub fn softmax_ce<T: Real>(g: &mut Graph<T>, emb: Var, head: Var, labels: &[usize]) -> Result<Var> {
    let logits = g.matmul(emb, head, true)?;
    g.cross_entropy(logits, labels)
}

fn margin_ce<T: Real>(
    g: &mut Graph<T>,
    emb: Var,
    head: Var,
    labels: &[usize],
    cfg: &MarginConfig,
    kind: MarginKind,
) -> Result<Var> {
    cfg.validate()?;
    let cos = cosine_matrix(g, emb, head)?;
    let m = g.margin(cos, labels, kind, T::lit(cfg.margin))?;
    let logits = g.scale(m, T::lit(cfg.scale));
    g.cross_entropy(logits, labels)
}

/// Additive-margin softmax: true-class logit `s (cos - m)`.
pub fn am_softmax<T: Real>(g: &mut Graph<T>, emb: Var, head: Var, labels: &[usize], cfg: &MarginConfig) -> Result<Var> {
    margin_ce(g, emb, head, labels, cfg, MarginKind::Additive)
}

/// Additive angular margin softmax: true-class logit `s cos(theta + m)`.
pub fn aam_softmax<T: Real>(
    g: &mut Graph<T>,
    emb: Var,
    head: Var,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Var> {
    margin_ce(g, emb, head, labels, cfg, MarginKind::Angular)
}

/// Angular prototypical loss of `query: [B, E]` against `support: [B, E]`
/// with similarity `w cos + b`.
pub fn angular_prototypical<T: Real>(g: &mut Graph<T>, query: Var, support: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.shape(query)[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "angular prototypical loss needs at least 2 speakers, got {n}"
        )));
    }
    if g.shape(query) != g.shape(support) {
        return Err(Error::Shape(format!(
            "query {:?} and support {:?} differ",
            g.shape(query),
            g.shape(support)
        )));
    }
    let cos = cosine_matrix(g, query, support)?;
    let sim = g.scalar_affine(cos, w, b)?;
    let labels: Vec<usize> = (0..n).collect();
    g.cross_entropy(sim, &labels)
}

/// AP loss plus softmax cross-entropy over both halves, unit weights.
/// `labels` covers all `2B` rows of `stacked`.
pub fn ap_plus_softmax<T: Real>(
    g: &mut Graph<T>,
    stacked: Var,
    head: Var,
    labels: &[usize],
    w: Var,
    b: Var,
) -> Result<Var> {
    let (query, support) = split_pairs(g, stacked)?;
    let ap = angular_prototypical(g, query, support, w, b)?;
    let ce = softmax_ce(g, stacked, head, labels)?;
    g.add(ap, ce)
}

/// Splits a `[2B, E]` stack into its query and support halves.
pub fn split_pairs<T: Real>(g: &mut Graph<T>, stacked: Var) -> Result<(Var, Var)> {
    let s = g.shape(stacked).to_vec();
    if s.len() != 2 || !s[0].is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "paired batch needs an even number of rows, got {s:?}"
        )));
    }
    let half = s[0] / 2;
    Ok((g.slice_rows(stacked, 0, half)?, g.slice_rows(stacked, half, half)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: MarginConfig,
}

/// Trainable parameters owned by a loss: the classifier head and/or the AP
/// similarity scale and bias.
#[derive(Debug, Clone)]
pub struct LossHead<T: Real> {
    pub config: LossConfig,
    pub params: ParamStore<T>,
    weight: Option<ParamId>,
    ap: Option<(ParamId, ParamId)>,
}

impl<T: Real> LossHead<T> {
    pub fn new<R: Rng + ?Sized>(config: LossConfig, n_classes: usize, emb_dim: usize, rng: &mut R) -> Result<Self> {
        config.margin.validate()?;
        let mut params = ParamStore::new();
        let weight = if config.kind.has_classifier() {
            if n_classes < 2 {
                return Err(Error::InvalidArgument(format!(
                    "classifier needs at least 2 classes, got {n_classes}"
                )));
            }
            let bound = (6.0 / emb_dim as f64).sqrt();
            let vals: Vec<f64> = (0..n_classes * emb_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Some(params.add("head.weight", Tensor::from_f64(&[n_classes, emb_dim], &vals)))
        } else {
            None
        };
        let ap = config.kind.is_metric().then(|| {
            (
                params.add("ap.w", Tensor::from_f64(&[1], &[AP_INIT_W])),
                params.add("ap.b", Tensor::from_f64(&[1], &[AP_INIT_B])),
            )
        });
        Ok(Self {
            config,
            params,
            weight,
            ap,
        })
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.weight.map(|w| self.params.value(w).dim(0))
    }

    /// Loss of a batch of embeddings. Classification losses take one label
    /// per row; metric losses take the stacked query/support layout with a
    /// label per row (only used by the softmax half of AP+softmax).
    pub fn loss(&self, g: &mut Graph<T>, emb: Var, labels: &[usize]) -> Result<Var> {
        let head = self.weight.map(|w| g.param(&self.params, w));
        let ap = self
            .ap
            .map(|(w, b)| (g.param(&self.params, w), g.param(&self.params, b)));
        let cfg = &self.config.margin;
        match (self.config.kind, head, ap) {
            (LossKind::Softmax, Some(h), _) => softmax_ce(g, emb, h, labels),
            (LossKind::AmSoftmax, Some(h), _) => am_softmax(g, emb, h, labels, cfg),
            (LossKind::AamSoftmax, Some(h), _) => aam_softmax(g, emb, h, labels, cfg),
            (LossKind::Ap, _, Some((w, b))) => {
                let (q, s) = split_pairs(g, emb)?;
                angular_prototypical(g, q, s, w, b)
            }
            (LossKind::ApSoftmax, Some(h), Some((w, b))) => ap_plus_softmax(g, emb, h, labels, w, b),
            _ => unreachable!("head parameters always match the loss kind"),
        }
    }

    /// Keeps the AP similarity scale positive after an optimiser step.
    pub fn clamp_scale(&mut self) {
        if let Some((w, _)) = self.ap {
            let v = &mut self.params.get_mut(w).value.data_mut()[0];
            let floor = T::lit(AP_MIN_W);
            if !(*v >= floor) {
                *v = floor;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> LossHead<U> {
        LossHead {
            config: self.config,
            params: self.params.cast(),
            weight: self.weight,
            ap: self.ap,
        }
    }
}
