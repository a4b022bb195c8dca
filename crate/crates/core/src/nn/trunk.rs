//! Embedding trunks: channel-scaled ResNet-34 variants and a TDNN-lite,
//! followed by attentive pooling and a linear embedding layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use super::graph::{BatchStats, ConvGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::dsp::{FeatureConfig, FeatureMatrix};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 1e-1;
/// Variance floor inside attentive statistics pooling.
pub const ASP_EPS: f64 = 1e-5;

const RESNET_WIDTHS_H: [usize; 4] = [32, 64, 128, 256];
const RESNET_WIDTHS_Q: [usize; 4] = [16, 32, 64, 128];
const RESNET_DEPTHS: [usize; 4] = [3, 4, 6, 3];
const RESNET_STRIDES: [usize; 4] = [1, 2, 2, 2];
const TDNN_WIDTH: usize = 512;
/// (kernel, dilation) of the three TDNN-lite layers.
const TDNN_LAYERS: [(usize, usize); 3] = [(5, 1), (3, 2), (3, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    ResNetQSap,
    ResNetHAsp,
    TdnnLite,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ResNetQSap => "resnet_q_sap",
            Family::ResNetHAsp => "resnet_h_asp",
            Family::TdnnLite => "tdnn_lite",
        }
    }

    pub fn default_pooling(self) -> Pooling {
        match self {
            Family::ResNetQSap => Pooling::Sap,
            Family::ResNetHAsp | Family::TdnnLite => Pooling::Asp,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Family::TdnnLite => 80,
            _ => 64,
        }
    }

    /// Front end feeding this family: instance-normalised 64-band log-mel for
    /// the ResNets, mean-normalised 80-dimensional MFCC for the TDNN.
    pub fn feature_config(self) -> FeatureConfig {
        match self {
            Family::TdnnLite => FeatureConfig::mfcc80(),
            _ => FeatureConfig::logmel64(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet_q_sap" | "q_sap" => Ok(Family::ResNetQSap),
            "resnet_h_asp" | "h_asp" => Ok(Family::ResNetHAsp),
            "tdnn_lite" | "tdnn" => Ok(Family::TdnnLite),
            _ => Err(Error::Config(format!("unknown trunk family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Sap,
    Asp,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Sap => "sap",
            Pooling::Asp => "asp",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sap" => Ok(Pooling::Sap),
            "asp" => Ok(Pooling::Asp),
            _ => Err(Error::Config(format!("unknown pooling `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkConfig {
    pub family: Family,
    pub channel_scale: f64,
    pub embedding_dim: usize,
    pub pooling: Pooling,
    pub batchnorm_after_embedding: bool,
    pub input_dim: usize,
}

impl TrunkConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            channel_scale: 0.125,
            embedding_dim: 512,
            pooling: family.default_pooling(),
            batchnorm_after_embedding: false,
            input_dim: family.input_dim(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.channel_scale = scale;
        self
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn with_embedding_bn(mut self, on: bool) -> Self {
        self.batchnorm_after_embedding = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if !(self.channel_scale.is_finite() && self.channel_scale > 0.0) {
            return Err(Error::Config(format!(
                "channel_scale must be positive, got {}",
                self.channel_scale
            )));
        }
        let need = self.family.input_dim();
        if self.input_dim != need {
            return Err(Error::Config(format!(
                "{} expects {need}-dimensional input features, got {}",
                self.family, self.input_dim
            )));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// `key = value` lines, parsed back by [`TrunkConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("family".into(), self.family.to_string()),
            ("channel_scale".into(), format!("{}", self.channel_scale)),
            ("embedding_dim".into(), self.embedding_dim.to_string()),
            ("pooling".into(), self.pooling.to_string()),
            (
                "batchnorm_after_embedding".into(),
                self.batchnorm_after_embedding.to_string(),
            ),
            ("input_dim".into(), self.input_dim.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut family = None;
        let mut rest = Vec::new();
        for (k, v) in pairs {
            if k == "family" {
                family = Some(v.parse::<Family>()?);
            } else {
                rest.push((k, v));
            }
        }
        let family = family.ok_or_else(|| Error::Config("missing trunk family".into()))?;
        let mut cfg = TrunkConfig::new(family);
        for (k, v) in rest {
            let bad = |what: &str| Error::Config(format!("invalid {what} `{v}`"));
            match k {
                "channel_scale" => cfg.channel_scale = v.parse().map_err(|_| bad(k))?,
                "embedding_dim" => cfg.embedding_dim = v.parse().map_err(|_| bad(k))?,
                "pooling" => cfg.pooling = v.parse()?,
                "batchnorm_after_embedding" => cfg.batchnorm_after_embedding = v.parse().map_err(|_| bad(k))?,
                "input_dim" => cfg.input_dim = v.parse().map_err(|_| bad(k))?,
                _ => return Err(Error::Config(format!("unknown trunk key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ParamId,
    bn1: Bn,
    conv2: ParamId,
    bn2: Bn,
    shortcut: Option<(ParamId, Bn)>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct TdnnLayer {
    weight: ParamId,
    bias: ParamId,
    bn: Bn,
    kernel: usize,
    dilation: usize,
}

#[derive(Debug, Clone)]
enum Body {
    ResNet {
        stem: ParamId,
        stem_bn: Bn,
        stem_stride: (usize, usize),
        blocks: Vec<Block>,
        /// Mean over frequency (true) or flatten frequency into channels.
        freq_mean: bool,
    },
    Tdnn(Vec<TdnnLayer>),
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    w: ParamId,
    b: ParamId,
    u: ParamId,
}

/// A trunk with pooling and embedding layer.
#[derive(Debug)]
pub struct Model<T> {
    config: TrunkConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    body: Body,
    attention: Attention,
    emb_w: ParamId,
    emb_b: ParamId,
    emb_bn: Option<Bn>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            running: self.running.clone(),
            body: self.body.clone(),
            attention: self.attention,
            emb_w: self.emb_w,
            emb_b: self.emb_b,
            emb_bn: self.emb_bn,
        }
    }
}

struct Builder<'r, T, R: ?Sized> {
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    rng: &'r mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.add(name, Tensor::from_f64(shape, &vals))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: String, cout: usize, cin: usize, kh: usize, kw: usize) -> ParamId {
        self.he_uniform(name, &[cout, cin, kh, kw], cin * kh * kw)
    }

    fn bn(&mut self, name: String, c: usize) -> Bn {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.zeros(format!("{name}.beta"), &[c]);
        self.running.push(RunningStats {
            name,
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

/// Builds a freshly initialised model for `config`.
pub fn build_trunk<T: Real, R: Rng + ?Sized>(config: &TrunkConfig, rng: &mut R) -> Result<Model<T>> {
    config.validate()?;
    let mut b = Builder {
        params: ParamStore::new(),
        running: Vec::new(),
        rng,
    };
    let (body, pooled_in) = match config.family {
        Family::ResNetQSap | Family::ResNetHAsp => {
            let q = config.family == Family::ResNetQSap;
            let widths = if q { RESNET_WIDTHS_Q } else { RESNET_WIDTHS_H };
            let widths = widths.map(|w| config.scaled(w));
            let stem_stride = if q { (2, 1) } else { (1, 1) };
            let stem = b.conv("conv1.weight".into(), widths[0], 1, 3, 3);
            let stem_bn = b.bn("bn1".into(), widths[0]);
            let mut blocks = Vec::new();
            let mut cin = widths[0];
            let mut freq = conv_len(config.input_dim, stem_stride.0);
            for (stage, ((&cout, &depth), &stride)) in
                widths.iter().zip(&RESNET_DEPTHS).zip(&RESNET_STRIDES).enumerate()
            {
                for i in 0..depth {
                    let s = if i == 0 { stride } else { 1 };
                    let p = format!("layer{}.{i}", stage + 1);
                    let conv1 = b.conv(format!("{p}.conv1.weight"), cout, cin, 3, 3);
                    let bn1 = b.bn(format!("{p}.bn1"), cout);
                    let conv2 = b.conv(format!("{p}.conv2.weight"), cout, cout, 3, 3);
                    let bn2 = b.bn(format!("{p}.bn2"), cout);
                    let shortcut = (s != 1 || cin != cout).then(|| {
                        let w = b.conv(format!("{p}.downsample.weight"), cout, cin, 1, 1);
                        (w, b.bn(format!("{p}.downsample.bn"), cout))
                    });
                    blocks.push(Block {
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        shortcut,
                        stride: s,
                    });
                    cin = cout;
                    freq = conv_len(freq, s);
                }
            }
            let pooled_in = if q { cin } else { cin * freq };
            (
                Body::ResNet {
                    stem,
                    stem_bn,
                    stem_stride,
                    blocks,
                    freq_mean: q,
                },
                pooled_in,
            )
        }
        Family::TdnnLite => {
            let width = config.scaled(TDNN_WIDTH);
            let mut cin = config.input_dim;
            let mut layers = Vec::new();
            for (i, &(kernel, dilation)) in TDNN_LAYERS.iter().enumerate() {
                let weight = b.he_uniform(format!("tdnn{}.weight", i + 1), &[width, cin, kernel], cin * kernel);
                let bias = b.zeros(format!("tdnn{}.bias", i + 1), &[width]);
                let bn = b.bn(format!("tdnn{}.bn", i + 1), width);
                layers.push(TdnnLayer {
                    weight,
                    bias,
                    bn,
                    kernel,
                    dilation,
                });
                cin = width;
            }
            (Body::Tdnn(layers), width)
        }
    };
    let hidden = match config.pooling {
        Pooling::Sap => pooled_in,
        Pooling::Asp => (pooled_in / 8).max(1),
    };
    let attention = Attention {
        w: b.he_uniform("pool.attention.weight".into(), &[hidden, pooled_in], pooled_in),
        b: b.zeros("pool.attention.bias".into(), &[hidden]),
        u: b.he_uniform("pool.attention.context".into(), &[1, hidden], hidden),
    };
    let emb_in = match config.pooling {
        Pooling::Sap => pooled_in,
        Pooling::Asp => 2 * pooled_in,
    };
    let emb_w = b.he_uniform("embedding.weight".into(), &[config.embedding_dim, emb_in], emb_in);
    let emb_b = b.zeros("embedding.bias".into(), &[config.embedding_dim]);
    let emb_bn = config
        .batchnorm_after_embedding
        .then(|| b.bn("embedding.bn".into(), config.embedding_dim));
    Ok(Model {
        config: config.clone(),
        params: b.params,
        running: b.running,
        body,
        attention,
        emb_w,
        emb_b,
        emb_bn,
    })
}

/// Output length of a 3x3, pad-1 convolution along one axis.
fn conv_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn geom3(stride: (usize, usize)) -> ConvGeom {
    ConvGeom {
        kernel: (3, 3),
        stride,
        pad: (1, 1),
        dilation: (1, 1),
    }
}

fn geom1(stride: usize) -> ConvGeom {
    ConvGeom {
        kernel: (1, 1),
        stride: (stride, stride),
        pad: (0, 0),
        dilation: (1, 1),
    }
}

/// `x * W^T + b` for `x: [N, in]`, `W: [out, in]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w, true)?;
    g.add_row_bias(y, b)
}

/// Attention weights over frames: `softmax_t(u . tanh(W x_t + b))`.
/// `frames: [B, T, C]` gives `[B, T]`.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, frames: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("pooling expects [B, T, C] frames, got {s:?}")));
    }
    let flat = g.reshape(frames, &[s[0] * s[1], s[2]])?;
    let h = linear(g, flat, w, b)?;
    let h = g.tanh(h);
    let e = g.matmul(h, u, true)?;
    let e = g.reshape(e, &[s[0], s[1]])?;
    g.softmax(e)
}

/// Self-attentive pooling, `[B, T, C] -> [B, C]`.
pub fn sap_pool<T: Real>(g: &mut Graph<T>, frames: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let alpha = attention_weights(g, frames, w, b, u)?;
    g.weighted_sum(alpha, frames)
}

/// Attentive statistics pooling, `[B, T, C] -> [B, 2C]` (weighted mean then
/// weighted standard deviation).
pub fn asp_pool<T: Real>(g: &mut Graph<T>, frames: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let alpha = attention_weights(g, frames, w, b, u)?;
    stats_pool(g, alpha, frames)
}

/// Weighted mean and standard deviation of `frames` under weights `alpha`.
pub fn stats_pool<T: Real>(g: &mut Graph<T>, alpha: Var, frames: Var) -> Result<Var> {
    let mu = g.weighted_sum(alpha, frames)?;
    let sq = g.square(frames);
    let m2 = g.weighted_sum(alpha, sq)?;
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2)?;
    let var = g.clamp_min(var, T::lit(ASP_EPS));
    let sigma = g.sqrt(var);
    g.concat(mu, sigma, 1)
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub embedding: Var,
    /// Batch statistics per batch-norm layer (train mode only), to be folded
    /// into the running statistics with [`Model::update_running_stats`].
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: cast_vec(&r.mean),
                    var: cast_vec(&r.var),
                })
                .collect(),
            body: self.body.clone(),
            attention: self.attention,
            emb_w: self.emb_w,
            emb_b: self.emb_b,
            emb_bn: self.emb_bn,
        }
    }

    /// Packs feature matrices into the trunk's input layout:
    /// `[B, 1, D, T]` for ResNets, `[B, D, T]` for the TDNN.
    pub fn input_tensor(&self, feats: &[&FeatureMatrix]) -> Result<Tensor<T>> {
        let first = feats
            .first()
            .ok_or_else(|| Error::Shape("empty feature batch".into()))?;
        let (t, d) = (first.frames, first.dims);
        if d != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects {}-dimensional features, got {d}",
                self.config.input_dim
            )));
        }
        let mut data = Vec::with_capacity(feats.len() * t * d);
        for f in feats {
            if f.frames != t || f.dims != d {
                return Err(Error::Shape(format!(
                    "feature batch mixes {t}x{d} and {}x{}",
                    f.frames, f.dims
                )));
            }
            for di in 0..d {
                data.extend((0..t).map(|ti| T::lit(f.values[ti * d + di])));
            }
        }
        let shape = match self.body {
            Body::ResNet { .. } => vec![feats.len(), 1, d, t],
            Body::Tdnn(_) => vec![feats.len(), d, t],
        };
        Ok(Tensor::new(shape, data))
    }

    fn bn(&self, g: &mut Graph<T>, x: Var, bn: Bn, mode: Mode, stats: &mut Vec<(usize, BatchStats)>) -> Result<Var> {
        let gamma = g.param(&self.params, bn.gamma);
        let beta = g.param(&self.params, bn.beta);
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                stats.push((bn.stats, s));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[bn.stats];
                g.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    /// Runs the trunk on an input built by [`Model::input_tensor`].
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward> {
        let mut stats = Vec::new();
        let frames = match &self.body {
            Body::ResNet {
                stem,
                stem_bn,
                stem_stride,
                blocks,
                freq_mean,
            } => {
                if g.shape(x).len() != 4 || g.shape(x)[1] != 1 {
                    return Err(Error::Shape(format!(
                        "ResNet input must be [B, 1, D, T], got {:?}",
                        g.shape(x)
                    )));
                }
                let w = g.param(&self.params, *stem);
                let mut h = g.conv(x, w, geom3(*stem_stride))?;
                h = self.bn(g, h, *stem_bn, mode, &mut stats)?;
                h = g.relu(h);
                for blk in blocks {
                    let w1 = g.param(&self.params, blk.conv1);
                    let mut y = g.conv(h, w1, geom3((blk.stride, blk.stride)))?;
                    y = self.bn(g, y, blk.bn1, mode, &mut stats)?;
                    y = g.relu(y);
                    let w2 = g.param(&self.params, blk.conv2);
                    y = g.conv(y, w2, geom3((1, 1)))?;
                    y = self.bn(g, y, blk.bn2, mode, &mut stats)?;
                    let skip = match blk.shortcut {
                        Some((ws, bns)) => {
                            let ws = g.param(&self.params, ws);
                            let s = g.conv(h, ws, geom1(blk.stride))?;
                            self.bn(g, s, bns, mode, &mut stats)?
                        }
                        None => h,
                    };
                    y = g.add(y, skip)?;
                    h = g.relu(y);
                }
                if *freq_mean {
                    g.mean_freq(h)?
                } else {
                    g.flatten_freq(h)?
                }
            }
            Body::Tdnn(layers) => {
                if g.shape(x).len() != 3 {
                    return Err(Error::Shape(format!(
                        "TDNN input must be [B, D, T], got {:?}",
                        g.shape(x)
                    )));
                }
                let mut h = x;
                for l in layers {
                    let w = g.param(&self.params, l.weight);
                    let b = g.param(&self.params, l.bias);
                    let geom = ConvGeom {
                        kernel: (1, l.kernel),
                        stride: (1, 1),
                        pad: (0, 0),
                        dilation: (1, l.dilation),
                    };
                    h = g.conv(h, w, geom)?;
                    h = g.add_channel_bias(h, b)?;
                    h = g.relu(h);
                    h = self.bn(g, h, l.bn, mode, &mut stats)?;
                }
                g.transpose12(h)?
            }
        };
        let aw = g.param(&self.params, self.attention.w);
        let ab = g.param(&self.params, self.attention.b);
        let au = g.param(&self.params, self.attention.u);
        let pooled = match self.config.pooling {
            Pooling::Sap => sap_pool(g, frames, aw, ab, au)?,
            Pooling::Asp => asp_pool(g, frames, aw, ab, au)?,
        };
        let ew = g.param(&self.params, self.emb_w);
        let eb = g.param(&self.params, self.emb_b);
        let mut emb = linear(g, pooled, ew, eb)?;
        if let Some(bn) = self.emb_bn {
            emb = self.bn(g, emb, bn, mode, &mut stats)?;
        }
        Ok(Forward {
            embedding: emb,
            batch_stats: stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (idx, s) in stats {
            let r = &mut self.running[*idx];
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = keep * *rm + m * T::lit(bm);
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = keep * *rv + m * T::lit(bv);
            }
        }
    }

    /// Embeds one utterance in eval mode.
    pub fn embed_one(&self, feats: &FeatureMatrix) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.input(self.input_tensor(&[feats])?);
        let out = self.forward(&mut g, x, Mode::Eval)?;
        if let Some((idx, op)) = g.first_nonfinite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op} (node {idx}) while embedding"
            )));
        }
        Ok(g.value(out.embedding).data().to_vec())
    }

    /// Eval-mode embeddings `[B, E]`. Each row is computed independently, so a
    /// row never depends on the rest of the batch.
    pub fn embed_batch(&self, feats: &[FeatureMatrix]) -> Result<Tensor<T>> {
        if feats.is_empty() {
            return Err(Error::Shape("empty feature batch".into()));
        }
        let (t, d) = (feats[0].frames, feats[0].dims);
        if let Some(f) = feats.iter().find(|f| f.frames != t || f.dims != d) {
            return Err(Error::Shape(format!(
                "feature batch mixes {t}x{d} and {}x{}",
                f.frames, f.dims
            )));
        }
        let rows: Vec<Vec<T>> = feats.par_iter().map(|f| self.embed_one(f)).collect::<Result<_>>()?;
        let e = self.config.embedding_dim;
        Ok(Tensor::new(vec![feats.len(), e], rows.concat()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(t, d, values, FeatureKind::LogMel)
    }

    fn tiny(family: Family) -> Model<f32> {
        let cfg = TrunkConfig::new(family).with_scale(0.0625).with_embedding_dim(8);
        build_trunk(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let mut cfg = TrunkConfig::new(Family::ResNetHAsp);
        cfg.input_dim = 80;
        assert!(build_trunk::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = TrunkConfig::new(Family::TdnnLite);
        cfg.input_dim = 64;
        assert!(build_trunk::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn h_asp_full_scale_embeds_to_512() {
        let cfg = TrunkConfig::new(Family::ResNetHAsp).with_scale(1.0);
        let m: Model<f32> = build_trunk(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.embedding_dim(), 512);
        let n = m.parameter_count() as f64;
        assert!((n / 8.0e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn q_sap_full_scale_parameter_count() {
        let cfg = TrunkConfig::new(Family::ResNetQSap).with_scale(1.0);
        let m: Model<f32> = build_trunk(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = m.parameter_count() as f64;
        assert!((n / 1.4e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn eval_embeddings_do_not_depend_on_batch() {
        for fam in [Family::ResNetQSap, Family::ResNetHAsp, Family::TdnnLite] {
            let m = tiny(fam);
            let f = feats(40, fam.input_dim(), 3);
            let one = m.embed_batch(std::slice::from_ref(&f)).unwrap();
            let two = m.embed_batch(&[f.clone(), f.clone()]).unwrap();
            assert_eq!(one.data(), &two.data()[..8]);
            assert_eq!(one.data(), &two.data()[8..]);
            assert!(one.all_finite());
            let again = m.embed_batch(std::slice::from_ref(&f)).unwrap();
            assert_eq!(one, again);
        }
    }

    #[test]
    fn mixed_lengths_are_rejected() {
        let m = tiny(Family::ResNetQSap);
        assert!(m.embed_batch(&[feats(40, 64, 0), feats(41, 64, 0)]).is_err());
        assert!(m.embed_batch(&[feats(40, 80, 0)]).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = tiny(Family::ResNetQSap).with_embedding_bn_for_test();
        let f = [feats(20, 64, 1), feats(20, 64, 2)];
        let mut g = Graph::new();
        let x = g.input(m.input_tensor(&[&f[0], &f[1]]).unwrap());
        let out = m.forward(&mut g, x, Mode::Train).unwrap();
        let (idx, s) = out.batch_stats.last().unwrap().clone();
        m.update_running_stats(&out.batch_stats);
        let r = &m.running[idx];
        for c in 0..r.mean.len() {
            assert!((r.mean[c] as f64 - 0.1 * s.mean[c]).abs() < 1e-6);
            assert!((r.var[c] as f64 - (0.9 + 0.1 * s.var[c])).abs() < 1e-5);
        }
    }

    impl Model<f32> {
        fn with_embedding_bn_for_test(self) -> Self {
            let cfg = self.config.clone().with_embedding_bn(true);
            build_trunk(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        }
    }

    #[test]
    fn config_round_trips_through_pairs() {
        let cfg = TrunkConfig::new(Family::TdnnLite)
            .with_scale(0.3)
            .with_embedding_bn(true);
        let pairs = cfg.to_pairs();
        let back = TrunkConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(cfg, back);
    }
}
