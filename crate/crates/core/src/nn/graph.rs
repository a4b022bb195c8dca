//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse from a scalar and returns
//! gradients for every bound parameter and every input leaf.

use std::collections::HashMap;

use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[B, C, H, W]` inputs. 1-D
/// convolutions use `H = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeom {
    fn out_len(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        (input + 2 * pad >= span).then(|| (input + 2 * pad - span) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_len(h, self.kernel.0, self.stride.0, self.pad.0, self.dilation.0)?,
            Self::out_len(w, self.kernel.1, self.stride.1, self.pad.1, self.dilation.1)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginKind {
    /// `cos(theta) - m`
    Additive,
    /// `cos(theta + m)`, falling back to `cos(theta) - m sin(m)` past pi.
    Angular,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param {
        tag: u64,
        id: ParamId,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias {
        x: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Reshape(Var),
    FlattenFreq(Var),
    MeanFreq(Var),
    Transpose12(Var),
    Softmax(Var),
    WeightedSum {
        alpha: Var,
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Margin {
        cos: Var,
        labels: Vec<usize>,
        kind: MarginKind,
        m: T,
    },
    ScalarAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul { .. } => "matmul",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Reshape(_) => "reshape",
            Op::FlattenFreq(_) => "flatten_freq",
            Op::MeanFreq(_) => "mean_freq",
            Op::Transpose12(_) => "transpose12",
            Op::Softmax(_) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Margin { .. } => "margin",
            Op::ScalarAffine { .. } => "scalar_affine",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(u64, ParamId, Tensor<T>)>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor<T>)> {
        self.params.iter().map(|(t, id, g)| (*t, *id, g))
    }

    /// Gradient with respect to an input leaf, if it was reachable.
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&leaf)
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Graph<T> {
    /// Debug builds check every op output for non-finite values.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// First op (node index, op name) that produced a non-finite value.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        if self.check_finite && self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(value, Op::Param { tag: store.tag(), id })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::sqrt);
        self.push(v, Op::Sqrt(x))
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|e| if e > floor { e } else { floor });
        self.push(v, Op::ClampMin(x, floor))
    }

    /// `x[..., c] + b[c]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(shape_err(format!(
                "row bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bias).map(|(&v, &bb)| v + bb))
            .collect();
        let v = Tensor::new(vx.shape().to_vec(), data);
        Ok(self.push(v, Op::AddRowBias { x, b }))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(shape_err(format!(
                "channel bias {:?} for input {shape:?}",
                self.shape(b)
            )));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bb = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        Ok(self.push(Tensor::new(shape, data), Op::AddChannelBias { x, b }))
    }

    /// 2-D product `a * b`, or `a * b^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?} (trans_b = {trans_b})")));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b }))
    }

    /// Convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, KH, KW]`.
    /// Rank-3 operands (`[B, Cin, T]`, `[Cout, Cin, K]`) are treated as
    /// `H = 1` and keep their rank in the output.
    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, cin, h, wd, one_d) = match sx.len() {
            4 => (sx[0], sx[1], sx[2], sx[3], false),
            3 => (sx[0], sx[1], 1, sx[2], true),
            _ => return Err(shape_err(format!("conv input {sx:?}"))),
        };
        let (cout, wcin, kh, kw) = match (sw.len(), one_d) {
            (4, false) => (sw[0], sw[1], sw[2], sw[3]),
            (3, true) => (sw[0], sw[1], 1, sw[2]),
            _ => return Err(shape_err(format!("conv weight {sw:?} for input {sx:?}"))),
        };
        if wcin != cin || (kh, kw) != geom.kernel {
            return Err(shape_err(format!("conv weight {sw:?} for input {sx:?} and {geom:?}")));
        }
        let (ho, wo) = geom
            .output_hw(h, wd)
            .ok_or_else(|| shape_err(format!("conv input {sx:?} smaller than kernel {geom:?}")))?;
        let k = cin * kh * kw;
        let p = ho * wo;
        let mut out = vec![T::zero(); b * cout * p];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        out.par_chunks_mut(cout * p).enumerate().for_each(|(bi, ob)| {
            let mut cols = vec![T::zero(); k * p];
            im2col(
                &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin,
                (h, wd),
                &geom,
                (ho, wo),
                &mut cols,
            );
            T::gemm(
                cout,
                k,
                p,
                T::one(),
                ws,
                k as isize,
                1,
                &cols,
                p as isize,
                1,
                T::zero(),
                ob,
                p as isize,
                1,
            );
        });
        let shape = if one_d {
            vec![b, cout, wo]
        } else {
            vec![b, cout, ho, wo]
        };
        Ok(self.push(
            Tensor::new(shape, out),
            Op::Conv {
                x,
                w,
                geom,
                in_hw: (h, wd),
                out_hw: (ho, wo),
            },
        ))
    }

    /// Training-mode batch norm over all axes except axis 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let count = n * inner;
        if count < 2 {
            return Err(shape_err(
                "batch norm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                let off = (bi * c + ch) * inner;
                s += xs[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0;
            for bi in 0..n {
                let off = (bi * c + ch) * inner;
                ss += xs[off..off + inner]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean_t, &inv_std, c, inner, true);
        let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm: a fixed per-channel affine map from running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, inner) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("running statistics do not match channel count".into()));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, c, inner, false))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(format!("batch norm input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch norm affine params for {c} channels")));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        inner: usize,
        train: bool,
    ) -> Var {
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for (i, ((xh, o), src)) in xhat
            .chunks_mut(inner)
            .zip(out.chunks_mut(inner))
            .zip(vx.data().chunks(inner))
            .enumerate()
        {
            let ch = i % c;
            for ((h, o), &s) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *h = (s - mean[ch]) * inv_std[ch];
                *o = *h * g[ch] + bt[ch];
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err(format!("cannot reshape {:?} to {shape:?}", v.shape())));
        }
        let v = v.clone().reshaped(shape);
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `[B, C, F, T] -> [B, T, C*F]`, channel-major within each frame.
    pub fn flatten_freq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("flatten_freq input {s:?}")));
        }
        let (b, c, f, t) = (s[0], s[1], s[2], s[3]);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for fi in 0..f {
                    let src = &xs[((bi * c + ci) * f + fi) * t..][..t];
                    for (ti, &v) in src.iter().enumerate() {
                        out[(bi * t + ti) * c * f + ci * f + fi] = v;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, t, c * f], out), Op::FlattenFreq(x)))
    }

    /// `[B, C, F, T] -> [B, T, C]`, averaging over the frequency axis.
    pub fn mean_freq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("mean_freq input {s:?}")));
        }
        let (b, c, f, t) = (s[0], s[1], s[2], s[3]);
        let xs = self.value(x).data();
        let scale = T::one() / T::lit(f as f64);
        let mut out = vec![T::zero(); b * t * c];
        for bi in 0..b {
            for ci in 0..c {
                for fi in 0..f {
                    let src = &xs[((bi * c + ci) * f + fi) * t..][..t];
                    for (ti, &v) in src.iter().enumerate() {
                        out[(bi * t + ti) * c + ci] += v * scale;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, t, c], out), Op::MeanFreq(x)))
    }

    /// `[B, C, T] -> [B, T, C]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("transpose12 input {s:?}")));
        }
        let out = transpose_last2(self.value(x).data(), s[0], s[1], s[2]);
        Ok(self.push(Tensor::new(vec![s[0], s[2], s[1]], out), Op::Transpose12(x)))
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("softmax input {s:?}")));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(s, out), Op::Softmax(x)))
    }

    /// `out[b, c] = sum_t alpha[b, t] * x[b, t, c]`.
    pub fn weighted_sum(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(alpha).to_vec(), self.shape(x).to_vec());
        if sa.len() != 2 || sx.len() != 3 || sa[0] != sx[0] || sa[1] != sx[1] {
            return Err(shape_err(format!("weighted_sum weights {sa:?} for frames {sx:?}")));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let a = self.value(alpha).data();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                let w = a[bi * t + ti];
                for (ov, &xv) in o.iter_mut().zip(&xs[(bi * t + ti) * c..][..c]) {
                    *ov += w * xv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, c], out), Op::WeightedSum { alpha, x }))
    }

    /// Concatenates two 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || axis > 1 || sa[1 - axis] != sb[1 - axis] {
            return Err(shape_err(format!("concat {sa:?} and {sb:?} on axis {axis}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (shape, data) = if axis == 0 {
            (vec![sa[0] + sb[0], sa[1]], da.iter().chain(db).copied().collect())
        } else {
            let mut data = Vec::with_capacity(da.len() + db.len());
            for r in 0..sa[0] {
                data.extend_from_slice(&da[r * sa[1]..(r + 1) * sa[1]]);
                data.extend_from_slice(&db[r * sb[1]..(r + 1) * sb[1]]);
            }
            (vec![sa[0], sa[1] + sb[1]], data)
        };
        Ok(self.push(Tensor::new(shape, data), Op::Concat { a, b, axis }))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(shape_err(format!("rows {start}..{} of {s:?}", start + len)));
        }
        let data = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        Ok(self.push(Tensor::new(vec![len, s[1]], data), Op::SliceRows { x, start }))
    }

    /// Scales each row of a 2-D tensor to unit length, `x / max(|x|, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("l2_normalize_rows input {s:?}")));
        }
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(s[1]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let n = if n > eps { n } else { eps };
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(Tensor::new(s, out), Op::L2NormalizeRows { x, norms }))
    }

    /// Applies a margin to the true-class cosine of each row.
    pub fn margin(&mut self, cos: Var, labels: &[usize], kind: MarginKind, m: T) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        check_labels(&s, labels)?;
        let mut out = self.value(cos).data().to_vec();
        for (r, &y) in labels.iter().enumerate() {
            let c = &mut out[r * s[1] + y];
            *c = margin_value(*c, kind, m);
        }
        Ok(self.push(
            Tensor::new(s, out),
            Op::Margin {
                cos,
                labels: labels.to_vec(),
                kind,
                m,
            },
        ))
    }

    /// `w * x + b` with scalar parameters `w` and `b` (shape `[1]`).
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.value(w).len() != 1 || self.value(b).len() != 1 {
            return Err(shape_err("scalar_affine needs single-element scale and bias".into()));
        }
        let (wv, bv) = (self.value(w).item(), self.value(b).item());
        let v = self.value(x).map(|e| wv * e + bv);
        Ok(self.push(v, Op::ScalarAffine { x, w, b }))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        check_labels(&s, labels)?;
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut probs[r * s[1]..(r + 1) * s[1]];
            let lse = log_sum_exp(row);
            total += (lse - row[y]).as_f64();
            softmax_in_place(row);
        }
        let loss = T::lit(total / labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut out = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param { tag, id } => out.params.push((*tag, *id, g)),
                op => self.backward_op(op, &node.value, g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op<T>, y: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf | Op::Param { .. } => unreachable!(),
            Op::Add(a, b) => {
                accumulate(grads, *b, g.clone());
                accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|v| -v));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = zip_with(&g, val(*b), |d, y| d * y);
                let gb = zip_with(&g, val(*a), |d, x| d * x);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|d| d * s));
            }
            Op::AddRowBias { x, b } => {
                let c = val(*b).len();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (acc, &d) in gb.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
                accumulate(grads, *b, Tensor::new(vec![c], gb));
                accumulate(grads, *x, g);
            }
            Op::AddChannelBias { x, b } => {
                let s = val(*x).shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, *b, Tensor::new(vec![c], gb));
                accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                let gx = zip_with(&g, val(*x), |d, v| if v > T::zero() { d } else { T::zero() });
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip_with(&g, y, |d, t| d * (T::one() - t * t));
                accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = zip_with(&g, val(*x), |d, v| d * two * v);
                accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                let gx = zip_with(&g, y, |d, r| d * half / r);
                accumulate(grads, *x, gx);
            }
            Op::ClampMin(x, floor) => {
                let f = *floor;
                let gx = zip_with(&g, val(*x), |d, v| if v > f { d } else { T::zero() });
                accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.dim(0), va.dim(1));
                let n = g.dim(1);
                // da = g * B^T  (B is k x n, or stored n x k when trans_b)
                let mut ga = vec![T::zero(); m * k];
                let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n as isize,
                    1,
                    vb.data(),
                    rsb,
                    csb,
                    T::zero(),
                    &mut ga,
                    k as isize,
                    1,
                );
                let gb = if *trans_b {
                    // dB (n x k) = g^T * A
                    let mut gb = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g.data(),
                        1,
                        n as isize,
                        va.data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        k as isize,
                        1,
                    );
                    gb
                } else {
                    // dB (k x n) = A^T * g
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        n as isize,
                        1,
                    );
                    gb
                };
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb));
            }
            Op::Conv {
                x,
                w,
                geom,
                in_hw,
                out_hw,
            } => {
                let (vx, vw) = (val(*x), val(*w));
                let (b, cin) = (vx.dim(0), vx.dim(1));
                let cout = vw.dim(0);
                let k = cin * geom.kernel.0 * geom.kernel.1;
                let p = out_hw.0 * out_hw.1;
                let in_len = cin * in_hw.0 * in_hw.1;
                let gd = g.data();
                let (xs, ws) = (vx.data(), vw.data());
                let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..b)
                    .into_par_iter()
                    .map(|bi| {
                        let gout = &gd[bi * cout * p..(bi + 1) * cout * p];
                        let mut cols = vec![T::zero(); k * p];
                        im2col(
                            &xs[bi * in_len..(bi + 1) * in_len],
                            cin,
                            *in_hw,
                            geom,
                            *out_hw,
                            &mut cols,
                        );
                        // dW_b = gout (cout x p) * cols^T (p x k)
                        let mut gw = vec![T::zero(); cout * k];
                        T::gemm(
                            cout,
                            p,
                            k,
                            T::one(),
                            gout,
                            p as isize,
                            1,
                            &cols,
                            1,
                            p as isize,
                            T::zero(),
                            &mut gw,
                            k as isize,
                            1,
                        );
                        // dcols = W^T (k x cout) * gout (cout x p)
                        T::gemm(
                            k,
                            cout,
                            p,
                            T::one(),
                            ws,
                            1,
                            k as isize,
                            gout,
                            p as isize,
                            1,
                            T::zero(),
                            &mut cols,
                            p as isize,
                            1,
                        );
                        let mut gx = vec![T::zero(); in_len];
                        col2im(&cols, cin, *in_hw, geom, *out_hw, &mut gx);
                        (gx, gw)
                    })
                    .collect();
                let mut gw = vec![T::zero(); cout * k];
                let mut gx = Vec::with_capacity(b * in_len);
                for (sx, sw) in per_sample {
                    gx.extend_from_slice(&sx);
                    for (acc, v) in gw.iter_mut().zip(sw) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), gw));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = val(*x).shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let count = T::lit((n * inner) as f64);
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gc, xc)) in gd.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&d, &h) in gc.iter().zip(xc) {
                        sum_g[ch] += d;
                        sum_gx[ch] += d * h;
                    }
                }
                let mut gx = vec![T::zero(); gd.len()];
                for (i, ((o, gc), xc)) in gx
                    .chunks_mut(inner)
                    .zip(gd.chunks(inner))
                    .zip(xhat.chunks(inner))
                    .enumerate()
                {
                    let ch = i % c;
                    let scale = gam[ch] * inv_std[ch];
                    if *train {
                        let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                        for ((ov, &d), &h) in o.iter_mut().zip(gc).zip(xc) {
                            *ov = scale * (d - mg - h * mgx);
                        }
                    } else {
                        for (ov, &d) in o.iter_mut().zip(gc) {
                            *ov = scale * d;
                        }
                    }
                }
                accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx));
                accumulate(grads, *beta, Tensor::new(vec![c], sum_g));
                accumulate(grads, *x, Tensor::new(s.to_vec(), gx));
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, g.reshaped(&shape));
            }
            Op::FlattenFreq(x) => {
                let s = val(*x).shape().to_vec();
                let (b, c, f, t) = (s[0], s[1], s[2], s[3]);
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for fi in 0..f {
                            let dst = &mut gx[((bi * c + ci) * f + fi) * t..][..t];
                            for (ti, slot) in dst.iter_mut().enumerate() {
                                *slot = gd[(bi * t + ti) * c * f + ci * f + fi];
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, gx));
            }
            Op::MeanFreq(x) => {
                let s = val(*x).shape().to_vec();
                let (b, c, f, t) = (s[0], s[1], s[2], s[3]);
                let scale = T::one() / T::lit(f as f64);
                let gd = g.data();
                let mut gx = vec![T::zero(); b * c * f * t];
                for bi in 0..b {
                    for ci in 0..c {
                        for fi in 0..f {
                            let dst = &mut gx[((bi * c + ci) * f + fi) * t..][..t];
                            for (ti, slot) in dst.iter_mut().enumerate() {
                                *slot = gd[(bi * t + ti) * c + ci] * scale;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, gx));
            }
            Op::Transpose12(x) => {
                let s = val(*x).shape().to_vec();
                let gx = transpose_last2(g.data(), s[0], s[2], s[1]);
                accumulate(grads, *x, Tensor::new(s, gx));
            }
            Op::Softmax(x) => {
                let cols = y.dim(1);
                let mut gx = vec![T::zero(); y.len()];
                for ((o, yr), gr) in gx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::WeightedSum { alpha, x } => {
                let (va, vx) = (val(*alpha), val(*x));
                let (b, t, c) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let (ad, xd, gd) = (va.data(), vx.data(), g.data());
                let mut ga = vec![T::zero(); b * t];
                let mut gx = vec![T::zero(); b * t * c];
                for bi in 0..b {
                    let gr = &gd[bi * c..(bi + 1) * c];
                    for ti in 0..t {
                        let off = (bi * t + ti) * c;
                        let a = ad[bi * t + ti];
                        ga[bi * t + ti] = xd[off..off + c].iter().zip(gr).map(|(&xv, &gv)| xv * gv).sum();
                        for (slot, &gv) in gx[off..off + c].iter_mut().zip(gr) {
                            *slot = a * gv;
                        }
                    }
                }
                accumulate(grads, *alpha, Tensor::new(va.shape().to_vec(), ga));
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                let gd = g.data();
                let (ga, gb) = if *axis == 0 {
                    let split = sa[0] * sa[1];
                    (gd[..split].to_vec(), gd[split..].to_vec())
                } else {
                    let width = sa[1] + sb[1];
                    let mut ga = Vec::with_capacity(sa[0] * sa[1]);
                    let mut gb = Vec::with_capacity(sb[0] * sb[1]);
                    for row in gd.chunks(width) {
                        ga.extend_from_slice(&row[..sa[1]]);
                        gb.extend_from_slice(&row[sa[1]..]);
                    }
                    (ga, gb)
                };
                accumulate(grads, *a, Tensor::new(sa, ga));
                accumulate(grads, *b, Tensor::new(sb, gb));
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let cols = vx.dim(1);
                let mut gx = vec![T::zero(); vx.len()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = y.dim(1);
                let vx = val(*x);
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((o, yr), gr)) in gx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                    .enumerate()
                {
                    let n = norms[r];
                    let raw = vx.data()[r * cols..(r + 1) * cols]
                        .iter()
                        .map(|&v| v * v)
                        .sum::<T>()
                        .sqrt();
                    if raw >= n {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = (gv - yv * dot) / n;
                        }
                    } else {
                        for (ov, &gv) in o.iter_mut().zip(gr) {
                            *ov = gv / n;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::Margin { cos, labels, kind, m } => {
                let cols = y.dim(1);
                let vc = val(*cos).data();
                let mut gx = g.data().to_vec();
                for (r, &lab) in labels.iter().enumerate() {
                    let idx = r * cols + lab;
                    gx[idx] *= margin_derivative(vc[idx], *kind, *m);
                }
                accumulate(grads, *cos, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::ScalarAffine { x, w, b } => {
                let vx = val(*x);
                let wv = val(*w).item();
                let gw: T = g.data().iter().zip(vx.data()).map(|(&d, &v)| d * v).sum();
                let gb: T = g.data().iter().copied().sum();
                accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), vec![gw]));
                accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), vec![gb]));
                accumulate(grads, *x, g.map(|d| d * wv));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = val(*logits).shape().to_vec();
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &lab) in labels.iter().enumerate() {
                    gx[r * s[1] + lab] -= scale;
                }
                accumulate(grads, *logits, Tensor::new(s, gx));
            }
            Op::Sum(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let v = val(*x);
                let d = g.item() / T::lit(v.len() as f64);
                accumulate(grads, *x, Tensor::full(v.shape(), d));
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(shape_err(format!("{} labels for logits {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(())
}

const ACOS_CLAMP: f64 = 1e-7;

fn clamp_cos<T: Real>(c: T) -> (T, bool) {
    let lim = T::lit(1.0 - ACOS_CLAMP);
    if c > lim {
        (lim, false)
    } else if c < -lim {
        (-lim, false)
    } else {
        (c, true)
    }
}

fn margin_value<T: Real>(c: T, kind: MarginKind, m: T) -> T {
    match kind {
        MarginKind::Additive => c - m,
        MarginKind::Angular => {
            let (cc, _) = clamp_cos(c);
            let theta = cc.acos();
            if theta + m <= T::lit(std::f64::consts::PI) {
                (theta + m).cos()
            } else {
                cc - m * m.sin()
            }
        }
    }
}

fn margin_derivative<T: Real>(c: T, kind: MarginKind, m: T) -> T {
    match kind {
        MarginKind::Additive => T::one(),
        MarginKind::Angular => {
            let (cc, inside) = clamp_cos(c);
            if !inside {
                return T::zero();
            }
            let theta = cc.acos();
            if theta + m <= T::lit(std::f64::consts::PI) {
                // d/dc cos(acos(c) + m) = cos m + c sin m / sqrt(1 - c^2)
                m.cos() + cc * m.sin() / (T::one() - cc * cc).sqrt()
            } else {
                T::one()
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `[B, R, C] -> [B, C, R]`.
fn transpose_last2<T: Real>(src: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let o = &mut out[bi * r * c..(bi + 1) * r * c];
        for ri in 0..r {
            for ci in 0..c {
                o[ci * r + ri] = s[ri * c + ci];
            }
        }
    }
    out
}

/// Unfolds one `[C, H, W]` sample into `[C*KH*KW, HO*WO]` patch columns.
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    (h, w): (usize, usize),
    g: &ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let p = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.pad.0 as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = (kj * g.dilation.1) as isize - g.pad.1 as isize;
                    if g.stride.1 == 1 {
                        for (ox, slot) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *slot = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    } else {
                        for (ox, slot) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride.1) as isize + off;
                            *slot = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the input grid.
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    (h, w): (usize, usize),
    g: &ConvGeom,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let p = ho * wo;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = (kj * g.dilation.1) as isize - g.pad.1 as isize;
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride.1) as isize + off;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
