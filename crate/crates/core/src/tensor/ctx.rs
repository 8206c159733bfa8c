use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, reduce_to_shape, Tensor};

pub type NodeId = usize;

/// Division guard added to denominators.
pub const DIV_EPS: f32 = 1e-8;
/// Clamp applied to cross-entropy log arguments.
pub const BCE_EPS: f32 = 1e-6;
const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg { stride: 1, pad: 0, dilation: 1, groups: 1 }
    }
}

enum Op {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Div { a: Tensor, b: Tensor },
    Relu { x: Tensor, y: Tensor },
    Sigmoid { x: Tensor, y: Tensor },
    Conv2d { x: Tensor, w: Tensor, geom: ConvGeom },
    Linear { x: Tensor, w: Tensor },
    BatchNorm { x: Tensor, gamma: Tensor, beta: Tensor, mean: Arc<Vec<f32>>, var: Arc<Vec<f32>> },
    MaxPool2 { x: Tensor, argmax: Vec<u32> },
    AdaptiveAvg { x: Tensor, out_hw: (usize, usize) },
    Bilinear { x: Tensor, out_hw: (usize, usize) },
    Concat { parts: Vec<Tensor>, axis: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    Reshape { x: Tensor },
    SumAll { x: Tensor },
    MeanAll { x: Tensor },
    BceMean { pred: Tensor, target: Tensor },
}

struct TapeEntry {
    out: NodeId,
    op: Op,
}

/// Running-statistic update produced by a training-mode batch norm, keyed by
/// opaque ids the parameter store understands.
pub struct BnUpdate {
    pub key_mean: usize,
    pub key_var: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Gradients for watched leaves, produced by [`Ctx::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        let node = t.node()?;
        self.grads.get(node)?.as_deref()
    }
}

/// Execution context. Owns the tape for one logical forward/backward pass;
/// create one per thread of execution.
pub struct Ctx {
    training: bool,
    tape: Vec<TapeEntry>,
    n_nodes: usize,
    leaf: Vec<bool>,
    cached_leaves: HashMap<usize, Tensor>,
    bn_updates: Vec<BnUpdate>,
    profile: Option<HashMap<&'static str, (f64, usize)>>,
}


impl Ctx {
    /// Recording context: ops on watched values land on the tape and batch
    /// norm runs on batch statistics.
    pub fn train() -> Ctx {
        Self::new(true)
    }

    /// Non-recording context: pure forward evaluation on running statistics.
    pub fn infer() -> Ctx {
        Self::new(false)
    }

    fn new(training: bool) -> Ctx {
        let profile = std::env::var_os("DFMNET_PROFILE").map(|_| HashMap::new());
        Ctx {
            training,
            tape: Vec::new(),
            n_nodes: 0,
            leaf: Vec::new(),
            cached_leaves: HashMap::new(),
            bn_updates: Vec::new(),
            profile,
        }
    }

    fn prof_start(&self) -> Option<std::time::Instant> {
        self.profile.as_ref().map(|_| std::time::Instant::now())
    }

    fn prof_end(&mut self, what: &'static str, start: Option<std::time::Instant>) {
        if let (Some(map), Some(s)) = (self.profile.as_mut(), start) {
            let e = map.entry(what).or_insert((0.0, 0));
            e.0 += s.elapsed().as_secs_f64();
            e.1 += 1;
        }
    }

    /// Accumulated per-op wall times (only when `DFMNET_PROFILE` is set).
    pub fn profile_report(&self) -> Option<String> {
        let map = self.profile.as_ref()?;
        let mut rows: Vec<_> = map.iter().collect();
        rows.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0));
        let mut out = String::new();
        for (what, (secs, calls)) in rows {
            out.push_str(&format!("{what:<14} {:>8.1} ms {calls:>5} calls\n", secs * 1e3));
        }
        Some(out)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn new_node(&mut self, is_leaf: bool) -> NodeId {
        let id = self.n_nodes;
        self.n_nodes += 1;
        self.leaf.push(is_leaf);
        id
    }

    /// Watch a value: gradients accumulate for it during [`Ctx::backward`].
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.training {
            return t.detached();
        }
        let id = self.new_node(true);
        t.with_node(id)
    }

    /// Watch a value at most once per context, memoized under `key`
    /// (shared parameters must map to one node so gradients sum).
    pub fn cached_leaf(&mut self, key: usize, t: &Tensor) -> Tensor {
        if !self.training {
            return t.detached();
        }
        if let Some(existing) = self.cached_leaves.get(&key) {
            return existing.clone();
        }
        let l = self.leaf(t);
        self.cached_leaves.insert(key, l.clone());
        l
    }

    /// The leaf tensor memoized under `key`, if any.
    pub fn cached_leaf_tensor(&self, key: usize) -> Option<Tensor> {
        self.cached_leaves.get(&key).cloned()
    }

    pub fn record_bn_update(&mut self, key_mean: usize, key_var: usize, mean: Vec<f32>, var: Vec<f32>) {
        self.bn_updates.push(BnUpdate { key_mean, key_var, mean, var });
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn record(&mut self, mut out: Tensor, op: Op) -> Tensor {
        let involved = self.training
            && match &op {
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                    a.node().is_some() || b.node().is_some()
                }
                Op::Relu { x, .. }
                | Op::AdaptiveAvg { x, .. }
                | Op::Bilinear { x, .. }
                | Op::MaxPool2 { x, .. }
                | Op::Narrow { x, .. }
                | Op::Reshape { x }
                | Op::SumAll { x }
                | Op::MeanAll { x } => x.node().is_some(),
                Op::Sigmoid { x, .. } => x.node().is_some(),
                Op::Conv2d { x, w, .. } | Op::Linear { x, w } => {
                    x.node().is_some() || w.node().is_some()
                }
                Op::BatchNorm { x, gamma, beta, .. } => {
                    x.node().is_some() || gamma.node().is_some() || beta.node().is_some()
                }
                Op::Concat { parts, .. } => parts.iter().any(|p| p.node().is_some()),
                Op::BceMean { pred, .. } => pred.node().is_some(),
            };
        if involved {
            let id = self.new_node(false);
            out = out.with_node(id);
            self.tape.push(TapeEntry { out: id, op });
        }
        out
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32 + Copy) -> Result<Tensor> {
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let data = if a.shape() == b.shape() {
            let mut out = vec![0.0f32; a.numel()];
            for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
            out
        } else {
            broadcast_zip(a, b, &shape, f)
        };
        Ok(Tensor::from_parts(shape, data))
    }

    fn check_finite(t: &Tensor, what: &str) -> Result<()> {
        if t.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericalError(format!("non-finite value in output of {what}")))
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let out = self.binary(a, b, |x, y| x + y)?;
        Self::check_finite(&out, "add")?;
        let __r = self.record(out, Op::Add { a: a.clone(), b: b.clone() });
        self.prof_end("elementwise", __t0);
        Ok(__r)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let out = self.binary(a, b, |x, y| x - y)?;
        Self::check_finite(&out, "sub")?;
        let __r = self.record(out, Op::Sub { a: a.clone(), b: b.clone() });
        self.prof_end("elementwise", __t0);
        Ok(__r)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let out = self.binary(a, b, |x, y| x * y)?;
        Self::check_finite(&out, "mul")?;
        let __r = self.record(out, Op::Mul { a: a.clone(), b: b.clone() });
        self.prof_end("elementwise", __t0);
        Ok(__r)
    }

    /// `a / (b + eps)`; denominators are expected non-negative.
    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let out = self.binary(a, b, |x, y| x / (y + DIV_EPS))?;
        Self::check_finite(&out, "div")?;
        let __r = self.record(out, Op::Div { a: a.clone(), b: b.clone() });
        self.prof_end("elementwise", __t0);
        Ok(__r)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let data: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let __r = self.record(out.clone(), Op::Relu { x: x.clone(), y: out });
        self.prof_end("activation", __t0);
        Ok(__r)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        // clamped away from the saturation endpoints so outputs stay inside
        // the open interval even where fp32 would round to 0 or 1
        const HI: f32 = 1.0 - f32::EPSILON;
        let data: Vec<f32> = x
            .data()
            .iter()
            .map(|&v| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                s.clamp(f32::MIN_POSITIVE, HI)
            })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let __r = self.record(out.clone(), Op::Sigmoid { x: x.clone(), y: out });
        self.prof_end("activation", __t0);
        Ok(__r)
    }

    // ---- structured ops ------------------------------------------------------

    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, cfg: Conv2dCfg) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OIHW weights, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if cfg.stride == 0 || cfg.dilation == 0 || cfg.groups == 0 {
            return Err(Error::config("conv2d stride, dilation and groups must be positive"));
        }
        let (n, c_in, h, w_) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (c_out, wc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if kh != kw {
            return Err(Error::shape("only square kernels are supported"));
        }
        if c_in % cfg.groups != 0 || c_out % cfg.groups != 0 || wc != c_in / cfg.groups {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {c_in}, weight {:?}, groups {}",
                w.shape(),
                cfg.groups
            )));
        }
        let h_out = kernels::conv_out_extent(h, kh, cfg.stride, cfg.pad, cfg.dilation)
            .ok_or_else(|| Error::shape("padded input smaller than effective kernel"))?;
        let w_out = kernels::conv_out_extent(w_, kw, cfg.stride, cfg.pad, cfg.dilation)
            .ok_or_else(|| Error::shape("padded input smaller than effective kernel"))?;
        let geom = ConvGeom {
            n, c_in, h, w: w_, c_out, k: kh,
            stride: cfg.stride, pad: cfg.pad, dilation: cfg.dilation, groups: cfg.groups,
            h_out, w_out,
        };
        let y = kernels::conv2d_fwd(x.data(), w.data(), &geom);
        let out = Tensor::from_parts(vec![n, c_out, h_out, w_out], y);
        let __r = self.record(out, Op::Conv2d { x: x.clone(), w: w.clone(), geom });
        self.prof_end("conv2d", __t0);
        Ok(__r)
    }

    /// Fully connected layer: x (N, C_in) with weights (C_out, C_in).
    pub fn linear(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) {
            return Err(Error::shape(format!(
                "linear expects (N,Ci)·(Co,Ci), got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, ci, co) = (x.dim(0), x.dim(1), w.dim(0));
        let mut y = vec![0.0f32; n * co];
        kernels::gemm_nt(n, ci, co, x.data(), w.data(), &mut y, false);
        let out = Tensor::from_parts(vec![n, co], y);
        let __r = self.record(out, Op::Linear { x: x.clone(), w: w.clone() });
        self.prof_end("linear", __t0);
        Ok(__r)
    }

    /// Batch norm over NCHW. Training mode computes batch statistics and
    /// returns them; inference mode applies the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<(Tensor, Option<(Vec<f32>, Vec<f32>)>)> {
        let __t0 = self.prof_start();
        if x.rank() != 4 {
            return Err(Error::shape("batch_norm expects NCHW"));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::shape("batch_norm parameter width mismatch"));
        }
        let hw = h * w;
        let (mean, var, batch) = if self.training {
            let (m, v) = kernels::bn_stats(x.data(), n, c, hw);
            (m.clone(), v.clone(), Some((m, v)))
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec(), None)
        };
        let y = kernels::bn_fwd(x.data(), &mean, &var, gamma.data(), beta.data(), BN_EPS, n, c, hw);
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let out = self.record(
            out,
            Op::BatchNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: Arc::new(mean),
                var: Arc::new(var),
            },
        );
        self.prof_end("batch_norm", __t0);
        Ok((out, batch))
    }

    /// 2×2 max pool with stride 2 (extents floor-halve).
    pub fn max_pool2x2(&mut self, x: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2 {
            return Err(Error::shape("max_pool2x2 needs NCHW with H,W >= 2"));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (y, argmax) = kernels::maxpool2_fwd(x.data(), n * c, h, w);
        let out = Tensor::from_parts(vec![n, c, h / 2, w / 2], y);
        let __r = self.record(out, Op::MaxPool2 { x: x.clone(), argmax });
        self.prof_end("pool", __t0);
        Ok(__r)
    }

    /// Adaptive average pooling to `bins`×`bins` (bin 1 is global average).
    pub fn adaptive_avg_pool(&mut self, x: &Tensor, bins: usize) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if x.rank() != 4 || bins == 0 || x.dim(2) < bins || x.dim(3) < bins {
            return Err(Error::shape(format!(
                "adaptive_avg_pool: cannot pool {:?} to {bins} bins",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let y = kernels::adaptive_avg_fwd(x.data(), n * c, h, w, bins, bins);
        let out = Tensor::from_parts(vec![n, c, bins, bins], y);
        let __r = self.record(out, Op::AdaptiveAvg { x: x.clone(), out_hw: (bins, bins) });
        self.prof_end("pool", __t0);
        Ok(__r)
    }

    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        self.adaptive_avg_pool(x, 1)
    }

    /// Bilinear resize (align_corners=false) to explicit output extents.
    pub fn resize_bilinear(&mut self, x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if x.rank() != 4 || oh == 0 || ow == 0 {
            return Err(Error::shape("resize_bilinear expects NCHW and positive extents"));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let y = kernels::bilinear_fwd(x.data(), n * c, h, w, oh, ow);
        let out = Tensor::from_parts(vec![n, c, oh, ow], y);
        let __r = self.record(out, Op::Bilinear { x: x.clone(), out_hw: (oh, ow) });
        self.prof_end("bilinear", __t0);
        Ok(__r)
    }

    /// Bilinear resampling by a fixed rational factor.
    pub fn resample(&mut self, x: &Tensor, num: usize, den: usize) -> Result<Tensor> {
        const ALLOWED: [(usize, usize); 9] =
            [(1, 1), (2, 1), (4, 1), (8, 1), (16, 1), (1, 2), (1, 4), (1, 8), (1, 16)];
        if !ALLOWED.contains(&(num, den)) {
            return Err(Error::config(format!("unsupported resample factor {num}/{den}")));
        }
        if x.rank() != 4 {
            return Err(Error::shape("resample expects NCHW"));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        if (h * num) % den != 0 || (w * num) % den != 0 {
            return Err(Error::config(format!(
                "resample {num}/{den} of {h}x{w} has non-integral output extents"
            )));
        }
        self.resize_bilinear(x, h * num / den, w * num / den)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::shape("concat axis out of range"));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.dim(d) != parts[0].dim(d) {
                    return Err(Error::shape(format!(
                        "concat shape mismatch: {:?} vs {:?}",
                        p.shape(),
                        parts[0].shape()
                    )));
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for p in parts {
                let span = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let __r = self.record(out, Op::Concat { parts, axis });
        self.prof_end("concat", __t0);
        Ok(__r)
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if axis >= x.rank() || start + len > x.dim(axis) || len == 0 {
            return Err(Error::shape(format!(
                "narrow axis {axis} [{start}, {start}+{len}) out of bounds for {:?}",
                x.shape()
            )));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let span = x.dim(axis) * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * span + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        let __r = self.record(out, Op::Narrow { x: x.clone(), axis, start });
        self.prof_end("narrow", __t0);
        Ok(__r)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} to {:?}", x.shape(), shape)));
        }
        let out = Tensor { shape, data: Arc::new(x.data().to_vec()), node: None };
        let __r = self.record(out, Op::Reshape { x: x.clone() });
        self.prof_end("reshape", __t0);
        Ok(__r)
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        let __r = self.record(out, Op::SumAll { x: x.clone() });
        self.prof_end("reduce", __t0);
        Ok(__r)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / x.numel() as f64) as f32);
        let __r = self.record(out, Op::MeanAll { x: x.clone() });
        self.prof_end("reduce", __t0);
        Ok(__r)
    }

    /// Mean binary cross-entropy with log arguments clamped to
    /// [BCE_EPS, 1 - BCE_EPS].
    pub fn bce_mean(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let __t0 = self.prof_start();
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce_mean shape mismatch: {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let mut acc = 0.0f64;
        for (&s, &g) in pred.data().iter().zip(target.data().iter()) {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let g = g as f64;
            acc -= g * s.ln() + (1.0 - g) * (1.0 - s).ln();
        }
        let v = (acc / pred.numel() as f64) as f32;
        if !v.is_finite() {
            return Err(Error::NumericalError("non-finite cross-entropy".into()));
        }
        let out = Tensor::scalar(v);
        let __r = self.record(out, Op::BceMean { pred: pred.clone(), target: target.clone() });
        self.prof_end("bce", __t0);
        Ok(__r)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode gradient of a scalar loss for every watched leaf.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        if self.tape.is_empty() {
            return Err(Error::EmptyTape);
        }
        if loss.numel() != 1 {
            return Err(Error::shape("backward expects a scalar loss"));
        }
        let root = loss.node().ok_or(Error::EmptyTape)?;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.n_nodes];
        grads[root] = Some(vec![1.0]);
        let mut prof: Option<HashMap<&'static str, (f64, usize)>> =
            self.profile.as_ref().map(|_| HashMap::new());

        for entry in self.tape.iter().rev() {
            let Some(gout) = grads[entry.out].take() else { continue };
            let t0 = prof.as_ref().map(|_| std::time::Instant::now());
            match &entry.op {
                Op::Add { a, b } => {
                    let shape = broadcast_shape(a.shape(), b.shape()).unwrap();
                    accumulate(&mut grads, a, reduce_to_shape(&gout, &shape, a.shape()));
                    accumulate(&mut grads, b, reduce_to_shape(&gout, &shape, b.shape()));
                }
                Op::Sub { a, b } => {
                    let shape = broadcast_shape(a.shape(), b.shape()).unwrap();
                    accumulate(&mut grads, a, reduce_to_shape(&gout, &shape, a.shape()));
                    let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                    accumulate(&mut grads, b, reduce_to_shape(&neg, &shape, b.shape()));
                }
                Op::Mul { a, b } => {
                    let shape = broadcast_shape(a.shape(), b.shape()).unwrap();
                    if a.node().is_some() {
                        let ga = broadcast_apply(&gout, b, &shape, |g, bv| g * bv);
                        accumulate(&mut grads, a, reduce_to_shape(&ga, &shape, a.shape()));
                    }
                    if b.node().is_some() {
                        let gb = broadcast_apply(&gout, a, &shape, |g, av| g * av);
                        accumulate(&mut grads, b, reduce_to_shape(&gb, &shape, b.shape()));
                    }
                }
                Op::Div { a, b } => {
                    let shape = broadcast_shape(a.shape(), b.shape()).unwrap();
                    if a.node().is_some() {
                        let ga = broadcast_apply(&gout, b, &shape, |g, bv| g / (bv + DIV_EPS));
                        accumulate(&mut grads, a, reduce_to_shape(&ga, &shape, a.shape()));
                    }
                    if b.node().is_some() {
                        let ga_full = broadcast_apply(&gout, a, &shape, |g, av| g * av);
                        let gb = broadcast_apply(&ga_full, b, &shape, |g, bv| {
                            let d = bv + DIV_EPS;
                            -g / (d * d)
                        });
                        accumulate(&mut grads, b, reduce_to_shape(&gb, &shape, b.shape()));
                    }
                }
                Op::Relu { x, y } => {
                    let gx: Vec<f32> = gout
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&g, &yv)| if yv > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, gx);
                }
                Op::Sigmoid { x, y } => {
                    let gx: Vec<f32> = gout
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&g, &yv)| g * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, x, gx);
                }
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = kernels::conv2d_bwd(x.data(), w.data(), &gout, geom);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                }
                Op::Linear { x, w } => {
                    let (n, ci, co) = (x.dim(0), x.dim(1), w.dim(0));
                    if x.node().is_some() {
                        let mut dx = vec![0.0f32; n * ci];
                        kernels::gemm(n, co, ci, &gout, w.data(), &mut dx, false);
                        accumulate(&mut grads, x, dx);
                    }
                    if w.node().is_some() {
                        let mut dw = vec![0.0f32; co * ci];
                        kernels::gemm_tn(co, n, ci, &gout, x.data(), &mut dw, false);
                        accumulate(&mut grads, w, dw);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var } => {
                    // ops record only in training contexts, where batch
                    // statistics were used
                    let (n, c, h, w_) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let (dx, dgamma, dbeta) = kernels::bn_bwd_train(
                        x.data(), &gout, mean, var, gamma.data(), BN_EPS, n, c, h * w_);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::MaxPool2 { x, argmax } => {
                    let (n, c, h, w_) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let dx = kernels::maxpool2_bwd(&gout, argmax, n * c, h, w_);
                    accumulate(&mut grads, x, dx);
                }
                Op::AdaptiveAvg { x, out_hw } => {
                    let (n, c, h, w_) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let dx = kernels::adaptive_avg_bwd(&gout, n * c, h, w_, out_hw.0, out_hw.1);
                    accumulate(&mut grads, x, dx);
                }
                Op::Bilinear { x, out_hw } => {
                    let (n, c, h, w_) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let dx = kernels::bilinear_bwd(&gout, n * c, h, w_, out_hw.0, out_hw.1);
                    accumulate(&mut grads, x, dx);
                }
                Op::Concat { parts, axis } => {
                    let axis = *axis;
                    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
                    let outer: usize = parts[0].shape()[..axis].iter().product();
                    let total_axis: usize = parts.iter().map(|p| p.dim(axis)).sum();
                    let mut off = 0usize;
                    for p in parts {
                        if p.node().is_some() {
                            let span = p.dim(axis) * inner;
                            let mut gp = Vec::with_capacity(outer * span);
                            for o in 0..outer {
                                let base = o * total_axis * inner + off * inner;
                                gp.extend_from_slice(&gout[base..base + span]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        off += p.dim(axis);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let axis = *axis;
                    let inner: usize = x.shape()[axis + 1..].iter().product();
                    let outer: usize = x.shape()[..axis].iter().product();
                    let full = x.dim(axis);
                    let len = gout.len() / (outer * inner);
                    let mut dx = vec![0.0f32; x.numel()];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = o * full * inner + start * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads, x, gout.clone());
                }
                Op::SumAll { x } => {
                    accumulate(&mut grads, x, vec![gout[0]; x.numel()]);
                }
                Op::MeanAll { x } => {
                    accumulate(&mut grads, x, vec![gout[0] / x.numel() as f32; x.numel()]);
                }
                Op::BceMean { pred, target } => {
                    let n = pred.numel() as f32;
                    let g = gout[0];
                    let dp: Vec<f32> = pred
                        .data()
                        .iter()
                        .zip(target.data().iter())
                        .map(|(&s, &t)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&s) {
                                0.0
                            } else {
                                g * (-t / s + (1.0 - t) / (1.0 - s)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, pred, dp);
                }
            }
            if let (Some(map), Some(t)) = (prof.as_mut(), t0) {
                let label = match &entry.op {
                    Op::Add { .. } | Op::Sub { .. } | Op::Mul { .. } | Op::Div { .. } => "bwd:elementwise",
                    Op::Relu { .. } | Op::Sigmoid { .. } => "bwd:activation",
                    Op::Conv2d { .. } => "bwd:conv2d",
                    Op::Linear { .. } => "bwd:linear",
                    Op::BatchNorm { .. } => "bwd:batch_norm",
                    Op::MaxPool2 { .. } | Op::AdaptiveAvg { .. } => "bwd:pool",
                    Op::Bilinear { .. } => "bwd:bilinear",
                    Op::Concat { .. } | Op::Narrow { .. } | Op::Reshape { .. } => "bwd:reorder",
                    Op::SumAll { .. } | Op::MeanAll { .. } | Op::BceMean { .. } => "bwd:reduce",
                };
                let e = map.entry(label).or_insert((0.0, 0));
                e.0 += t.elapsed().as_secs_f64();
                e.1 += 1;
            }
        }
        if let (Some(main), Some(local)) = (self.profile.as_mut(), prof) {
            for (k, v) in local {
                let e = main.entry(k).or_insert((0.0, 0));
                e.0 += v.0;
                e.1 += v.1;
            }
        }

        // Retain leaf gradients only, and verify they are usable.
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.leaf[id] {
                *g = None;
            } else if let Some(gv) = g {
                if gv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalError("non-finite gradient".into()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], t: &Tensor, g: Vec<f32>) {
    let Some(node) = t.node() else { return };
    match &mut grads[node] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Elementwise `f(a, b)` over the broadcast `shape`, with row-contiguous
/// inner loops (both operands rank ≤ 4).
fn broadcast_zip(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f32, f32) -> f32 + Copy) -> Vec<f32> {
    let full = super::pad4(shape);
    let sa = super::strides4(a.shape(), &full);
    let sb = super::strides4(b.shape(), &full);
    let n: usize = shape.iter().product();
    let mut out = vec![0.0f32; n];
    let w = full[3];
    let (ad, bd) = (a.data(), b.data());
    let mut rows = out.chunks_exact_mut(w);
    for i0 in 0..full[0] {
        for i1 in 0..full[1] {
            for i2 in 0..full[2] {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                let orow = rows.next().unwrap();
                match (sa[3], sb[3]) {
                    (1, 1) => {
                        for ((o, &x), &y) in
                            orow.iter_mut().zip(&ad[oa..oa + w]).zip(&bd[ob..ob + w])
                        {
                            *o = f(x, y);
                        }
                    }
                    (1, 0) => {
                        let y = bd[ob];
                        for (o, &x) in orow.iter_mut().zip(&ad[oa..oa + w]) {
                            *o = f(x, y);
                        }
                    }
                    (0, 1) => {
                        let x = ad[oa];
                        for (o, &y) in orow.iter_mut().zip(&bd[ob..ob + w]) {
                            *o = f(x, y);
                        }
                    }
                    _ => {
                        let v = f(ad[oa], bd[ob]);
                        orow.fill(v);
                    }
                }
            }
        }
    }
    out
}

/// Apply `f(gout, other)` elementwise where `other` broadcasts over `shape`.
fn broadcast_apply(gout: &[f32], other: &Tensor, shape: &[usize], f: impl Fn(f32, f32) -> f32 + Copy) -> Vec<f32> {
    if other.shape() == shape {
        let mut out = vec![0.0f32; gout.len()];
        for ((o, &g), &v) in out.iter_mut().zip(gout).zip(other.data()) {
            *o = f(g, v);
        }
        return out;
    }
    let full = super::pad4(shape);
    let so = super::strides4(other.shape(), &full);
    let w = full[3];
    let od = other.data();
    let mut out = vec![0.0f32; gout.len()];
    let mut orows = out.chunks_exact_mut(w);
    let mut grows = gout.chunks_exact(w);
    for i0 in 0..full[0] {
        for i1 in 0..full[1] {
            for i2 in 0..full[2] {
                let off = i0 * so[0] + i1 * so[1] + i2 * so[2];
                let orow = orows.next().unwrap();
                let grow = grows.next().unwrap();
                if so[3] == 1 {
                    for ((o, &g), &v) in orow.iter_mut().zip(grow).zip(&od[off..off + w]) {
                        *o = f(g, v);
                    }
                } else {
                    let v = od[off];
                    for (o, &g) in orow.iter_mut().zip(grow) {
                        *o = f(g, v);
                    }
                }
            }
        }
    }
    out
}
