//! Named parameter storage and the layer blocks the network is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dCfg, Ctx, Tensor};

/// One stored tensor: a weight, a bias, or a batch-norm statistic.
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Gradients are produced and applied only for trainable entries;
    /// batch-norm running statistics are stored but not trained.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Store index, also used as the context leaf-cache key.
    pub fn key(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter collection. Insertion order is the
/// deterministic initialization and serialization order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn total_floats(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn subtree_floats(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

// ---- initializers -----------------------------------------------------------

/// Fan-in scaled normal for convolution weights.
pub fn init_conv_weight(
    rng: &mut impl Rng,
    c_out: usize,
    c_in_per_group: usize,
    k: usize,
) -> Tensor {
    let fan_in = (c_in_per_group * k * k) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
    let n = c_out * c_in_per_group * k * k;
    let data: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(vec![c_out, c_in_per_group, k, k], data)
}

/// Uniform ±1/sqrt(fan_in) for fully connected weights and biases.
pub fn init_fc(rng: &mut impl Rng, c_out: usize, c_in: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (c_in as f32).sqrt();
    let w: Vec<f32> = (0..c_out * c_in).map(|_| rng.random_range(-bound..bound)).collect();
    let b: Vec<f32> = (0..c_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::from_parts(vec![c_out, c_in], w),
        Tensor::from_parts(vec![c_out], b),
    )
}

// ---- layers -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Sigmoid,
    None,
}

pub struct ConvLayer {
    pub w: ParamId,
    pub cfg: Conv2dCfg,
}

impl ConvLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: Conv2dCfg,
    ) -> ConvLayer {
        let w = init_conv_weight(rng, c_out, c_in / cfg.groups, k);
        ConvLayer { w: store.add(format!("{name}.w"), w, true), cfg }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = ctx.cached_leaf(self.w.0, store.get(self.w));
        ctx.conv2d(x, &w, self.cfg)
    }
}

pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnLayer {
    pub fn init(store: &mut ParamStore, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            var: store.add(format!("{name}.running_var"), Tensor::ones(&[c]), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let gamma = ctx.cached_leaf(self.gamma.0, store.get(self.gamma));
        let beta = ctx.cached_leaf(self.beta.0, store.get(self.beta));
        let (y, batch_stats) =
            ctx.batch_norm(x, &gamma, &beta, store.get(self.mean), store.get(self.var))?;
        if let Some((m, v)) = batch_stats {
            ctx.record_bn_update(self.mean.0, self.var.0, m, v);
        }
        Ok(y)
    }
}

fn activate(ctx: &mut Ctx, act: Act, x: &Tensor) -> Result<Tensor> {
    match act {
        Act::Relu => ctx.relu(x),
        Act::Sigmoid => ctx.sigmoid(x),
        Act::None => Ok(x.clone()),
    }
}

/// Convolution followed by batch norm and an activation. Spatial extents are
/// preserved (pad = (k-1)/2 at stride 1).
pub struct BConv {
    pub conv: ConvLayer,
    pub bn: BnLayer,
    pub act: Act,
}

impl BConv {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        act: Act,
    ) -> BConv {
        Self::init_cfg(store, rng, name, c_in, c_out, k, act, Conv2dCfg {
            pad: (k - 1) / 2,
            ..Conv2dCfg::default()
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_cfg(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        act: Act,
        cfg: Conv2dCfg,
    ) -> BConv {
        BConv {
            conv: ConvLayer::init(store, rng, name, c_in, c_out, k, cfg),
            bn: BnLayer::init(store, &format!("{name}.bn"), c_out),
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(ctx, store, x)?;
        let y = self.bn.forward(ctx, store, &y)?;
        activate(ctx, self.act, &y)
    }
}

/// 3×3 depthwise separable convolution: depthwise then pointwise, each
/// followed by batch norm and ReLU.
pub struct DsConv {
    pub dw: ConvLayer,
    pub dw_bn: BnLayer,
    pub pw: ConvLayer,
    pub pw_bn: BnLayer,
}

impl DsConv {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> DsConv {
        let dw_cfg = Conv2dCfg { pad: 1, groups: c_in, ..Conv2dCfg::default() };
        DsConv {
            dw: ConvLayer::init(store, rng, &format!("{name}.dw"), c_in, c_in, 3, dw_cfg),
            dw_bn: BnLayer::init(store, &format!("{name}.dw.bn"), c_in),
            pw: ConvLayer::init(store, rng, &format!("{name}.pw"), c_in, c_out, 1, Conv2dCfg::default()),
            pw_bn: BnLayer::init(store, &format!("{name}.pw.bn"), c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(ctx, store, x)?;
        let y = self.dw_bn.forward(ctx, store, &y)?;
        let y = ctx.relu(&y)?;
        let y = self.pw.forward(ctx, store, &y)?;
        let y = self.pw_bn.forward(ctx, store, &y)?;
        ctx.relu(&y)
    }
}

/// Inverted residual bottleneck: expand 1×1 → depthwise 3×3 → project 1×1,
/// with a skip connection at stride 1 when channels match.
pub struct Irb {
    expand: Option<(ConvLayer, BnLayer)>,
    dw: (ConvLayer, BnLayer),
    project: (ConvLayer, BnLayer),
    residual: bool,
}

impl Irb {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
        stride: usize,
    ) -> Irb {
        assert!(expansion >= 1 && (stride == 1 || stride == 2));
        let hidden = c_in * expansion;
        let expand = (expansion != 1).then(|| {
            (
                ConvLayer::init(store, rng, &format!("{name}.expand"), c_in, hidden, 1, Conv2dCfg::default()),
                BnLayer::init(store, &format!("{name}.expand.bn"), hidden),
            )
        });
        let dw_cfg = Conv2dCfg { stride, pad: 1, groups: hidden, ..Conv2dCfg::default() };
        Irb {
            expand,
            dw: (
                ConvLayer::init(store, rng, &format!("{name}.dw"), hidden, hidden, 3, dw_cfg),
                BnLayer::init(store, &format!("{name}.dw.bn"), hidden),
            ),
            project: (
                ConvLayer::init(store, rng, &format!("{name}.project"), hidden, c_out, 1, Conv2dCfg::default()),
                BnLayer::init(store, &format!("{name}.project.bn"), c_out),
            ),
            residual: stride == 1 && c_in == c_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(ctx, store, &h)?;
            h = bn.forward(ctx, store, &h)?;
            h = ctx.relu(&h)?;
        }
        h = self.dw.0.forward(ctx, store, &h)?;
        h = self.dw.1.forward(ctx, store, &h)?;
        h = ctx.relu(&h)?;
        h = self.project.0.forward(ctx, store, &h)?;
        h = self.project.1.forward(ctx, store, &h)?;
        if self.residual {
            h = ctx.add(&h, x)?;
        }
        Ok(h)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Linear {
        let (w, b) = init_fc(rng, c_out, c_in);
        Linear {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), b, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = ctx.cached_leaf(self.w.0, store.get(self.w));
        let b = ctx.cached_leaf(self.b.0, store.get(self.b));
        let y = ctx.linear(x, &w)?;
        ctx.add(&y, &b)
    }
}

/// Two fully connected layers with a ReLU between and a sigmoid at the end.
pub struct GateMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GateMlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> GateMlp {
        GateMlp {
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), c_in, hidden),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), hidden, c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(ctx, store, x)?;
        let h = ctx.relu(&h)?;
        let h = self.fc2.forward(ctx, store, &h)?;
        ctx.sigmoid(&h)
    }
}

/// Squeeze-excitation channel attention with reduction ratio 4.
pub struct ChannelAttention {
    mlp: GateMlp,
    channels: usize,
}

impl ChannelAttention {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> ChannelAttention {
        let hidden = (c / 4).max(1);
        ChannelAttention { mlp: GateMlp::init(store, rng, name, c, hidden, c), channels: c }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0);
        let pooled = ctx.global_avg_pool(x)?;
        let flat = ctx.reshape(&pooled, vec![n, self.channels])?;
        let scale = self.mlp.forward(ctx, store, &flat)?;
        let scale = ctx.reshape(&scale, vec![n, self.channels, 1, 1])?;
        ctx.mul(x, &scale)
    }

    /// Per-channel gate values for one input, without applying them.
    pub fn gate(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0);
        let pooled = ctx.global_avg_pool(x)?;
        let flat = ctx.reshape(&pooled, vec![n, self.channels])?;
        self.mlp.forward(ctx, store, &flat)
    }
}

/// Pyramid pooling over bins {1,2,3,6}: each bin is pooled, compressed by a
/// 1×1 conv, upsampled back and concatenated with the input, then fused.
pub struct Ppm {
    branches: Vec<(usize, ConvLayer, BnLayer)>,
    fuse: BConv,
}

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];
pub const PPM_BRANCH_WIDTH: usize = 80;

impl Ppm {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Ppm {
        let branches = PPM_BINS
            .iter()
            .map(|&bin| {
                let prefix = format!("{name}.bin{bin}");
                (
                    bin,
                    ConvLayer::init(store, rng, &prefix, c, PPM_BRANCH_WIDTH, 1, Conv2dCfg::default()),
                    BnLayer::init(store, &format!("{prefix}.bn"), PPM_BRANCH_WIDTH),
                )
            })
            .collect();
        let fused_in = c + PPM_BINS.len() * PPM_BRANCH_WIDTH;
        Ppm {
            branches,
            fuse: BConv::init(store, rng, &format!("{name}.fuse"), fused_in, c, 1, Act::Relu),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.dim(2), x.dim(3));
        let mut parts: Vec<Tensor> = vec![x.clone()];
        for (bin, conv, bn) in &self.branches {
            let pooled = ctx.adaptive_avg_pool(x, *bin)?;
            let compressed = conv.forward(ctx, store, &pooled)?;
            let compressed = bn.forward(ctx, store, &compressed)?;
            let compressed = ctx.relu(&compressed)?;
            parts.push(ctx.resize_bilinear(&compressed, h, w)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = ctx.concat(&refs, 1)?;
        self.fuse.forward(ctx, store, &cat)
    }
}
