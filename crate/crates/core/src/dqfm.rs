//! Depth quality-inspired feature manipulation.
//!
//! DQW turns the alignment between low-level RGB and depth activations into
//! five scalar gates α_i ∈ (0,1); DHA builds a holistic spatial attention
//! map β from the depth stream recalibrated by low-level cues. Fusion applies
//! `f_c = f_r + α ⊗ β ⊗ f_d` per hierarchy.

use rand::Rng;

use crate::backbone::HIERARCHY_STRIDES;
use crate::error::{Error, Result};
use crate::nn::{Act, BConv, ParamStore};
use crate::tensor::{Conv2dCfg, Ctx, Tensor};

/// Width of the transferred low-level features (matches hierarchy 1).
pub const TRANSFER_WIDTH: usize = 16;
/// Hidden width of the gate perceptron.
pub const MLP_HIDDEN: usize = 24;
/// Number of pooling scales entering the alignment vector.
pub const VBA_SCALES: usize = 3;

/// How the alignment vector is computed from the transferred features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VbaVariant {
    /// GAP(a⊗b) / GAP(a+b)
    #[default]
    Proposed,
    /// 2·GAP(a⊗b) / GAP(a²+b²)
    Dice,
    /// GAP(a+b)
    Add,
    /// GAP(a⊗b)
    Mul,
}

impl std::str::FromStr for VbaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<VbaVariant> {
        match s {
            "proposed" => Ok(VbaVariant::Proposed),
            "dice" => Ok(VbaVariant::Dice),
            "add" => Ok(VbaVariant::Add),
            "mul" => Ok(VbaVariant::Mul),
            other => Err(Error::config(format!("unknown alignment variant {other:?}"))),
        }
    }
}

/// Per-sample gate values.
#[derive(Clone, Copy, Debug)]
pub struct AlphaVector {
    pub alpha: [f32; 5],
    pub alpha_bar: f32,
}

/// Extract per-sample gate vectors from the (N,5) gate tensor.
pub fn alpha_vectors(alpha: &Tensor) -> Vec<AlphaVector> {
    debug_assert_eq!(alpha.rank(), 2);
    debug_assert_eq!(alpha.dim(1), 5);
    alpha
        .data()
        .chunks(5)
        .map(|row| {
            let mut a = [0.0f32; 5];
            a.copy_from_slice(row);
            AlphaVector { alpha: a, alpha_bar: row.iter().sum::<f32>() / 5.0 }
        })
        .collect()
}

/// The holistic attention map and its per-hierarchy resamplings.
pub struct BetaMaps {
    /// N×1 map at hierarchy-1 extents.
    pub full: Tensor,
    /// Downsampled to each hierarchy's extents.
    pub levels: [Tensor; 5],
}

/// Depth quality-inspired weighting.
pub struct Dqw {
    rgb_transfer: BConv,
    depth_transfer: BConv,
    mlp: crate::nn::GateMlp,
}

impl Dqw {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Dqw {
        Dqw {
            rgb_transfer: BConv::init(store, rng, &format!("{name}.rt"), TRANSFER_WIDTH, TRANSFER_WIDTH, 1, Act::Relu),
            depth_transfer: BConv::init(store, rng, &format!("{name}.dt"), TRANSFER_WIDTH, TRANSFER_WIDTH, 1, Act::Relu),
            mlp: crate::nn::GateMlp::init(
                store,
                rng,
                &format!("{name}.mlp"),
                VBA_SCALES * TRANSFER_WIDTH,
                MLP_HIDDEN,
                5,
            ),
        }
    }

    /// Alignment vector of one scale from already-transferred features,
    /// flattened to (N, 16).
    pub fn alignment_vector(ctx: &mut Ctx, a: &Tensor, b: &Tensor, variant: VbaVariant) -> Result<Tensor> {
        let v = match variant {
            VbaVariant::Proposed => {
                let prod = ctx.mul(a, b)?;
                let num = ctx.global_avg_pool(&prod)?;
                let sum = ctx.add(a, b)?;
                let den = ctx.global_avg_pool(&sum)?;
                ctx.div(&num, &den)?
            }
            VbaVariant::Dice => {
                let prod = ctx.mul(a, b)?;
                let num = ctx.global_avg_pool(&prod)?;
                let num2 = ctx.add(&num, &num)?;
                let a2 = ctx.mul(a, a)?;
                let b2 = ctx.mul(b, b)?;
                let sq = ctx.add(&a2, &b2)?;
                let den = ctx.global_avg_pool(&sq)?;
                ctx.div(&num2, &den)?
            }
            VbaVariant::Add => {
                let sum = ctx.add(a, b)?;
                ctx.global_avg_pool(&sum)?
            }
            VbaVariant::Mul => {
                let prod = ctx.mul(a, b)?;
                ctx.global_avg_pool(&prod)?
            }
        };
        let n = v.dim(0);
        ctx.reshape(&v, vec![n, TRANSFER_WIDTH])
    }

    /// The multi-scale alignment vector (N, 48): the full-resolution
    /// transferred features plus two stride-2 max-pooled scales.
    pub fn vba_multiscale(
        &self,
        ctx: &mut Ctx,
        store: &ParamStore,
        f_r1: &Tensor,
        f_d1: &Tensor,
        variant: VbaVariant,
    ) -> Result<Tensor> {
        if f_r1.shape() != f_d1.shape() {
            return Err(Error::shape(format!(
                "hierarchy-1 features disagree: {:?} vs {:?}",
                f_r1.shape(),
                f_d1.shape()
            )));
        }
        let mut a = self.rgb_transfer.forward(ctx, store, f_r1)?;
        let mut b = self.depth_transfer.forward(ctx, store, f_d1)?;
        let mut scales = Vec::with_capacity(VBA_SCALES);
        for s in 0..VBA_SCALES {
            if s > 0 {
                a = ctx.max_pool2x2(&a)?;
                b = ctx.max_pool2x2(&b)?;
            }
            scales.push(Self::alignment_vector(ctx, &a, &b, variant)?);
        }
        let refs: Vec<&Tensor> = scales.iter().collect();
        ctx.concat(&refs, 1)
    }

    /// Gate vector α ∈ (0,1)^5, shape (N, 5).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        store: &ParamStore,
        f_r1: &Tensor,
        f_d1: &Tensor,
        variant: VbaVariant,
    ) -> Result<Tensor> {
        let v = self.vba_multiscale(ctx, store, f_r1, f_d1, variant)?;
        self.mlp.forward(ctx, store, &v)
    }
}

/// Depth holistic attention.
pub struct Dha {
    compress: BConv,
    rgb_transfer: BConv,
    depth_transfer: BConv,
    recalib: Vec<BConv>,
    head: BConv,
}

impl Dha {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, recalib_count: usize) -> Result<Dha> {
        if recalib_count > 3 {
            return Err(Error::config(format!(
                "recalibration count {recalib_count} outside 0..=3"
            )));
        }
        let dilated = Conv2dCfg { pad: 2, dilation: 2, ..Conv2dCfg::default() };
        Ok(Dha {
            compress: BConv::init(store, rng, &format!("{name}.compress"), 320, TRANSFER_WIDTH, 1, Act::Relu),
            rgb_transfer: BConv::init(store, rng, &format!("{name}.rt"), TRANSFER_WIDTH, TRANSFER_WIDTH, 1, Act::Relu),
            depth_transfer: BConv::init(store, rng, &format!("{name}.dt"), TRANSFER_WIDTH, TRANSFER_WIDTH, 1, Act::Relu),
            recalib: (0..recalib_count)
                .map(|i| {
                    BConv::init_cfg(
                        store,
                        rng,
                        &format!("{name}.recalib{i}"),
                        TRANSFER_WIDTH,
                        TRANSFER_WIDTH,
                        3,
                        Act::Relu,
                        dilated,
                    )
                })
                .collect(),
            head: BConv::init(store, rng, &format!("{name}.head"), TRANSFER_WIDTH, 1, 3, Act::Sigmoid),
        })
    }

    pub fn recalib_count(&self) -> usize {
        self.recalib.len()
    }

    /// Holistic attention map β ∈ (0,1), shape (N, 1, H1, W1) where H1×W1
    /// are the hierarchy-1 extents, plus its per-hierarchy downsamplings.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        store: &ParamStore,
        f_r1: &Tensor,
        f_d1: &Tensor,
        f_d5: &Tensor,
    ) -> Result<BetaMaps> {
        if f_r1.shape() != f_d1.shape() {
            return Err(Error::shape(format!(
                "hierarchy-1 features disagree: {:?} vs {:?}",
                f_r1.shape(),
                f_d1.shape()
            )));
        }
        // coarse localization from the deepest depth features
        let compressed = self.compress.forward(ctx, store, f_d5)?;
        let mut f_dht = ctx.resample(&compressed, 8, 1)?;
        // common edge activation from the low-level features
        let rt = self.rgb_transfer.forward(ctx, store, f_r1)?;
        let dt = self.depth_transfer.forward(ctx, store, f_d1)?;
        let f_ec = ctx.mul(&rt, &dt)?;
        // recalibrate: down 2x, dilated 3x3, up 2x
        for conv in &self.recalib {
            let mixed = ctx.add(&f_dht, &f_ec)?;
            let down = ctx.resample(&mixed, 1, 2)?;
            let conved = conv.forward(ctx, store, &down)?;
            f_dht = ctx.resample(&conved, 2, 1)?;
        }
        let mixed = ctx.add(&f_ec, &f_dht)?;
        let full = self.head.forward(ctx, store, &mixed)?;
        let levels = beta_pyramid(ctx, &full)?;
        Ok(BetaMaps { full, levels })
    }
}

/// Downsample the full attention map to every hierarchy's extents.
pub fn beta_pyramid(ctx: &mut Ctx, full: &Tensor) -> Result<[Tensor; 5]> {
    let mut levels = Vec::with_capacity(5);
    for i in 0..5 {
        // hierarchy 1 is stride 2; the map already lives there
        let den = HIERARCHY_STRIDES[i] / HIERARCHY_STRIDES[0];
        levels.push(ctx.resample(full, 1, den)?);
    }
    levels.try_into().map_err(|_| Error::shape("beta level count"))
}

/// Cross-modal fusion `f_c = f_r + α ⊗ β ⊗ f_d`. A disabled gate passes
/// `None`, which behaves as an exact 1.
pub fn fuse(
    ctx: &mut Ctx,
    f_r: &Tensor,
    f_d: &Tensor,
    alpha: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Result<Tensor> {
    if f_r.shape() != f_d.shape() {
        return Err(Error::shape(format!(
            "fuse expects matching hierarchies, got {:?} vs {:?}",
            f_r.shape(),
            f_d.shape()
        )));
    }
    let gated = match (alpha, beta) {
        (Some(a), Some(b)) => {
            let ab = ctx.mul(a, b)?;
            ctx.mul(&ab, f_d)?
        }
        (Some(a), None) => ctx.mul(a, f_d)?,
        (None, Some(b)) => ctx.mul(b, f_d)?,
        (None, None) => f_d.clone(),
    };
    ctx.add(f_r, &gated)
}
