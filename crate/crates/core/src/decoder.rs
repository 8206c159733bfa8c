//! Two-stage decoder.
//!
//! Pre-fusion compresses every fused hierarchy to 16 channels, applies
//! channel attention, and groups the six hierarchies into a low-level and a
//! high-level sum. Full-fusion concatenates the two groups and predicts the
//! full-resolution saliency map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, ConvLayer, DsConv, ParamId, ParamStore};
use crate::tensor::{Conv2dCfg, Ctx, Tensor};

/// Unified channel width after compression.
pub const COMPRESSED_WIDTH: usize = 16;

/// The grouped hierarchies: low-level at hierarchy-1 extents, high-level at
/// hierarchy-5 extents.
pub struct GroupedFeatures {
    pub low: Tensor,
    pub high: Tensor,
}

pub struct Decoder {
    compress: Vec<DsConv>,
    attention: Vec<ChannelAttention>,
    head_ds1: DsConv,
    head_ds2: DsConv,
    head_conv: ConvLayer,
    head_bias: ParamId,
}

impl Decoder {
    /// `channels` lists the six fused hierarchy widths (f_c^1..f_c^6).
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: &[usize; 6]) -> Decoder {
        let compress = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| DsConv::init(store, rng, &format!("{name}.cp{}", i + 1), c, COMPRESSED_WIDTH))
            .collect();
        let attention = (0..6)
            .map(|i| ChannelAttention::init(store, rng, &format!("{name}.ca{}", i + 1), COMPRESSED_WIDTH))
            .collect();
        Decoder {
            compress,
            attention,
            head_ds1: DsConv::init(store, rng, &format!("{name}.head.ds1"), 2 * COMPRESSED_WIDTH, COMPRESSED_WIDTH),
            head_ds2: DsConv::init(store, rng, &format!("{name}.head.ds2"), COMPRESSED_WIDTH, COMPRESSED_WIDTH),
            head_conv: ConvLayer::init(
                store,
                rng,
                &format!("{name}.head.out"),
                COMPRESSED_WIDTH,
                1,
                3,
                Conv2dCfg { pad: 1, ..Conv2dCfg::default() },
            ),
            head_bias: store.add(format!("{name}.head.out.b"), Tensor::zeros(&[1, 1, 1]), true),
        }
    }

    /// Compress, attend, and group the six fused hierarchies.
    pub fn prefuse(&self, ctx: &mut Ctx, store: &ParamStore, fc: &[Tensor; 6]) -> Result<GroupedFeatures> {
        let mut compressed = Vec::with_capacity(6);
        for (i, f) in fc.iter().enumerate() {
            let c = self.compress[i].forward(ctx, store, f)?;
            compressed.push(self.attention[i].forward(ctx, store, &c)?);
        }
        // low group: hierarchies 1..3 upsampled by 2^(i-1) and summed
        let mut low = compressed[0].clone();
        for (i, c) in compressed.iter().enumerate().take(3).skip(1) {
            let factor = 1usize << i;
            let up = ctx.resample(c, factor, 1)?;
            low = ctx.add(&low, &up)?;
        }
        // high group: hierarchies 4..6 share extents, plain sum
        let mut high = compressed[3].clone();
        for c in compressed.iter().take(6).skip(4) {
            high = ctx.add(&high, c)?;
        }
        if low.dim(2) != high.dim(2) * 8 {
            return Err(Error::shape(format!(
                "grouped extents inconsistent: low {:?}, high {:?}",
                low.shape(),
                high.shape()
            )));
        }
        Ok(GroupedFeatures { low, high })
    }

    /// Concatenate the groups and predict the saliency map at input extents.
    pub fn fullfuse(&self, ctx: &mut Ctx, store: &ParamStore, g: &GroupedFeatures) -> Result<Tensor> {
        let high_up = ctx.resample(&g.high, 8, 1)?;
        let cat = ctx.concat(&[&g.low, &high_up], 1)?;
        let h = self.head_ds1.forward(ctx, store, &cat)?;
        let h = self.head_ds2.forward(ctx, store, &h)?;
        let h = self.head_conv.forward(ctx, store, &h)?;
        let b = ctx.cached_leaf(self.head_bias.0, store.get(self.head_bias));
        let h = ctx.add(&h, &b)?;
        let h = ctx.sigmoid(&h)?;
        ctx.resample(&h, 2, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::HIERARCHY_CHANNELS;
    use crate::tensor::gradcheck::random_tensor;
    use crate::testrng;

    fn fused_set(rng: &mut impl Rng, base: usize) -> [Tensor; 6] {
        let extents = [base, base / 2, base / 4, base / 8, base / 8, base / 8];
        let channels = [
            HIERARCHY_CHANNELS[0],
            HIERARCHY_CHANNELS[1],
            HIERARCHY_CHANNELS[2],
            HIERARCHY_CHANNELS[3],
            HIERARCHY_CHANNELS[4],
            HIERARCHY_CHANNELS[4],
        ];
        let v: Vec<Tensor> = (0..6)
            .map(|i| random_tensor(rng, &[1, channels[i], extents[i], extents[i]], -1.0, 1.0))
            .collect();
        v.try_into().unwrap()
    }

    fn decoder_channels() -> [usize; 6] {
        [16, 24, 32, 96, 320, 320]
    }

    #[test]
    fn grouped_extents() {
        let mut store = ParamStore::new();
        let mut rng = testrng(0);
        let dec = Decoder::init(&mut store, &mut rng, "dec", &decoder_channels());
        let fc = fused_set(&mut rng, 64);
        let mut ctx = Ctx::infer();
        let g = dec.prefuse(&mut ctx, &store, &fc).unwrap();
        assert_eq!(g.low.shape(), &[1, 16, 64, 64]);
        assert_eq!(g.high.shape(), &[1, 16, 8, 8]);
        let s = dec.fullfuse(&mut ctx, &store, &g).unwrap();
        assert_eq!(s.shape(), &[1, 1, 128, 128]);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn grouping_sums_commute() {
        // permuting hierarchy order inside each sum leaves the groups exact
        let mut store = ParamStore::new();
        let mut rng = testrng(1);
        let dec = Decoder::init(&mut store, &mut rng, "dec", &decoder_channels());
        let fc = fused_set(&mut rng, 32);
        let mut ctx = Ctx::infer();

        let mut compressed = Vec::new();
        for (i, f) in fc.iter().enumerate() {
            let c = dec.compress[i].forward(&mut ctx, &store, f).unwrap();
            compressed.push(dec.attention[i].forward(&mut ctx, &store, &c).unwrap());
        }
        let up2 = ctx.resample(&compressed[1], 2, 1).unwrap();
        let up4 = ctx.resample(&compressed[2], 4, 1).unwrap();
        // (c1 + up2) + up4 versus (up4 + up2) + c1: identical value by
        // commutativity of the additions involved
        let a = ctx.add(&compressed[0], &up2).unwrap();
        let a = ctx.add(&a, &up4).unwrap();
        let b = ctx.add(&up4, &up2).unwrap();
        let b = ctx.add(&b, &compressed[0]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn fullfuse_concat_width_is_32() {
        let mut store = ParamStore::new();
        let rng = &mut testrng(2);
        let dec = Decoder::init(&mut store, rng, "dec", &decoder_channels());
        assert_eq!(store.get(dec.head_ds1.dw.w).shape(), &[32, 1, 3, 3]);
    }

    #[test]
    fn zero_inputs_yield_zero_groups() {
        let mut store = ParamStore::new();
        let mut rng = testrng(3);
        let dec = Decoder::init(&mut store, &mut rng, "dec", &decoder_channels());
        let channels = decoder_channels();
        let extents = [32usize, 16, 8, 4, 4, 4];
        let zeros: Vec<Tensor> =
            (0..6).map(|i| Tensor::zeros(&[1, channels[i], extents[i], extents[i]])).collect();
        let fc: [Tensor; 6] = zeros.try_into().unwrap();
        let mut ctx = Ctx::infer();
        let g = dec.prefuse(&mut ctx, &store, &fc).unwrap();
        assert!(g.low.iter().all(|&v| v == 0.0));
        assert!(g.high.iter().all(|&v| v == 0.0));
    }
}
