//! The two encoder branches.
//!
//! The RGB branch follows the MobileNet-V2 layer table truncated at the
//! 320-channel stage, cut into five hierarchies at the stride transitions so
//! the channel schedule (16, 24, 32, 96, 320) matches the depth branch. The
//! last stage runs at stride 1, so spatial extents shrink only through the
//! first four hierarchies.
//!
//! The depth branch is a 15-block inverted-residual stack with heavily
//! reduced expansion factors and repeats.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BnLayer, ConvLayer, Irb, ParamId, ParamStore};
use crate::tensor::{Conv2dCfg, Ctx, Tensor};

/// Channels produced by each hierarchy, shared by both branches.
pub const HIERARCHY_CHANNELS: [usize; 5] = [16, 24, 32, 96, 320];

/// Output stride of each hierarchy relative to the input image.
pub const HIERARCHY_STRIDES: [usize; 5] = [2, 4, 8, 16, 16];

/// Depth-branch rows: (expansion, channels, repeats, stride).
pub const TDB_ROWS: [(usize, usize, usize, usize); 5] =
    [(3, 16, 1, 2), (3, 24, 3, 2), (3, 32, 7, 2), (2, 96, 3, 2), (2, 320, 1, 1)];

/// The five per-hierarchy feature maps of one encoder branch.
pub struct HierarchySet {
    pub f: [Tensor; 5],
}

impl HierarchySet {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.f.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Tailored depth backbone: five rows of inverted residual blocks.
pub struct Tdb {
    rows: Vec<Vec<Irb>>,
    pub in_channels: usize,
}

impl Tdb {
    /// `in_channels` is 1 for depth input and 3 for optical-flow input.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_channels: usize) -> Tdb {
        let mut rows = Vec::new();
        let mut c_in = in_channels;
        for (hi, &(t, c, n, s)) in TDB_ROWS.iter().enumerate() {
            let mut row = Vec::new();
            for b in 0..n {
                let stride = if b == 0 { s } else { 1 };
                row.push(Irb::init(
                    store,
                    rng,
                    &format!("{name}.h{}.b{b}", hi + 1),
                    c_in,
                    c,
                    t,
                    stride,
                ));
                c_in = c;
            }
            rows.push(row);
        }
        Tdb { rows, in_channels }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, depth: &Tensor) -> Result<HierarchySet> {
        if depth.rank() != 4 || depth.dim(1) != self.in_channels {
            return Err(Error::ModeMismatch(format!(
                "depth branch expects {} input channels, got shape {:?}",
                self.in_channels,
                depth.shape()
            )));
        }
        let mut x = depth.clone();
        let mut outs: Vec<Tensor> = Vec::with_capacity(5);
        for row in &self.rows {
            for block in row {
                x = block.forward(ctx, store, &x)?;
            }
            outs.push(x.clone());
        }
        Ok(HierarchySet { f: outs.try_into().map_err(|_| Error::shape("hierarchy count"))? })
    }
}

/// MobileNet-V2 rows used for the RGB branch (expansion, channels, repeats,
/// stride), truncated at the 320-channel layer. The 160-row stride is forced
/// to 1 to keep the last hierarchy at stride 16.
const RGB_ROWS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 1),
    (6, 320, 1, 1),
];

/// RGB encoder branch. Hierarchy `i` consumes the fused output of hierarchy
/// `i-1` (or the image for i=1) and produces `f_r^i`.
pub struct RgbBranch {
    stem: (ConvLayer, BnLayer),
    blocks: Vec<Irb>,
    /// Block index ranges per hierarchy.
    cuts: [std::ops::Range<usize>; 5],
}

impl RgbBranch {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> RgbBranch {
        let stem_cfg = Conv2dCfg { stride: 2, pad: 1, ..Conv2dCfg::default() };
        let stem = (
            ConvLayer::init(store, rng, &format!("{name}.stem"), 3, 32, 3, stem_cfg),
            BnLayer::init(store, &format!("{name}.stem.bn"), 32),
        );
        let mut blocks = Vec::new();
        let mut c_in = 32;
        let mut row_end = [0usize; 7];
        for (ri, &(t, c, n, s)) in RGB_ROWS.iter().enumerate() {
            for b in 0..n {
                let stride = if b == 0 { s } else { 1 };
                blocks.push(Irb::init(
                    store,
                    rng,
                    &format!("{name}.r{ri}.b{b}"),
                    c_in,
                    c,
                    t,
                    stride,
                ));
                c_in = c;
            }
            row_end[ri] = blocks.len();
        }
        // Hierarchies end after the 16-, 24-, 32-, 96- and 320-channel rows.
        let cuts = [
            0..row_end[0],
            row_end[0]..row_end[1],
            row_end[1]..row_end[2],
            row_end[2]..row_end[4],
            row_end[4]..row_end[6],
        ];
        RgbBranch { stem, blocks, cuts }
    }

    /// Run hierarchy `i` (1-based). For `i == 1` the stem convolution is
    /// applied first.
    pub fn hierarchy(&self, ctx: &mut Ctx, store: &ParamStore, i: usize, x: &Tensor) -> Result<Tensor> {
        if !(1..=5).contains(&i) {
            return Err(Error::config(format!("hierarchy index {i} out of range")));
        }
        let mut h = x.clone();
        if i == 1 {
            if h.rank() != 4 || h.dim(1) != 3 {
                return Err(Error::ModeMismatch(format!(
                    "rgb branch expects 3 input channels, got shape {:?}",
                    h.shape()
                )));
            }
            h = self.stem.0.forward(ctx, store, &h)?;
            h = self.stem.1.forward(ctx, store, &h)?;
            h = ctx.relu(&h)?;
        }
        for block in &self.blocks[self.cuts[i - 1].clone()] {
            h = block.forward(ctx, store, &h)?;
        }
        Ok(h)
    }
}

/// Coarse prediction head on the deepest depth features: 1×1 conv to one
/// channel, sigmoid, then 16× bilinear upsampling back to the input extents.
pub struct DepthHead {
    conv: ConvLayer,
    bias: ParamId,
}

impl DepthHead {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> DepthHead {
        DepthHead {
            conv: ConvLayer::init(store, rng, name, 320, 1, 1, Conv2dCfg::default()),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, 1, 1]), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, f_d5: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(ctx, store, f_d5)?;
        let b = ctx.cached_leaf(self.bias.0, store.get(self.bias));
        let y = ctx.add(&y, &b)?;
        let y = ctx.sigmoid(&y)?;
        ctx.resample(&y, 16, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testrng;

    fn small_input(c: usize, hw: usize) -> Tensor {
        let mut rng = testrng(11);
        crate::tensor::gradcheck::random_tensor(&mut rng, &[1, c, hw, hw], 0.0, 1.0)
    }

    #[test]
    fn tdb_shape_trace_matches_row_table() {
        let mut store = ParamStore::new();
        let mut rng = testrng(0);
        let tdb = Tdb::init(&mut store, &mut rng, "tdb", 1);
        let mut ctx = Ctx::infer();
        let hs = tdb.forward(&mut ctx, &store, &small_input(1, 256)).unwrap();
        assert_eq!(
            hs.shapes(),
            vec![
                vec![1, 16, 128, 128],
                vec![1, 24, 64, 64],
                vec![1, 32, 32, 32],
                vec![1, 96, 16, 16],
                vec![1, 320, 16, 16],
            ]
        );
    }

    #[test]
    fn tdb_has_15_blocks() {
        let total: usize = TDB_ROWS.iter().map(|r| r.2).sum();
        assert_eq!(total, 15);
    }

    #[test]
    fn tdb_flow_mode_takes_three_channels() {
        let mut store = ParamStore::new();
        let mut rng = testrng(1);
        let tdb = Tdb::init(&mut store, &mut rng, "tdb", 3);
        let mut ctx = Ctx::infer();
        let hs = tdb.forward(&mut ctx, &store, &small_input(3, 64)).unwrap();
        assert_eq!(hs.f[0].shape(), &[1, 16, 32, 32]);
        // single-channel input is a mode error
        assert!(matches!(
            tdb.forward(&mut ctx, &store, &small_input(1, 64)),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn rgb_branch_channel_schedule() {
        let mut store = ParamStore::new();
        let mut rng = testrng(2);
        let rgb = RgbBranch::init(&mut store, &mut rng, "rgb");
        let mut ctx = Ctx::infer();
        let mut x = small_input(3, 128);
        let mut shapes = Vec::new();
        for i in 1..=5 {
            x = rgb.hierarchy(&mut ctx, &store, i, &x).unwrap();
            shapes.push(x.shape().to_vec());
        }
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 64, 64],
                vec![1, 24, 32, 32],
                vec![1, 32, 16, 16],
                vec![1, 96, 8, 8],
                vec![1, 320, 8, 8],
            ]
        );
    }

    #[test]
    fn depth_head_zeroed_gives_uniform_half() {
        let mut store = ParamStore::new();
        let mut rng = testrng(3);
        let head = DepthHead::init(&mut store, &mut rng, "sd");
        let w = store.by_name("sd.w").unwrap();
        store.set(w, Tensor::zeros(&[1, 320, 1, 1]));
        let mut ctx = Ctx::infer();
        let f_d5 = small_input(320, 16);
        let y = head.forward(&mut ctx, &store, &f_d5).unwrap();
        assert_eq!(y.shape(), &[1, 1, 256, 256]);
        assert!(y.iter().all(|&v| v == 0.5));
    }
}
