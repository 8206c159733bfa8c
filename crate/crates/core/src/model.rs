//! Full network assembly: encoder branches, gating, fusion, decoder and the
//! training loss.

use rand::Rng;

use crate::backbone::{DepthHead, HierarchySet, RgbBranch, Tdb};
use crate::decoder::{Decoder, GroupedFeatures};
use crate::dqfm::{alpha_vectors, fuse, AlphaVector, BetaMaps, Dha, Dqw, VbaVariant};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Ppm};
use crate::tensor::{Ctx, Tensor};

/// What the auxiliary input channel carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InputMode {
    #[default]
    Rgbd,
    Flow3,
}

impl InputMode {
    pub fn aux_channels(self) -> usize {
        match self {
            InputMode::Rgbd => 1,
            InputMode::Flow3 => 3,
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<InputMode> {
        match s {
            "rgbd" => Ok(InputMode::Rgbd),
            "flow3" => Ok(InputMode::Flow3),
            other => Err(Error::config(format!("unknown input mode {other:?}"))),
        }
    }
}

/// Which gate values feed each hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Gating {
    /// Five hierarchy-specific α_i and β_i.
    #[default]
    Multiple,
    /// The hierarchy-1 gate reused everywhere.
    Identical,
}

impl std::str::FromStr for Gating {
    type Err = Error;
    fn from_str(s: &str) -> Result<Gating> {
        match s {
            "multiple" => Ok(Gating::Multiple),
            "identical" => Ok(Gating::Identical),
            other => Err(Error::config(format!("unknown gating strategy {other:?}"))),
        }
    }
}

/// Structure and behaviour switches. `dqw`/`dha`/`recalib_count` change the
/// parameter set; `vba_variant` and `gating` only change evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub mode: InputMode,
    pub dqw: bool,
    pub dha: bool,
    pub recalib_count: usize,
    pub vba_variant: VbaVariant,
    pub gating: Gating,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: InputMode::Rgbd,
            dqw: true,
            dha: true,
            recalib_count: 2,
            vba_variant: VbaVariant::Proposed,
            gating: Gating::Multiple,
        }
    }
}

/// One training or inference sample at 256×256.
#[derive(Clone)]
pub struct Sample {
    /// 3×H×W in [0,1].
    pub rgb: Tensor,
    /// Depth (1×H×W) or flow (3×H×W) in [0,1].
    pub aux: Tensor,
    /// Binary ground truth, 1×H×W.
    pub gt: Tensor,
}

impl Sample {
    pub fn input_extent() -> usize {
        256
    }
}

/// Stack per-sample tensors into one NCHW batch.
pub fn stack_samples(tensors: &[&Tensor]) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = tensors[0].shape();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        if t.shape() != shape {
            return Err(Error::shape("cannot stack mismatched samples"));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![tensors.len()];
    out_shape.extend_from_slice(shape);
    Ok(Tensor::from_parts(out_shape, data))
}

pub struct ForwardOutput {
    /// Final saliency map, N×1×H×W in (0,1).
    pub s_c: Tensor,
    /// Coarse depth-branch prediction, same shape.
    pub s_d: Tensor,
    /// Gate tensor (N,5) when DQW ran.
    pub alpha: Option<Tensor>,
    /// Holistic attention maps when DHA ran.
    pub beta: Option<BetaMaps>,
    /// The fused hierarchies f_c^1..f_c^6 (cheap handle copies).
    pub fused: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn alpha_vectors(&self) -> Option<Vec<AlphaVector>> {
        self.alpha.as_ref().map(alpha_vectors)
    }
}

/// The assembled network.
pub struct DfmNet {
    pub cfg: ModelConfig,
    rgb: RgbBranch,
    tdb: Tdb,
    dqw: Option<Dqw>,
    dha: Option<Dha>,
    ppm: Ppm,
    decoder: Decoder,
    depth_head: DepthHead,
}

impl DfmNet {
    /// Build the network with freshly initialized weights.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<(DfmNet, ParamStore)> {
        let mut store = ParamStore::new();
        let rng = &mut crate::seeded_rng(seed);
        let model = Self::init_into(cfg, &mut store, rng)?;
        Ok((model, store))
    }

    fn init_into(cfg: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<DfmNet> {
        let rgb = RgbBranch::init(store, rng, "rgb");
        let tdb = Tdb::init(store, rng, "tdb", cfg.mode.aux_channels());
        let dqw = cfg.dqw.then(|| Dqw::init(store, rng, "dqw"));
        let dha = match cfg.dha {
            true => Some(Dha::init(store, rng, "dha", cfg.recalib_count)?),
            false => None,
        };
        let ppm = Ppm::init(store, rng, "ppm", 320);
        let decoder = Decoder::init(store, rng, "decoder", &[16, 24, 32, 96, 320, 320]);
        let depth_head = DepthHead::init(store, rng, "heads.sd");
        Ok(DfmNet { cfg, rgb, tdb, dqw, dha, ppm, decoder, depth_head })
    }

    /// Whole-graph forward pass on a batch.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        store: &ParamStore,
        rgb: &Tensor,
        aux: &Tensor,
    ) -> Result<ForwardOutput> {
        validate_input(rgb, 3, "rgb")?;
        validate_input(aux, self.cfg.mode.aux_channels(), "aux")?;
        if rgb.dim(0) != aux.dim(0) || rgb.shape()[2..] != aux.shape()[2..] {
            return Err(Error::shape(format!(
                "rgb {:?} and aux {:?} batches disagree",
                rgb.shape(),
                aux.shape()
            )));
        }

        // depth branch first: DHA needs its deepest features before fusion
        let depth: HierarchySet = self.tdb.forward(ctx, store, aux)?;
        let s_d = self.depth_head.forward(ctx, store, &depth.f[4])?;

        // hierarchy 1 of the RGB branch, then the gates
        let f_r1 = self.rgb.hierarchy(ctx, store, 1, rgb)?;
        let alpha = match &self.dqw {
            Some(dqw) => Some(dqw.forward(ctx, store, &f_r1, &depth.f[0], self.cfg.vba_variant)?),
            None => None,
        };
        let beta = match &self.dha {
            Some(dha) => Some(dha.forward(ctx, store, &f_r1, &depth.f[0], &depth.f[4])?),
            None => None,
        };

        // fuse each hierarchy and feed the result to the next RGB stage
        let n = rgb.dim(0);
        let mut fused: Vec<Tensor> = Vec::with_capacity(6);
        let mut f_r = f_r1;
        for i in 0..5 {
            let alpha_i = match &alpha {
                Some(a) => {
                    let col = match self.cfg.gating {
                        Gating::Multiple => i,
                        Gating::Identical => 0,
                    };
                    let picked = ctx.narrow(a, 1, col, 1)?;
                    Some(ctx.reshape(&picked, vec![n, 1, 1, 1])?)
                }
                None => None,
            };
            // identical gating reuses the hierarchy-1 map; its per-hierarchy
            // resamplings are exactly the level maps, so both strategies read
            // levels[i] and only the alpha column differs
            let beta_i = beta.as_ref().map(|b| b.levels[i].clone());
            let f_c = fuse(ctx, &f_r, &depth.f[i], alpha_i.as_ref(), beta_i.as_ref())?;
            fused.push(f_c.clone());
            if i < 4 {
                f_r = self.rgb.hierarchy(ctx, store, i + 2, &f_c)?;
            }
        }
        let f_c6 = self.ppm.forward(ctx, store, &fused[4])?;
        fused.push(f_c6);

        let fc: [Tensor; 6] = fused.try_into().map_err(|_| Error::shape("fused hierarchy count"))?;
        let grouped: GroupedFeatures = self.decoder.prefuse(ctx, store, &fc)?;
        let s_c = self.decoder.fullfuse(ctx, store, &grouped)?;

        if !s_c.is_finite() || !s_d.is_finite() {
            return Err(Error::NumericalError("non-finite prediction".into()));
        }
        Ok(ForwardOutput { s_c, s_d, alpha, beta, fused: fc.to_vec() })
    }

    /// Batched inference that splits the batch into `chunk`-sized pieces
    /// evaluated in parallel, each on its own context. Numerically identical
    /// to one whole-batch forward (inference never couples samples), but far
    /// friendlier to the cache at large batch sizes.
    pub fn infer_batch(
        &self,
        store: &ParamStore,
        rgb: &Tensor,
        aux: &Tensor,
        chunk: usize,
    ) -> Result<ForwardOutput> {
        use rayon::prelude::*;
        let n = rgb.dim(0);
        if chunk == 0 {
            return Err(Error::config("chunk size must be positive"));
        }
        if n <= chunk {
            let mut ctx = Ctx::infer();
            return self.forward(&mut ctx, store, rgb, aux);
        }
        let slice = |t: &Tensor, lo: usize, hi: usize| -> Tensor {
            let per = t.numel() / t.dim(0);
            let mut shape = t.shape().to_vec();
            shape[0] = hi - lo;
            Tensor::new(shape, t.data()[lo * per..hi * per].to_vec()).expect("shape")
        };
        let ranges: Vec<(usize, usize)> =
            (0..n).step_by(chunk).map(|lo| (lo, (lo + chunk).min(n))).collect();
        let parts: Result<Vec<ForwardOutput>> = ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut ctx = Ctx::infer();
                self.forward(&mut ctx, store, &slice(rgb, lo, hi), &slice(aux, lo, hi))
            })
            .collect();
        let parts = parts?;
        let cat = |pick: &dyn Fn(&ForwardOutput) -> &Tensor| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().map(pick).collect();
            let mut ctx = Ctx::infer();
            ctx.concat(&refs, 0)
        };
        let s_c = cat(&|p| &p.s_c)?;
        let s_d = cat(&|p| &p.s_d)?;
        let mut fused = Vec::with_capacity(6);
        for i in 0..6 {
            let refs: Vec<&Tensor> = parts.iter().map(|p| &p.fused[i]).collect();
            fused.push(Ctx::infer().concat(&refs, 0)?);
        }
        let alpha = match parts[0].alpha {
            Some(_) => Some(cat(&|p| p.alpha.as_ref().expect("alpha"))?),
            None => None,
        };
        // the attention maps are per-sample too; concatenate each level
        let beta = match parts[0].beta {
            Some(_) => {
                let full = {
                    let refs: Vec<&Tensor> =
                        parts.iter().map(|p| &p.beta.as_ref().expect("beta").full).collect();
                    Ctx::infer().concat(&refs, 0)?
                };
                let mut levels = Vec::with_capacity(5);
                for i in 0..5 {
                    let refs: Vec<&Tensor> =
                        parts.iter().map(|p| &p.beta.as_ref().expect("beta").levels[i]).collect();
                    levels.push(Ctx::infer().concat(&refs, 0)?);
                }
                Some(BetaMaps {
                    full,
                    levels: levels.try_into().map_err(|_| Error::shape("beta levels"))?,
                })
            }
            None => None,
        };
        Ok(ForwardOutput { s_c, s_d, alpha, beta, fused })
    }

    /// Run only what the gate audit needs: hierarchy-1 features plus DQW.
    pub fn infer_alpha(
        &self,
        ctx: &mut Ctx,
        store: &ParamStore,
        rgb: &Tensor,
        aux: &Tensor,
    ) -> Result<Tensor> {
        let dqw = self
            .dqw
            .as_ref()
            .ok_or_else(|| Error::config("this model was built without the DQW gate"))?;
        let f_r1 = self.rgb.hierarchy(ctx, store, 1, rgb)?;
        let depth = self.tdb.forward(ctx, store, aux)?;
        dqw.forward(ctx, store, &f_r1, &depth.f[0], self.cfg.vba_variant)
    }

    /// The DQW module, when the configuration carries one.
    pub fn dqw(&self) -> Option<&Dqw> {
        self.dqw.as_ref()
    }

    pub fn rgb_branch(&self) -> &RgbBranch {
        &self.rgb
    }

    pub fn tdb(&self) -> &Tdb {
        &self.tdb
    }
}

fn validate_input(t: &Tensor, channels: usize, what: &str) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("{what} input must be NCHW, got {:?}", t.shape())));
    }
    if t.dim(1) != channels {
        return Err(Error::ModeMismatch(format!(
            "{what} input expects {channels} channels, got {:?}",
            t.shape()
        )));
    }
    let (h, w) = (t.dim(2), t.dim(3));
    if h % 32 != 0 || w % 32 != 0 || h < 96 || w < 96 {
        return Err(Error::shape(format!(
            "{what} extents must be multiples of 32 and at least 96, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Total loss: cross-entropy of the final map plus deep supervision on the
/// coarse depth prediction.
pub fn loss(ctx: &mut Ctx, s_c: &Tensor, s_d: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let l_c = ctx.bce_mean(s_c, gt)?;
    let l_d = ctx.bce_mean(s_d, gt)?;
    ctx.add(&l_c, &l_d)
}

/// Rebuild a model around weights loaded by name. The structural parts of
/// the configuration (mode, gate presence, recalibration count) are derived
/// from the names and must agree with `cfg`.
pub fn from_named_tensors(
    cfg: ModelConfig,
    tensors: Vec<(String, Tensor)>,
) -> Result<(DfmNet, ParamStore)> {
    let derived = derive_structure(&tensors)?;
    if derived.mode != cfg.mode {
        return Err(Error::ModeMismatch(format!(
            "weights are for {:?} input, requested {:?}",
            derived.mode, cfg.mode
        )));
    }
    if derived.dqw != cfg.dqw || derived.dha != cfg.dha
        || (cfg.dha && derived.recalib_count != cfg.recalib_count)
    {
        return Err(Error::config(format!(
            "weight structure (dqw={}, dha={}, recalib={}) does not match requested flags \
             (dqw={}, dha={}, recalib={})",
            derived.dqw, derived.dha, derived.recalib_count, cfg.dqw, cfg.dha, cfg.recalib_count
        )));
    }
    let (model, mut store) = DfmNet::init(cfg, 0)?;
    if tensors.len() != store.len() {
        return Err(Error::CorruptFile(format!(
            "expected {} tensors for this configuration, file has {}",
            store.len(),
            tensors.len()
        )));
    }
    for (name, value) in tensors {
        let id = store
            .by_name(&name)
            .ok_or_else(|| Error::CorruptFile(format!("unexpected tensor {name:?}")))?;
        if store.get(id).shape() != value.shape() {
            return Err(Error::CorruptFile(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, value);
    }
    Ok((model, store))
}

/// Structure switches recoverable from stored tensor names/shapes.
pub struct DerivedStructure {
    pub mode: InputMode,
    pub dqw: bool,
    pub dha: bool,
    pub recalib_count: usize,
}

pub fn derive_structure(tensors: &[(String, Tensor)]) -> Result<DerivedStructure> {
    let first = tensors
        .iter()
        .find(|(n, _)| n == "tdb.h1.b0.expand.w")
        .ok_or_else(|| Error::CorruptFile("missing depth-branch stem tensor".into()))?;
    let mode = match first.1.dim(1) {
        1 => InputMode::Rgbd,
        3 => InputMode::Flow3,
        c => {
            return Err(Error::CorruptFile(format!(
                "depth-branch stem has {c} input channels"
            )))
        }
    };
    let dqw = tensors.iter().any(|(n, _)| n.starts_with("dqw."));
    let dha = tensors.iter().any(|(n, _)| n.starts_with("dha."));
    let recalib_count = (0..4)
        .take_while(|i| tensors.iter().any(|(n, _)| n.starts_with(&format!("dha.recalib{i}."))))
        .count();
    Ok(DerivedStructure { mode, dqw, dha, recalib_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;
    use crate::testrng;

    fn tiny_batch(seed: u64, n: usize, mode: InputMode) -> (Tensor, Tensor, Tensor) {
        let mut rng = testrng(seed);
        let rgb = random_tensor(&mut rng, &[n, 3, 128, 128], 0.0, 1.0);
        let aux = random_tensor(&mut rng, &[n, mode.aux_channels(), 128, 128], 0.0, 1.0);
        let gt_data: Vec<f32> =
            (0..n * 128 * 128).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let gt = Tensor::from_parts(vec![n, 1, 128, 128], gt_data);
        (rgb, aux, gt)
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let (model, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
        let (rgb, aux, _) = tiny_batch(1, 1, InputMode::Rgbd);
        let mut ctx = Ctx::infer();
        let out = model.forward(&mut ctx, &store, &rgb, &aux).unwrap();
        assert_eq!(out.s_c.shape(), &[1, 1, 128, 128]);
        assert_eq!(out.s_d.shape(), &[1, 1, 128, 128]);
        assert!(out.s_c.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.s_d.iter().all(|&v| v > 0.0 && v < 1.0));
        let alphas = out.alpha_vectors().unwrap();
        assert_eq!(alphas.len(), 1);
        assert!(alphas[0].alpha_bar > 0.0 && alphas[0].alpha_bar < 1.0);
        assert!(out.beta.is_some());
    }

    #[test]
    fn disabled_gates_reduce_to_plain_addition() {
        // with DQW and DHA off, f_c = f_r + f_d exactly; spot-check via a
        // baseline model sharing the enabled model's branch weights is
        // covered in the acceptance suite. Here: flags drop the subtrees.
        let cfg = ModelConfig { dqw: false, dha: false, ..ModelConfig::default() };
        let (model, store) = DfmNet::init(cfg, 0).unwrap();
        assert!(store.by_name("dqw.rt.w").is_none());
        assert!(store.by_name("dha.head.w").is_none());
        let (rgb, aux, _) = tiny_batch(2, 1, InputMode::Rgbd);
        let mut ctx = Ctx::infer();
        let out = model.forward(&mut ctx, &store, &rgb, &aux).unwrap();
        assert!(out.alpha.is_none());
        assert!(out.beta.is_none());
    }

    #[test]
    fn flow_mode_takes_three_channel_aux() {
        let cfg = ModelConfig { mode: InputMode::Flow3, ..ModelConfig::default() };
        let (model, store) = DfmNet::init(cfg, 0).unwrap();
        let (rgb, aux, _) = tiny_batch(3, 1, InputMode::Flow3);
        let mut ctx = Ctx::infer();
        assert!(model.forward(&mut ctx, &store, &rgb, &aux).is_ok());
        // single-channel aux is a mode error
        let bad = Tensor::zeros(&[1, 1, 128, 128]);
        assert!(matches!(
            model.forward(&mut ctx, &store, &rgb, &bad),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, store) = DfmNet::init(ModelConfig::default(), 7).unwrap();
        let (rgb, aux, _) = tiny_batch(4, 1, InputMode::Rgbd);
        let mut c1 = Ctx::infer();
        let a = model.forward(&mut c1, &store, &rgb, &aux).unwrap();
        let mut c2 = Ctx::infer();
        let b = model.forward(&mut c2, &store, &rgb, &aux).unwrap();
        assert!(a.s_c.bit_eq(&b.s_c));
        assert!(a.s_d.bit_eq(&b.s_d));
    }

    #[test]
    fn loss_composition() {
        let mut ctx = Ctx::infer();
        let half = Tensor::full(&[1, 1, 4, 4], 0.5);
        let gt = Tensor::zeros(&[1, 1, 4, 4]);
        let l = loss(&mut ctx, &half, &half, &gt).unwrap();
        assert!((l.item() - 2.0 * std::f32::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn structure_derivation_roundtrip() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig { dqw: false, ..ModelConfig::default() },
            ModelConfig { dha: false, ..ModelConfig::default() },
            ModelConfig { mode: InputMode::Flow3, recalib_count: 0, ..ModelConfig::default() },
        ] {
            let (_, store) = DfmNet::init(cfg, 0).unwrap();
            let tensors: Vec<(String, Tensor)> =
                store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
            let derived = derive_structure(&tensors).unwrap();
            assert_eq!(derived.mode, cfg.mode);
            assert_eq!(derived.dqw, cfg.dqw);
            assert_eq!(derived.dha, cfg.dha);
            if cfg.dha {
                assert_eq!(derived.recalib_count, cfg.recalib_count);
            }
        }
    }
}
