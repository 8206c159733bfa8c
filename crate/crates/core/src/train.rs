//! Training loop: Adam with a poly learning-rate schedule, flip/crop
//! augmentation, batch-norm statistic tracking, and the joint-training
//! pairing for video input.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{loss, stack_samples, DfmNet, InputMode, Sample};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Ctx, Tensor};

/// Training hyperparameters. Defaults follow the reference recipe: Adam at
/// 1e-4, batch size 10, poly decay with power 0.9.
#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f32,
    pub seed: u64,
    pub augment: bool,
    /// Running-statistic momentum for batch norm.
    pub bn_momentum: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-4,
            batch_size: 10,
            epochs: 300,
            poly_power: 0.9,
            seed: 0,
            augment: true,
            bn_momentum: 0.1,
        }
    }
}

/// Poly learning-rate schedule: `lr0 * (1 - t/T)^power`.
pub fn poly_lr(lr0: f32, step: usize, total_steps: usize, power: f32) -> f32 {
    let t = (step as f32 / total_steps.max(1) as f32).min(1.0);
    lr0 * (1.0 - t).powf(power)
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam optimizer over the trainable entries of a parameter store.
pub struct Adam {
    ids: Vec<ParamId>,
    state: Vec<AdamState>,
    t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let ids = store.trainable_ids();
        let state = ids
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                AdamState { m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        Adam { ids, state, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Apply one update. `grad_of` maps a parameter id to its gradient;
    /// parameters without a gradient this step are left untouched.
    pub fn step<'g>(
        &mut self,
        store: &mut ParamStore,
        lr: f32,
        grad_of: impl Fn(ParamId) -> Option<&'g [f32]>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, &id) in self.ids.iter().enumerate() {
            let Some(grad) = grad_of(id) else { continue };
            let st = &mut self.state[idx];
            let old = store.get(id);
            let mut new = old.data().to_vec();
            for i in 0..new.len() {
                let g = grad[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                new[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(id, Tensor::from_parts(old.shape().to_vec(), new));
        }
    }
}

/// Blend freshly observed batch statistics into the running entries.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<crate::tensor::BnUpdate>, momentum: f32) {
    for u in updates {
        let mean_id = ParamId(u.key_mean);
        let var_id = ParamId(u.key_var);
        let old_mean = store.get(mean_id).data().to_vec();
        let old_var = store.get(var_id).data().to_vec();
        let n: Vec<f32> = old_mean
            .iter()
            .zip(u.mean.iter())
            .map(|(&o, &b)| (1.0 - momentum) * o + momentum * b)
            .collect();
        let v: Vec<f32> = old_var
            .iter()
            .zip(u.var.iter())
            .map(|(&o, &b)| (1.0 - momentum) * o + momentum * b)
            .collect();
        let shape = store.get(mean_id).shape().to_vec();
        store.set(mean_id, Tensor::from_parts(shape.clone(), n));
        store.set(var_id, Tensor::from_parts(shape, v));
    }
}

// ---- augmentation ------------------------------------------------------------

fn flip_w(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = vec![0.0f32; t.numel()];
    let d = t.data();
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = d[row + (w - 1 - x)];
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn crop_resize(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut cropped = vec![0.0f32; c * ch * cw];
    let d = t.data();
    for chn in 0..c {
        for y in 0..ch {
            let src = (chn * h + y0 + y) * w + x0;
            let dst = (chn * ch + y) * cw;
            cropped[dst..dst + cw].copy_from_slice(&d[src..src + cw]);
        }
    }
    let out = crate::tensor::kernels::bilinear_fwd(&cropped, c, ch, cw, h, w);
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn binarize(t: &Tensor) -> Tensor {
    let data: Vec<f32> = t.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Random horizontal flip plus random crop-and-resize, applied identically
/// to image, auxiliary map and ground truth. The ground truth is
/// re-binarized after interpolation.
pub fn augment_sample(s: &Sample, rng: &mut impl Rng) -> Sample {
    let mut rgb = s.rgb.clone();
    let mut aux = s.aux.clone();
    let mut gt = s.gt.clone();
    if rng.random::<bool>() {
        rgb = flip_w(&rgb);
        aux = flip_w(&aux);
        gt = flip_w(&gt);
    }
    // crop scale in [0.75, 1.0)
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let scale: f32 = rng.random_range(0.75..1.0);
    let ch = ((h as f32 * scale) as usize).max(1);
    let cw = ((w as f32 * scale) as usize).max(1);
    let y0 = rng.random_range(0..=(h - ch));
    let x0 = rng.random_range(0..=(w - cw));
    if ch < h || cw < w {
        rgb = crop_resize(&rgb, y0, x0, ch, cw);
        aux = crop_resize(&aux, y0, x0, ch, cw);
        gt = binarize(&crop_resize(&gt, y0, x0, ch, cw));
    }
    Sample { rgb, aux, gt }
}

// ---- the loop -----------------------------------------------------------------

/// Owns one training run: model, weights, optimizer and data order.
pub struct Trainer {
    pub model: DfmNet,
    pub store: ParamStore,
    opt: Adam,
    hyper: Hyper,
    data: Vec<Sample>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: DfmNet, store: ParamStore, data: Vec<Sample>, hyper: Hyper) -> Result<Trainer> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let steps_per_epoch = data.len().div_ceil(hyper.batch_size);
        let total_steps = steps_per_epoch * hyper.epochs;
        let opt = Adam::new(&store);
        let mut rng = crate::seeded_rng(hyper.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(Trainer { model, store, opt, hyper, data, order, cursor: 0, rng, step: 0, total_steps })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn next_batch(&mut self) -> Vec<Sample> {
        let bs = self.hyper.batch_size.min(self.data.len());
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = &self.data[self.order[self.cursor]];
            self.cursor += 1;
            batch.push(if self.hyper.augment {
                augment_sample(s, &mut self.rng)
            } else {
                s.clone()
            });
        }
        batch
    }

    /// One optimizer step on the next batch. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let batch = self.next_batch();
        let rgbs: Vec<&Tensor> = batch.iter().map(|s| &s.rgb).collect();
        let auxs: Vec<&Tensor> = batch.iter().map(|s| &s.aux).collect();
        let gts: Vec<&Tensor> = batch.iter().map(|s| &s.gt).collect();
        let rgb = stack_samples(&rgbs)?;
        let aux = stack_samples(&auxs)?;
        let gt = stack_samples(&gts)?;

        let mut ctx = Ctx::train();
        let out = self.model.forward(&mut ctx, &self.store, &rgb, &aux)?;
        let l = loss(&mut ctx, &out.s_c, &out.s_d, &gt)?;
        let grads = ctx.backward(&l)?;

        let lr = poly_lr(self.hyper.lr, self.step, self.total_steps, self.hyper.poly_power);
        // gradients are looked up through the leaf tensors the ctx cached
        let leaf_of = |id: ParamId| ctx_leaf_grad(&ctx, &grads, id);
        self.opt.step(&mut self.store, lr, leaf_of);
        apply_bn_updates(&mut self.store, ctx.take_bn_updates(), self.hyper.bn_momentum);
        self.step += 1;
        Ok(l.item())
    }

    /// Mean loss over the full dataset in inference mode.
    pub fn eval_loss(&self) -> Result<f32> {
        let mut total = 0.0f64;
        for s in &self.data {
            let mut ctx = Ctx::infer();
            let rgb = stack_samples(&[&s.rgb])?;
            let aux = stack_samples(&[&s.aux])?;
            let gt = stack_samples(&[&s.gt])?;
            let out = self.model.forward(&mut ctx, &self.store, &rgb, &aux)?;
            total += loss(&mut ctx, &out.s_c, &out.s_d, &gt)?.item() as f64;
        }
        Ok((total / self.data.len() as f64) as f32)
    }

    pub fn into_parts(self) -> (DfmNet, ParamStore) {
        (self.model, self.store)
    }
}

fn ctx_leaf_grad<'g>(
    ctx: &Ctx,
    grads: &'g crate::tensor::Gradients,
    id: ParamId,
) -> Option<&'g [f32]> {
    ctx.cached_leaf_tensor(id.0).and_then(|t| grads.get(&t))
}

/// Run the full schedule.
pub fn train(model: DfmNet, store: ParamStore, data: Vec<Sample>, hyper: Hyper) -> Result<(DfmNet, ParamStore)> {
    let mut tr = Trainer::new(model, store, data, hyper)?;
    for _ in 0..tr.total_steps {
        tr.train_step()?;
    }
    Ok(tr.into_parts())
}

/// Pair still images with an all-black auxiliary map so they can join video
/// training batches.
pub fn make_joint_pairs(mode: InputMode, stills: Vec<(Tensor, Tensor)>) -> Result<Vec<Sample>> {
    if mode != InputMode::Flow3 {
        return Err(Error::ModeMismatch(
            "joint pseudo-pairs are only defined for flow input".into(),
        ));
    }
    stills
        .into_iter()
        .map(|(rgb, gt)| {
            let (h, w) = (rgb.dim(1), rgb.dim(2));
            Ok(Sample { rgb, aux: Tensor::zeros(&[3, h, w]), gt })
        })
        .collect()
}
