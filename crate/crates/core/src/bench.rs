//! Efficiency measurement: the N·B/T throughput protocol and exact
//! parameter/size accounting.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::DfmNet;
use crate::nn::ParamStore;
use crate::tensor::{Ctx, Tensor};

/// Inference speed in frames per second: `N·B / T`.
pub fn s_fps(n: usize, b: usize, t_seconds: f64) -> f64 {
    assert!(n >= 1 && b >= 1 && t_seconds > 0.0);
    (n * b) as f64 / t_seconds
}

/// Throughput measurement configuration. `n` batched forwards are timed
/// after `warmup` unmeasured ones, over a fixed random input.
#[derive(Clone, Copy, Debug)]
pub struct ThroughputCfg {
    pub batch: usize,
    pub n: usize,
    pub warmup: usize,
    pub input_hw: usize,
    pub seed: u64,
}

impl Default for ThroughputCfg {
    fn default() -> Self {
        ThroughputCfg { batch: 1, n: 100, warmup: 3, input_hw: 256, seed: 0 }
    }
}

fn bench_inputs(model: &DfmNet, cfg: &ThroughputCfg) -> (Tensor, Tensor) {
    let mut rng = crate::seeded_rng(cfg.seed);
    let hw = cfg.input_hw;
    let rgb = crate::tensor::gradcheck::random_tensor(&mut rng, &[cfg.batch, 3, hw, hw], 0.0, 1.0);
    let aux = crate::tensor::gradcheck::random_tensor(
        &mut rng,
        &[cfg.batch, model.cfg.mode.aux_channels(), hw, hw],
        0.0,
        1.0,
    );
    (rgb, aux)
}

/// Samples per chunk when a large batch is split across workers.
pub const BATCH_CHUNK: usize = 4;

/// Frames per second over `cfg.n` timed batched forwards.
pub fn measure_throughput(model: &DfmNet, store: &ParamStore, cfg: &ThroughputCfg) -> Result<f64> {
    if cfg.batch == 0 || cfg.n == 0 {
        return Err(Error::config("throughput needs batch >= 1 and n >= 1"));
    }
    let (rgb, aux) = bench_inputs(model, cfg);
    for _ in 0..cfg.warmup {
        model.infer_batch(store, &rgb, &aux, BATCH_CHUNK)?;
    }
    let start = Instant::now();
    for _ in 0..cfg.n {
        model.infer_batch(store, &rgb, &aux, BATCH_CHUNK)?;
    }
    let t = start.elapsed().as_secs_f64();
    Ok(s_fps(cfg.n, cfg.batch, t))
}

/// Median single-inference latency in milliseconds at batch 1
/// (5 measured repetitions after 3 warmup runs).
pub fn measure_latency_ms(model: &DfmNet, store: &ParamStore, input_hw: usize) -> Result<f64> {
    let cfg = ThroughputCfg { batch: 1, input_hw, ..ThroughputCfg::default() };
    let (rgb, aux) = bench_inputs(model, &cfg);
    for _ in 0..3 {
        let mut ctx = Ctx::infer();
        model.forward(&mut ctx, store, &rgb, &aux)?;
    }
    let mut times: Vec<f64> = (0..5)
        .map(|_| -> Result<f64> {
            let start = Instant::now();
            let mut ctx = Ctx::infer();
            model.forward(&mut ctx, store, &rgb, &aux)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[2])
}

/// Byte/parameter accounting for one named subtree.
#[derive(Clone, Debug)]
pub struct SubtreeSize {
    pub prefix: String,
    pub param_count: usize,
    pub bytes: u64,
}

/// Exact size accounting over the stored tensors, grouped by the first
/// path segment. Totals are reported in MB = 10^6 bytes.
pub struct SizeReport {
    pub subtrees: Vec<SubtreeSize>,
    pub total_count: usize,
    pub total_bytes: u64,
}

impl SizeReport {
    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }

    pub fn subtree_mb(&self, prefix: &str) -> f64 {
        self.subtrees
            .iter()
            .find(|s| s.prefix == prefix)
            .map(|s| s.bytes as f64 / 1e6)
            .unwrap_or(0.0)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("subtree        params       bytes        MB\n");
        for s in &self.subtrees {
            out.push_str(&format!(
                "{:<12} {:>9} {:>11} {:>9.3}\n",
                s.prefix,
                s.param_count,
                s.bytes,
                s.bytes as f64 / 1e6
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>9} {:>11} {:>9.3}\n",
            "total",
            self.total_count,
            self.total_bytes,
            self.total_mb()
        ));
        out
    }
}

pub fn size_report(store: &ParamStore) -> SizeReport {
    let mut subtrees: Vec<SubtreeSize> = Vec::new();
    for (_, p) in store.iter() {
        let prefix = p.name.split('.').next().unwrap_or("").to_string();
        let count = p.value.numel();
        match subtrees.iter_mut().find(|s| s.prefix == prefix) {
            Some(s) => {
                s.param_count += count;
                s.bytes += 4 * count as u64;
            }
            None => subtrees.push(SubtreeSize { prefix, param_count: count, bytes: 4 * count as u64 }),
        }
    }
    let total_count = store.total_floats();
    SizeReport { subtrees, total_count, total_bytes: 4 * total_count as u64 }
}
