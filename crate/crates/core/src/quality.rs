//! Boundary-alignment depth-quality auditing.
//!
//! An edge probability map is computed for the RGB image (via luma) and the
//! depth map with a Sobel operator; their Dice coefficient measures how well
//! depth boundaries follow image boundaries. Aggregated over a pair set,
//! aligned pairs score visibly higher than deliberately mismatched ones.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// Sobel gradient magnitude of a single-channel map, normalized by its
/// maximum (an all-flat image maps to all zeros). Output values lie in [0,1].
pub fn edge_map(img: &Tensor) -> Tensor {
    let (h, w) = match img.rank() {
        2 => (img.dim(0), img.dim(1)),
        3 => (img.dim(1), img.dim(2)),
        _ => panic!("edge_map expects (H,W) or (1,H,W), got {:?}", img.shape()),
    };
    let d = img.data();
    let px = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let mut mag = vec![0.0f32; h * w];
    // each gradient is a difference of two identically-shaped weighted sums,
    // so flat regions cancel exactly in fp32
    let tap = |a: f32, b: f32, c: f32| a + 2.0 * b + c;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = tap(px(y - 1, x + 1), px(y, x + 1), px(y + 1, x + 1))
                - tap(px(y - 1, x - 1), px(y, x - 1), px(y + 1, x - 1));
            let gy = tap(px(y + 1, x - 1), px(y + 1, x), px(y + 1, x + 1))
                - tap(px(y - 1, x - 1), px(y - 1, x), px(y - 1, x + 1));
            mag[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().fold(0.0f32, |a, &b| a.max(b));
    if max > 0.0 {
        for v in &mut mag {
            *v /= max;
        }
    }
    Tensor::from_parts(vec![h, w], mag)
}

/// Luma of a 3×H×W image in [0,1].
pub fn luma(rgb: &Tensor) -> Tensor {
    debug_assert_eq!(rgb.rank(), 3);
    debug_assert_eq!(rgb.dim(0), 3);
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let d = rgb.data();
    let hw = h * w;
    let data: Vec<f32> = (0..hw)
        .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
        .collect();
    Tensor::from_parts(vec![h, w], data)
}

/// Continuous Dice coefficient between two edge maps:
/// `2·Σ(a·b) / (Σa² + Σb² + eps)`. Equals 1 for identical nonzero maps.
pub fn dice_alignment(e_rgb: &Tensor, e_depth: &Tensor) -> f32 {
    debug_assert_eq!(e_rgb.shape(), e_depth.shape());
    let mut inter = 0.0f64;
    let mut norm = 0.0f64;
    for (&a, &b) in e_rgb.data().iter().zip(e_depth.data().iter()) {
        let (a, b) = (a as f64, b as f64);
        inter += a * b;
        norm += a * a + b * b;
    }
    (2.0 * inter / (norm + EPS)) as f32
}

/// One RGB-depth pair queued for auditing.
pub struct QualityPair {
    pub id: String,
    /// 3×H×W in [0,1].
    pub rgb: Tensor,
    /// 1×H×W (or H×W) in [0,1].
    pub depth: Tensor,
}

/// Per-pair audit entry.
#[derive(Clone, Debug)]
pub struct SampleQuality {
    pub id: String,
    pub c_dice: f32,
    pub alpha_bar: Option<f32>,
}

/// Aggregated audit over one pair set.
pub struct QualityReport {
    pub per_sample: Vec<SampleQuality>,
    pub mean: f32,
    pub std: f32,
    /// 20 uniform bins over [0,1]; counts sum to the sample count.
    pub histogram: [u32; 20],
}

impl QualityReport {
    fn from_scores(per_sample: Vec<SampleQuality>) -> QualityReport {
        let n = per_sample.len() as f64;
        let mean = per_sample.iter().map(|s| s.c_dice as f64).sum::<f64>() / n;
        let var = per_sample
            .iter()
            .map(|s| (s.c_dice as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let mut histogram = [0u32; 20];
        for s in &per_sample {
            let bin = ((s.c_dice * 20.0) as usize).min(19);
            histogram[bin] += 1;
        }
        QualityReport { per_sample, mean: mean as f32, std: var.sqrt() as f32, histogram }
    }
}

/// Derangement of 0..n (no element stays in place), seeded.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    assert!(n >= 2, "a derangement needs at least two elements");
    let mut rng = crate::seeded_rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Audit a pair set. With `shuffle`, depth maps are reassigned by a
/// derangement before scoring — individual images are untouched, only the
/// pairing changes. `alpha_of` optionally attaches a learned quality gate
/// average per (possibly reassigned) pair.
pub fn audit_set(
    pairs: &[QualityPair],
    shuffle: bool,
    seed: u64,
    alpha_of: Option<&(dyn Fn(&Tensor, &Tensor) -> Result<f32> + Sync)>,
) -> Result<QualityReport> {
    if pairs.is_empty() || (shuffle && pairs.len() < 2) {
        return Err(Error::EmptySet);
    }
    let assignment: Vec<usize> = if shuffle {
        derangement(pairs.len(), seed)
    } else {
        (0..pairs.len()).collect()
    };
    let per_sample: Result<Vec<SampleQuality>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let depth = &pairs[assignment[i]].depth;
            let e_rgb = edge_map(&luma(&p.rgb));
            let e_depth = edge_map(depth);
            let alpha_bar = match alpha_of {
                Some(f) => Some(f(&p.rgb, depth)?),
                None => None,
            };
            Ok(SampleQuality { id: p.id.clone(), c_dice: dice_alignment(&e_rgb, &e_depth), alpha_bar })
        })
        .collect();
    Ok(QualityReport::from_scores(per_sample?))
}

/// Welch's two-sample t statistic and one-sided p-value for mean(a) > mean(b),
/// using the normal approximation (sample sizes here are in the hundreds).
pub fn welch_one_sided(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    let t = (ma - mb) / (va / na + vb / nb).sqrt();
    (t, 1.0 - normal_cdf(t))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 rational approximation (abs error < 1.5e-7).
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}
