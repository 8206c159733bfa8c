//! Saliency evaluation metrics: MAE, maximum F-measure, structure measure
//! and maximum enhanced-alignment measure.
//!
//! The S- and E-measure follow their original reference definitions,
//! including the degenerate-ground-truth special cases (benchmark sets
//! contain all-background frames).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;
/// Thresholds used by the max-metrics sweeps.
pub const SWEEP_LEVELS: usize = 256;
/// β² in the F-measure, per the usual saliency convention.
pub const F_BETA_SQ: f64 = 0.3;

/// Scores of one prediction against one ground truth (or a dataset mean).
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalResult {
    pub s_alpha: f64,
    pub f_beta_max: f64,
    pub e_xi_max: f64,
    pub mae: f64,
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<()> {
    if s.shape() != g.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} disagree",
            s.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(s: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(s, g)?;
    let sum: f64 = s
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / s.numel() as f64)
}

fn thresholds(levels: usize) -> impl Iterator<Item = f64> {
    (0..levels).map(move |k| k as f64 / (levels - 1) as f64)
}

/// F-measure at `levels` uniform binarization thresholds (strict `S > t`,
/// so an all-zero prediction has zero recall everywhere), maximized.
pub fn f_measure_max_at(s: &Tensor, g: &Tensor, levels: usize) -> Result<f64> {
    check_pair(s, g)?;
    let gt_pos = g.data().iter().filter(|&&v| v >= 0.5).count() as f64;
    let mut best = 0.0f64;
    for t in thresholds(levels) {
        let mut tp = 0.0f64;
        let mut pred_pos = 0.0f64;
        for (&sv, &gv) in s.data().iter().zip(g.data().iter()) {
            if sv as f64 > t {
                pred_pos += 1.0;
                if gv >= 0.5 {
                    tp += 1.0;
                }
            }
        }
        if pred_pos == 0.0 || gt_pos == 0.0 || tp == 0.0 {
            continue; // F = 0 at this threshold
        }
        let p = tp / pred_pos;
        let r = tp / gt_pos;
        let f = (1.0 + F_BETA_SQ) * p * r / (F_BETA_SQ * p + r);
        best = best.max(f);
    }
    Ok(best)
}

pub fn f_measure_max(s: &Tensor, g: &Tensor) -> Result<f64> {
    f_measure_max_at(s, g, SWEEP_LEVELS)
}

// ---- structure measure -------------------------------------------------------

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (N-1).
fn std_of(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn object_score(pred_region: &[f64]) -> f64 {
    if pred_region.is_empty() {
        return 0.0;
    }
    let x = mean_of(pred_region);
    let sigma = std_of(pred_region, x);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(s: &[f64], g: &[f64]) -> f64 {
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &gv)| gv >= 0.5).map(|(&sv, _)| sv).collect();
    let bg: Vec<f64> =
        s.iter().zip(g).filter(|(_, &gv)| gv < 0.5).map(|(&sv, _)| 1.0 - sv).collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Region similarity used inside the structure measure.
fn region_ssim(s: &[f64], g: &[f64]) -> f64 {
    let n = s.len() as f64;
    if s.is_empty() {
        return 0.0;
    }
    let x = mean_of(s);
    let y = mean_of(g);
    let (mut sx, mut sy, mut sxy) = (0.0f64, 0.0, 0.0);
    for (&sv, &gv) in s.iter().zip(g) {
        sx += (sv - x) * (sv - x);
        sy += (gv - y) * (gv - y);
        sxy += (sv - x) * (gv - y);
    }
    let denom = (n - 1.0).max(1.0);
    sx /= denom;
    sy /= denom;
    sxy /= denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid of the ground truth as exclusive block split points;
/// the image midpoint when the ground truth is empty.
fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.iter().filter(|&&v| v >= 0.5).count() as f64;
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for yy in 0..h {
        for xx in 0..w {
            if g[yy * w + xx] >= 0.5 {
                sx += (xx + 1) as f64;
                sy += (yy + 1) as f64;
            }
        }
    }
    (
        ((sx / total).round() as usize).clamp(1, w),
        ((sy / total).round() as usize).clamp(1, h),
    )
}

fn block(v: &[f64], w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((y1 - y0) * (x1 - x0));
    for y in y0..y1 {
        out.extend_from_slice(&v[y * w + x0..y * w + x1]);
    }
    out
}

fn s_region(s: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let area = (h * w) as f64;
    let blocks = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut q = 0.0f64;
    for &(y0, y1, x0, x1) in &blocks {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
        let sb = block(s, w, y0, y1, x0, x1);
        let gb = block(g, w, y0, y1, x0, x1);
        q += weight * region_ssim(&sb, &gb);
    }
    q
}

/// Structure measure: 0.5·S_object + 0.5·S_region, with the mean-based
/// fallbacks for all-background and all-foreground ground truth.
pub fn s_measure(s: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(s, g)?;
    let (h, w) = plane_dims(s)?;
    let sd: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
    let gd: Vec<f64> = g.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let y = mean_of(&gd);
    let q = if y == 0.0 {
        1.0 - mean_of(&sd)
    } else if y == 1.0 {
        mean_of(&sd)
    } else {
        0.5 * s_object(&sd, &gd) + 0.5 * s_region(&sd, &gd, h, w)
    };
    Ok(q.clamp(0.0, 1.0))
}

// ---- enhanced alignment --------------------------------------------------------

fn e_measure_binary(fm: &[bool], g: &[bool]) -> f64 {
    let n = fm.len() as f64;
    let gt_pos = g.iter().filter(|&&v| v).count() as f64;
    let enhanced_sum: f64 = if gt_pos == 0.0 {
        fm.iter().map(|&v| if v { 0.0 } else { 1.0 }).sum()
    } else if gt_pos == n {
        fm.iter().map(|&v| if v { 1.0 } else { 0.0 }).sum()
    } else {
        let mu_fm = fm.iter().filter(|&&v| v).count() as f64 / n;
        let mu_gt = gt_pos / n;
        fm.iter()
            .zip(g)
            .map(|(&f, &gt)| {
                let phi_fm = (f as u8) as f64 - mu_fm;
                let phi_gt = (gt as u8) as f64 - mu_gt;
                let align = 2.0 * phi_gt * phi_fm / (phi_gt * phi_gt + phi_fm * phi_fm + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    enhanced_sum / (n - 1.0 + EPS)
}

/// Enhanced-alignment measure at `levels` thresholds, maximized.
pub fn e_measure_max_at(s: &Tensor, g: &Tensor, levels: usize) -> Result<f64> {
    check_pair(s, g)?;
    let gb: Vec<bool> = g.data().iter().map(|&v| v >= 0.5).collect();
    let mut best = 0.0f64;
    for t in thresholds(levels) {
        let fm: Vec<bool> = s.data().iter().map(|&v| v as f64 > t).collect();
        best = best.max(e_measure_binary(&fm, &gb));
    }
    Ok(best.clamp(0.0, 1.0))
}

pub fn e_measure_max(s: &Tensor, g: &Tensor) -> Result<f64> {
    e_measure_max_at(s, g, SWEEP_LEVELS)
}

/// All four metrics for one pair.
pub fn evaluate(s: &Tensor, g: &Tensor) -> Result<EvalResult> {
    Ok(EvalResult {
        s_alpha: s_measure(s, g)?,
        f_beta_max: f_measure_max(s, g)?,
        e_xi_max: e_measure_max(s, g)?,
        mae: mae(s, g)?,
    })
}

/// Dataset aggregation: plain mean per metric.
pub fn aggregate(results: &[EvalResult]) -> EvalResult {
    let n = results.len().max(1) as f64;
    EvalResult {
        s_alpha: results.iter().map(|r| r.s_alpha).sum::<f64>() / n,
        f_beta_max: results.iter().map(|r| r.f_beta_max).sum::<f64>() / n,
        e_xi_max: results.iter().map(|r| r.e_xi_max).sum::<f64>() / n,
        mae: results.iter().map(|r| r.mae).sum::<f64>() / n,
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        2 => Ok((t.dim(0), t.dim(1))),
        3 if t.dim(0) == 1 => Ok((t.dim(1), t.dim(2))),
        4 if t.dim(0) == 1 && t.dim(1) == 1 => Ok((t.dim(2), t.dim(3))),
        _ => Err(Error::shape(format!("expected a single-channel map, got {:?}", t.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;
    use crate::testrng;
    use rand::Rng;

    fn checker(h: usize, w: usize) -> Tensor {
        let data: Vec<f32> =
            (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect();
        Tensor::from_parts(vec![h, w], data)
    }

    #[test]
    fn mae_trivial_cases() {
        let g = checker(4, 4);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        let inv = Tensor::from_parts(vec![4, 4], g.iter().map(|&v| 1.0 - v).collect());
        assert_eq!(mae(&inv, &g).unwrap(), 1.0);
        let s = Tensor::new(vec![2], vec![0.2, 0.8]).unwrap();
        let gt = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!((mae(&s, &gt).unwrap() - 0.2).abs() < 1e-7);
    }

    #[test]
    fn f_measure_trivial_cases() {
        let g = checker(4, 4);
        assert_eq!(f_measure_max(&g, &g).unwrap(), 1.0);
        let zero = Tensor::zeros(&[4, 4]);
        assert_eq!(f_measure_max(&zero, &g).unwrap(), 0.0);
        // 2x2 case: S=[0.9,0.1;0.1,0.9], G=diag: some threshold separates
        let s = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let gt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f_measure_max(&s, &gt).unwrap(), 1.0);
    }

    #[test]
    fn s_and_e_perfect_match() {
        let g = checker(8, 8);
        assert!((s_measure(&g, &g).unwrap() - 1.0).abs() < 1e-6);
        assert!((e_measure_max(&g, &g).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn s_and_e_inverted_prediction_scores_low() {
        // fixed 8x8 case: left half foreground
        let mut gd = vec![0.0f32; 64];
        for y in 0..8 {
            for x in 0..4 {
                gd[y * 8 + x] = 1.0;
            }
        }
        let g = Tensor::from_parts(vec![8, 8], gd.clone());
        let s = Tensor::from_parts(vec![8, 8], gd.iter().map(|&v| 1.0 - v).collect());
        assert!(s_measure(&s, &g).unwrap() < 0.5);
        assert!(e_measure_max(&s, &g).unwrap() < 0.5);
    }

    #[test]
    fn degenerate_gt_fallbacks() {
        let zero_g = Tensor::zeros(&[6, 6]);
        let s = Tensor::full(&[6, 6], 0.1);
        // all-background: 1 - mean(S)
        assert!((s_measure(&s, &zero_g).unwrap() - 0.9).abs() < 1e-6);
        let one_g = Tensor::ones(&[6, 6]);
        assert!((s_measure(&s, &one_g).unwrap() - 0.1).abs() < 1e-6);
        // e-measure rewards empty predictions on empty gt
        let zero_s = Tensor::zeros(&[6, 6]);
        assert!(e_measure_max(&zero_s, &zero_g).unwrap() > 0.99);
    }

    #[test]
    fn metric_ranges_on_random_pairs() {
        let mut rng = testrng(0);
        for _ in 0..100 {
            let s = random_tensor(&mut rng, &[8, 8], 0.0, 1.0);
            let g = Tensor::from_parts(
                vec![8, 8],
                (0..64).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
            );
            let r = evaluate(&s, &g).unwrap();
            for v in [r.s_alpha, r.f_beta_max, r.e_xi_max, r.mae] {
                assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
            }
        }
    }

    #[test]
    fn sweep_density_agrees_within_tolerance() {
        // predictions carry 8-bit values, the precision of the PNG outputs
        // the metrics actually score
        let mut rng = testrng(1);
        for _ in 0..20 {
            let s = Tensor::from_parts(
                vec![8, 8],
                (0..64).map(|_| rng.random_range(0..=255u32) as f32 / 255.0).collect(),
            );
            let g = Tensor::from_parts(
                vec![8, 8],
                (0..64).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
            );
            let f256 = f_measure_max_at(&s, &g, 256).unwrap();
            let f1024 = f_measure_max_at(&s, &g, 1024).unwrap();
            assert!((f256 - f1024).abs() < 1e-3, "f: {f256} vs {f1024}");
            let e256 = e_measure_max_at(&s, &g, 256).unwrap();
            let e1024 = e_measure_max_at(&s, &g, 1024).unwrap();
            assert!((e256 - e1024).abs() < 1e-3, "e: {e256} vs {e1024}");
        }
    }

    #[test]
    fn f_monotone_toward_binary_gt() {
        // moving S pointwise toward binary G never lowers max-F
        let mut rng = testrng(2);
        let g = Tensor::from_parts(
            vec![8, 8],
            (0..64).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
        );
        let s = random_tensor(&mut rng, &[8, 8], 0.0, 1.0);
        let mut prev = f_measure_max(&s, &g).unwrap();
        for step in 1..=4 {
            let t = step as f32 * 0.25;
            let blended = Tensor::from_parts(
                vec![8, 8],
                s.iter().zip(g.iter()).map(|(&sv, &gv)| sv + t * (gv - sv)).collect(),
            );
            let f = f_measure_max(&blended, &g).unwrap();
            assert!(f >= prev - 1e-9, "step {step}: {f} < {prev}");
            prev = f;
        }
    }

    #[test]
    fn mae_and_f_invariant_to_joint_permutation() {
        let mut rng = testrng(3);
        let s = random_tensor(&mut rng, &[6, 6], 0.0, 1.0);
        let g = Tensor::from_parts(
            vec![6, 6],
            (0..36).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
        );
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..36).collect();
        perm.shuffle(&mut rng);
        let sp = Tensor::from_parts(vec![6, 6], perm.iter().map(|&i| s.data()[i]).collect());
        let gp = Tensor::from_parts(vec![6, 6], perm.iter().map(|&i| g.data()[i]).collect());
        assert!((mae(&s, &g).unwrap() - mae(&sp, &gp).unwrap()).abs() < 1e-12);
        assert!(
            (f_measure_max(&s, &g).unwrap() - f_measure_max(&sp, &gp).unwrap()).abs() < 1e-12
        );
    }
}
