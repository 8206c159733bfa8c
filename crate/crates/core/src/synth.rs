//! Synthetic RGB-D scenes: simple shapes with consistent depth, used by the
//! desk-scale tests and demos.

use rand::Rng;

use crate::model::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn random(rng: &mut impl Rng, rmin: f32, rmax: f32) -> Shape {
        let cy = rng.random_range(0.3..0.7);
        let cx = rng.random_range(0.3..0.7);
        let ry = rng.random_range(rmin..rmax);
        let rx = rng.random_range(rmin..rmax);
        if rng.random::<bool>() {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        } else {
            Shape::Ellipse { cy, cx, ry, rx }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Scene generation knobs: pixel noise level and the object size range
/// (half-extents as a fraction of the image).
#[derive(Clone, Copy, Debug)]
pub struct SceneCfg {
    pub noise: f32,
    pub rmin: f32,
    pub rmax: f32,
}

impl Default for SceneCfg {
    fn default() -> Self {
        SceneCfg { noise: 0.02, rmin: 0.12, rmax: 0.28 }
    }
}

/// One simple-shape scene: an object with a distinct color over a plain
/// background, a depth map carrying the same geometry, and the binary mask.
pub fn scene(rng: &mut impl Rng, hw: usize, cfg: SceneCfg) -> Sample {
    let noise = cfg.noise;
    let shape = Shape::random(rng, cfg.rmin, cfg.rmax);
    let fg: [f32; 3] = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.0..0.4),
        rng.random_range(0.0..0.9),
    ];
    let bg: [f32; 3] = [
        rng.random_range(0.0..0.35),
        rng.random_range(0.5..0.9),
        rng.random_range(0.1..0.9),
    ];
    let mut rgb = vec![0.0f32; 3 * hw * hw];
    let mut depth = vec![0.0f32; hw * hw];
    let mut gt = vec![0.0f32; hw * hw];
    for yy in 0..hw {
        for xx in 0..hw {
            let (fy, fx) = (yy as f32 / hw as f32, xx as f32 / hw as f32);
            let inside = shape.contains(fy, fx);
            let i = yy * hw + xx;
            let (color, d) = if inside {
                (fg, 0.85)
            } else {
                (bg, 0.15 + 0.2 * fy)
            };
            for ch in 0..3 {
                let n: f32 = rng.random_range(-noise..=noise);
                rgb[ch * hw * hw + i] = (color[ch] + n).clamp(0.0, 1.0);
            }
            let nd: f32 = rng.random_range(-noise..=noise);
            depth[i] = (d + nd).clamp(0.0, 1.0);
            gt[i] = if inside { 1.0 } else { 0.0 };
        }
    }
    Sample {
        rgb: Tensor::from_parts(vec![3, hw, hw], rgb),
        aux: Tensor::from_parts(vec![1, hw, hw], depth),
        gt: Tensor::from_parts(vec![1, hw, hw], gt),
    }
}

/// A fixed-size training set of distinct scenes.
pub fn scene_set(seed: u64, count: usize, hw: usize, cfg: SceneCfg) -> Vec<Sample> {
    let mut rng = crate::seeded_rng(seed);
    (0..count).map(|_| scene(&mut rng, hw, cfg)).collect()
}

/// The memorization set: ten noise-free scenes with compact objects, so the
/// coarse supervision head is not perimeter-limited.
pub fn overfit_set(seed: u64, hw: usize) -> Vec<Sample> {
    scene_set(seed, 10, hw, SceneCfg { noise: 0.0, rmin: 0.09, rmax: 0.16 })
}

/// Aligned RGB-depth pairs for boundary-alignment audits (shared geometry
/// with independent noise in each modality).
pub fn quality_pairs(seed: u64, count: usize, hw: usize) -> Vec<crate::quality::QualityPair> {
    let mut rng = crate::seeded_rng(seed);
    let cfg = SceneCfg { noise: 0.03, ..SceneCfg::default() };
    (0..count)
        .map(|i| {
            let s = scene(&mut rng, hw, cfg);
            crate::quality::QualityPair { id: format!("pair{i:04}"), rgb: s.rgb, depth: s.aux }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_valid_samples() {
        let set = scene_set(7, 4, 64, SceneCfg::default());
        assert_eq!(set.len(), 4);
        for s in &set {
            assert_eq!(s.rgb.shape(), &[3, 64, 64]);
            assert!(s.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.gt.iter().all(|&v| v == 0.0 || v == 1.0));
            let fg: f32 = s.gt.iter().sum();
            assert!(fg > 0.0, "scene has an object");
        }
    }

    #[test]
    fn aligned_pairs_share_geometry() {
        let pairs = quality_pairs(3, 2, 64);
        for p in &pairs {
            // the depth edge map overlaps the rgb edge map noticeably
            let d = crate::quality::dice_alignment(
                &crate::quality::edge_map(&crate::quality::luma(&p.rgb)),
                &crate::quality::edge_map(&p.depth),
            );
            assert!(d > 0.1, "aligned dice {d}");
        }
    }
}
