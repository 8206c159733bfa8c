//! Shared between the gradient-check and acceptance test targets: the full
//! catalogue of per-op finite-difference checks.

use dfmnet_core::seeded_rng;
use dfmnet_core::tensor::gradcheck::{check_gradients, random_tensor, random_tensor_away_from_zero};
use dfmnet_core::tensor::{Conv2dCfg, Ctx, Tensor};
use rand_chacha::ChaCha8Rng;

pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
/// Step for smooth nonlinear ops.
pub const H: f64 = 1e-2;
/// Step for ops exactly linear in each input (no truncation error).
pub const H_LINEAR: f64 = 0.2;

type MakeFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type FwdFn = fn(&mut Ctx, &[Tensor]) -> dfmnet_core::Result<Tensor>;

pub struct OpCheck {
    pub name: &'static str,
    pub h: f64,
    pub make: MakeFn,
    pub fwd: FwdFn,
}

/// Run one check over `seeds` random draws; returns the first failure.
pub fn run_check(check: &OpCheck, seeds: u64) -> Result<(), String> {
    for seed in 0..seeds {
        let mut rng = seeded_rng(seed * 7919 + 13);
        let inputs = (check.make)(&mut rng);
        check_gradients(&inputs, check.fwd, &mut rng, check.h, RTOL, ATOL)
            .map_err(|msg| format!("{} failed at seed {seed}: {msg}", check.name))?;
    }
    Ok(())
}

fn binary_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random_tensor(rng, &[2, 3, 4], -1.0, 1.0), random_tensor(rng, &[2, 3, 4], -1.0, 1.0)]
}

fn maxpool_input(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // distinct offsets inside every 2x2 window keep the argmax stable
    let base = random_tensor(rng, &[2, 2, 4, 4], 0.0, 1.0);
    let data: Vec<f32> = base
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (y, x) = ((i / 4) % 4, i % 4);
            v + ((x % 2) + 2 * (y % 2)) as f32 * 2.0
        })
        .collect();
    vec![Tensor::new(vec![2, 2, 4, 4], data).unwrap()]
}

fn fixed_bce_target() -> Tensor {
    let g: Vec<f32> = (0..16).map(|i| ((i * 7 + 3) % 3 == 0) as u8 as f32).collect();
    Tensor::new(vec![4, 4], g).unwrap()
}

/// Every differentiable op of the engine with a suitable input construction.
pub fn all_op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "add", h: H_LINEAR, make: binary_pair, fwd: |ctx, t| ctx.add(&t[0], &t[1]) },
        OpCheck { name: "sub", h: H_LINEAR, make: binary_pair, fwd: |ctx, t| ctx.sub(&t[0], &t[1]) },
        OpCheck {
            name: "mul broadcast map",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[2, 1, 4, 4], -1.0, 1.0),
                ]
            },
            fwd: |ctx, t| ctx.mul(&t[0], &t[1]),
        },
        OpCheck {
            name: "mul broadcast scalar",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[2, 1, 1, 1], -1.0, 1.0),
                ]
            },
            fwd: |ctx, t| ctx.mul(&t[0], &t[1]),
        },
        OpCheck {
            name: "mul bias-style",
            h: H_LINEAR,
            make: |rng| {
                vec![random_tensor(rng, &[3, 5], -1.0, 1.0), random_tensor(rng, &[5], -1.0, 1.0)]
            },
            fwd: |ctx, t| ctx.mul(&t[0], &t[1]),
        },
        OpCheck {
            name: "div",
            h: 5e-3,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 4, 1, 1], -1.0, 1.0),
                    random_tensor(rng, &[2, 4, 1, 1], 0.5, 1.5),
                ]
            },
            fwd: |ctx, t| ctx.div(&t[0], &t[1]),
        },
        OpCheck {
            name: "relu",
            h: H,
            make: |rng| vec![random_tensor_away_from_zero(rng, &[2, 3, 5, 5], 0.05)],
            fwd: |ctx, t| ctx.relu(&t[0]),
        },
        OpCheck {
            name: "sigmoid",
            h: H,
            make: |rng| vec![random_tensor(rng, &[2, 3, 5], -3.0, 3.0)],
            fwd: |ctx, t| ctx.sigmoid(&t[0]),
        },
        OpCheck {
            name: "conv3x3",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[1, 2, 5, 5], -1.0, 1.0),
                    random_tensor(rng, &[3, 2, 3, 3], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| ctx.conv2d(&t[0], &t[1], Conv2dCfg { pad: 1, ..Conv2dCfg::default() }),
        },
        OpCheck {
            name: "conv3x3 stride2",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 2, 6, 6], -1.0, 1.0),
                    random_tensor(rng, &[2, 2, 3, 3], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| {
                ctx.conv2d(&t[0], &t[1], Conv2dCfg { stride: 2, pad: 1, ..Conv2dCfg::default() })
            },
        },
        OpCheck {
            name: "conv3x3 dilation2",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[1, 2, 7, 7], -1.0, 1.0),
                    random_tensor(rng, &[2, 2, 3, 3], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| {
                ctx.conv2d(&t[0], &t[1], Conv2dCfg { pad: 2, dilation: 2, ..Conv2dCfg::default() })
            },
        },
        OpCheck {
            name: "conv1x1",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 4, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[3, 4, 1, 1], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| ctx.conv2d(&t[0], &t[1], Conv2dCfg::default()),
        },
        OpCheck {
            name: "depthwise3x3",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 3, 5, 5], -1.0, 1.0),
                    random_tensor(rng, &[3, 1, 3, 3], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| {
                ctx.conv2d(&t[0], &t[1], Conv2dCfg { pad: 1, groups: 3, ..Conv2dCfg::default() })
            },
        },
        OpCheck {
            name: "grouped conv",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[1, 4, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[6, 2, 3, 3], -0.7, 0.7),
                ]
            },
            fwd: |ctx, t| {
                ctx.conv2d(&t[0], &t[1], Conv2dCfg { pad: 1, groups: 2, ..Conv2dCfg::default() })
            },
        },
        OpCheck {
            name: "linear",
            h: H_LINEAR,
            make: |rng| {
                vec![random_tensor(rng, &[3, 6], -1.0, 1.0), random_tensor(rng, &[4, 6], -0.7, 0.7)]
            },
            fwd: |ctx, t| ctx.linear(&t[0], &t[1]),
        },
        OpCheck {
            name: "batch_norm",
            h: H,
            make: |rng| {
                vec![
                    random_tensor(rng, &[3, 2, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[2], 0.5, 1.5),
                    random_tensor(rng, &[2], -0.5, 0.5),
                ]
            },
            fwd: |ctx, t| {
                let mean = Tensor::zeros(&[2]);
                let var = Tensor::ones(&[2]);
                ctx.batch_norm(&t[0], &t[1], &t[2], &mean, &var).map(|(y, _)| y)
            },
        },
        OpCheck { name: "max_pool2x2", h: H, make: maxpool_input, fwd: |ctx, t| ctx.max_pool2x2(&t[0]) },
        OpCheck {
            name: "global_avg_pool",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0)],
            fwd: |ctx, t| ctx.global_avg_pool(&t[0]),
        },
        OpCheck {
            name: "adaptive_avg_pool3",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[1, 2, 7, 7], -1.0, 1.0)],
            fwd: |ctx, t| ctx.adaptive_avg_pool(&t[0], 3),
        },
        OpCheck {
            name: "bilinear up2",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0)],
            fwd: |ctx, t| ctx.resample(&t[0], 2, 1),
        },
        OpCheck {
            name: "bilinear down2",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0)],
            fwd: |ctx, t| ctx.resample(&t[0], 1, 2),
        },
        OpCheck {
            name: "bilinear odd resize",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[1, 1, 5, 5], -1.0, 1.0)],
            fwd: |ctx, t| ctx.resize_bilinear(&t[0], 7, 3),
        },
        OpCheck {
            name: "concat",
            h: H_LINEAR,
            make: |rng| {
                vec![
                    random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0),
                    random_tensor(rng, &[2, 4, 3, 3], -1.0, 1.0),
                ]
            },
            fwd: |ctx, t| ctx.concat(&[&t[0], &t[1]], 1),
        },
        OpCheck {
            name: "narrow",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[3, 6], -1.0, 1.0)],
            fwd: |ctx, t| ctx.narrow(&t[0], 1, 2, 3),
        },
        OpCheck {
            name: "reshape",
            h: H,
            make: |rng| vec![random_tensor(rng, &[2, 6], -1.0, 1.0)],
            fwd: |ctx, t| {
                let r = ctx.reshape(&t[0], vec![2, 6, 1, 1])?;
                ctx.mul(&r, &r)
            },
        },
        OpCheck {
            name: "sum_all",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[3, 4], -1.0, 1.0)],
            fwd: |ctx, t| ctx.sum_all(&t[0]),
        },
        OpCheck {
            name: "mean_all",
            h: H_LINEAR,
            make: |rng| vec![random_tensor(rng, &[3, 4], -1.0, 1.0)],
            fwd: |ctx, t| ctx.mean_all(&t[0]),
        },
        OpCheck {
            name: "bce_mean",
            h: 5e-3,
            make: |rng| vec![random_tensor(rng, &[4, 4], 0.15, 0.85)],
            fwd: |ctx, t| {
                let target = fixed_bce_target();
                ctx.bce_mean(&t[0], &target)
            },
        },
        OpCheck {
            name: "gate chain",
            h: 5e-3,
            make: |rng| {
                vec![
                    random_tensor(rng, &[1, 2, 6, 6], 0.1, 1.0),
                    random_tensor(rng, &[1, 2, 6, 6], 0.1, 1.0),
                    random_tensor(rng, &[2, 2, 1, 1], 0.1, 0.7),
                ]
            },
            fwd: |ctx, t| {
                let a = ctx.conv2d(&t[0], &t[2], Conv2dCfg::default())?;
                let a = ctx.relu(&a)?;
                let b = ctx.relu(&t[1])?;
                let prod = ctx.mul(&a, &b)?;
                let num = ctx.global_avg_pool(&prod)?;
                let sum = ctx.add(&a, &b)?;
                let den = ctx.global_avg_pool(&sum)?;
                let v = ctx.div(&num, &den)?;
                ctx.sigmoid(&v)
            },
        },
    ]
}

#[allow(dead_code)]
pub fn unused() {}
