//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward code, so it stays an independent
//! oracle for the backward implementations.

use rand::Rng;

use super::{Ctx, Tensor};
use crate::error::Result as CoreResult;

/// Outcome of one gradient comparison.
pub struct GradReport {
    pub max_abs_diff: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Check analytic gradients of `fwd` against central finite differences for
/// every input, elementwise with `|a - n| <= atol + rtol*|n|`.
///
/// `fwd` must be a pure function of its inputs. The output is reduced to a
/// scalar through a random ±1 projection so that every output element
/// contributes to the check.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    fwd: F,
    rng: &mut impl Rng,
    h_rel: f64,
    rtol: f64,
    atol: f64,
) -> std::result::Result<GradReport, String>
where
    F: Fn(&mut Ctx, &[Tensor]) -> CoreResult<Tensor>,
{
    // Probe the output shape, then fix the projection. The direction is
    // scaled down with the output count: every fp32 error source in the
    // difference quotient is proportional to the projection magnitude, so
    // this keeps the comparison well inside the absolute tolerance without
    // weakening it.
    let mut probe = Ctx::infer();
    let out0 = fwd(&mut probe, inputs).map_err(|e| format!("forward failed: {e}"))?;
    let scale = (8.0 / out0.numel() as f32).min(1.0);
    let dir: Vec<f32> = (0..out0.numel())
        .map(|_| rng.random_range(-1.0f32..1.0) * scale)
        .collect();

    let project = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(dir.iter())
            .map(|(&o, &d)| o as f64 * d as f64)
            .sum()
    };

    // Analytic gradients.
    let mut ctx = Ctx::train();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| ctx.leaf(t)).collect();
    let out = fwd(&mut ctx, &leaves).map_err(|e| format!("forward failed: {e}"))?;
    let dir_t = Tensor::from_parts(out.shape().to_vec(), dir.clone());
    let weighted = ctx.mul(&out, &dir_t).map_err(|e| e.to_string())?;
    let loss = ctx.sum_all(&weighted).map_err(|e| e.to_string())?;
    let grads = ctx.backward(&loss).map_err(|e| format!("backward failed: {e}"))?;

    let mut report = GradReport { max_abs_diff: 0.0, worst_analytic: 0.0, worst_numeric: 0.0 };
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[ti])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for ei in 0..input.numel() {
            let x0 = input.data()[ei] as f64;
            let h = h_rel * x0.abs().max(1.0);
            let eval = |v: f64| -> std::result::Result<f64, String> {
                let mut data = input.data().to_vec();
                data[ei] = v as f32;
                let mut probe_inputs: Vec<Tensor> = inputs.to_vec();
                probe_inputs[ti] = Tensor::from_parts(input.shape().to_vec(), data);
                let mut c = Ctx::train();
                let o = fwd(&mut c, &probe_inputs).map_err(|e| e.to_string())?;
                Ok(project(&o))
            };
            let numeric = (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h);
            let a = analytic[ei] as f64;
            let diff = (a - numeric).abs();
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            if diff > atol + rtol * numeric.abs() {
                return Err(format!(
                    "input {ti} element {ei}: analytic {a:.6e} vs numeric {numeric:.6e} \
                     (diff {diff:.3e} > atol {atol:.1e} + rtol {rtol:.1e}*|n|)"
                ));
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries in [lo, hi).
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Random tensor whose entries stay at least `margin` away from zero, for
/// kinked ops like relu.
pub fn random_tensor_away_from_zero(
    rng: &mut impl Rng,
    shape: &[usize],
    margin: f32,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(margin..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
