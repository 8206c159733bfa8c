use dfmnet_core::model::{DfmNet, ModelConfig, stack_samples};
use dfmnet_core::train::{Hyper, Trainer};
use dfmnet_core::tensor::Ctx;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
    let data = dfmnet_core::synth::overfit_set(42, 256);
    let (model, store) = DfmNet::init(ModelConfig::default(), 1).unwrap();
    let hyper = Hyper { lr, batch_size: batch, epochs: 250, augment: false, seed: 5, ..Hyper::default() };
    let mut tr = Trainer::new(model, store, data.clone(), hyper).unwrap();
    let t0 = Instant::now();
    for step in 1..=steps {
        let _ = tr.train_step().unwrap();
        if step % 25 == 0 {
            // loss composition on the full set, inference mode
            let (mut lc, mut ld, mut mae) = (0.0f64, 0.0f64, 0.0f64);
            for s in &data {
                let mut ctx = Ctx::infer();
                let rgb = stack_samples(&[&s.rgb]).unwrap();
                let aux = stack_samples(&[&s.aux]).unwrap();
                let gt = stack_samples(&[&s.gt]).unwrap();
                let out = tr.model.forward(&mut ctx, &tr.store, &rgb, &aux).unwrap();
                lc += ctx.bce_mean(&out.s_c, &gt).unwrap().item() as f64;
                ld += ctx.bce_mean(&out.s_d, &gt).unwrap().item() as f64;
                mae += dfmnet_core::metrics::mae(&out.s_c, &gt).unwrap();
            }
            println!("step {step:>3}: L_c {:.4}  L_d {:.4}  total {:.4}  MAE(S_c) {:.4}  ({:.0}s)",
                lc/10.0, ld/10.0, (lc+ld)/10.0, mae/10.0, t0.elapsed().as_secs_f64());
        }
    }
}
