use dfmnet_core::model::{DfmNet, ModelConfig};
use dfmnet_core::train::{Hyper, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let data = dfmnet_core::synth::overfit_set(42, 256);
    let (model, store) = DfmNet::init(ModelConfig::default(), 1).unwrap();
    let hyper = Hyper { lr, batch_size: batch, epochs: steps * batch / 10 + 1, augment: false, seed: 5, ..Hyper::default() };
    let mut tr = Trainer::new(model, store, data, hyper).unwrap();
    let t0 = Instant::now();
    for step in 1..=steps {
        let l = tr.train_step().unwrap();
        if step % 10 == 0 || step <= 3 {
            println!("step {step:>3}  batch-loss {l:.4}  ({:.1}s)", t0.elapsed().as_secs_f64());
        }
        if step % 25 == 0 {
            let full = tr.eval_loss().unwrap();
            println!("          full-set loss {full:.4}");
            if full < 0.03 { println!("reached target at step {step}"); break; }
        }
    }
    let full = tr.eval_loss().unwrap();
    println!("final full-set loss {full:.4} after {:.1}s", t0.elapsed().as_secs_f64());
}
