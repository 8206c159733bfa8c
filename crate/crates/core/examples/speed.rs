use dfmnet_core::model::{DfmNet, ModelConfig, loss};
use dfmnet_core::tensor::{Ctx, gradcheck::random_tensor};
use std::time::Instant;

fn main() {
    let (model, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
    let mut rng = dfmnet_core::seeded_rng(0);
    let rgb = random_tensor(&mut rng, &[1, 3, 256, 256], 0.0, 1.0);
    let aux = random_tensor(&mut rng, &[1, 1, 256, 256], 0.0, 1.0);
    // warmup + timed inference
    for _ in 0..2 { let mut c = Ctx::infer(); model.forward(&mut c, &store, &rgb, &aux).unwrap(); }
    let t0 = Instant::now();
    for _ in 0..5 { let mut c = Ctx::infer(); model.forward(&mut c, &store, &rgb, &aux).unwrap(); }
    println!("infer b1: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/5.0);

    // batch-4 training step
    let rgb4 = random_tensor(&mut rng, &[4, 3, 256, 256], 0.0, 1.0);
    let aux4 = random_tensor(&mut rng, &[4, 1, 256, 256], 0.0, 1.0);
    let gt4 = random_tensor(&mut rng, &[4, 1, 256, 256], 0.0, 1.0);
    let gt4 = dfmnet_core::Tensor::new(vec![4,1,256,256], gt4.data().iter().map(|v| v.round()).collect()).unwrap();
    let t0 = Instant::now();
    let mut c = Ctx::train();
    let out = model.forward(&mut c, &store, &rgb4, &aux4).unwrap();
    let l = loss(&mut c, &out.s_c, &out.s_d, &gt4).unwrap();
    println!("fwd(train,b4): {:.1} ms, loss {:.4}", t0.elapsed().as_secs_f64()*1000.0, l.item());
    let t1 = Instant::now();
    let g = c.backward(&l).unwrap();
    println!("bwd(b4): {:.1} ms", t1.elapsed().as_secs_f64()*1000.0);
    let _ = g;
}
