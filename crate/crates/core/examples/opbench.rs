use dfmnet_core::tensor::{Ctx, Conv2dCfg, Tensor, gradcheck::random_tensor};
use std::time::Instant;
fn main() {
    let mut rng = dfmnet_core::seeded_rng(0);
    let time = |name: &str, f: &mut dyn FnMut()| {
        f(); // warm
        let t = Instant::now();
        for _ in 0..10 { f(); }
        println!("{name}: {:.2} ms", t.elapsed().as_secs_f64()*100.0);
    };
    let x = random_tensor(&mut rng, &[4, 96, 128, 128], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[96, 1, 3, 3], -1.0, 1.0);
    let dwcfg = Conv2dCfg { pad: 1, groups: 96, ..Conv2dCfg::default() };
    time("dw conv 96@128x128 b4", &mut || { let mut c = Ctx::infer(); c.conv2d(&x, &w, dwcfg).unwrap(); });
    let g = random_tensor(&mut rng, &[96], 0.5, 1.5);
    let be = random_tensor(&mut rng, &[96], -0.5, 0.5);
    let rm = Tensor::zeros(&[96]);
    let rv = Tensor::ones(&[96]);
    time("bn eval 96@128x128 b4", &mut || { let mut c = Ctx::infer(); c.batch_norm(&x, &g, &be, &rm, &rv).unwrap(); });
    time("bn train 96@128x128 b4", &mut || { let mut c = Ctx::train(); c.batch_norm(&x, &g, &be, &rm, &rv).unwrap(); });
    time("relu 96@128x128 b4", &mut || { let mut c = Ctx::infer(); c.relu(&x).unwrap(); });
    let y = random_tensor(&mut rng, &[4, 96, 128, 128], -1.0, 1.0);
    time("add same-shape", &mut || { let mut c = Ctx::infer(); c.add(&x, &y).unwrap(); });
    let beta = random_tensor(&mut rng, &[4, 1, 128, 128], 0.0, 1.0);
    time("mul broadcast (N,1,H,W)", &mut || { let mut c = Ctx::infer(); c.mul(&x, &beta).unwrap(); });
    let w1x1 = random_tensor(&mut rng, &[96, 16, 1, 1], -1.0, 1.0);
    let x16 = random_tensor(&mut rng, &[4, 16, 128, 128], -1.0, 1.0);
    time("1x1 conv 16->96 @128 b4", &mut || { let mut c = Ctx::infer(); c.conv2d(&x16, &w1x1, Conv2dCfg::default()).unwrap(); });
    time("bilinear up2 96@64->128 b4", &mut || { let mut c = Ctx::infer();
        let xs = random_tensor(&mut dfmnet_core::seeded_rng(1), &[4, 96, 64, 64], 0.0, 1.0);
        c.resize_bilinear(&xs, 128, 128).unwrap(); });
}
