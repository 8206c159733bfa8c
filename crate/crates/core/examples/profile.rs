use dfmnet_core::model::{DfmNet, ModelConfig, loss};
use dfmnet_core::tensor::{Ctx, gradcheck::random_tensor};
fn main() {
    let (model, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
    let mut rng = dfmnet_core::seeded_rng(0);
    let rgb = random_tensor(&mut rng, &[4, 3, 256, 256], 0.0, 1.0);
    let aux = random_tensor(&mut rng, &[4, 1, 256, 256], 0.0, 1.0);
    let gt = dfmnet_core::Tensor::new(vec![4,1,256,256],
        random_tensor(&mut rng, &[4,1,256,256], 0.0, 1.0).data().iter().map(|v| v.round()).collect()).unwrap();
    let mut c = Ctx::train();
    let out = model.forward(&mut c, &store, &rgb, &aux).unwrap();
    let l = loss(&mut c, &out.s_c, &out.s_d, &gt).unwrap();
    let _ = c.backward(&l).unwrap();
    println!("{}", c.profile_report().unwrap());
}
