use dfmnet_core::bench::{measure_throughput, ThroughputCfg};
use dfmnet_core::model::{DfmNet, ModelConfig};
fn main() {
    let (model, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
    let cfg = |n: usize, warmup: usize| ThroughputCfg { batch: 1, n, warmup, input_hw: 128, seed: 0 };
    let f1 = measure_throughput(&model, &store, &cfg(10, 5)).unwrap();
    let f2 = measure_throughput(&model, &store, &cfg(20, 2)).unwrap();
    println!("128: N=10 {f1:.2}, N=20 {f2:.2}, rel {:.1}%", 100.0*(f1-f2).abs()/f2);
    // resolution monotonicity
    let lo = measure_throughput(&model, &store, &ThroughputCfg{batch:1,n:5,warmup:2,input_hw:128,seed:0}).unwrap();
    let hi = measure_throughput(&model, &store, &ThroughputCfg{batch:1,n:5,warmup:2,input_hw:256,seed:0}).unwrap();
    println!("fps@128 {lo:.2} vs fps@256 {hi:.2}");
}
