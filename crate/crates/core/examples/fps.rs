use dfmnet_core::bench::{measure_throughput, ThroughputCfg};
use dfmnet_core::model::{DfmNet, ModelConfig};
fn main() {
    let (model, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
    for (b, n) in [(1usize, 6usize), (8, 3), (32, 2)] {
        let fps = measure_throughput(&model, &store, &ThroughputCfg { batch: b, n, warmup: 2, input_hw: 256, seed: 0 }).unwrap();
        println!("B={b:>2} N={n}: {fps:.2} FPS");
    }
    // variance: N vs 2N at B=1
    let f1 = measure_throughput(&model, &store, &ThroughputCfg { batch: 1, n: 8, warmup: 2, input_hw: 256, seed: 0 }).unwrap();
    let f2 = measure_throughput(&model, &store, &ThroughputCfg { batch: 1, n: 16, warmup: 0, input_hw: 256, seed: 0 }).unwrap();
    println!("N=8: {f1:.2}, N=16: {f2:.2}, rel diff {:.1}%", 100.0*(f1-f2).abs()/f2);
}
