use dfmnet_core::model::{DfmNet, ModelConfig};
use dfmnet_core::bench::size_report;
fn main() {
    let (_, store) = DfmNet::init(ModelConfig::default(), 0).unwrap();
    let r = size_report(&store);
    print!("{}", r.render());
    let (_, base) = DfmNet::init(ModelConfig { dqw: false, dha: false, ..ModelConfig::default() }, 0).unwrap();
    let rb = size_report(&base);
    println!("baseline total {:.3} MB; dqw+dha delta {:.4} MB", rb.total_mb(), r.total_mb() - rb.total_mb());
}
