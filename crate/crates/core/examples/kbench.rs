use std::time::Instant;
fn main() {
    let bench = |name: &str, m: usize, k: usize, n: usize, reps: usize| {
        let a = vec![0.5f32; m*k];
        let b = vec![0.25f32; k*n];
        let mut c = vec![0.0f32; m*n];
        // warm
        dfmnet_core::tensor::bench_gemm(m,k,n,&a,&b,&mut c);
        let t = Instant::now();
        for _ in 0..reps { dfmnet_core::tensor::bench_gemm(m,k,n,&a,&b,&mut c); }
        let el = t.elapsed().as_secs_f64()/reps as f64;
        println!("{name}: m{m} k{k} n{n}: {:.2} ms, {:.1} GFLOP/s", el*1e3, 2.0*(m*k*n) as f64/el/1e9);
    };
    bench("h1-expand", 96, 16, 16384, 20);
    bench("h2-expand", 144, 24, 4096, 20);
    bench("deep-expand", 960, 160, 256, 20);
    bench("deep-project", 320, 960, 256, 20);
    bench("ppm-fuse", 320, 640, 256, 20);
}
