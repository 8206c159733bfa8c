use std::time::Instant;
fn main() {
    // simulate the op allocation pattern: alloc, write, drop
    for size in [1usize<<20, 6<<20, 25<<20] {
        let n = size / 4;
        let t = Instant::now();
        for _ in 0..20 {
            let mut v = vec![0.0f32; n];
            v[0] = 1.0; v[n-1] = 2.0;
            std::hint::black_box(&v);
        }
        println!("alloc-zero {} MB: {:.2} ms/alloc", size >> 20, t.elapsed().as_secs_f64()*50.0);
        let t = Instant::now();
        for _ in 0..20 {
            let mut v: Vec<f32> = Vec::with_capacity(n);
            v.extend((0..n).map(|i| i as f32));
            std::hint::black_box(&v);
        }
        println!("alloc-fill {} MB: {:.2} ms/alloc", size >> 20, t.elapsed().as_secs_f64()*50.0);
    }
}
