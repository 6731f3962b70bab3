use ndarray::Array2;
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(62usize, 256usize, 256usize), (62, 512, 256), (445, 1024, 1024), (256, 256, 256), (800, 48, 3)] {
        let a = Array2::<f64>::from_elem((m, k), 1.5);
        let b = Array2::<f64>::from_elem((k, n), 0.5);
        let mut acc = 0.0;
        let t0 = Instant::now();
        let mut iters = 0u64;
        while t0.elapsed().as_secs_f64() < 1.0 {
            let c = a.dot(&b);
            acc += c[[0, 0]];
            iters += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        let flops = 2.0 * m as f64 * k as f64 * n as f64 * iters as f64;
        println!("{}x{}x{}: {:.2} GFLOP/s ({} iters, acc {})", m, k, n, flops / secs / 1e9, iters, acc);
    }
}
