use std::time::Instant;
use densedesc_core::Tensor;

fn bench(cin: usize, cout: usize, h: usize, w: usize, k: usize, reps: usize) -> (f64, f64) {
    let input = Tensor::from_vec(vec![0.5; cin * h * w], &[cin, h, w], true).unwrap();
    let kernel = Tensor::from_vec(vec![0.1; cout * cin * k * k], &[cout, cin, k, k], true).unwrap();
    let pad = (k - 1) / 2;
    let out = input.conv2d(&kernel, 1, pad).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = input.conv2d(&kernel, 1, pad).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let loss = out.sum_all();
    let t0 = Instant::now();
    for _ in 0..reps {
        loss.backward().unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * (cin * cout * k * k * h * w) as f64;
    (flops / fwd / 1e9, 3.0 * flops / bwd / 1e9)
}

fn main() {
    for (cin, cout, h, w, k) in [
        (24usize, 12usize, 64usize, 80usize, 3usize),
        (48, 12, 64, 80, 3),
        (96, 12, 64, 80, 3),
        (48, 48, 32, 40, 1),
        (16, 128, 64, 80, 1),
    ] {
        let (f, b) = bench(cin, cout, h, w, k, 50);
        println!("{}x{}x{}x{} k{}: fwd {:.2} GF/s, bwd {:.2} GF/s", cin, cout, h, w, k, f, b);
    }
}
