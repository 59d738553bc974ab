// Rough conv throughput probe used to size desk-scale configs.
use jerseynum::tensor::{Tape, Tensor};
use std::time::Instant;

fn bench(n: usize, c: usize, h: usize, f: usize, iters: usize) {
    let x = Tensor::<f32>::new(vec![n, c, h, h], vec![0.5; n * c * h * h]).unwrap();
    let k = Tensor::<f32>::new(vec![f, c, 3, 3], vec![0.01; f * c * 9]).unwrap();
    let b = Tensor::<f32>::zeros(vec![f]);
    let start = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, true);
        let ki = tape.leaf(&k, true);
        let bi = tape.leaf(&b, true);
        let y = tape.conv2d(xi, ki, bi, 1, 1).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        sink += tape.scalar_value(loss).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    let macs = (n * f * h * h * c * 9 * iters) as f64; // fwd only
    // fwd + dx + dk ~ 3x fwd cost
    println!(
        "conv {n}x{c}x{h}x{h} -> {f}: {:.3}s for {iters} fwd+bwd iters, ~{:.2} GFLOP/s effective (sink {sink})",
        dt,
        3.0 * 2.0 * macs / dt / 1e9
    );
}

fn main() {
    bench(50, 8, 32, 8, 20);
    bench(50, 16, 16, 16, 20);
    bench(24, 16, 32, 16, 20);
    bench(24, 32, 16, 32, 20);
    bench(24, 3, 64, 16, 20);
}
