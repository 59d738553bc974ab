// Per-layer-shape conv timing at half-batch size.
use jerseynum::tensor::{Tape, Tensor};
use std::time::Instant;

fn bench(name: &str, n: usize, c: usize, f: usize, h: usize, stride: usize, iters: usize) {
    let x = Tensor::<f32>::new(vec![n, c, h, h], vec![0.5; n * c * h * h]).unwrap();
    let k = Tensor::<f32>::new(vec![f, c, 3, 3], vec![0.01; f * c * 9]).unwrap();
    let b = Tensor::<f32>::zeros(vec![f]);
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::serial();
        let xi = tape.leaf(&x, true);
        let ki = tape.leaf(&k, true);
        let bi = tape.leaf(&b, true);
        let y = tape.conv2d(xi, ki, bi, stride, 1).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() * 1000.0 / iters as f64;
    let oh = (h + 2 - 3) / stride + 1;
    let macs = n * f * oh * oh * c * 9;
    println!("{name:28} {dt:7.2} ms/iter  ({:.2} GFLOP/s fwd+bwd)", 6.0 * macs as f64 / (dt / 1000.0) / 1e9);
}

fn main() {
    let it = 100;
    bench("stem 25x3->8 @32", 25, 3, 8, 32, 1, it);
    bench("s0 25x8->8 @16 x2", 25, 8, 8, 16, 1, it);
    bench("s1t 25x8->16 @16 s2", 25, 8, 16, 16, 2, it);
    bench("s1c2 25x16->16 @8", 25, 16, 16, 8, 1, it);
    bench("s2t 25x16->32 @8 s2", 25, 16, 32, 8, 2, it);
    bench("s2c2 25x32->32 @4", 25, 32, 32, 4, 1, it);
}
