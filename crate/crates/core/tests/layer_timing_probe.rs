//! Per-layer timing probe. Run with
//! `cargo test -p patchdesc-core --test layer_timing_probe -- --ignored --nocapture`.

use std::time::Instant;

use patchdesc_core::layers::{
    pool_forward, subnorm_forward, tanh_forward, ConvLayer, NormSpec, PoolMode, PoolSpec,
};
use patchdesc_core::rng::Rng;
use patchdesc_core::tensor::Tensor;

fn time_it(name: &str, mut f: impl FnMut()) {
    for _ in 0..3 {
        f();
    }
    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{name:<24} {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}

#[test]
#[ignore]
fn per_layer_timing() {
    let mut rng = Rng::new(1);

    // conv1: 1 -> 32 maps, 7x7, 64 -> 58.
    let mut c1 = ConvLayer::<f32>::dense(1, 32, 7).unwrap();
    c1.weights = Tensor::random_uniform(c1.weights.shape(), -0.1, 0.1, &mut rng).unwrap();
    let in1 = Tensor::random_uniform(&[1, 64, 64], -1.0, 1.0, &mut rng).unwrap();
    time_it("conv1 (5.3 MMAC)", || {
        let _ = c1.forward(&in1).unwrap();
    });

    // conv2: 16-of-32 fan-in, 64 filters, 6x6, 29 -> 24.
    let mut c2 = ConvLayer::<f32>::sparse_random(32, 64, 6, 16, &mut rng).unwrap();
    c2.weights = Tensor::random_uniform(c2.weights.shape(), -0.1, 0.1, &mut rng).unwrap();
    let in2 = Tensor::random_uniform(&[32, 29, 29], -1.0, 1.0, &mut rng).unwrap();
    time_it("conv2 (21.2 MMAC)", || {
        let _ = c2.forward(&in2).unwrap();
    });

    // conv3: 32-of-64 fan-in, 128 filters, 5x5, 8 -> 4.
    let mut c3 = ConvLayer::<f32>::sparse_random(64, 128, 5, 32, &mut rng).unwrap();
    c3.weights = Tensor::random_uniform(c3.weights.shape(), -0.1, 0.1, &mut rng).unwrap();
    let in3 = Tensor::random_uniform(&[64, 8, 8], -1.0, 1.0, &mut rng).unwrap();
    time_it("conv3 (1.6 MMAC)", || {
        let _ = c3.forward(&in3).unwrap();
    });

    let t1: Tensor<f32> = Tensor::random_uniform(&[32, 58, 58], -2.0, 2.0, &mut rng).unwrap();
    time_it("tanh 32x58x58 (108k)", || {
        let _ = tanh_forward(&t1);
    });

    let p = PoolSpec { size: 2, mode: PoolMode::L2 };
    time_it("pool2 32x58x58", || {
        let _ = pool_forward(&p, &t1).unwrap();
    });

    let nrm = NormSpec::default();
    let t2: Tensor<f32> = Tensor::random_uniform(&[32, 29, 29], -2.0, 2.0, &mut rng).unwrap();
    time_it("subnorm 32x29x29", || {
        let _ = subnorm_forward(&nrm, &t2).unwrap();
    });

    let bt: Tensor<f32> = Tensor::random_uniform(&[64, 24, 24], -2.0, 2.0, &mut rng).unwrap();
    time_it("tanh 64x24x24 (37k)", || {
        let _ = tanh_forward(&bt);
    });

    // conv2 backward.
    let g2 = Tensor::random_uniform(&[64, 24, 24], -0.1, 0.1, &mut rng).unwrap();
    time_it("conv2 backward", || {
        let _ = c2.backward(&in2, &g2, true).unwrap();
    });
    time_it("conv2 bwd grad_w only", || {
        let _ = c2.backward(&in2, &g2, false).unwrap();
    });
    let g1 = Tensor::random_uniform(&[32, 58, 58], -0.1, 0.1, &mut rng).unwrap();
    time_it("conv1 backward (no gi)", || {
        let _ = c1.backward(&in1, &g1, false).unwrap();
    });
}
