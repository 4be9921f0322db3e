//! Manual timing probe (ignored by default): run with
//! `cargo test -p patchdesc-core --test timing_probe -- --ignored --nocapture`.

use std::time::Instant;

use patchdesc_core::network::{ArchName, NetworkSpec, NetworkState};
use patchdesc_core::rng::Rng;
use patchdesc_core::tensor::Tensor;

#[test]
#[ignore]
fn cnn3_forward_backward_timing() {
    let spec = NetworkSpec::named(ArchName::Cnn3);
    let state: NetworkState<f32> = NetworkState::build(&spec, 1).unwrap();
    let mut rng = Rng::new(2);
    let patch = Tensor::random_uniform(&[1, 64, 64], -1.0, 1.0, &mut rng).unwrap();

    // Warm up.
    for _ in 0..3 {
        let _ = state.forward(&patch).unwrap();
    }

    let n = 40;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = state.forward(&patch).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = state.forward_traced(&patch).unwrap();
    }
    let fwd_traced = t0.elapsed().as_secs_f64() / n as f64;

    let (_, trace) = state.forward_traced(&patch).unwrap();
    let grad = Tensor::filled(&[128], 0.01).unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = state.backward(&trace, &grad).unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / n as f64;

    println!("cnn3 forward:         {:.3} ms", fwd * 1e3);
    println!("cnn3 forward_traced:  {:.3} ms", fwd_traced * 1e3);
    println!("cnn3 backward:        {:.3} ms", bwd * 1e3);
    let iter = 280.0 * fwd + 240.0 * (fwd_traced + bwd);
    println!("est. iteration (serial): {:.1} ms", iter * 1e3);
    println!("est. 2000 iters (2 threads): {:.1} s", iter * 2000.0 / 2.0);
}
