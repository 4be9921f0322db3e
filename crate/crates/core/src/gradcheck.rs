//! Finite-difference verification of every analytic gradient.
//!
//! Each check projects a layer's output onto a fixed random direction to
//! get a scalar objective, computes the analytic gradient via the layer's
//! backward pass, and compares against central differences (step `1e-4`)
//! in 64-bit arithmetic. Errors are normwise relative:
//! `|g_a - g_fd| / max(|g_a|, |g_fd|)`.
//!
//! Full-network checks drive the siamese hinge loss end to end: a small
//! two-block network is checked on every weight, the registry
//! architectures on a deterministic sample of coordinates per parameter
//! tensor (an exhaustive sweep over ~100k parameters would take hours).
//!
//! Smooth layers (Tanh, fully-connected) are held to `1e-6`; everything
//! else to `1e-4`.

use crate::layers::{
    pool_backward, pool_forward, relu_backward, relu_forward, subnorm_backward, subnorm_forward,
    tanh_backward, tanh_forward, ConvLayer, FcLayer, NormSpec, PoolMode, PoolSpec, Unit,
};
use crate::loss::{pair_backward, PairLossConfig};
use crate::network::{ArchName, ConvBlockSpec, FanInRule, NetworkSpec, NetworkState};
use crate::rng::Rng;
use crate::tensor::{l2_distance_slice, Tensor};

const FD_STEP: f64 = 1e-4;
pub const TOL_DEFAULT: f64 = 1e-4;
pub const TOL_SMOOTH: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub relative_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.relative_error <= self.tolerance
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let diff: Vec<f64> = analytic.iter().zip(fd).map(|(a, b)| a - b).collect();
    let na = norm(analytic);
    let nf = norm(fd);
    if na == 0.0 && nf == 0.0 {
        return 0.0;
    }
    norm(&diff) / na.max(nf)
}

/// Central differences of `eval` with respect to every entry of `tensor`.
fn fd_gradient(tensor: &Tensor<f64>, mut eval: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut work = tensor.clone();
    let mut grad = Vec::with_capacity(tensor.len());
    for i in 0..tensor.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + FD_STEP;
        let plus = eval(&work);
        work.data_mut()[i] = orig - FD_STEP;
        let minus = eval(&work);
        work.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * FD_STEP));
    }
    grad
}

fn projection(len: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::random_uniform(&[len], -1.0, 1.0, rng).unwrap()
}

fn project(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(proj.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

fn check(name: &str, tolerance: f64, analytic: &[f64], fd: &[f64]) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        relative_error: rel_error(analytic, fd),
        tolerance,
    }
}

fn conv_checks(name: &str, layer: &ConvLayer<f64>, input: &Tensor<f64>, rng: &mut Rng) -> Vec<GradCheck> {
    let out = layer.forward(input).unwrap();
    let proj_flat = projection(out.len(), rng);
    let proj = proj_flat.clone().reshape(out.shape()).unwrap();
    let (gi, gw, gb) = layer.backward(input, &proj, true).unwrap();

    let eval_w = |w: &Tensor<f64>| {
        let mut l = layer.clone();
        l.weights = w.clone();
        project(&l.forward(input).unwrap().flatten(), &proj_flat)
    };
    let eval_b = |b: &Tensor<f64>| {
        let mut l = layer.clone();
        l.bias = b.clone();
        project(&l.forward(input).unwrap().flatten(), &proj_flat)
    };
    let eval_x = |x: &Tensor<f64>| project(&layer.forward(x).unwrap().flatten(), &proj_flat);

    vec![
        check(
            &format!("{name}/weights"),
            TOL_DEFAULT,
            gw.data(),
            &fd_gradient(&layer.weights, eval_w),
        ),
        check(
            &format!("{name}/bias"),
            TOL_DEFAULT,
            gb.data(),
            &fd_gradient(&layer.bias, eval_b),
        ),
        check(
            &format!("{name}/input"),
            TOL_DEFAULT,
            gi.unwrap().data(),
            &fd_gradient(input, eval_x),
        ),
    ]
}

/// Gradient checks for every sublayer type in isolation.
pub fn run_layer_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = Rng::new(seed);
    let mut results = Vec::new();

    // Dense convolution.
    {
        let mut layer = ConvLayer::<f64>::dense(2, 3, 3).unwrap();
        layer.weights = Tensor::random_uniform(layer.weights.shape(), -1.0, 1.0, &mut rng).unwrap();
        layer.bias = Tensor::random_uniform(&[3], -0.5, 0.5, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[2, 7, 7], -1.0, 1.0, &mut rng).unwrap();
        results.extend(conv_checks("conv_dense", &layer, &input, &mut rng));
    }

    // Sparse convolution.
    {
        let mut layer = ConvLayer::<f64>::sparse_random(5, 4, 3, 2, &mut rng).unwrap();
        layer.weights = Tensor::random_uniform(layer.weights.shape(), -1.0, 1.0, &mut rng).unwrap();
        layer.bias = Tensor::random_uniform(&[4], -0.5, 0.5, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[5, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        results.extend(conv_checks("conv_sparse", &layer, &input, &mut rng));
    }

    // Tanh (smooth tolerance).
    {
        let input = Tensor::random_uniform(&[3, 5, 5], -2.0, 2.0, &mut rng).unwrap();
        let out = tanh_forward(&input);
        let proj = projection(out.len(), &mut rng).reshape(out.shape()).unwrap();
        let analytic = tanh_backward(&out, &proj);
        let fd = fd_gradient(&input, |x| project(&tanh_forward(x).flatten(), &proj.clone().flatten()));
        results.push(check("tanh/input", TOL_SMOOTH, analytic.data(), &fd));
    }

    // ReLU, inputs nudged away from the kink at zero.
    {
        let raw = Tensor::<f64>::random_uniform(&[3, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        let input = raw.map(|v| v + 0.05 * v.signum());
        let out = relu_forward(&input);
        let proj = projection(out.len(), &mut rng).reshape(out.shape()).unwrap();
        let analytic = relu_backward(&input, &proj);
        let fd = fd_gradient(&input, |x| project(&relu_forward(x).flatten(), &proj.clone().flatten()));
        results.push(check("relu/input", TOL_DEFAULT, analytic.data(), &fd));
    }

    // L2 pooling; inputs bounded away from zero windows.
    {
        let spec = PoolSpec { size: 2, mode: PoolMode::L2 };
        let raw = Tensor::<f64>::random_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let input = raw.map(|v| v + 0.1 * v.signum());
        let (out, _) = pool_forward(&spec, &input).unwrap();
        let proj = projection(out.len(), &mut rng).reshape(out.shape()).unwrap();
        let analytic = pool_backward(&spec, &input, &out, None, &proj).unwrap();
        let fd = fd_gradient(&input, |x| {
            let (o, _) = pool_forward(&spec, x).unwrap();
            project(&o.flatten(), &proj.clone().flatten())
        });
        results.push(check("pool_l2/input", TOL_DEFAULT, analytic.data(), &fd));
    }

    // Max pooling (ties have measure zero under random inputs).
    {
        let spec = PoolSpec { size: 3, mode: PoolMode::Max };
        let input = Tensor::<f64>::random_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let (out, argmax) = pool_forward(&spec, &input).unwrap();
        let proj = projection(out.len(), &mut rng).reshape(out.shape()).unwrap();
        let analytic = pool_backward(&spec, &input, &out, argmax.as_deref(), &proj).unwrap();
        let fd = fd_gradient(&input, |x| {
            let (o, _) = pool_forward(&spec, x).unwrap();
            project(&o.flatten(), &proj.clone().flatten())
        });
        results.push(check("pool_max/input", TOL_DEFAULT, analytic.data(), &fd));
    }

    // Subtractive normalization (linear; checked including borders).
    {
        let spec = NormSpec::default();
        let input = Tensor::<f64>::random_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng).unwrap();
        let out = subnorm_forward(&spec, &input).unwrap();
        let proj = projection(out.len(), &mut rng).reshape(out.shape()).unwrap();
        let analytic = subnorm_backward(&spec, &proj).unwrap();
        let fd = fd_gradient(&input, |x| {
            project(&subnorm_forward(&spec, x).unwrap().flatten(), &proj.clone().flatten())
        });
        results.push(check("subnorm/input", TOL_DEFAULT, analytic.data(), &fd));
    }

    // Fully-connected (smooth tolerance).
    {
        let mut layer = FcLayer::<f64>::new(12, 5).unwrap();
        layer.weights = Tensor::random_uniform(&[5, 12], -1.0, 1.0, &mut rng).unwrap();
        layer.bias = Tensor::random_uniform(&[5], -0.5, 0.5, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[12], -1.0, 1.0, &mut rng).unwrap();
        let out = layer.forward(&input).unwrap();
        let proj = projection(out.len(), &mut rng);
        let (gi, gw, gb) = layer.backward(&input, &proj, true).unwrap();
        let fd_w = fd_gradient(&layer.weights, |w| {
            let mut l = layer.clone();
            l.weights = w.clone();
            project(&l.forward(&input).unwrap(), &proj)
        });
        let fd_b = fd_gradient(&layer.bias, |b| {
            let mut l = layer.clone();
            l.bias = b.clone();
            project(&l.forward(&input).unwrap(), &proj)
        });
        let fd_x = fd_gradient(&input, |x| project(&layer.forward(x).unwrap(), &proj));
        results.push(check("fc/weights", TOL_SMOOTH, gw.data(), &fd_w));
        results.push(check("fc/bias", TOL_SMOOTH, gb.data(), &fd_b));
        results.push(check("fc/input", TOL_SMOOTH, gi.unwrap().data(), &fd_x));
    }

    results
}

/// A small two-block network whose siamese gradient can be checked on
/// every weight.
fn small_spec(units: Unit, pooling: PoolMode, fc: bool) -> NetworkSpec {
    NetworkSpec {
        name: "gradcheck-small".into(),
        input_side: 16,
        blocks: vec![
            ConvBlockSpec { n_out: 3, kernel: 3, pool: 2, fan_in: FanInRule::Dense },
            ConvBlockSpec { n_out: 4, kernel: 4, pool: 4, fan_in: FanInRule::Half },
        ],
        fc_out: fc.then_some(6),
        units,
        normalization: true,
        pooling,
        output_dim: if fc { 6 } else { 4 },
    }
}

/// Siamese objective: loss of one pair as a function of the shared
/// weights.
fn siamese_objective(
    state: &NetworkState<f64>,
    x1: &Tensor<f64>,
    x2: &Tensor<f64>,
    matching: bool,
    cfg: &PairLossConfig,
) -> f64 {
    let d1 = state.forward(x1).unwrap();
    let d2 = state.forward(x2).unwrap();
    let d = l2_distance_slice(d1.data(), d2.data());
    crate::loss::pair_loss(d, matching, cfg).unwrap()
}

/// Full-gradient siamese check over every weight of a small network.
pub fn run_siamese_small(seed: u64) -> Vec<GradCheck> {
    let mut results = Vec::new();
    let mut rng = Rng::new(seed ^ 0x5135);
    for (tag, units, pooling, fc) in [
        ("tanh_l2", Unit::Tanh, PoolMode::L2, false),
        ("relu_max_fc", Unit::Relu, PoolMode::Max, true),
    ] {
        let spec = small_spec(units, pooling, fc);
        let state: NetworkState<f64> = NetworkState::build(&spec, rng.next_u64()).unwrap();
        let x1 = Tensor::random_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
        let x2 = Tensor::random_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();

        for matching in [true, false] {
            // Put the margin far from the hinge boundary so finite
            // differences stay on one side.
            let d1 = state.forward(&x1).unwrap();
            let d2 = state.forward(&x2).unwrap();
            let d = l2_distance_slice(d1.data(), d2.data());
            let cfg = PairLossConfig { margin: 2.0 * d };

            let analytic = pair_backward(&state, &x1, &x2, matching, &cfg)
                .unwrap()
                .gradients
                .unwrap();
            let blocks = state.param_tensors();
            for (bi, block) in blocks.iter().enumerate() {
                let fd = fd_gradient(block, |t| {
                    let mut s = state.clone();
                    *s.param_tensors_mut()[bi] = t.clone();
                    siamese_objective(&s, &x1, &x2, matching, &cfg)
                });
                results.push(check(
                    &format!(
                        "siamese_small_{tag}/{}/block{bi}",
                        if matching { "pos" } else { "neg" }
                    ),
                    TOL_DEFAULT,
                    analytic.blocks[bi].data(),
                    &fd,
                ));
            }
        }
    }
    results
}

/// Sampled-coordinate siamese check for a full registry architecture.
///
/// Exhaustive sweeps are infeasible (two 64x64 forwards per coordinate),
/// so a fixed number of coordinates per parameter tensor is drawn
/// deterministically and the normwise error is taken over the sample.
pub fn run_siamese_sampled(spec: &NetworkSpec, seed: u64, per_block: usize) -> Vec<GradCheck> {
    let mut rng = Rng::new(seed ^ 0xc33);
    let state: NetworkState<f64> = NetworkState::build(spec, rng.next_u64()).unwrap();
    let side = spec.input_side;
    let x1 = Tensor::random_uniform(&[1, side, side], -1.0, 1.0, &mut rng).unwrap();
    let x2 = Tensor::random_uniform(&[1, side, side], -1.0, 1.0, &mut rng).unwrap();

    let mut results = Vec::new();
    for matching in [true, false] {
        let d1 = state.forward(&x1).unwrap();
        let d2 = state.forward(&x2).unwrap();
        let d = l2_distance_slice(d1.data(), d2.data());
        let cfg = PairLossConfig { margin: 2.0 * d };

        let analytic = pair_backward(&state, &x1, &x2, matching, &cfg)
            .unwrap()
            .gradients
            .unwrap();

        let mut sampled_analytic = Vec::new();
        let mut sampled_fd = Vec::new();
        let n_blocks = state.param_tensors().len();
        for bi in 0..n_blocks {
            let block_len = state.param_tensors()[bi].len();
            let take = per_block.min(block_len);
            let coords = rng.sample_distinct(block_len, take);
            for ci in coords {
                sampled_analytic.push(analytic.blocks[bi].data()[ci]);
                let mut work = state.clone();
                let orig = work.param_tensors()[bi].data()[ci];
                work.param_tensors_mut()[bi].data_mut()[ci] = orig + FD_STEP;
                let plus = siamese_objective(&work, &x1, &x2, matching, &cfg);
                work.param_tensors_mut()[bi].data_mut()[ci] = orig - FD_STEP;
                let minus = siamese_objective(&work, &x1, &x2, matching, &cfg);
                sampled_fd.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        results.push(check(
            &format!(
                "siamese_{}/{}/sampled",
                spec.name,
                if matching { "pos" } else { "neg" }
            ),
            TOL_DEFAULT,
            &sampled_analytic,
            &sampled_fd,
        ));
    }
    results
}

/// The complete verification suite: every layer type, the small siamese
/// network on all weights, and the given architecture on sampled
/// coordinates.
pub fn run_full_suite(arch: ArchName, seed: u64) -> Vec<GradCheck> {
    let mut results = run_layer_suite(seed);
    results.extend(run_siamese_small(seed));
    results.extend(run_siamese_sampled(&NetworkSpec::named(arch), seed, 12));
    results
}
