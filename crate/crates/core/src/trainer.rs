//! The training loop: dataset normalization, SGD with momentum, step
//! learning-rate decay, hard-pair mining per iteration, and
//! validation-driven model selection.
//!
//! Each iteration samples a pool of candidate positive and negative pairs,
//! forward-propagates them, prunes each pool to its highest-loss pairs,
//! backpropagates the kept pairs as one combined batch, and applies one
//! SGD step. Every `validation_every` iterations the model is scored on a
//! reduced validation replica (PR AUC) and the best-scoring checkpoint is
//! retained; the returned checkpoint is re-scored on the configured final
//! protocol. No regularization of any kind is applied.
//!
//! Determinism: sampling, mining and reductions all consume fixed-order
//! streams; parallel sections combine per-item results in index order, so
//! results are bit-identical for a given seed regardless of thread count.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_validation, PatchDataset, PATCH_PIXELS, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::eval::{build_eval_task, evaluate_fold, DescriptorTable, EvalTask};
use crate::loss::{descriptor_gradient, pair_loss, PairLossConfig};
use crate::network::{Gradients, NetworkSpec, NetworkState};
use crate::rng::Rng;
use crate::sampler::{
    mine, mining_cost_fraction, sample_negatives, sample_positives, IterationCost, MiningConfig,
    Pair,
};
use crate::tensor::Tensor;

/// Scalar mean and standard deviation over every pixel of the training
/// patches (after scaling to `[0, 1]`), applied to each patch before the
/// first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    #[inline]
    pub fn apply(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }
}

/// Two-pass mean/standard-deviation (population) in f64.
pub fn compute_norm_stats(dataset: &PatchDataset) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::dataset("cannot normalize an empty dataset"));
    }
    let n = (dataset.len() * PATCH_PIXELS) as f64;
    let mut sum = 0.0f64;
    for i in 0..dataset.len() {
        for &p in dataset.patch(i).pixels {
            sum += p as f64 / 255.0;
        }
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for i in 0..dataset.len() {
        for &p in dataset.patch(i).pixels {
            let d = p as f64 / 255.0 - mean;
            sq += d * d;
        }
    }
    let std = (sq / n).sqrt();
    if std == 0.0 {
        return Err(Error::dataset(
            "training patches are constant (zero standard deviation)",
        ));
    }
    Ok(NormStats { mean, std })
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub margin: f64,
    pub mining: MiningConfig,
    pub max_iterations: u64,
    pub validation_every: u64,
    /// Unique point ids held out of training for validation.
    pub validation_reserve_points: usize,
    /// Reduced replica scored during training.
    pub validation_points: usize,
    pub validation_negatives: usize,
    /// Protocol used to re-score the selected checkpoint at the end.
    pub final_validation_points: usize,
    pub final_validation_negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay_every: 10_000,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            margin: 1.0,
            mining: MiningConfig::default(),
            max_iterations: 50_000,
            validation_every: 500,
            validation_reserve_points: 10_000,
            validation_points: 1_000,
            validation_negatives: 100,
            final_validation_points: 1_000,
            final_validation_negatives: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every must be positive"));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::invalid("lr_decay_factor must exceed 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        if self.validation_every == 0 {
            return Err(Error::invalid("validation_every must be positive"));
        }
        if self.validation_points == 0
            || self.validation_negatives == 0
            || self.final_validation_points == 0
            || self.final_validation_negatives == 0
        {
            return Err(Error::invalid("validation protocol sizes must be positive"));
        }
        self.mining.validate()
    }
}

/// `lr0 / factor^floor(iteration / decay_every)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / cfg.lr_decay_factor.powi((iteration / cfg.lr_decay_every) as i32)
}

/// One SGD-with-momentum update: `v <- momentum * v - lr * g`,
/// `w <- w + v`. Rejects non-finite gradients.
pub fn sgd_step(
    state: &mut NetworkState<f32>,
    grads: &Gradients<f32>,
    velocity: &mut Gradients<f32>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    grads.validate_finite("gradient")?;
    let params = state.param_tensors_mut();
    if params.len() != grads.blocks.len() || params.len() != velocity.blocks.len() {
        return Err(Error::shape("gradient/velocity blocks do not match parameters"));
    }
    let lr = lr as f32;
    let momentum = momentum as f32;
    for ((w, g), v) in params
        .into_iter()
        .zip(&grads.blocks)
        .zip(&mut velocity.blocks)
    {
        for ((wv, &gv), vv) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = momentum * *vv - lr * gv;
            *wv += *vv;
        }
    }
    Ok(())
}

/// Everything `train` derives from the dataset before the loop starts:
/// the split, the dataset statistics, and both validation tasks. Exposed
/// so callers can score baselines on exactly the tasks training used.
pub struct TrainSetup {
    pub train: PatchDataset,
    pub validation: PatchDataset,
    pub stats: NormStats,
    pub replica_task: EvalTask,
    pub final_task: EvalTask,
}

/// Deterministic pre-training setup for a dataset and config.
pub fn prepare(dataset: &PatchDataset, cfg: &TrainConfig) -> Result<TrainSetup> {
    cfg.validate()?;
    let (train, validation) =
        split_validation(dataset, cfg.validation_reserve_points, cfg.seed)?;
    let stats = compute_norm_stats(&train)?;
    let base = Rng::new(cfg.seed);
    let replica_task = build_eval_task(
        &validation,
        cfg.validation_points,
        cfg.validation_negatives,
        base.derive(2).seed(),
    )?;
    let final_task = build_eval_task(
        &validation,
        cfg.final_validation_points,
        cfg.final_validation_negatives,
        base.derive(3).seed(),
    )?;
    Ok(TrainSetup {
        train,
        validation,
        stats,
        replica_task,
        final_task,
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Best checkpoint by replica validation PR AUC (the initialized state
    /// when no iterations ran).
    pub state: NetworkState<f32>,
    pub best_iteration: u64,
    pub best_val_pr_auc: Option<f64>,
    /// Best checkpoint re-scored on the final validation protocol.
    pub final_val_pr_auc: Option<f64>,
    /// Full training-log text (see [`LOG_HEADER`] for the schema).
    pub log: String,
    /// Measured wall-clock fraction of iteration time spent forwarding the
    /// candidate pools; `None` when no mining pass ran.
    pub wall_mining_fraction: Option<f64>,
    /// Deterministic work-unit analogue of the wall-clock fraction
    /// (forward passes, with backward passes counted twice).
    pub work_mining_fraction: Option<f64>,
    pub iterations_run: u64,
}

/// Training-log schema: tab-separated records, one per iteration.
/// `mining_frac` is the deterministic work-unit fraction (`-` when both
/// pools are backpropagated unpruned); `val_pr_auc` is `-` on iterations
/// without a validation pass.
pub const LOG_HEADER: &str =
    "# training log v1\n# columns: iteration\tloss\tlr\tmining_frac\tval_pr_auc\n";

fn normalized_patch(ds: &PatchDataset, patch: usize, stats: &NormStats) -> Tensor<f32> {
    let data: Vec<f32> = ds
        .patch(patch)
        .pixels
        .iter()
        .map(|&p| stats.apply(p as f64 / 255.0) as f32)
        .collect();
    Tensor::from_vec(&[1, PATCH_SIDE, PATCH_SIDE], data).unwrap()
}

/// First-occurrence-ordered distinct patch indices of a pair list.
fn distinct_patches(pairs: &[Pair]) -> (Vec<u32>, HashMap<u32, u32>) {
    let mut order = Vec::new();
    let mut slots = HashMap::new();
    for p in pairs {
        for idx in [p.a, p.b] {
            slots.entry(idx).or_insert_with(|| {
                order.push(idx);
                (order.len() - 1) as u32
            });
        }
    }
    (order, slots)
}

/// Descriptors for the listed patches, in order, in parallel.
fn descriptors_of(
    state: &NetworkState<f32>,
    ds: &PatchDataset,
    stats: &NormStats,
    patches: &[u32],
) -> Result<Vec<Vec<f32>>> {
    patches
        .par_iter()
        .map(|&p| {
            let t = normalized_patch(ds, p as usize, stats);
            state.forward(&t).map(|d| d.into_data())
        })
        .collect()
}

fn batch_losses(
    pairs: &[Pair],
    descs: &[Vec<f32>],
    slots: &HashMap<u32, u32>,
    loss_cfg: &PairLossConfig,
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let da = &descs[slots[&p.a] as usize];
            let db = &descs[slots[&p.b] as usize];
            pair_loss(
                crate::tensor::l2_distance_slice(da, db),
                p.matching,
                loss_cfg,
            )
        })
        .collect()
}

/// Runs the full training loop. `init_from` warm-starts the weights and
/// resets the iteration counter and optimizer slots; the dataset
/// statistics are always recomputed from the current training split.
pub fn train(
    dataset: &PatchDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init_from: Option<&NetworkState<f32>>,
) -> Result<TrainOutcome> {
    if spec.input_side != PATCH_SIDE {
        return Err(Error::invalid(format!(
            "training data holds {PATCH_SIDE}x{PATCH_SIDE} patches but the network expects {0}x{0}",
            spec.input_side
        )));
    }
    let setup = prepare(dataset, cfg)?;
    let train_ds = &setup.train;
    let index = train_ds.index();
    let loss_cfg = PairLossConfig::new(cfg.margin)?;

    let mut state = match init_from {
        Some(s) => {
            if s.spec != *spec {
                return Err(Error::invalid(
                    "warm-start checkpoint architecture does not match the configured spec",
                ));
            }
            s.clone()
        }
        None => NetworkState::<f32>::build(spec, cfg.seed)?,
    };
    state.iteration = 0;
    state.norm_stats = Some(setup.stats);

    let mut velocity = state.zero_gradients();
    let mut sample_rng = Rng::new(cfg.seed).derive(1);
    let mut log = String::from(LOG_HEADER);

    let mut best: Option<(f64, u64, NetworkState<f32>)> = None;
    let mining_active = !cfg.mining.is_plain();
    let mut work_mining = 0.0f64;
    let mut work_total = 0.0f64;
    let mut wall_mining = 0.0f64;
    let mut wall_total = 0.0f64;

    for i in 0..cfg.max_iterations {
        let iter_start = Instant::now();
        let lr = lr_at(i, cfg);

        let positives = sample_positives(&index, cfg.mining.pool_positives, &mut sample_rng)?;
        let negatives = sample_negatives(&index, cfg.mining.pool_negatives, &mut sample_rng)?;

        // Mining pass: forward the full pools, keep the hardest pairs.
        let mut iter_work_mining = 0.0;
        let (kept, kept_descs, kept_slots) = if mining_active {
            let all_pairs: Vec<Pair> = positives
                .pairs
                .iter()
                .chain(&negatives.pairs)
                .copied()
                .collect();
            let (pool_patches, pool_slots) = distinct_patches(&all_pairs);
            let mining_start = Instant::now();
            let pool_descs = descriptors_of(&state, train_ds, &setup.stats, &pool_patches)?;
            wall_mining += mining_start.elapsed().as_secs_f64();
            iter_work_mining = pool_patches.len() as f64;

            let mut pos = positives;
            pos.losses = batch_losses(&pos.pairs, &pool_descs, &pool_slots, &loss_cfg)?;
            let mut neg = negatives;
            neg.losses = batch_losses(&neg.pairs, &pool_descs, &pool_slots, &loss_cfg)?;

            let pos_kept = mine(&pos, cfg.mining.keep_positives)?;
            let neg_kept = mine(&neg, cfg.mining.keep_negatives)?;
            let mut kept = pos_kept;
            kept.pairs.extend(neg_kept.pairs);
            kept.losses.extend(neg_kept.losses);
            (kept, pool_descs, pool_slots)
        } else {
            // Both pools are backpropagated unpruned: no mining pass, the
            // descriptors are computed once for the combined batch below.
            let mut kept = positives;
            kept.pairs.extend(negatives.pairs);
            let (patches, slots) = distinct_patches(&kept.pairs);
            let descs = descriptors_of(&state, train_ds, &setup.stats, &patches)?;
            kept.losses = batch_losses(&kept.pairs, &descs, &slots, &loss_cfg)?;
            (kept, descs, slots)
        };
        let kept_distinct = {
            let (order, _) = distinct_patches(&kept.pairs);
            order
        };
        let plain_fwd = if mining_active { 0.0 } else { kept_distinct.len() as f64 };

        // Per-patch descriptor gradients, accumulated over the combined
        // batch in pair order.
        let dim = state.spec.output_dim;
        let kept_slot_of: HashMap<u32, u32> = kept_distinct
            .iter()
            .enumerate()
            .map(|(s, &p)| (p, s as u32))
            .collect();
        let mut desc_grads = vec![vec![0.0f32; dim]; kept_distinct.len()];
        for p in &kept.pairs {
            let da = Tensor::from_vec(&[dim], kept_descs[kept_slots[&p.a] as usize].clone())?;
            let db = Tensor::from_vec(&[dim], kept_descs[kept_slots[&p.b] as usize].clone())?;
            if let Some(g) = descriptor_gradient(&da, &db, p.matching, &loss_cfg)? {
                let sa = kept_slot_of[&p.a] as usize;
                let sb = kept_slot_of[&p.b] as usize;
                for (acc, &gv) in desc_grads[sa].iter_mut().zip(g.data()) {
                    *acc += gv;
                }
                for (acc, &gv) in desc_grads[sb].iter_mut().zip(g.data()) {
                    *acc -= gv;
                }
            }
        }

        // Backward per contributing patch (parallel), summed in slot order.
        let per_patch: Vec<Option<Gradients<f32>>> = kept_distinct
            .par_iter()
            .zip(&desc_grads)
            .map(|(&patch, g)| {
                if g.iter().all(|&v| v == 0.0) {
                    return Ok(None);
                }
                let t = normalized_patch(train_ds, patch as usize, &setup.stats);
                let (_, trace) = state.forward_traced(&t)?;
                let grad = Tensor::from_vec(&[dim], g.clone())?;
                state.backward(&trace, &grad).map(Some)
            })
            .collect::<Result<_>>()?;

        let mut total = state.zero_gradients();
        let mut backward_count = 0.0f64;
        for g in per_patch.into_iter().flatten() {
            total.add(&g);
            backward_count += 1.0;
        }
        // Mean over the combined kept batch.
        total.scale(1.0 / kept.pairs.len() as f32);

        sgd_step(&mut state, &total, &mut velocity, lr, cfg.momentum)?;
        state.iteration = i + 1;

        // Work units: one per forward pass, two per backward pass.
        let iter_work_train = plain_fwd + backward_count * 3.0;
        work_mining += iter_work_mining;
        work_total += iter_work_mining + iter_work_train;

        let loss_mean: f64 = kept.losses.iter().sum::<f64>() / kept.losses.len() as f64;

        // Validation pass and best-checkpoint selection.
        let mut val_col = String::from("-");
        if (i + 1) % cfg.validation_every == 0 || i + 1 == cfg.max_iterations {
            let auc = replica_auc(&state, &setup)?;
            val_col = auc.to_string();
            if best.as_ref().map_or(true, |(b, _, _)| auc > *b) {
                best = Some((auc, i + 1, state.clone()));
            }
        }

        let frac_col = if mining_active {
            let f = mining_cost_fraction(&IterationCost {
                mining_forward: iter_work_mining,
                total: iter_work_mining + iter_work_train,
            })?;
            f.to_string()
        } else {
            String::from("-")
        };
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            i + 1,
            loss_mean,
            lr,
            frac_col,
            val_col
        ));
        wall_total += iter_start.elapsed().as_secs_f64();
    }

    let (best_auc, best_iteration, best_state) = match best {
        Some((a, i, s)) => (Some(a), i, s),
        None => (None, 0, state),
    };
    let final_auc = if cfg.max_iterations > 0 {
        let table = DescriptorTable::from_network(&best_state, &setup.validation)?;
        Some(evaluate_fold(&table, &setup.final_task)?.pr.auc())
    } else {
        None
    };

    Ok(TrainOutcome {
        state: best_state,
        best_iteration,
        best_val_pr_auc: best_auc,
        final_val_pr_auc: final_auc,
        log,
        wall_mining_fraction: (mining_active && wall_total > 0.0)
            .then(|| wall_mining / wall_total),
        work_mining_fraction: (mining_active && work_total > 0.0)
            .then(|| work_mining / work_total),
        iterations_run: cfg.max_iterations,
    })
}

fn replica_auc(state: &NetworkState<f32>, setup: &TrainSetup) -> Result<f64> {
    let table = DescriptorTable::from_network(state, &setup.validation)?;
    Ok(evaluate_fold(&table, &setup.replica_task)?.pr.auc())
}
