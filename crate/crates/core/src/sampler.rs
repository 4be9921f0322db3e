//! Pair combinatorics, stochastic pair sampling, and hard-pair mining.
//!
//! A dataset with `N` patches grouped into `M` unique 3D points (sizes
//! `n_i`) holds `N_P = sum n_i (n_i - 1) / 2` matching pairs and
//! `N_N = sum n_i (N - n_i)` non-matching combinations (the latter counts
//! each unordered pair twice; [`PairCounts::negatives_unordered`] halves
//! it). Both are far too large to enumerate, so training samples candidate
//! pools at random and prunes each pool to its highest-loss pairs before
//! backpropagation.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Patch-to-point index of a dataset: which patches belong to which unique
/// 3D point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    /// `point_patches[i]` lists the patch indices of point `i`.
    point_patches: Vec<Vec<u32>>,
    /// Point id of every patch.
    patch_point: Vec<u32>,
    /// Points with at least two patches (eligible as positives).
    multi_patch_points: Vec<u32>,
}

impl DatasetIndex {
    /// Builds the index from one point id per patch. Point ids may be
    /// arbitrary `u32`s; they are grouped by value.
    pub fn from_point_ids(ids: &[u32]) -> DatasetIndex {
        let mut order: Vec<u32> = Vec::new();
        let mut groups: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
        let mut point_patches: Vec<Vec<u32>> = Vec::new();
        let mut patch_point = Vec::with_capacity(ids.len());
        for (patch, &id) in ids.iter().enumerate() {
            let slot = *groups.entry(id).or_insert_with(|| {
                order.push(id);
                point_patches.push(Vec::new());
                (point_patches.len() - 1) as u32
            });
            point_patches[slot as usize].push(patch as u32);
            patch_point.push(slot);
        }
        let multi_patch_points = point_patches
            .iter()
            .enumerate()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(i, _)| i as u32)
            .collect();
        DatasetIndex {
            point_patches,
            patch_point,
            multi_patch_points,
        }
    }

    /// Number of unique points `M`.
    pub fn point_count(&self) -> usize {
        self.point_patches.len()
    }

    /// Total patch count `N`.
    pub fn patch_count(&self) -> usize {
        self.patch_point.len()
    }

    pub fn patches_of_point(&self, point: usize) -> &[u32] {
        &self.point_patches[point]
    }

    pub fn point_of_patch(&self, patch: usize) -> u32 {
        self.patch_point[patch]
    }

    /// Points with `n_i >= 2`.
    pub fn multi_patch_points(&self) -> &[u32] {
        &self.multi_patch_points
    }
}

/// Exact pair counts. `negatives` counts ordered combinations as the sum
/// formula is written; `negatives_unordered` is the derived pair count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub positives: u128,
    pub negatives: u128,
}

impl PairCounts {
    pub fn negatives_unordered(&self) -> u128 {
        self.negatives / 2
    }
}

/// Evaluates both counting formulas exactly in 128-bit integers.
pub fn count_pairs(index: &DatasetIndex) -> PairCounts {
    let n = index.patch_count() as u128;
    let mut positives = 0u128;
    let mut negatives = 0u128;
    for group in &index.point_patches {
        let ni = group.len() as u128;
        positives += ni * (ni - 1) / 2;
        negatives += ni * (n - ni);
    }
    PairCounts {
        positives,
        negatives,
    }
}

/// Candidate pool sizes and kept ("hardest") counts for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    /// Positive pool size.
    pub pool_positives: usize,
    /// Positives kept for backpropagation.
    pub keep_positives: usize,
    /// Negative pool size.
    pub pool_negatives: usize,
    /// Negatives kept for backpropagation.
    pub keep_negatives: usize,
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep_positives == 0 || self.keep_negatives == 0 {
            return Err(Error::invalid("kept pair counts must be at least 1"));
        }
        if self.pool_positives < self.keep_positives || self.pool_negatives < self.keep_negatives {
            return Err(Error::invalid(format!(
                "pool sizes must be >= kept counts: {self:?}"
            )));
        }
        Ok(())
    }

    /// Pool-to-kept ratio for positives.
    pub fn ratio_positives(&self) -> f64 {
        self.pool_positives as f64 / self.keep_positives as f64
    }

    pub fn ratio_negatives(&self) -> f64 {
        self.pool_negatives as f64 / self.keep_negatives as f64
    }

    /// True when both pools are backpropagated unpruned (no mining pass).
    pub fn is_plain(&self) -> bool {
        self.pool_positives == self.keep_positives && self.pool_negatives == self.keep_negatives
    }
}

impl Default for MiningConfig {
    fn default() -> Self {
        // Negative mining at ratio 2, no positive mining.
        MiningConfig {
            pool_positives: 128,
            keep_positives: 128,
            pool_negatives: 256,
            keep_negatives: 128,
        }
    }
}

/// One sampled pair: two patch indices plus the matching indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: u32,
    pub b: u32,
    pub matching: bool,
}

/// A batch of pairs with (once computed) their losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    /// Parallel to `pairs`; filled after the forward pass.
    pub losses: Vec<f64>,
}

impl PairBatch {
    pub fn new(pairs: Vec<Pair>) -> PairBatch {
        PairBatch {
            pairs,
            losses: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `count` matching pairs: point ids drawn uniformly (with
/// replacement across the batch) from points with at least two patches,
/// then two distinct patches drawn uniformly within the point.
pub fn sample_positives(index: &DatasetIndex, count: usize, rng: &mut Rng) -> Result<PairBatch> {
    let eligible = index.multi_patch_points();
    if eligible.is_empty() {
        return Err(Error::dataset(
            "no point has two patches; cannot sample matching pairs",
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let point = eligible[rng.below(eligible.len())] as usize;
        let patches = index.patches_of_point(point);
        let picks = rng.sample_distinct(patches.len(), 2);
        pairs.push(Pair {
            a: patches[picks[0]],
            b: patches[picks[1]],
            matching: true,
        });
    }
    Ok(PairBatch::new(pairs))
}

/// Samples `count` non-matching pairs by rejection on uniform patch pairs.
pub fn sample_negatives(index: &DatasetIndex, count: usize, rng: &mut Rng) -> Result<PairBatch> {
    Ok(sample_negatives_counting(index, count, rng)?.0)
}

/// Like [`sample_negatives`] but also reports how many candidate draws were
/// rejected for sharing a point id.
pub fn sample_negatives_counting(
    index: &DatasetIndex,
    count: usize,
    rng: &mut Rng,
) -> Result<(PairBatch, u64)> {
    if index.point_count() < 2 {
        return Err(Error::dataset(
            "need at least two unique points to sample non-matching pairs",
        ));
    }
    let n = index.patch_count();
    let mut rejected = 0u64;
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let a = rng.below(n);
        let b = rng.below(n);
        if a == b || index.point_of_patch(a) == index.point_of_patch(b) {
            rejected += 1;
            continue;
        }
        pairs.push(Pair {
            a: a as u32,
            b: b as u32,
            matching: false,
        });
    }
    Ok((PairBatch::new(pairs), rejected))
}

/// Keeps the `keep` highest-loss pairs of a batch.
///
/// Ties break toward the lower original batch position, and the kept pairs
/// are returned in their original order (stable selection).
pub fn mine(batch: &PairBatch, keep: usize) -> Result<PairBatch> {
    if batch.losses.len() != batch.pairs.len() {
        return Err(Error::invalid(
            "mine() requires losses computed for every pair",
        ));
    }
    if keep > batch.len() {
        return Err(Error::invalid(format!(
            "cannot keep {keep} of {} pairs",
            batch.len()
        )));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&i, &j| {
        batch.losses[j]
            .partial_cmp(&batch.losses[i])
            .expect("pair losses must not be NaN")
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(PairBatch {
        pairs: kept.iter().map(|&i| batch.pairs[i]).collect(),
        losses: kept.iter().map(|&i| batch.losses[i]).collect(),
    })
}

/// Cost split of one training iteration, in any consistent unit (wall-clock
/// seconds or deterministic work units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationCost {
    /// Cost of forward-propagating the candidate pools.
    pub mining_forward: f64,
    /// Total iteration cost.
    pub total: f64,
}

/// Fraction of an iteration's cost spent mining (forwarding the full
/// candidate pools), in `[0, 1]`.
pub fn mining_cost_fraction(cost: &IterationCost) -> Result<f64> {
    if cost.total <= 0.0 {
        return Err(Error::invalid("total iteration cost must be positive"));
    }
    Ok((cost.mining_forward / cost.total).clamp(0.0, 1.0))
}
