//! The matching evaluation protocol and its three metric families.
//!
//! A task samples query points from a dataset: for each point, two
//! corresponding patches (anchor and true match) plus `n_neg` distractor
//! patches from other points. All queries are pooled into single
//! precision-recall and ROC curves (micro-averaging), and per-query ranks
//! of the true match yield the CMC curve. Each curve carries its AUC:
//! trapezoidal for PR and ROC, the rank average `(1/n) * sum_k CMC(k)` for
//! CMC.
//!
//! Ties in the pooled distance list enter threshold sweeps as one group;
//! CMC ranks are pessimistic (the true match is placed after equal-distance
//! distractors). Under any strictly monotone transform of the distances
//! all three curves are unchanged.

use std::path::Path;

use rayon::prelude::*;

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::network::NetworkState;
use crate::rng::Rng;
use crate::tensor::l2_distance_slice;

/// One benchmark query: anchor, its true match, and distractors (patch
/// indices into the evaluation dataset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalQuery {
    pub anchor: u32,
    pub positive: u32,
    pub distractors: Vec<u32>,
}

/// A deterministic evaluation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTask {
    pub queries: Vec<EvalQuery>,
    pub n_neg: usize,
    pub fold_seed: u64,
}

/// Builds one evaluation fold: `n_points` query points drawn without
/// replacement from the points with at least two patches, two
/// corresponding patches per point, and `n_neg` distinct distractors drawn
/// uniformly from the patches of other points.
pub fn build_eval_task(
    dataset: &PatchDataset,
    n_points: usize,
    n_neg: usize,
    fold_seed: u64,
) -> Result<EvalTask> {
    let index = dataset.index();
    let eligible = index.multi_patch_points();
    if n_points == 0 || eligible.len() < n_points {
        return Err(Error::dataset(format!(
            "task wants {n_points} query points but only {} points have two patches",
            eligible.len()
        )));
    }
    let total = dataset.len();
    let mut rng = Rng::new(fold_seed);
    let chosen = rng.sample_distinct(eligible.len(), n_points);

    let mut queries = Vec::with_capacity(n_points);
    for pick in chosen {
        let point = eligible[pick] as usize;
        let patches = index.patches_of_point(point);
        let available = total - patches.len();
        if n_neg == 0 || n_neg > available {
            return Err(Error::dataset(format!(
                "task wants {n_neg} distractors but only {available} non-matching patches exist"
            )));
        }
        let two = rng.sample_distinct(patches.len(), 2);
        let (anchor, positive) = (patches[two[0]], patches[two[1]]);

        let mut distractors = Vec::with_capacity(n_neg);
        if n_neg * 2 >= available {
            // Dense draw: partial Fisher-Yates over the explicit
            // complement.
            let mut pool: Vec<u32> = (0..total as u32)
                .filter(|&p| index.point_of_patch(p as usize) != point as u32)
                .collect();
            for i in 0..n_neg {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
                distractors.push(pool[i]);
            }
        } else {
            // Sparse draw: rejection sampling on uniform patches.
            let mut seen = std::collections::HashSet::with_capacity(n_neg * 2);
            while distractors.len() < n_neg {
                let p = rng.below(total) as u32;
                if index.point_of_patch(p as usize) == point as u32 || !seen.insert(p) {
                    continue;
                }
                distractors.push(p);
            }
        }
        queries.push(EvalQuery {
            anchor,
            positive,
            distractors,
        });
    }
    Ok(EvalTask {
        queries,
        n_neg,
        fold_seed,
    })
}

/// Builds `folds` tasks with seeds `base_seed + fold`.
pub fn build_eval_folds(
    dataset: &PatchDataset,
    n_points: usize,
    n_neg: usize,
    base_seed: u64,
    folds: usize,
) -> Result<Vec<EvalTask>> {
    (0..folds)
        .map(|f| build_eval_task(dataset, n_points, n_neg, base_seed.wrapping_add(f as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Pr,
    Roc,
    Cmc,
}

impl CurveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CurveKind::Pr => "pr",
            CurveKind::Roc => "roc",
            CurveKind::Cmc => "cmc",
        }
    }

    fn columns(&self) -> &'static str {
        match self {
            CurveKind::Pr => "recall precision",
            CurveKind::Roc => "tnr tpr",
            CurveKind::Cmc => "rank fraction",
        }
    }
}

/// A sampled monotone curve with its area under the curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    kind: CurveKind,
    points: Vec<(f64, f64)>,
    auc: f64,
}

impl Curve {
    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn auc(&self) -> f64 {
        self.auc
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) * 0.5;
    }
    area
}

/// Indices of `distances` sorted ascending, grouped at equal values.
/// Returns the boundaries of each tie group in the sorted order.
fn sorted_groups(distances: &[f64]) -> Result<(Vec<u32>, Vec<(usize, usize)>)> {
    if distances.iter().any(|d| d.is_nan()) {
        return Err(Error::NonFinite("distance list contains NaN".into()));
    }
    let mut order: Vec<u32> = (0..distances.len() as u32).collect();
    order.sort_by(|&i, &j| {
        distances[i as usize]
            .partial_cmp(&distances[j as usize])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut groups = Vec::new();
    let mut start = 0usize;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && distances[order[end] as usize] == distances[order[start] as usize]
        {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    Ok((order, groups))
}

/// Pooled precision-recall curve.
///
/// Sorted ascending by distance with tie groups entering together;
/// `precision = TP / (TP + FP)` and `recall = TP / P` after each group. An
/// implicit starting point at recall 0 carries the first group's
/// precision. AUC is the trapezoid over recall.
pub fn pr_curve(distances: &[f64], labels: &[bool]) -> Result<Curve> {
    check_pool(distances, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("precision-recall needs at least one positive"));
    }
    let (order, groups) = sorted_groups(distances)?;

    let mut points = Vec::with_capacity(groups.len() + 1);
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(start, end) in &groups {
        for &i in &order[start..end] {
            if labels[i as usize] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    let first_precision = points[0].1;
    let mut full = Vec::with_capacity(points.len() + 1);
    full.push((0.0, first_precision));
    full.extend(points);
    let auc = trapezoid(&full);
    Ok(Curve {
        kind: CurveKind::Pr,
        points: full,
        auc,
    })
}

/// Pooled ROC curve: true positive rate `TP / P` as a function of the true
/// negative rate `1 - FP / N`, swept over grouped thresholds with both
/// degenerate endpoints included. AUC is the trapezoid over TNR, which
/// equals the rank statistic `P(d_pos < d_neg) + 0.5 P(tie)`.
pub fn roc_curve(distances: &[f64], labels: &[bool]) -> Result<Curve> {
    check_pool(distances, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("ROC needs both positives and negatives"));
    }
    let (order, groups) = sorted_groups(distances)?;

    // Threshold sweep from "accept nothing" to "accept everything".
    let mut swept = Vec::with_capacity(groups.len() + 1);
    swept.push((1.0f64, 0.0f64));
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(start, end) in &groups {
        for &i in &order[start..end] {
            if labels[i as usize] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let tnr = 1.0 - fp as f64 / negatives as f64;
        let tpr = tp as f64 / positives as f64;
        swept.push((tnr, tpr));
    }
    // Store ascending in x = TNR.
    swept.reverse();
    let auc = trapezoid(&swept);
    Ok(Curve {
        kind: CurveKind::Roc,
        points: swept,
        auc,
    })
}

/// CMC curve from per-query ranks: `CMC(k)` is the fraction of queries
/// whose true match has rank at most `k`, for `k = 1..=n_candidates`. AUC
/// is `(1/n_candidates) * sum_k CMC(k)`.
pub fn cmc_curve(ranks: &[usize], n_candidates: usize) -> Result<Curve> {
    if ranks.is_empty() || n_candidates == 0 {
        return Err(Error::invalid("CMC needs at least one rank and candidate"));
    }
    let mut hist = vec![0usize; n_candidates + 1];
    for &r in ranks {
        if r == 0 || r > n_candidates {
            return Err(Error::invalid(format!(
                "rank {r} out of range 1..={n_candidates}"
            )));
        }
        hist[r] += 1;
    }
    let total = ranks.len() as f64;
    let mut points = Vec::with_capacity(n_candidates);
    let mut cum = 0usize;
    let mut auc = 0.0;
    for k in 1..=n_candidates {
        cum += hist[k];
        let frac = cum as f64 / total;
        points.push((k as f64, frac));
        auc += frac;
    }
    auc /= n_candidates as f64;
    Ok(Curve {
        kind: CurveKind::Cmc,
        points,
        auc,
    })
}

fn check_pool(distances: &[f64], labels: &[bool]) -> Result<()> {
    if distances.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} distances vs {} labels",
            distances.len(),
            labels.len()
        )));
    }
    if distances.is_empty() {
        return Err(Error::invalid("empty distance pool"));
    }
    Ok(())
}

/// Precomputed descriptors for a dataset, either float vectors under L2
/// distance or packed binary vectors under Hamming distance.
#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorTable {
    Float { dim: usize, rows: Vec<f32> },
    Binary { bits: usize, stride: usize, rows: Vec<u8> },
}

impl DescriptorTable {
    pub fn len(&self) -> usize {
        match self {
            DescriptorTable::Float { dim, rows } => rows.len() / dim,
            DescriptorTable::Binary { stride, rows, .. } => rows.len() / stride,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            DescriptorTable::Float { dim, .. } => *dim,
            DescriptorTable::Binary { bits, .. } => *bits,
        }
    }

    /// Distance between two rows: L2 for float tables, Hamming for binary.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        match self {
            DescriptorTable::Float { dim, rows } => {
                l2_distance_slice(&rows[a * dim..(a + 1) * dim], &rows[b * dim..(b + 1) * dim])
            }
            DescriptorTable::Binary { stride, rows, .. } => {
                let ra = &rows[a * stride..(a + 1) * stride];
                let rb = &rows[b * stride..(b + 1) * stride];
                ra.iter()
                    .zip(rb)
                    .map(|(&x, &y)| (x ^ y).count_ones() as f64)
                    .sum()
            }
        }
    }

    /// Extracts descriptors for every patch of a dataset (in patch order,
    /// in parallel).
    pub fn from_network(state: &NetworkState<f32>, dataset: &PatchDataset) -> Result<Self> {
        let dim = state.spec.output_dim;
        let descs: Vec<Vec<f32>> = (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                state
                    .descriptor_from_pixels(dataset.patch(i).pixels)
                    .map(|t| t.into_data())
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(dataset.len() * dim);
        for d in descs {
            rows.extend_from_slice(&d);
        }
        Ok(DescriptorTable::Float { dim, rows })
    }
}

/// Metrics of one evaluation fold.
#[derive(Debug, Clone)]
pub struct FoldMetrics {
    pub pr: Curve,
    pub roc: Curve,
    pub cmc: Curve,
}

/// Per-fold metrics plus averages.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub folds: Vec<FoldMetrics>,
}

impl EvalSummary {
    pub fn mean_pr_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.pr.auc()).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_roc_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.roc.auc()).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_cmc_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.cmc.auc()).sum::<f64>() / self.folds.len() as f64
    }

    /// Fraction of queries whose true match ranked first, averaged over
    /// folds.
    pub fn mean_rank1_rate(&self) -> f64 {
        self.folds
            .iter()
            .map(|f| f.cmc.points()[0].1)
            .sum::<f64>()
            / self.folds.len() as f64
    }

    /// Tab-separated AUC table: one row per metric, one column per fold,
    /// plus the average.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric");
        for i in 0..self.folds.len() {
            out.push_str(&format!("\tfold{}", i + 1));
        }
        out.push_str("\tavg\n");
        let rows: [(&str, Box<dyn Fn(&FoldMetrics) -> f64>); 3] = [
            ("pr_auc", Box::new(|f: &FoldMetrics| f.pr.auc())),
            ("roc_auc", Box::new(|f: &FoldMetrics| f.roc.auc())),
            ("cmc_auc", Box::new(|f: &FoldMetrics| f.cmc.auc())),
        ];
        for (name, get) in rows {
            out.push_str(name);
            let mut sum = 0.0;
            for f in &self.folds {
                let v = get(f);
                sum += v;
                out.push_str(&format!("\t{:.6}", v));
            }
            out.push_str(&format!("\t{:.6}\n", sum / self.folds.len() as f64));
        }
        out
    }
}

/// Evaluates a descriptor table over one fold.
pub fn evaluate_fold(table: &DescriptorTable, task: &EvalTask) -> Result<FoldMetrics> {
    let mut distances = Vec::with_capacity(task.queries.len() * (task.n_neg + 1));
    let mut labels = Vec::with_capacity(distances.capacity());
    let mut ranks = Vec::with_capacity(task.queries.len());
    for q in &task.queries {
        let d_pos = table.distance(q.anchor as usize, q.positive as usize);
        distances.push(d_pos);
        labels.push(true);
        let mut rank = 1usize;
        for &d in &q.distractors {
            let d_neg = table.distance(q.anchor as usize, d as usize);
            distances.push(d_neg);
            labels.push(false);
            // Pessimistic rank: equal-distance distractors precede the
            // true match.
            if d_neg <= d_pos {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    Ok(FoldMetrics {
        pr: pr_curve(&distances, &labels)?,
        roc: roc_curve(&distances, &labels)?,
        cmc: cmc_curve(&ranks, task.n_neg + 1)?,
    })
}

/// Evaluates a descriptor table over several folds.
pub fn evaluate(table: &DescriptorTable, tasks: &[EvalTask]) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Err(Error::invalid("no evaluation folds"));
    }
    let folds = tasks
        .iter()
        .map(|t| evaluate_fold(table, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary { folds })
}

/// Writes a curve as delimited text: header lines with the kind and AUC,
/// then one `x<TAB>y` point per line.
pub fn write_curve(curve: &Curve, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "# kind: {}", curve.kind().as_str())?;
    writeln!(out, "# auc: {}", curve.auc())?;
    writeln!(out, "# columns: {}", curve.kind().columns())?;
    for (x, y) in curve.points() {
        writeln!(out, "{x}\t{y}")?;
    }
    Ok(())
}

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"PDDESC01";
pub const DESCRIPTOR_VERSION: u32 = 1;
const FLAG_BINARY: u32 = 1;

/// Writes a descriptor table:
///
/// ```text
/// magic "PDDESC01", version u32, count u64, dim u32, flags u32
/// (bit 0: packed binary rows), payload rows, crc u32
/// ```
///
/// Float rows are `dim` little-endian f32 values; binary rows pack `dim`
/// bits LSB-first into `ceil(dim / 8)` bytes and are compared with the
/// Hamming distance.
pub fn save_descriptors(table: &DescriptorTable, path: &Path) -> Result<()> {
    let mut w = Writer::new(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION);
    w.put_u64(table.len() as u64);
    w.put_u32(table.dim() as u32);
    match table {
        DescriptorTable::Float { rows, .. } => {
            w.put_u32(0);
            w.put_f32_slice(rows);
        }
        DescriptorTable::Binary { rows, .. } => {
            w.put_u32(FLAG_BINARY);
            w.put_bytes(rows);
        }
    }
    std::fs::write(path, w.finish())?;
    Ok(())
}

/// Reads a descriptor file written by [`save_descriptors`].
pub fn load_descriptors(path: &Path) -> Result<DescriptorTable> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)?;
    let count = r.get_u64()? as usize;
    let dim = r.get_u32()? as usize;
    let flags = r.get_u32()?;
    if dim == 0 {
        return Err(Error::format("descriptor dimension must be positive"));
    }
    let table = if flags & FLAG_BINARY != 0 {
        let stride = dim.div_ceil(8);
        let rows = r.get_bytes(count * stride)?.to_vec();
        DescriptorTable::Binary {
            bits: dim,
            stride,
            rows,
        }
    } else {
        let rows = r.get_f32_vec(count * dim)?;
        DescriptorTable::Float { dim, rows }
    };
    r.expect_end()?;
    Ok(table)
}
