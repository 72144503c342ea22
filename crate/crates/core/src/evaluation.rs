//! Evaluation protocol: precision-recall sweeps under the three-stage
//! detection criterion, averaged correct-match percentage, separation
//! statistics, and plottable artifacts.
//!
//! A candidate pair counts as a detected loop closure at threshold `t` when
//! (a) the embedded descriptor distance is below `t`, (b) registration
//! succeeds with enough correspondences, and (c) the resulting edge survives
//! robust pose-graph optimization. Stages (b) and (c) do not depend on the
//! threshold or on the embedding head: they are computed once over all
//! window-separated pairs, which also makes recall monotone in the threshold
//! and tuned-vs-untuned comparisons share the same geometric filter.
//!
//! The correct-match percentage follows the averaged-over-thresholds
//! convention: for each threshold the fraction of distance-detected pairs
//! that are ground-truth correct, averaged uniformly over a fixed grid,
//! skipping thresholds with no detections. Both systems under comparison
//! must share one grid.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix6;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{Descriptor, DescriptorStore, SimilarityMatrix, StoreError};
use crate::geometry::Pose;
use crate::graph::{GraphError, PoseGraph};
use crate::mining::TrainingTuple;
use crate::optimizer::{gnc_solve, GncConfig, OptimizerError};
use crate::registration::{attempt_loop_closure, KeyframeObservations, RansacConfig};
use crate::simulator::GroundTruth;
use crate::training::{EmbeddingHead, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("threshold list is empty")]
    EmptyThresholds,
    #[error("tuple list is empty")]
    EmptyTuples,
    #[error("no eligible keyframe pairs outside the exclusion window")]
    EmptyPairUniverse,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// Highest precision achieved at each exactly-attained recall level.
    fn precision_by_recall(&self) -> Vec<(f64, f64)> {
        let mut best: Vec<(f64, f64)> = Vec::new();
        for (&r, &p) in self.recall.iter().zip(self.precision.iter()) {
            match best.iter_mut().find(|(br, _)| *br == r) {
                Some((_, bp)) => *bp = bp.max(p),
                None => best.push((r, p)),
            }
        }
        best
    }

    /// True when, at every recall level achieved by both curves, this curve's
    /// best precision is at least the other's.
    pub fn weakly_dominates(&self, other: &PrCurve) -> bool {
        let ours = self.precision_by_recall();
        for (r, their_p) in other.precision_by_recall() {
            if let Some((_, our_p)) = ours.iter().find(|(or, _)| *or == r) {
                if *our_p < their_p - 1e-12 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationStats {
    pub positive_distances: Vec<f64>,
    pub negative_distances: Vec<f64>,
    pub mean_positive: f64,
    pub mean_negative: f64,
    /// mean(negative) - mean(positive).
    pub gap: f64,
}

impl SeparationStats {
    fn from_lists(positive: Vec<f64>, negative: Vec<f64>) -> SeparationStats {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mean_positive = mean(&positive);
        let mean_negative = mean(&negative);
        SeparationStats {
            positive_distances: positive,
            negative_distances: negative,
            mean_positive,
            mean_negative,
            gap: mean_negative - mean_positive,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrectMatchPercentage {
    /// Mean over thresholds of the correct fraction among detections, in
    /// [0, 100].
    pub percentage: f64,
    /// Set when no threshold produced any detection; the percentage is then
    /// reported as 0 by convention.
    pub zero_detections: bool,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Temporal exclusion window for the candidate pair universe.
    pub window: usize,
    /// Ground-truth positive radius rho, meters.
    pub radius: f64,
    pub ransac: RansacConfig,
    pub gnc: GncConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            window: crate::descriptors::DEFAULT_EXCLUSION_WINDOW,
            radius: 3.0,
            ransac: RansacConfig::default(),
            gnc: GncConfig::default(),
            seed: 0,
        }
    }
}

/// Everything a sweep consumes. When `odometry` is absent the chain is
/// derived from the ground-truth poses, keeping the geometric stages
/// self-contained.
pub struct EvalContext<'a> {
    pub descriptors: &'a DescriptorStore,
    pub observations: &'a [KeyframeObservations],
    pub ground_truth: &'a GroundTruth,
    pub odometry: Option<&'a [(Pose, Matrix6<f64>)]>,
}

/// Embeds every stored descriptor through the head.
pub fn embed_store(
    head: &EmbeddingHead,
    store: &DescriptorStore,
) -> Result<DescriptorStore, EvalError> {
    let mut out = DescriptorStore::new();
    for d in store.iter() {
        out.insert(Descriptor::new(d.keyframe_id, head.embed(&d.vector)?))?;
    }
    Ok(out)
}

fn pair_universe(n: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + window + 1)..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// The threshold-independent part of the detection criterion: pairs whose
/// registration succeeds and whose edge survives robust optimization.
pub struct GeometricFilter {
    /// Pairs that registered successfully.
    pub registered: BTreeSet<(usize, usize)>,
    /// Registered pairs whose edge was classified inlier by GNC.
    pub surviving: BTreeSet<(usize, usize)>,
}

impl GeometricFilter {
    pub fn compute(ctx: &EvalContext, config: &EvalConfig) -> Result<GeometricFilter, EvalError> {
        let n = ctx.descriptors.len();
        let pairs = pair_universe(n, config.window);
        if pairs.is_empty() {
            return Err(EvalError::EmptyPairUniverse);
        }

        let results: Vec<Option<((usize, usize), Pose)>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let ransac = RansacConfig {
                    seed: eval_pair_seed(config.seed, i, j),
                    ..config.ransac
                };
                attempt_loop_closure(&ctx.observations[i], &ctx.observations[j], &ransac)
                    .map(|edge| ((i, j), edge.measurement))
            })
            .collect();

        let odometry: Vec<(Pose, Matrix6<f64>)> = match ctx.odometry {
            Some(o) => o.to_vec(),
            None => {
                let poses = &ctx.ground_truth.true_poses;
                (0..poses.len() - 1)
                    .map(|k| {
                        (
                            poses[k].between(&poses[k + 1]),
                            crate::graph::default_loop_information(),
                        )
                    })
                    .collect()
            }
        };
        let mut graph = PoseGraph::chain_initialize_with_information(&odometry);
        let mut registered = BTreeSet::new();
        let mut ordered: Vec<(usize, usize)> = Vec::new();
        for ((i, j), measurement) in results.into_iter().flatten() {
            graph.add_loop_closure(i, j, measurement, crate::graph::default_loop_information())?;
            registered.insert((i, j));
            ordered.push((i, j));
        }

        let mut surviving = BTreeSet::new();
        if !ordered.is_empty() {
            let (_, _, report) = gnc_solve(&graph, &config.gnc)?;
            for ord in report.inlier_edges {
                surviving.insert(ordered[ord]);
            }
        }
        Ok(GeometricFilter {
            registered,
            surviving,
        })
    }
}

fn eval_pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    let mut h = seed ^ 0xa076_1d64_78bd_642f;
    for v in [i as u64, j as u64] {
        h ^= v.wrapping_add(0xe703_7ed1_a0b4_28db);
        h = h.wrapping_mul(0x8ebc_6af0_9c88_c6e3);
        h ^= h >> 29;
    }
    h
}

/// Precision-recall sweep under the three-stage criterion, reusing a
/// precomputed geometric filter.
pub fn pr_sweep_with_filter(
    ctx: &EvalContext,
    head: Option<&EmbeddingHead>,
    thresholds: &[f64],
    filter: &GeometricFilter,
    config: &EvalConfig,
) -> Result<PrCurve, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    let embedded = match head {
        Some(h) => embed_store(h, ctx.descriptors)?,
        None => ctx.descriptors.clone(),
    };
    let n = embedded.len();
    let pairs = pair_universe(n, config.window);
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairUniverse);
    }

    struct PairInfo {
        distance: f64,
        truth: bool,
        passes_geometry: bool,
    }
    let infos: Vec<PairInfo> = pairs
        .iter()
        .map(|&(i, j)| {
            let d = crate::descriptors::distance(
                &embedded.get(i).unwrap().vector,
                &embedded.get(j).unwrap().vector,
            )?;
            Ok(PairInfo {
                distance: d,
                truth: ctx.ground_truth.true_label(i, j, config.radius),
                passes_geometry: filter.surviving.contains(&(i, j)),
            })
        })
        .collect::<Result<_, StoreError>>()?;

    let total_positives = infos.iter().filter(|p| p.truth).count();
    let mut sorted_thresholds = thresholds.to_vec();
    sorted_thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut precision = Vec::with_capacity(sorted_thresholds.len());
    let mut recall = Vec::with_capacity(sorted_thresholds.len());
    for &t in &sorted_thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for info in &infos {
            if info.distance < t && info.passes_geometry {
                if info.truth {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        precision.push(if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
        recall.push(if total_positives == 0 {
            0.0
        } else {
            tp as f64 / total_positives as f64
        });
    }
    Ok(PrCurve {
        thresholds: sorted_thresholds,
        precision,
        recall,
    })
}

/// Precision-recall sweep, computing the geometric filter internally.
pub fn pr_sweep(
    ctx: &EvalContext,
    head: Option<&EmbeddingHead>,
    thresholds: &[f64],
    config: &EvalConfig,
) -> Result<PrCurve, EvalError> {
    let filter = GeometricFilter::compute(ctx, config)?;
    pr_sweep_with_filter(ctx, head, thresholds, &filter, config)
}

/// Uniform threshold grid spanning the pairwise-distance range of a store.
pub fn default_threshold_grid(
    store: &DescriptorStore,
    window: usize,
    count: usize,
) -> Result<Vec<f64>, EvalError> {
    if count == 0 {
        return Err(EvalError::EmptyThresholds);
    }
    let pairs = pair_universe(store.len(), window);
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairUniverse);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, j) in pairs {
        let d = crate::descriptors::distance(
            &store.get(i).unwrap().vector,
            &store.get(j).unwrap().vector,
        )?;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if count == 1 {
        return Ok(vec![(lo + hi) / 2.0]);
    }
    Ok((0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect())
}

/// A grid spanning the union of distance ranges of several stores: the shared
/// grid used when comparing systems.
pub fn shared_threshold_grid(
    stores: &[&DescriptorStore],
    window: usize,
    count: usize,
) -> Result<Vec<f64>, EvalError> {
    if count == 0 || stores.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for store in stores {
        for (i, j) in pair_universe(store.len(), window) {
            let d = crate::descriptors::distance(
                &store.get(i).unwrap().vector,
                &store.get(j).unwrap().vector,
            )?;
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if !lo.is_finite() {
        return Err(EvalError::EmptyPairUniverse);
    }
    if count == 1 {
        return Ok(vec![(lo + hi) / 2.0]);
    }
    Ok((0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect())
}

/// Averaged correct-match percentage over a threshold grid.
///
/// Detection here is the distance stage alone: the metric measures the
/// retrieval quality of the descriptor system itself.
pub fn correct_match_percentage(
    ctx: &EvalContext,
    head: Option<&EmbeddingHead>,
    thresholds: &[f64],
    config: &EvalConfig,
) -> Result<CorrectMatchPercentage, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    let embedded = match head {
        Some(h) => embed_store(h, ctx.descriptors)?,
        None => ctx.descriptors.clone(),
    };
    let pairs = pair_universe(embedded.len(), config.window);
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairUniverse);
    }
    let mut dists = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let d = crate::descriptors::distance(
            &embedded.get(i).unwrap().vector,
            &embedded.get(j).unwrap().vector,
        )?;
        dists.push((d, ctx.ground_truth.true_label(i, j, config.radius)));
    }
    let mut fractions = Vec::new();
    for &t in thresholds {
        let mut detected = 0usize;
        let mut correct = 0usize;
        for &(d, truth) in &dists {
            if d < t {
                detected += 1;
                if truth {
                    correct += 1;
                }
            }
        }
        if detected > 0 {
            fractions.push(correct as f64 / detected as f64);
        }
    }
    if fractions.is_empty() {
        return Ok(CorrectMatchPercentage {
            percentage: 0.0,
            zero_detections: true,
        });
    }
    Ok(CorrectMatchPercentage {
        percentage: 100.0 * fractions.iter().sum::<f64>() / fractions.len() as f64,
        zero_detections: false,
    })
}

/// Embedded-space distances over the tuple-defined positive and negative
/// pairs.
pub fn separation_stats(
    head: &EmbeddingHead,
    tuples: &[TrainingTuple],
    descriptors: &DescriptorStore,
) -> Result<SeparationStats, EvalError> {
    if tuples.is_empty() {
        return Err(EvalError::EmptyTuples);
    }
    let embedded = embed_store(head, descriptors)?;
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for t in tuples {
        let q = &embedded
            .get(t.anchor_id)
            .ok_or(EvalError::Train(TrainError::MissingDescriptor(t.anchor_id)))?
            .vector;
        let p = &embedded
            .get(t.positive_id)
            .ok_or(EvalError::Train(TrainError::MissingDescriptor(t.positive_id)))?
            .vector;
        positive.push(crate::descriptors::distance(q, p)?);
        for &nid in &t.negative_ids {
            let nv = &embedded
                .get(nid)
                .ok_or(EvalError::Train(TrainError::MissingDescriptor(nid)))?
                .vector;
            negative.push(crate::descriptors::distance(q, nv)?);
        }
    }
    Ok(SeparationStats::from_lists(positive, negative))
}

/// Separation statistics over all window-separated pairs labeled by the
/// ground truth, the whole-sequence histogram construction.
pub fn separation_stats_from_ground_truth(
    ctx: &EvalContext,
    head: Option<&EmbeddingHead>,
    config: &EvalConfig,
) -> Result<SeparationStats, EvalError> {
    let embedded = match head {
        Some(h) => embed_store(h, ctx.descriptors)?,
        None => ctx.descriptors.clone(),
    };
    let pairs = pair_universe(embedded.len(), config.window);
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairUniverse);
    }
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (i, j) in pairs {
        let d = crate::descriptors::distance(
            &embedded.get(i).unwrap().vector,
            &embedded.get(j).unwrap().vector,
        )?;
        if ctx.ground_truth.true_label(i, j, config.radius) {
            positive.push(d);
        } else {
            negative.push(d);
        }
    }
    Ok(SeparationStats::from_lists(positive, negative))
}

/// Bundle written out by [`emit_artifacts`].
#[derive(Debug, Clone)]
pub struct EvalResults {
    pub similarity: SimilarityMatrix,
    pub pr: PrCurve,
    pub separation: SeparationStats,
    pub correct_match: CorrectMatchPercentage,
}

#[derive(Serialize, Deserialize)]
pub struct EvalSummary {
    pub correct_match_percentage: f64,
    pub zero_detections: bool,
    pub mean_positive_distance: f64,
    pub mean_negative_distance: f64,
    pub separation_gap: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub pr_points: usize,
}

const HISTOGRAM_BINS: usize = 40;

fn write_histogram(values: &[f64], lo: f64, hi: f64, path: &Path) -> Result<(), EvalError> {
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    let width = ((hi - lo) / HISTOGRAM_BINS as f64).max(f64::MIN_POSITIVE);
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let mut out = String::from("bin_start,bin_end,count\n");
    for (k, c) in counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            lo + width * k as f64,
            lo + width * (k + 1) as f64,
            c
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the evaluation artifacts: similarity matrix CSV, PR curve CSV,
/// positive/negative distance histograms, and a summary JSON. Output is
/// byte-deterministic for identical inputs.
pub fn emit_artifacts(results: &EvalResults, out_dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir)?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join("similarity_matrix.csv"))?);
    let mut header = String::from("keyframe_id");
    for id in &results.similarity.ids {
        header.push_str(&format!(",{id}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    for (row, id) in results.similarity.ids.iter().enumerate() {
        let mut line = id.to_string();
        for col in 0..results.similarity.len() {
            line.push_str(&format!(",{}", results.similarity.get(row, col)));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    drop(w);

    let mut pr = String::from("threshold,precision,recall\n");
    for k in 0..results.pr.thresholds.len() {
        pr.push_str(&format!(
            "{},{},{}\n",
            results.pr.thresholds[k], results.pr.precision[k], results.pr.recall[k]
        ));
    }
    std::fs::write(out_dir.join("pr_curve.csv"), pr)?;

    let all = results
        .separation
        .positive_distances
        .iter()
        .chain(results.separation.negative_distances.iter());
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    write_histogram(
        &results.separation.positive_distances,
        lo,
        hi,
        &out_dir.join("hist_positive.csv"),
    )?;
    write_histogram(
        &results.separation.negative_distances,
        lo,
        hi,
        &out_dir.join("hist_negative.csv"),
    )?;

    let summary = EvalSummary {
        correct_match_percentage: results.correct_match.percentage,
        zero_detections: results.correct_match.zero_detections,
        mean_positive_distance: results.separation.mean_positive,
        mean_negative_distance: results.separation.mean_negative,
        separation_gap: results.separation.gap,
        positive_pairs: results.separation.positive_distances.len(),
        negative_pairs: results.separation.negative_distances.len(),
        pr_points: results.pr.thresholds.len(),
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail"),
    )?;
    Ok(())
}
