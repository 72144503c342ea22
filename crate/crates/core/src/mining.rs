//! Self-supervised mining of training tuples from one traversal.
//!
//! For each keyframe the retrieval candidates are walked in ascending
//! descriptor distance. The first candidate whose registration succeeds
//! becomes the positive and contributes a loop-closure edge to the pose
//! graph; the walk then keeps collecting candidates whose registration
//! *fails* as negatives, the most confusable non-matches available. After
//! all keyframes are processed one robust GNC solve labels every mined loop
//! closure, and tuples whose edge lands in the outlier set are marked
//! Rejected so they never reach the training set.

use nalgebra::Matrix6;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{DescriptorStore, MatchCandidate, StoreError};
use crate::geometry::Pose;
use crate::graph::{GraphError, PoseGraph};
use crate::optimizer::{gnc_solve, GncConfig, GncState, OptimizeReport, OptimizerError};
use crate::registration::{attempt_loop_closure, KeyframeObservations, RansacConfig};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("{what}: expected {expected}, got {got}")]
    InputLengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("keyframe ids must be contiguous from 0")]
    NonContiguousKeyframes,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

#[derive(Debug, Error)]
pub enum TupleIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("tuple schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleStatus {
    Pending,
    Inlier,
    Rejected,
}

/// One anchor, one geometrically verified positive, up to ten
/// verification-failing negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub anchor_id: usize,
    pub positive_id: usize,
    pub negative_ids: Vec<usize>,
    /// Loop ordinal of the anchor-positive edge in the mined graph; absent
    /// on tuples imported from a file.
    pub loop_edge_index: Option<usize>,
    pub status: TupleStatus,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct MiningReport {
    /// Tuples mined before PGO cleansing (Inlier + Rejected).
    pub tuples_extracted: usize,
    pub tuples_rejected_by_pgo: usize,
    /// Keyframes where no candidate registration succeeded.
    pub keyframes_without_positive: usize,
    /// Keyframes whose positive found no failing candidate afterwards; their
    /// edge stays in the graph but no tuple is emitted.
    pub keyframes_without_negatives: usize,
}

#[derive(Debug, Clone)]
pub struct MiningConfig {
    /// Temporal exclusion window W.
    pub window: usize,
    pub max_negatives: usize,
    /// Candidate walk depth k_max.
    pub candidate_depth: usize,
    pub ransac: RansacConfig,
    pub gnc: GncConfig,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> MiningConfig {
        MiningConfig {
            window: crate::descriptors::DEFAULT_EXCLUSION_WINDOW,
            max_negatives: 10,
            candidate_depth: 50,
            ransac: RansacConfig::default(),
            gnc: GncConfig::default(),
            seed: 0,
        }
    }
}

/// Candidates for one anchor in ascending distance order, window-filtered,
/// at most `k_max` of them. Identical to the store query at this scale.
pub fn candidate_walk(
    store: &DescriptorStore,
    anchor: usize,
    k_max: usize,
    window: usize,
) -> Result<impl Iterator<Item = MatchCandidate>, StoreError> {
    Ok(store.query(anchor, k_max, window)?.into_iter())
}

/// Deterministic per-pair RANSAC seed, independent of walk order.
fn pair_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut h = seed ^ 0xd6e8_feb8_6659_fd93;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h
}

struct AnchorOutcome {
    positive: Option<(usize, Pose)>,
    negatives: Vec<usize>,
}

fn walk_anchor(
    anchor: usize,
    store: &DescriptorStore,
    observations: &[KeyframeObservations],
    config: &MiningConfig,
) -> Result<AnchorOutcome, StoreError> {
    let mut positive: Option<(usize, Pose)> = None;
    let mut negatives = Vec::new();
    for cand in candidate_walk(store, anchor, config.candidate_depth, config.window)? {
        let c = cand.candidate_id;
        let ransac = RansacConfig {
            seed: pair_seed(config.seed, anchor, c),
            ..config.ransac
        };
        let edge = attempt_loop_closure(&observations[anchor], &observations[c], &ransac);
        if positive.is_none() {
            if let Some(e) = edge {
                positive = Some((c, e.measurement));
            }
            // Failures before the positive are skipped, not negatives.
        } else if edge.is_none() {
            negatives.push(c);
            if negatives.len() == config.max_negatives {
                break;
            }
        }
    }
    Ok(AnchorOutcome {
        positive,
        negatives,
    })
}

/// Full mining pass over one traversal.
///
/// Returns the tuple set (with Inlier/Rejected statuses), the pose graph
/// containing odometry plus every mined loop closure together with its
/// GNC-optimized estimates, and the mining report.
pub fn mine(
    descriptors: &DescriptorStore,
    observations: &[KeyframeObservations],
    odometry: &[(Pose, Matrix6<f64>)],
    config: &MiningConfig,
) -> Result<(Vec<TrainingTuple>, PoseGraph, MiningReport, GncState, OptimizeReport), MiningError>
{
    let n = descriptors.len();
    if observations.len() != n {
        return Err(MiningError::InputLengthMismatch {
            what: "observation count",
            expected: n,
            got: observations.len(),
        });
    }
    if odometry.len() + 1 != n {
        return Err(MiningError::InputLengthMismatch {
            what: "odometry length",
            expected: n.saturating_sub(1),
            got: odometry.len(),
        });
    }
    for k in 0..n {
        if !descriptors.contains(k) || observations[k].keyframe_id != k {
            return Err(MiningError::NonContiguousKeyframes);
        }
    }

    // Per-anchor walks are independent; collect them in anchor order.
    let outcomes: Vec<Result<AnchorOutcome, StoreError>> = (0..n)
        .into_par_iter()
        .map(|anchor| walk_anchor(anchor, descriptors, observations, config))
        .collect();

    let mut graph = PoseGraph::chain_initialize_with_information(odometry);
    let mut tuples: Vec<TrainingTuple> = Vec::new();
    let mut report = MiningReport::default();
    let mut next_ordinal = 0;

    for (anchor, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        let Some((positive, measurement)) = outcome.positive else {
            report.keyframes_without_positive += 1;
            continue;
        };
        graph.add_loop_closure(
            anchor,
            positive,
            measurement,
            crate::graph::default_loop_information(),
        )?;
        let ordinal = next_ordinal;
        next_ordinal += 1;
        if outcome.negatives.is_empty() {
            report.keyframes_without_negatives += 1;
            continue;
        }
        tuples.push(TrainingTuple {
            anchor_id: anchor,
            positive_id: positive,
            negative_ids: outcome.negatives,
            loop_edge_index: Some(ordinal),
            status: TupleStatus::Pending,
        });
    }
    report.tuples_extracted = tuples.len();

    // One robust solve labels every mined loop closure.
    let (estimates, state, opt_report) = gnc_solve(&graph, &config.gnc)?;
    graph.set_estimates(&estimates);
    for tuple in &mut tuples {
        let ordinal = tuple.loop_edge_index.expect("mined tuples carry an edge");
        tuple.status = if opt_report.outlier_edges.contains(&ordinal) {
            TupleStatus::Rejected
        } else {
            TupleStatus::Inlier
        };
    }
    report.tuples_rejected_by_pgo = tuples
        .iter()
        .filter(|t| t.status == TupleStatus::Rejected)
        .count();

    Ok((tuples, graph, report, state, opt_report))
}

// ---- Tuple file format ------------------------------------------------------
//
// `{version: 1, tuples: [{anchor, positive, negatives: [...], status}]}`.
// Rejected tuples are exported with their status, never silently dropped.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTuple {
    anchor: usize,
    positive: usize,
    negatives: Vec<usize>,
    status: TupleStatus,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTupleFile {
    version: u32,
    tuples: Vec<JsonTuple>,
}

pub fn tuples_to_json(tuples: &[TrainingTuple]) -> String {
    let doc = JsonTupleFile {
        version: 1,
        tuples: tuples
            .iter()
            .map(|t| JsonTuple {
                anchor: t.anchor_id,
                positive: t.positive_id,
                negatives: t.negative_ids.clone(),
                status: t.status,
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("tuple serialization cannot fail")
}

pub fn tuples_from_json(text: &str) -> Result<Vec<TrainingTuple>, TupleIoError> {
    let doc: JsonTupleFile =
        serde_json::from_str(text).map_err(|e| TupleIoError::SchemaViolation(e.to_string()))?;
    if doc.version != 1 {
        return Err(TupleIoError::SchemaViolation(format!(
            "unsupported version {}",
            doc.version
        )));
    }
    for (i, t) in doc.tuples.iter().enumerate() {
        if t.negatives.is_empty() {
            return Err(TupleIoError::SchemaViolation(format!(
                "tuple {i} has no negatives"
            )));
        }
    }
    Ok(doc
        .tuples
        .into_iter()
        .map(|t| TrainingTuple {
            anchor_id: t.anchor,
            positive_id: t.positive,
            negative_ids: t.negatives,
            loop_edge_index: None,
            status: t.status,
        })
        .collect())
}

pub fn export_tuples(tuples: &[TrainingTuple], path: &std::path::Path) -> Result<(), TupleIoError> {
    std::fs::write(path, tuples_to_json(tuples))?;
    Ok(())
}

pub fn import_tuples(path: &std::path::Path) -> Result<Vec<TrainingTuple>, TupleIoError> {
    let text = std::fs::read_to_string(path)?;
    tuples_from_json(&text)
}
