//! Relative-pose estimation between keyframes from 3D point correspondences.
//!
//! Stands in the pipeline where a feature-based front end would run PnP:
//! given two keyframes observing a shared set of landmarks, estimate the pose
//! of frame `j` relative to frame `i` by RANSAC over a closed-form SVD
//! alignment (Arun/Umeyama without scale), or report that a loop closure
//! cannot be computed. Failure is an expected outcome, not a fault.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Pose, Quaternion};
use crate::graph::{default_loop_information, PoseEdge};

/// Landmarks observed by one keyframe, positions in its local frame.
#[derive(Debug, Clone)]
pub struct KeyframeObservations {
    pub keyframe_id: usize,
    /// (landmark id, position) pairs; landmark ids unique within a keyframe.
    pub points: Vec<(u64, Vector3<f64>)>,
}

impl KeyframeObservations {
    pub fn new(keyframe_id: usize, mut points: Vec<(u64, Vector3<f64>)>) -> KeyframeObservations {
        points.sort_by_key(|(id, _)| *id);
        points.dedup_by_key(|(id, _)| *id);
        KeyframeObservations {
            keyframe_id,
            points,
        }
    }
}

/// Why a relative pose could not be computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationFailure {
    /// Fewer shared correspondences than the configured minimum.
    TooFewCorrespondences,
    /// RANSAC found no consensus set of at least the minimum size.
    NoConsensus,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Pose of frame `j` expressed relative to frame `i`: maps j-local points
    /// into the i frame, and equals `between(X_i, X_j)` for true poses.
    pub relative_pose: Pose,
    pub inlier_correspondences: usize,
    pub rms_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on point residual norm, meters.
    pub inlier_threshold: f64,
    pub min_correspondences: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> RansacConfig {
        RansacConfig {
            iterations: 100,
            inlier_threshold: 0.05,
            min_correspondences: 6,
            seed: 0,
        }
    }
}

/// Pairs the landmarks observed in both frames, ordered by landmark id.
pub fn match_correspondences(
    a: &KeyframeObservations,
    b: &KeyframeObservations,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.points.len() && j < b.points.len() {
        match a.points[i].0.cmp(&b.points[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((a.points[i].1, b.points[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Closed-form least-squares rigid alignment: finds T minimizing
/// sum ||p_i - T q_i||^2 over the given (p, q) pairs.
///
/// Rank-deficient configurations (all points collinear) return None.
fn fit_rigid(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Pose> {
    let n = pairs.len() as f64;
    let mut cp = Vector3::zeros();
    let mut cq = Vector3::zeros();
    for (p, q) in pairs {
        cp += p;
        cq += q;
    }
    cp /= n;
    cq /= n;

    // Cross-covariance H = sum (q - cq)(p - cp)^T so that R maps q-space to p-space.
    let mut h = Matrix3::zeros();
    for (p, q) in pairs {
        h += (q - cq) * (p - cp).transpose();
    }
    let svd = nalgebra::linalg::SVD::new(h, true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    // Guard against degenerate point sets: with fewer than two independent
    // directions the rotation is not determined.
    if svd.singular_values[1] < 1e-12 {
        return None;
    }
    let mut r = v_t.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // Reflection: flip the sign of the last singular vector.
        let mut v = v_t.transpose();
        v.column_mut(2).neg_mut();
        r = v * u.transpose();
    }
    let t = cp - r * cq;
    Some(pose_from_rotation_matrix(&r, t))
}

/// Converts a rotation matrix to the quaternion pose representation
/// (Shepperd's method: pick the largest diagonal combination).
fn pose_from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Pose {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (w, x, y, z);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    Pose::from_wxyz_translation(w, x, y, z, t)
}

fn residual_norm(pose: &Pose, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    (p - pose.transform_point(q)).norm()
}

/// RANSAC + SVD relative-pose estimation over point pairs `(p_in_i, q_in_j)`.
///
/// Success requires a consensus of at least `min_correspondences` pairs; the
/// returned pose is refit on the full consensus set. Fully deterministic for
/// a fixed `config.seed`.
pub fn estimate_relative_pose(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    config: &RansacConfig,
) -> Result<RegistrationResult, RegistrationFailure> {
    if pairs.len() < config.min_correspondences.max(3) {
        return Err(RegistrationFailure::TooFewCorrespondences);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best_inliers: Vec<usize> = Vec::new();

    for _ in 0..config.iterations {
        let idx = sample(&mut rng, pairs.len(), 3);
        let minimal: Vec<(Vector3<f64>, Vector3<f64>)> =
            idx.iter().map(|i| pairs[i]).collect();
        let Some(model) = fit_rigid(&minimal) else {
            continue;
        };
        let inliers: Vec<usize> = (0..pairs.len())
            .filter(|&i| residual_norm(&model, &pairs[i].0, &pairs[i].1) <= config.inlier_threshold)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }

    if best_inliers.len() < config.min_correspondences {
        return Err(RegistrationFailure::NoConsensus);
    }

    // Refit on the consensus set, then recount inliers under the refined model.
    let consensus: Vec<(Vector3<f64>, Vector3<f64>)> =
        best_inliers.iter().map(|&i| pairs[i]).collect();
    let refined = fit_rigid(&consensus).ok_or(RegistrationFailure::NoConsensus)?;
    let final_inliers: Vec<usize> = (0..pairs.len())
        .filter(|&i| residual_norm(&refined, &pairs[i].0, &pairs[i].1) <= config.inlier_threshold)
        .collect();
    if final_inliers.len() < config.min_correspondences {
        return Err(RegistrationFailure::NoConsensus);
    }
    let mut sq_sum = 0.0;
    for &i in &final_inliers {
        let r = residual_norm(&refined, &pairs[i].0, &pairs[i].1);
        sq_sum += r * r;
    }
    Ok(RegistrationResult {
        relative_pose: refined,
        inlier_correspondences: final_inliers.len(),
        rms_error: (sq_sum / final_inliers.len() as f64).sqrt(),
    })
}

/// Tries to produce a loop-closure edge between frames `i` and `j`.
///
/// Wraps correspondence matching and RANSAC estimation; a successful
/// registration becomes a loop-closure [`PoseEdge`] carrying the default
/// information matrix.
pub fn attempt_loop_closure(
    frame_i: &KeyframeObservations,
    frame_j: &KeyframeObservations,
    config: &RansacConfig,
) -> Option<PoseEdge> {
    let pairs = match_correspondences(frame_i, frame_j);
    let result = estimate_relative_pose(&pairs, config).ok()?;
    Some(PoseEdge {
        from: frame_i.keyframe_id,
        to: frame_j.keyframe_id,
        measurement: result.relative_pose,
        information: default_loop_information(),
        kind: crate::graph::EdgeKind::LoopClosure,
    })
}

/// Rotation-matrix determinant of a pose, for orthonormality checks.
pub fn rotation_determinant(p: &Pose) -> f64 {
    p.rotation_matrix().determinant()
}

#[allow(unused)]
fn quaternion_of(p: &Pose) -> &Quaternion {
    p.rotation()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn obs(id: usize, pts: &[(u64, [f64; 3])]) -> KeyframeObservations {
        KeyframeObservations::new(
            id,
            pts.iter()
                .map(|(l, p)| (*l, Vector3::new(p[0], p[1], p[2])))
                .collect(),
        )
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose::from_axis_angle_translation(
            &Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(0.0..2.5),
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
    }

    /// Builds pair lists (p, q) with p = T * q for a known T.
    fn pairs_from_pose(
        rng: &mut impl Rng,
        t: &Pose,
        n: usize,
    ) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        (0..n)
            .map(|_| {
                let q = Vector3::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                );
                (t.transform_point(&q), q)
            })
            .collect()
    }

    #[test]
    fn disjoint_landmarks_give_no_pairs() {
        let a = obs(0, &[(1, [0.0; 3]), (2, [1.0, 0.0, 0.0])]);
        let b = obs(1, &[(3, [0.0; 3]), (4, [1.0, 0.0, 0.0])]);
        assert!(match_correspondences(&a, &b).is_empty());
    }

    #[test]
    fn identical_frames_pair_everything() {
        let pts = &[(1, [0.0, 0.0, 0.0]), (2, [1.0, 2.0, 3.0]), (3, [4.0, 5.0, 6.0])];
        let a = obs(0, pts);
        let b = obs(1, pts);
        let pairs = match_correspondences(&a, &b);
        assert_eq!(pairs.len(), 3);
        for (p, q) in pairs {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn intersection_of_landmark_sets() {
        let a = obs(0, &[(1, [0.0; 3]), (2, [0.0; 3]), (3, [0.0; 3]), (5, [0.0; 3])]);
        let b = obs(1, &[(2, [0.0; 3]), (3, [0.0; 3]), (5, [0.0; 3]), (9, [0.0; 3])]);
        assert_eq!(match_correspondences(&a, &b).len(), 3);
    }

    #[test]
    fn five_perfect_pairs_with_min_six_fail() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let t = random_pose(&mut rng);
        let pairs = pairs_from_pose(&mut rng, &t, 5);
        match estimate_relative_pose(&pairs, &RansacConfig::default()) {
            Err(RegistrationFailure::TooFewCorrespondences) => {}
            other => panic!("expected TooFewCorrespondences, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_pairs_recover_pose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let pairs = pairs_from_pose(&mut rng, &t, 20);
            let res = estimate_relative_pose(&pairs, &RansacConfig::default()).unwrap();
            assert!(res.relative_pose.rotation_distance(&t) < 1e-9);
            assert!(res.relative_pose.translation_distance(&t) < 1e-9);
            assert_eq!(res.inlier_correspondences, 20);
            assert!(res.rms_error < 1e-12);
        }
    }

    #[test]
    fn corrupted_pairs_are_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let t = random_pose(&mut rng);
        let mut pairs = pairs_from_pose(&mut rng, &t, 20);
        // Corrupt 6 of them with 1 m offsets.
        for k in 0..6 {
            pairs[3 * k].0 += Vector3::new(1.0, 0.0, 0.0);
        }
        let res = estimate_relative_pose(&pairs, &RansacConfig::default()).unwrap();
        assert!(res.relative_pose.rotation_distance(&t) < 1e-6);
        assert!(res.relative_pose.translation_distance(&t) < 1e-6);
        assert_eq!(res.inlier_correspondences, 14);
    }

    #[test]
    fn symmetry_of_directions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let t = random_pose(&mut rng);
            let pairs_ij = pairs_from_pose(&mut rng, &t, 15);
            let pairs_ji: Vec<_> = pairs_ij.iter().map(|(p, q)| (*q, *p)).collect();
            let fwd = estimate_relative_pose(&pairs_ij, &RansacConfig::default()).unwrap();
            let bwd = estimate_relative_pose(&pairs_ji, &RansacConfig::default()).unwrap();
            let composed = fwd.relative_pose.compose(&bwd.relative_pose);
            assert!(composed.rotation_angle() < 1e-9);
            assert!(composed.translation().norm() < 1e-9);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(34);
        let t = random_pose(&mut rng);
        let mut pairs = pairs_from_pose(&mut rng, &t, 25);
        for k in 0..5 {
            pairs[4 * k].0 += Vector3::new(0.8, -0.3, 0.2);
        }
        let cfg = RansacConfig {
            seed: 99,
            ..RansacConfig::default()
        };
        let a = estimate_relative_pose(&pairs, &cfg).unwrap();
        let b = estimate_relative_pose(&pairs, &cfg).unwrap();
        assert_eq!(
            a.relative_pose.translation(),
            b.relative_pose.translation()
        );
        assert_eq!(a.inlier_correspondences, b.inlier_correspondences);
        // Different seed: clean success does not flip to failure.
        let cfg2 = RansacConfig {
            seed: 7,
            ..RansacConfig::default()
        };
        assert!(estimate_relative_pose(&pairs, &cfg2).is_ok());
    }

    #[test]
    fn rotation_is_proper_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let pairs = pairs_from_pose(&mut rng, &t, 12);
            let res = estimate_relative_pose(&pairs, &RansacConfig::default()).unwrap();
            let r = res.relative_pose.rotation_matrix();
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            let rtr = r.transpose() * r;
            assert!((rtr - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn attempt_loop_closure_needs_shared_landmarks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(36);
        let t = random_pose(&mut rng);
        // 5 shared landmarks only: below the minimum of 6.
        let shared: Vec<(u64, Vector3<f64>)> = (0..5u64)
            .map(|l| {
                (
                    l,
                    Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    ),
                )
            })
            .collect();
        let frame_j = KeyframeObservations::new(9, shared.clone());
        let frame_i = KeyframeObservations::new(
            2,
            shared
                .iter()
                .map(|(l, q)| (*l, t.transform_point(q)))
                .collect(),
        );
        assert!(attempt_loop_closure(&frame_i, &frame_j, &RansacConfig::default()).is_none());
    }

    #[test]
    fn attempt_loop_closure_identity_for_identical_frames() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let pts: Vec<(u64, Vector3<f64>)> = (0..10u64)
            .map(|l| {
                (
                    l,
                    Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    ),
                )
            })
            .collect();
        let a = KeyframeObservations::new(0, pts.clone());
        let b = KeyframeObservations::new(40, pts);
        let edge = attempt_loop_closure(&a, &b, &RansacConfig::default()).unwrap();
        assert_eq!(edge.from, 0);
        assert_eq!(edge.to, 40);
        assert!(edge.measurement.rotation_angle() < 1e-9);
        assert!(edge.measurement.translation().norm() < 1e-9);
    }
}

// ---- Observations file format ----------------------------------------------
//
// JSON array of `{keyframe_id, points: [{landmark_id, xyz: [x, y, z]}]}`.

#[derive(serde::Serialize, serde::Deserialize)]
struct JsonPoint {
    landmark_id: u64,
    xyz: [f64; 3],
}

#[derive(serde::Serialize, serde::Deserialize)]
struct JsonObservations {
    keyframe_id: usize,
    points: Vec<JsonPoint>,
}

#[derive(Debug, thiserror::Error)]
pub enum ObservationsIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("observations JSON: {0}")]
    Schema(String),
}

pub fn observations_to_json(frames: &[KeyframeObservations]) -> String {
    let doc: Vec<JsonObservations> = frames
        .iter()
        .map(|f| JsonObservations {
            keyframe_id: f.keyframe_id,
            points: f
                .points
                .iter()
                .map(|(id, p)| JsonPoint {
                    landmark_id: *id,
                    xyz: [p.x, p.y, p.z],
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&doc).expect("observation serialization cannot fail")
}

pub fn observations_from_json(text: &str) -> Result<Vec<KeyframeObservations>, ObservationsIoError> {
    let doc: Vec<JsonObservations> =
        serde_json::from_str(text).map_err(|e| ObservationsIoError::Schema(e.to_string()))?;
    Ok(doc
        .into_iter()
        .map(|f| {
            KeyframeObservations::new(
                f.keyframe_id,
                f.points
                    .into_iter()
                    .map(|p| (p.landmark_id, Vector3::new(p.xyz[0], p.xyz[1], p.xyz[2])))
                    .collect(),
            )
        })
        .collect())
}

pub fn save_observations(
    frames: &[KeyframeObservations],
    path: &std::path::Path,
) -> Result<(), ObservationsIoError> {
    std::fs::write(path, observations_to_json(frames))?;
    Ok(())
}

pub fn load_observations(
    path: &std::path::Path,
) -> Result<Vec<KeyframeObservations>, ObservationsIoError> {
    let text = std::fs::read_to_string(path)?;
    observations_from_json(&text)
}
