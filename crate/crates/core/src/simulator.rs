//! Synthetic worlds with ground truth: trajectories that revisit places,
//! 3D landmarks, noisy odometry, and descriptors with controllable
//! perceptual aliasing.
//!
//! Descriptors are place signatures plus isotropic noise. A signature is a
//! random vector drawn per spatial cell and supported on the first
//! `signature_dims` coordinates; the remaining coordinates carry noise only.
//! That split gives a descriptor model where distance correlates with place
//! identity out of the box, while leaving a linear embedding head something
//! real to learn (suppressing the signal-free coordinates).
//!
//! Aliased pairs are planted traps: two pose-distant keyframes receive
//! near-identical descriptors, and optionally duplicated landmark geometry so
//! that registration succeeds with a wrong relative pose. Descriptor
//! similarity alone must not be trusted; the robust pose-graph filter has to
//! catch these.

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{Descriptor, DescriptorStore, DEFAULT_EXCLUSION_WINDOW};
use crate::geometry::Pose;
use crate::graph::PoseGraph;
use crate::registration::KeyframeObservations;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground-truth JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Circle traversed twice; the second lap lands exactly on the first.
    Loop,
    /// Two tangent circles traversed twice.
    FigureEight,
    /// Lawnmower sweep over rows, then a retrace of the first row.
    GridWithRevisits,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorldConfig {
    pub trajectory: TrajectoryKind,
    pub keyframes: usize,
    /// Landmarks per meter of trajectory.
    pub landmark_density: f64,
    /// Odometry noise, translation (m) and rotation (rad) per step.
    pub odometry_sigma_t: f64,
    pub odometry_sigma_r: f64,
    pub descriptor_dim: usize,
    /// Leading coordinates that carry the place signature.
    pub signature_dims: usize,
    /// Per-coordinate standard deviation of cell signatures.
    pub signature_scale: f64,
    /// Isotropic descriptor noise sigma_d.
    pub descriptor_noise: f64,
    /// Per-keyframe condition nuisance added to the signal-free coordinates
    /// (dims >= signature_dims): the appearance variation a calibrated
    /// embedding learns to suppress.
    pub nuisance_scale: f64,
    /// Pose-distant pairs forced to near-identical descriptors.
    pub aliasing_pairs: usize,
    /// Give aliased pairs duplicated landmark geometry so registration
    /// succeeds with a wrong relative pose.
    pub aliased_share_geometry: bool,
    /// Noise on observed landmark positions, meters.
    pub observation_noise: f64,
    /// Landmarks are visible within this radius of a keyframe.
    pub sensing_radius: f64,
    /// Ground-truth revisit radius rho, meters.
    pub revisit_radius: f64,
    /// Spatial cell size for place signatures, meters.
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> WorldConfig {
        WorldConfig {
            trajectory: TrajectoryKind::Loop,
            keyframes: 160,
            landmark_density: 3.0,
            odometry_sigma_t: 0.02,
            odometry_sigma_r: 0.002,
            descriptor_dim: 32,
            signature_dims: 8,
            signature_scale: 0.2,
            descriptor_noise: 0.05,
            nuisance_scale: 0.3,
            aliasing_pairs: 0,
            aliased_share_geometry: true,
            observation_noise: 0.0,
            sensing_radius: 8.0,
            revisit_radius: 3.0,
            cell_size: 3.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.keyframes < 2 {
            return Err(SimError::InvalidConfig("keyframes must be >= 2".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(SimError::InvalidConfig("descriptor_dim must be > 0".into()));
        }
        if self.signature_dims == 0 || self.signature_dims > self.descriptor_dim {
            return Err(SimError::InvalidConfig(
                "signature_dims must be in 1..=descriptor_dim".into(),
            ));
        }
        for (name, v) in [
            ("landmark_density", self.landmark_density),
            ("odometry_sigma_t", self.odometry_sigma_t),
            ("odometry_sigma_r", self.odometry_sigma_r),
            ("signature_scale", self.signature_scale),
            ("descriptor_noise", self.descriptor_noise),
            ("nuisance_scale", self.nuisance_scale),
            ("observation_noise", self.observation_noise),
            ("sensing_radius", self.sensing_radius),
            ("revisit_radius", self.revisit_radius),
            ("cell_size", self.cell_size),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Oracle labels that real data lacks.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub true_poses: Vec<Pose>,
    /// Pairs (i < j) separated by more than the exclusion window whose true
    /// positions lie within the revisit radius.
    pub revisit_pairs: Vec<(usize, usize)>,
    /// Planted aliased pairs, disjoint from the revisit pairs.
    pub aliased_pairs: Vec<(usize, usize)>,
    pub revisit_radius: f64,
}

impl GroundTruth {
    /// True place label for a keyframe pair at the given radius.
    pub fn true_label(&self, i: usize, j: usize, radius: f64) -> bool {
        self.true_poses[i].translation_distance(&self.true_poses[j]) <= radius
    }

    pub fn to_json(&self) -> String {
        let doc = JsonGroundTruth {
            true_poses: self
                .true_poses
                .iter()
                .map(|p| {
                    let t = p.translation();
                    let q = p.rotation();
                    JsonPose {
                        translation: [t.x, t.y, t.z],
                        rotation: [q.w, q.x, q.y, q.z],
                    }
                })
                .collect(),
            revisit_pairs: self.revisit_pairs.clone(),
            aliased_pairs: self.aliased_pairs.clone(),
            revisit_radius: self.revisit_radius,
        };
        serde_json::to_string_pretty(&doc).expect("ground truth serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<GroundTruth, SimError> {
        let doc: JsonGroundTruth =
            serde_json::from_str(text).map_err(|e| SimError::Json(e.to_string()))?;
        Ok(GroundTruth {
            true_poses: doc
                .true_poses
                .iter()
                .map(|p| {
                    Pose::from_wxyz_translation(
                        p.rotation[0],
                        p.rotation[1],
                        p.rotation[2],
                        p.rotation[3],
                        Vector3::new(p.translation[0], p.translation[1], p.translation[2]),
                    )
                })
                .collect(),
            revisit_pairs: doc.revisit_pairs,
            aliased_pairs: doc.aliased_pairs,
            revisit_radius: doc.revisit_radius,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<GroundTruth, SimError> {
        let text = std::fs::read_to_string(path)?;
        GroundTruth::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonPose {
    translation: [f64; 3],
    /// (w, x, y, z)
    rotation: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct JsonGroundTruth {
    true_poses: Vec<JsonPose>,
    revisit_pairs: Vec<(usize, usize)>,
    aliased_pairs: Vec<(usize, usize)>,
    revisit_radius: f64,
}

/// One generated world: everything the mining pipeline consumes, plus the
/// oracle.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub config: WorldConfig,
    pub descriptors: DescriptorStore,
    pub observations: Vec<KeyframeObservations>,
    /// Noisy relative-pose measurements between consecutive keyframes with
    /// their true-noise information matrices.
    pub odometry: Vec<(Pose, Matrix6<f64>)>,
    pub ground_truth: GroundTruth,
}

impl SimWorld {
    /// Odometry-only pose graph (dead-reckoned estimates), the g2o fragment
    /// the CLI emits.
    pub fn odometry_graph(&self) -> PoseGraph {
        PoseGraph::chain_initialize_with_information(&self.odometry)
    }

    pub fn odometry_measurements(&self) -> Vec<Pose> {
        self.odometry.iter().map(|(m, _)| *m).collect()
    }
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z * sigma
}

/// Step length between consecutive keyframes, meters.
const STEP: f64 = 1.0;

/// True planar pose of keyframe `k`, built from integer indices so that
/// revisited keyframes land on bit-identical positions.
fn trajectory_pose(kind: TrajectoryKind, k: usize, n: usize) -> Pose {
    match kind {
        TrajectoryKind::Loop => {
            let lap = n.div_ceil(2);
            let m = k % lap;
            let radius = (lap as f64) * STEP / (2.0 * std::f64::consts::PI);
            let a = 2.0 * std::f64::consts::PI * (m as f64) / (lap as f64);
            // CCW circle, heading along the tangent.
            yaw_pose(
                Vector3::new(radius * a.cos(), radius * a.sin(), 0.0),
                a + std::f64::consts::FRAC_PI_2,
            )
        }
        TrajectoryKind::FigureEight => {
            let cycle = n.div_ceil(2);
            let half = cycle.div_ceil(2);
            let m = k % cycle;
            let r = (cycle as f64) * STEP / (4.0 * std::f64::consts::PI);
            if m < half {
                let a = 2.0 * std::f64::consts::PI * (m as f64) / (half as f64);
                let pos = Vector3::new(r - r * a.cos(), r * a.sin(), 0.0);
                let yaw = a.cos().atan2(a.sin());
                yaw_pose(pos, yaw)
            } else {
                let a = 2.0 * std::f64::consts::PI * ((m - half) as f64) / ((cycle - half) as f64);
                let pos = Vector3::new(-r + r * a.cos(), r * a.sin(), 0.0);
                let yaw = a.cos().atan2(-a.sin());
                yaw_pose(pos, yaw)
            }
        }
        TrajectoryKind::GridWithRevisits => {
            let row_len = (n / 5).max(8);
            // Rows far enough apart that different rows share no landmarks.
            let spacing = 18.0;
            let sweep = |idx: usize| -> (usize, usize) {
                let row = idx / row_len;
                let col = idx % row_len;
                // Boustrophedon: odd rows run backwards.
                if row % 2 == 0 {
                    (row, col)
                } else {
                    (row, row_len - 1 - col)
                }
            };
            let sweep_len = (n * 4) / 5;
            let (row, col) = if k < sweep_len {
                sweep(k)
            } else {
                // Retrace the first row.
                (0, (k - sweep_len) % row_len)
            };
            let pos = Vector3::new((col as f64) * STEP, (row as f64) * spacing, 0.0);
            let heading_sign = if row % 2 == 0 { 1.0 } else { -1.0 };
            let yaw = if heading_sign > 0.0 { 0.0 } else { std::f64::consts::PI - 1e-3 };
            yaw_pose(pos, yaw)
        }
    }
}

fn yaw_pose(pos: Vector3<f64>, yaw: f64) -> Pose {
    Pose::from_axis_angle_translation(&Vector3::z(), yaw, pos)
}

fn cell_of(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Deterministic per-cell signature rng stream.
fn cell_rng(seed: u64, cell: (i64, i64, i64)) -> ChaCha8Rng {
    // splitmix-style mixing of the cell coordinates into the stream seed.
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [cell.0 as u64, cell.1 as u64, cell.2 as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn signature_for_cell(config: &WorldConfig, cell: (i64, i64, i64)) -> Vec<f64> {
    let mut rng = cell_rng(config.seed.wrapping_add(0x5167), cell);
    let mut v = vec![0.0; config.descriptor_dim];
    for item in v.iter_mut().take(config.signature_dims) {
        *item = gauss(&mut rng, config.signature_scale);
    }
    v
}

/// Generates a world. Identical configs produce identical worlds.
pub fn generate(config: &WorldConfig) -> Result<SimWorld, SimError> {
    config.validate()?;
    let n = config.keyframes;
    let raw: Vec<Pose> = (0..n)
        .map(|k| trajectory_pose(config.trajectory, k, n))
        .collect();
    // Anchor the gauge: node 0 at identity, like the dead-reckoned chain.
    let anchor = raw[0].inverse();
    let true_poses: Vec<Pose> = raw.iter().map(|p| anchor.compose(p)).collect();

    // Landmarks sprinkled around the path.
    let mut lm_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1ab));
    let path_length = (n as f64) * STEP;
    let landmark_count = (config.landmark_density * path_length).ceil() as usize;
    let mut landmarks: Vec<Vector3<f64>> = Vec::with_capacity(landmark_count);
    for _ in 0..landmark_count {
        let kf = lm_rng.random_range(0..n);
        let base = true_poses[kf].translation();
        landmarks.push(Vector3::new(
            base.x + lm_rng.random_range(-0.8..0.8) * config.sensing_radius,
            base.y + lm_rng.random_range(-0.8..0.8) * config.sensing_radius,
            lm_rng.random_range(-2.0..2.0),
        ));
    }

    // Observations: landmarks within sensing radius, in the local frame.
    let mut obs_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x0b5));
    let mut observations: Vec<KeyframeObservations> = Vec::with_capacity(n);
    for (k, pose) in true_poses.iter().enumerate() {
        let inv = pose.inverse();
        let mut points = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            if (lm - pose.translation()).norm() <= config.sensing_radius {
                let mut local = inv.transform_point(lm);
                if config.observation_noise > 0.0 {
                    local += Vector3::new(
                        gauss(&mut obs_rng, config.observation_noise),
                        gauss(&mut obs_rng, config.observation_noise),
                        gauss(&mut obs_rng, config.observation_noise),
                    );
                }
                points.push((id as u64, local));
            }
        }
        observations.push(KeyframeObservations::new(k, points));
    }

    // Odometry: true relative pose perturbed on the right by Gaussian noise.
    let mut odo_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x0d0));
    let sig_t_eff = config.odometry_sigma_t.max(1e-4);
    let sig_r_eff = config.odometry_sigma_r.max(1e-4);
    let info = Matrix6::from_diagonal(&Vector6::new(
        1.0 / (sig_t_eff * sig_t_eff),
        1.0 / (sig_t_eff * sig_t_eff),
        1.0 / (sig_t_eff * sig_t_eff),
        1.0 / (sig_r_eff * sig_r_eff),
        1.0 / (sig_r_eff * sig_r_eff),
        1.0 / (sig_r_eff * sig_r_eff),
    ));
    let odometry: Vec<(Pose, Matrix6<f64>)> = (0..n - 1)
        .map(|k| {
            let noise = Pose::exp(&crate::geometry::Twist::new(
                Vector3::new(
                    gauss(&mut odo_rng, config.odometry_sigma_t),
                    gauss(&mut odo_rng, config.odometry_sigma_t),
                    gauss(&mut odo_rng, config.odometry_sigma_t),
                ),
                Vector3::new(
                    gauss(&mut odo_rng, config.odometry_sigma_r),
                    gauss(&mut odo_rng, config.odometry_sigma_r),
                    gauss(&mut odo_rng, config.odometry_sigma_r),
                ),
            ));
            (true_poses[k].between(&true_poses[k + 1]).compose(&noise), info)
        })
        .collect();

    // Descriptors: cell signature + isotropic noise.
    let mut desc_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xde5c));
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for pose in &true_poses {
        let cell = cell_of(pose.translation(), config.cell_size);
        let mut v = signature_for_cell(config, cell);
        if config.descriptor_noise > 0.0 {
            for item in v.iter_mut() {
                *item += gauss(&mut desc_rng, config.descriptor_noise);
            }
        }
        if config.nuisance_scale > 0.0 {
            for item in v.iter_mut().skip(config.signature_dims) {
                *item += gauss(&mut desc_rng, config.nuisance_scale);
            }
        }
        vectors.push(v);
    }

    // Revisit pairs: beyond the exclusion window, within the radius.
    let window = DEFAULT_EXCLUSION_WINDOW;
    let mut revisit_pairs = Vec::new();
    for i in 0..n {
        for j in (i + window + 1)..n {
            if true_poses[i].translation_distance(&true_poses[j]) <= config.revisit_radius {
                revisit_pairs.push((i, j));
            }
        }
    }

    // Aliased pairs: pose-far, not revisits, moderate relative rotation so
    // the planted wrong measurement stays inside the solver's domain.
    let mut alias_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xa11a5));
    let mut aliased_pairs: Vec<(usize, usize)> = Vec::new();
    let mut used: std::collections::HashSet<usize> = std::collections::HashSet::new();
    let mut attempts = 0;
    while aliased_pairs.len() < config.aliasing_pairs {
        attempts += 1;
        if attempts > 20_000 {
            return Err(SimError::InvalidConfig(
                "could not place the requested aliasing pairs".into(),
            ));
        }
        let i = alias_rng.random_range(0..n);
        let j = alias_rng.random_range(0..n);
        let (i, j) = (i.min(j), i.max(j));
        if j - i <= window || used.contains(&i) || used.contains(&j) {
            continue;
        }
        let far = true_poses[i].translation_distance(&true_poses[j]) > 2.5 * config.revisit_radius;
        let rot_ok = true_poses[i].rotation_distance(&true_poses[j]) < 2.5;
        if !far || !rot_ok {
            continue;
        }
        used.insert(i);
        used.insert(j);
        aliased_pairs.push((i, j));
    }
    aliased_pairs.sort_unstable();

    for &(i, j) in &aliased_pairs {
        // Descriptor trap: j looks like i's place.
        let mut v = vectors[i].clone();
        if config.descriptor_noise > 0.0 {
            for item in v.iter_mut() {
                *item += gauss(&mut desc_rng, 0.2 * config.descriptor_noise);
            }
        }
        vectors[j] = v;
        if config.aliased_share_geometry {
            // Geometry trap: j also pretends to see i's landmarks at i's
            // local coordinates, so registration yields an identity-like
            // relative pose between distant places.
            let clone: Vec<(u64, Vector3<f64>)> = observations[i].points.clone();
            let mut merged = observations[j].points.clone();
            merged.extend(clone);
            observations[j] = KeyframeObservations::new(j, merged);
        }
    }

    let mut descriptors = DescriptorStore::new();
    for (k, v) in vectors.into_iter().enumerate() {
        descriptors
            .insert(Descriptor::new(k, v))
            .expect("sequential ids cannot collide");
    }

    Ok(SimWorld {
        config: *config,
        descriptors,
        observations,
        odometry,
        ground_truth: GroundTruth {
            true_poses,
            revisit_pairs,
            aliased_pairs,
            revisit_radius: config.revisit_radius,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_count_must_be_sane() {
        let cfg = WorldConfig {
            keyframes: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn zero_noise_loop_revisits_have_equal_descriptors() {
        let cfg = WorldConfig {
            keyframes: 80,
            descriptor_noise: 0.0,
            nuisance_scale: 0.0,
            odometry_sigma_t: 0.0,
            odometry_sigma_r: 0.0,
            ..WorldConfig::default()
        };
        let world = generate(&cfg).unwrap();
        // Lap alignment: keyframe k and k + 40 share a position exactly.
        let mut checked = 0;
        for k in 0..40 {
            let a = &world.descriptors.get(k).unwrap().vector;
            let b = &world.descriptors.get(k + 40).unwrap().vector;
            assert_eq!(a, b, "keyframes {k} and {}", k + 40);
            checked += 1;
        }
        assert_eq!(checked, 40);
        assert!(!world.ground_truth.revisit_pairs.is_empty());
    }

    #[test]
    fn no_aliasing_means_no_descriptor_near_pose_far_pair() {
        // Strong signatures so same-cell and different-cell pairs separate.
        let cfg = WorldConfig {
            keyframes: 100,
            aliasing_pairs: 0,
            signature_dims: 16,
            signature_scale: 0.3,
            descriptor_noise: 0.04,
            nuisance_scale: 0.0,
            seed: 3,
            ..WorldConfig::default()
        };
        let world = generate(&cfg).unwrap();
        // Exhaustive scan: any pair closer in descriptor space than the
        // plausible same-place bound must be within the revisit radius zone.
        let near = 0.55;
        for i in 0..100 {
            for j in (i + 1)..100 {
                let d = crate::descriptors::distance(
                    &world.descriptors.get(i).unwrap().vector,
                    &world.descriptors.get(j).unwrap().vector,
                )
                .unwrap();
                if d < near {
                    let pose_dist = world.ground_truth.true_poses[i]
                        .translation_distance(&world.ground_truth.true_poses[j]);
                    // Same or adjacent cell: allow up to two cell diagonals.
                    assert!(
                        pose_dist <= 2.0 * cfg.cell_size * 3.0_f64.sqrt(),
                        "pair ({i},{j}): desc {d} pose {pose_dist}"
                    );
                }
            }
        }
    }

    #[test]
    fn aliased_pairs_are_descriptor_close_and_pose_far() {
        let cfg = WorldConfig {
            keyframes: 120,
            aliasing_pairs: 3,
            seed: 9,
            ..WorldConfig::default()
        };
        let world = generate(&cfg).unwrap();
        assert_eq!(world.ground_truth.aliased_pairs.len(), 3);
        for &(i, j) in &world.ground_truth.aliased_pairs {
            let d = crate::descriptors::distance(
                &world.descriptors.get(i).unwrap().vector,
                &world.descriptors.get(j).unwrap().vector,
            )
            .unwrap();
            assert!(d < 0.5, "aliased pair not descriptor-close: {d}");
            assert!(
                world.ground_truth.true_poses[i]
                    .translation_distance(&world.ground_truth.true_poses[j])
                    > 2.0 * cfg.revisit_radius
            );
            assert!(!world.ground_truth.revisit_pairs.contains(&(i, j)));
            // Shared geometry: at least 6 common landmark ids.
            let pairs = crate::registration::match_correspondences(
                &world.observations[i],
                &world.observations[j],
            );
            assert!(pairs.len() >= 6);
        }
    }

    #[test]
    fn true_label_examples() {
        let cfg = WorldConfig {
            keyframes: 100,
            ..WorldConfig::default()
        };
        let world = generate(&cfg).unwrap();
        let gt = &world.ground_truth;
        assert!(gt.true_label(7, 7, 3.0));
        // Opposite sides of the loop are far apart.
        assert!(!gt.true_label(0, 25, 3.0));
        // Brute-force agreement over all pairs.
        for i in 0..100 {
            for j in 0..100 {
                let d = gt.true_poses[i].translation_distance(&gt.true_poses[j]);
                assert_eq!(gt.true_label(i, j, 3.0), d <= 3.0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            keyframes: 60,
            aliasing_pairs: 2,
            seed: 77,
            ..WorldConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for k in 0..60 {
            assert_eq!(
                a.descriptors.get(k).unwrap().vector,
                b.descriptors.get(k).unwrap().vector
            );
            assert_eq!(a.observations[k].points, b.observations[k].points);
        }
        for (ea, eb) in a.odometry.iter().zip(b.odometry.iter()) {
            assert_eq!(ea.0.translation(), eb.0.translation());
            assert_eq!(ea.0.rotation(), eb.0.rotation());
        }
        assert_eq!(a.ground_truth.revisit_pairs, b.ground_truth.revisit_pairs);
        assert_eq!(a.ground_truth.aliased_pairs, b.ground_truth.aliased_pairs);
    }

    #[test]
    fn dead_reckoning_drift_grows_with_noise() {
        let rmse_for = |sigma: f64, seed: u64| {
            let cfg = WorldConfig {
                keyframes: 80,
                odometry_sigma_t: sigma,
                odometry_sigma_r: sigma / 10.0,
                seed,
                ..WorldConfig::default()
            };
            let world = generate(&cfg).unwrap();
            let chain = world.odometry_graph();
            let n = world.ground_truth.true_poses.len() as f64;
            (world
                .ground_truth
                .true_poses
                .iter()
                .enumerate()
                .map(|(k, t)| chain.estimate(k).unwrap().translation_distance(t).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        };
        // Monte-Carlo over seeds.
        let low: f64 = (0..8).map(|s| rmse_for(0.005, s)).sum::<f64>() / 8.0;
        let high: f64 = (0..8).map(|s| rmse_for(0.05, s)).sum::<f64>() / 8.0;
        assert!(low > 0.0);
        assert!(high > 3.0 * low, "low {low} high {high}");
    }

    #[test]
    fn ground_truth_json_roundtrip() {
        let cfg = WorldConfig {
            keyframes: 120,
            aliasing_pairs: 1,
            seed: 5,
            ..WorldConfig::default()
        };
        let world = generate(&cfg).unwrap();
        let text = world.ground_truth.to_json();
        let back = GroundTruth::from_json(&text).unwrap();
        assert_eq!(back.revisit_pairs, world.ground_truth.revisit_pairs);
        assert_eq!(back.aliased_pairs, world.ground_truth.aliased_pairs);
        for (a, b) in back.true_poses.iter().zip(world.ground_truth.true_poses.iter()) {
            assert!(a.translation_distance(b) < 1e-15);
        }
    }

    #[test]
    fn every_keyframe_sees_enough_landmarks() {
        for kind in [
            TrajectoryKind::Loop,
            TrajectoryKind::FigureEight,
            TrajectoryKind::GridWithRevisits,
        ] {
            let cfg = WorldConfig {
                trajectory: kind,
                keyframes: 100,
                seed: 11,
                ..WorldConfig::default()
            };
            let world = generate(&cfg).unwrap();
            for obs in &world.observations {
                assert!(
                    obs.points.len() >= 6,
                    "{kind:?}: keyframe {} sees {}",
                    obs.keyframe_id,
                    obs.points.len()
                );
            }
            assert!(
                !world.ground_truth.revisit_pairs.is_empty(),
                "{kind:?} has no revisits"
            );
        }
    }
}
