//! Keyframe pose graph: trajectory nodes, odometry edges, loop-closure edges.
//!
//! Node ids are contiguous from 0. Odometry edges connect consecutive
//! keyframes and must form a single chain; loop closures connect
//! non-consecutive keyframes. Every edge carries a 6x6 information matrix
//! (inverse covariance) ordered `(x, y, z, qx, qy, qz)`, i.e. translation
//! block first, matching the tangent stacking `[rho; phi]`.

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge references unknown node {0}")]
    UnknownNode(usize),
    #[error("odometry edge {from}->{to} does not connect consecutive keyframes")]
    NonChainOdometry { from: usize, to: usize },
    #[error("loop-closure edge {from}->{to} must connect non-consecutive keyframes")]
    NotALoop { from: usize, to: usize },
    #[error("information matrix of edge {from}->{to} is not symmetric positive-definite")]
    NonSpdInformation { from: usize, to: usize },
    #[error("odometry chain incomplete: no edge {missing_from}->{}", missing_from + 1)]
    IncompleteOdometryChain { missing_from: usize },
    #[error("graph JSON: {0}")]
    Json(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
}

#[derive(Debug, Clone)]
pub struct PoseNode {
    pub id: usize,
    pub estimate: Pose,
}

#[derive(Debug, Clone)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    /// Relative pose from->to: `between(X_from, X_to)` for a satisfied edge.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

/// Default information for edges without a stated covariance:
/// translation sigma 0.1 m, rotation sigma 0.05 rad.
pub fn default_loop_information() -> Matrix6<f64> {
    Matrix6::from_diagonal(&nalgebra::Vector6::new(
        100.0, 100.0, 100.0, 400.0, 400.0, 400.0,
    ))
}

fn information_is_spd(m: &Matrix6<f64>) -> bool {
    for i in 0..6 {
        for j in (i + 1)..6 {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                return false;
            }
        }
    }
    nalgebra::linalg::Cholesky::new(*m).is_some()
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: Vec<PoseNode>,
    edges: Vec<PoseEdge>,
}

impl PoseGraph {
    pub fn new() -> PoseGraph {
        PoseGraph::default()
    }

    /// Appends a node; ids are assigned contiguously from 0.
    pub fn add_node(&mut self, estimate: Pose) -> usize {
        let id = self.nodes.len();
        self.nodes.push(PoseNode { id, estimate });
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[PoseNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PoseEdge] {
        &self.edges
    }

    pub fn estimate(&self, id: usize) -> Option<&Pose> {
        self.nodes.get(id).map(|n| &n.estimate)
    }

    pub fn estimates(&self) -> Vec<Pose> {
        self.nodes.iter().map(|n| n.estimate).collect()
    }

    pub fn set_estimates(&mut self, estimates: &[Pose]) {
        assert_eq!(estimates.len(), self.nodes.len());
        for (n, e) in self.nodes.iter_mut().zip(estimates.iter()) {
            n.estimate = *e;
        }
    }

    /// Loop-closure edges with their ordinal (position among loop edges in
    /// insertion order). Optimizer weights and reports index loops by this
    /// ordinal.
    pub fn loop_edges(&self) -> impl Iterator<Item = (usize, &PoseEdge)> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::LoopClosure)
            .enumerate()
    }

    pub fn loop_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::LoopClosure)
            .count()
    }

    fn check_endpoints(&self, from: usize, to: usize) -> Result<(), GraphError> {
        if from >= self.nodes.len() {
            return Err(GraphError::UnknownNode(from));
        }
        if to >= self.nodes.len() {
            return Err(GraphError::UnknownNode(to));
        }
        Ok(())
    }

    pub fn add_odometry_edge(
        &mut self,
        from: usize,
        to: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        self.check_endpoints(from, to)?;
        if to != from + 1 {
            return Err(GraphError::NonChainOdometry { from, to });
        }
        if !information_is_spd(&information) {
            return Err(GraphError::NonSpdInformation { from, to });
        }
        self.edges.push(PoseEdge {
            from,
            to,
            measurement,
            information,
            kind: EdgeKind::Odometry,
        });
        Ok(())
    }

    pub fn add_loop_closure(
        &mut self,
        from: usize,
        to: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        self.check_endpoints(from, to)?;
        if from.abs_diff(to) <= 1 {
            return Err(GraphError::NotALoop { from, to });
        }
        if !information_is_spd(&information) {
            return Err(GraphError::NonSpdInformation { from, to });
        }
        self.edges.push(PoseEdge {
            from,
            to,
            measurement,
            information,
            kind: EdgeKind::LoopClosure,
        });
        Ok(())
    }

    /// Checks that the odometry edges form exactly the chain 0->1->...->N-1.
    pub fn validate_chain(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(());
        }
        let mut seen = vec![false; n - 1];
        for e in &self.edges {
            if e.kind == EdgeKind::Odometry {
                seen[e.from] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GraphError::IncompleteOdometryChain {
                missing_from: missing,
            });
        }
        Ok(())
    }

    /// Builds a graph from consecutive odometry measurements by dead
    /// reckoning: node 0 at identity, node k the composition of the first k
    /// measurements. Uses the default information matrix on every edge.
    pub fn chain_initialize(odometry: &[Pose]) -> PoseGraph {
        let with_info: Vec<(Pose, Matrix6<f64>)> = odometry
            .iter()
            .map(|m| (*m, default_loop_information()))
            .collect();
        PoseGraph::chain_initialize_with_information(&with_info)
    }

    /// Like [`PoseGraph::chain_initialize`] with per-edge information.
    pub fn chain_initialize_with_information(odometry: &[(Pose, Matrix6<f64>)]) -> PoseGraph {
        let mut g = PoseGraph::new();
        let mut current = Pose::identity();
        g.add_node(current);
        for (k, (m, info)) in odometry.iter().enumerate() {
            current = current.compose(m);
            g.add_node(current);
            g.add_odometry_edge(k, k + 1, *m, *info)
                .expect("chain edges are consecutive by construction");
        }
        g
    }

    // ---- JSON dump ---------------------------------------------------------

    pub fn to_json(&self) -> String {
        let doc = JsonGraph::from(self);
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<PoseGraph, GraphError> {
        let doc: JsonGraph =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        doc.into_graph()
    }
}

#[derive(Serialize, Deserialize)]
struct JsonQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: usize,
    translation: [f64; 3],
    rotation: JsonQuat,
}

#[derive(Serialize, Deserialize)]
struct JsonEdge {
    from: usize,
    to: usize,
    kind: EdgeKind,
    translation: [f64; 3],
    rotation: JsonQuat,
    /// Row-major 6x6 information matrix.
    information: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    nodes: Vec<JsonNode>,
    edges: Vec<JsonEdge>,
}

fn pose_parts(p: &Pose) -> ([f64; 3], JsonQuat) {
    let t = p.translation();
    let q = p.rotation();
    (
        [t.x, t.y, t.z],
        JsonQuat {
            w: q.w,
            x: q.x,
            y: q.y,
            z: q.z,
        },
    )
}

fn pose_from_parts(t: &[f64; 3], q: &JsonQuat) -> Pose {
    Pose::from_wxyz_translation(q.w, q.x, q.y, q.z, nalgebra::Vector3::new(t[0], t[1], t[2]))
}

impl From<&PoseGraph> for JsonGraph {
    fn from(g: &PoseGraph) -> JsonGraph {
        JsonGraph {
            nodes: g
                .nodes
                .iter()
                .map(|n| {
                    let (translation, rotation) = pose_parts(&n.estimate);
                    JsonNode {
                        id: n.id,
                        translation,
                        rotation,
                    }
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| {
                    let (translation, rotation) = pose_parts(&e.measurement);
                    JsonEdge {
                        from: e.from,
                        to: e.to,
                        kind: e.kind,
                        translation,
                        rotation,
                        information: e.information.transpose().as_slice().to_vec(),
                    }
                })
                .collect(),
        }
    }
}

impl JsonGraph {
    fn into_graph(self) -> Result<PoseGraph, GraphError> {
        let mut nodes = self.nodes;
        nodes.sort_by_key(|n| n.id);
        for (k, n) in nodes.iter().enumerate() {
            if n.id != k {
                return Err(GraphError::Json(format!(
                    "node ids must be contiguous from 0; found {}",
                    n.id
                )));
            }
        }
        let mut g = PoseGraph::new();
        for n in &nodes {
            g.add_node(pose_from_parts(&n.translation, &n.rotation));
        }
        for e in &self.edges {
            if e.information.len() != 36 {
                return Err(GraphError::Json(
                    "edge information must hold 36 entries".into(),
                ));
            }
            let mut info = Matrix6::zeros();
            for r in 0..6 {
                for c in 0..6 {
                    info[(r, c)] = e.information[r * 6 + c];
                }
            }
            let m = pose_from_parts(&e.translation, &e.rotation);
            match e.kind {
                EdgeKind::Odometry => g.add_odometry_edge(e.from, e.to, m, info)?,
                EdgeKind::LoopClosure => g.add_loop_closure(e.from, e.to, m, info)?,
            }
        }
        Ok(g)
    }
}
