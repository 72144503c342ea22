//! g2o-style text serialization of SE(3) pose graphs.
//!
//! Supported lines:
//!
//! ```text
//! VERTEX_SE3:QUAT id x y z qx qy qz qw
//! EDGE_SE3:QUAT i j x y z qx qy qz qw  i11 i12 ... i66   (21 upper-triangular entries)
//! ```
//!
//! The information block is the row-major upper triangle of the 6x6 matrix in
//! `(x, y, z, qx, qy, qz)` ordering. Lines starting with `#` are comments;
//! any other tag is an error. Floats are written with shortest-round-trip
//! formatting, so writing and re-parsing a graph reproduces its values
//! exactly. Parsing canonicalizes quaternion signs to w >= 0.

use nalgebra::{Matrix6, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::graph::{GraphError, PoseGraph};

#[derive(Debug, Error)]
pub enum G2oError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("edge references vertex {id} which was never declared")]
    MissingVertex { id: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

struct RawVertex {
    id: usize,
    pose: Pose,
}

struct RawEdge {
    line: usize,
    from: usize,
    to: usize,
    measurement: Pose,
    information: Matrix6<f64>,
}

fn parse_floats(parts: &[&str], line: usize) -> Result<Vec<f64>, G2oError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| G2oError::MalformedLine {
                line,
                reason: format!("bad float '{p}'"),
            })
        })
        .collect()
}

fn pose_from_xyzq(v: &[f64]) -> Pose {
    // Field order: x y z qx qy qz qw.
    Pose::from_wxyz_translation(v[6], v[3], v[4], v[5], Vector3::new(v[0], v[1], v[2]))
}

/// Parses g2o text into a pose graph. Edge kinds are recovered from the
/// indices: `to == from + 1` is odometry, `|to - from| > 1` a loop closure.
pub fn parse_g2o(text: &str) -> Result<PoseGraph, G2oError> {
    let mut vertices: Vec<RawVertex> = Vec::new();
    let mut edges: Vec<RawEdge> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[0] {
            "VERTEX_SE3:QUAT" => {
                if parts.len() != 9 {
                    return Err(G2oError::MalformedLine {
                        line: line_no,
                        reason: format!("vertex needs 8 fields, found {}", parts.len() - 1),
                    });
                }
                let id: usize = parts[1].parse().map_err(|_| G2oError::MalformedLine {
                    line: line_no,
                    reason: format!("bad vertex id '{}'", parts[1]),
                })?;
                let vals = parse_floats(&parts[2..], line_no)?;
                vertices.push(RawVertex {
                    id,
                    pose: pose_from_xyzq(&vals),
                });
            }
            "EDGE_SE3:QUAT" => {
                if parts.len() != 31 {
                    return Err(G2oError::MalformedLine {
                        line: line_no,
                        reason: format!("edge needs 30 fields, found {}", parts.len() - 1),
                    });
                }
                let from: usize = parts[1].parse().map_err(|_| G2oError::MalformedLine {
                    line: line_no,
                    reason: format!("bad vertex id '{}'", parts[1]),
                })?;
                let to: usize = parts[2].parse().map_err(|_| G2oError::MalformedLine {
                    line: line_no,
                    reason: format!("bad vertex id '{}'", parts[2]),
                })?;
                let vals = parse_floats(&parts[3..], line_no)?;
                let measurement = pose_from_xyzq(&vals[..7]);
                let mut information = Matrix6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        information[(r, c)] = vals[k];
                        information[(c, r)] = vals[k];
                        k += 1;
                    }
                }
                edges.push(RawEdge {
                    line: line_no,
                    from,
                    to,
                    measurement,
                    information,
                });
            }
            tag => {
                return Err(G2oError::MalformedLine {
                    line: line_no,
                    reason: format!("unknown tag '{tag}'"),
                });
            }
        }
    }

    vertices.sort_by_key(|v| v.id);
    for (k, v) in vertices.iter().enumerate() {
        if v.id != k {
            return Err(G2oError::MissingVertex { id: k });
        }
    }
    let n = vertices.len();

    let mut graph = PoseGraph::new();
    for v in &vertices {
        graph.add_node(v.pose);
    }
    for e in edges {
        if e.from >= n {
            return Err(G2oError::MissingVertex { id: e.from });
        }
        if e.to >= n {
            return Err(G2oError::MissingVertex { id: e.to });
        }
        if e.to == e.from + 1 {
            graph.add_odometry_edge(e.from, e.to, e.measurement, e.information)?;
        } else if e.from.abs_diff(e.to) > 1 {
            graph.add_loop_closure(e.from, e.to, e.measurement, e.information)?;
        } else {
            return Err(G2oError::MalformedLine {
                line: e.line,
                reason: format!(
                    "edge {}->{} is neither forward-consecutive odometry nor a loop",
                    e.from, e.to
                ),
            });
        }
    }
    Ok(graph)
}

fn push_pose(out: &mut String, p: &Pose) {
    let t = p.translation();
    let q = p.rotation();
    out.push_str(&format!(
        "{} {} {} {} {} {} {}",
        t.x, t.y, t.z, q.x, q.y, q.z, q.w
    ));
}

/// Serializes a pose graph to g2o text. Vertices come first in id order,
/// then edges in insertion order.
pub fn write_g2o(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for node in graph.nodes() {
        out.push_str(&format!("VERTEX_SE3:QUAT {} ", node.id));
        push_pose(&mut out, &node.estimate);
        out.push('\n');
    }
    for e in graph.edges() {
        out.push_str(&format!("EDGE_SE3:QUAT {} {} ", e.from, e.to));
        push_pose(&mut out, &e.measurement);
        for r in 0..6 {
            for c in r..6 {
                out.push_str(&format!(" {}", e.information[(r, c)]));
            }
        }
        out.push('\n');
    }
    out
}

pub fn load_g2o(path: &std::path::Path) -> Result<PoseGraph, G2oError> {
    let text = std::fs::read_to_string(path)?;
    parse_g2o(&text)
}

pub fn save_g2o(graph: &PoseGraph, path: &std::path::Path) -> Result<(), G2oError> {
    std::fs::write(path, write_g2o(graph))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::default_loop_information;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_identity_vertex_roundtrips() {
        let mut g = PoseGraph::new();
        g.add_node(Pose::identity());
        let text = write_g2o(&g);
        assert_eq!(text, "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n");
        let back = parse_g2o(&text).unwrap();
        assert_eq!(back.node_count(), 1);
        assert_eq!(back.estimate(0).unwrap().rotation_angle(), 0.0);
    }

    #[test]
    fn info_matrix_reconstructed_symmetric() {
        let text = "\
VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1
VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1
VERTEX_SE3:QUAT 2 2 0 0 0 0 0 1
VERTEX_SE3:QUAT 3 3 0 0 0 0 0 1
EDGE_SE3:QUAT 0 3 3 0 0 0 0 0 1 1 0.1 0.2 0.3 0.4 0.5 2 0.6 0.7 0.8 0.9 3 1.1 1.2 1.3 4 1.4 1.5 5 1.6 6
";
        let g = parse_g2o(text).unwrap();
        let e = &g.edges()[0];
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(e.information[(r, c)], e.information[(c, r)]);
            }
        }
        assert_eq!(e.information[(0, 0)], 1.0);
        assert_eq!(e.information[(0, 1)], 0.1);
        assert_eq!(e.information[(5, 5)], 6.0);
    }

    #[test]
    fn hand_written_fixture_parses() {
        // 4 nodes in a line, 3 odometry edges, 1 loop 0->3.
        let info = "100 0 0 0 0 0 100 0 0 0 0 100 0 0 0 400 0 0 400 0 400";
        let text = format!(
            "# demo graph\n\
VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n\
VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n\
VERTEX_SE3:QUAT 2 2 0 0 0 0 0 1\n\
VERTEX_SE3:QUAT 3 3 0 0 0 0 0 1\n\
EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 {info}\n\
EDGE_SE3:QUAT 1 2 1 0 0 0 0 0 1 {info}\n\
EDGE_SE3:QUAT 2 3 1 0 0 0 0 0 1 {info}\n\
EDGE_SE3:QUAT 0 3 3 0 0 0 0 0 1 {info}\n"
        );
        let g = parse_g2o(&text).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edges().len(), 4);
        assert_eq!(g.loop_edge_count(), 1);
        g.validate_chain().unwrap();
    }

    #[test]
    fn unknown_tag_is_malformed() {
        match parse_g2o("VERTEX_SE2 0 0 0 0\n") {
            Err(G2oError::MalformedLine { line: 1, .. }) => {}
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn edge_without_vertex_is_missing_vertex() {
        let info = "1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1";
        let text = format!(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n\
VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n\
EDGE_SE3:QUAT 0 7 1 0 0 0 0 0 1 {info}\n"
        );
        assert!(matches!(
            parse_g2o(&text),
            Err(G2oError::MissingVertex { id: 7 })
        ));
    }

    #[test]
    fn gap_in_vertex_ids_is_missing_vertex() {
        let text = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 2 0 0 0 0 0 0 1\n";
        assert!(matches!(
            parse_g2o(text),
            Err(G2oError::MissingVertex { id: 1 })
        ));
    }

    #[test]
    fn random_graph_roundtrips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n = rng.random_range(3..30);
            let steps: Vec<Pose> = (0..n - 1)
                .map(|_| {
                    Pose::from_axis_angle_translation(
                        &Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ),
                        rng.random_range(0.0..1.0),
                        Vector3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                        ),
                    )
                })
                .collect();
            let mut g = PoseGraph::chain_initialize(&steps);
            for _ in 0..rng.random_range(0..5) {
                let from = rng.random_range(0..n - 2);
                let to = rng.random_range(from + 2..n);
                let m = Pose::from_axis_angle_translation(
                    &Vector3::z(),
                    rng.random_range(0.0..1.0),
                    Vector3::new(rng.random_range(-1.0..1.0), 0.0, 0.0),
                );
                g.add_loop_closure(from, to, m, default_loop_information())
                    .unwrap();
            }
            let text = write_g2o(&g);
            let back = parse_g2o(&text).unwrap();
            assert_eq!(back.node_count(), g.node_count());
            assert_eq!(back.edges().len(), g.edges().len());
            for (a, b) in g.nodes().iter().zip(back.nodes().iter()) {
                assert_eq!(a.id, b.id);
                assert!(a.estimate.translation_distance(&b.estimate) < 1e-15);
                assert!(a.estimate.rotation_distance(&b.estimate) < 1e-15);
            }
            for (a, b) in g.edges().iter().zip(back.edges().iter()) {
                assert_eq!(a.kind, b.kind);
                assert_eq!((a.from, a.to), (b.from, b.to));
                assert_eq!(a.information, b.information);
                assert_eq!(
                    a.measurement.translation(),
                    b.measurement.translation()
                );
                assert_eq!(a.measurement.rotation(), b.measurement.rotation());
            }
        }
    }

    use nalgebra::Vector3;
}
