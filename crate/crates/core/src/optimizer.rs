//! Pose-graph optimization: Levenberg-Marquardt with analytic SE(3)
//! Jacobians, wrapped in Graduated Non-Convexity over a truncated-least-
//! squares robust cost.
//!
//! The residual of an edge with measurement Z between nodes i and j is
//! `r = Log(Z^-1 * X_i^-1 * X_j)`, weighted by the edge information. Node 0
//! is gauge-fixed at its initial value. Updates are left-multiplicative:
//! `X <- Exp(delta) * X`. Under that convention the Jacobian w.r.t. the `to`
//! node is `Jl_inv(r) * Ad(Z^-1 X_i^-1)` and the `from` Jacobian is its
//! negation, which keeps the normal-equation assembly down to one 6x6
//! product per edge.
//!
//! GNC alternates truncated-least-squares weight updates with weighted
//! re-optimization while the continuation parameter mu grows; the final
//! weights, binarized at 0.5, classify each loop closure as inlier or
//! outlier. Odometry edges always keep weight 1.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_left_jacobian_inverse, GeometryError, Pose, Twist};
use crate::graph::{EdgeKind, GraphError, PoseEdge, PoseGraph};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("normal equations remained singular up to damping {lambda:e}")]
    SingularNormalEquations { lambda: f64 },
    #[error("weight vector has {got} entries but the graph has {expected} loop edges")]
    WeightCountMismatch { expected: usize, got: usize },
}

/// Residual of one edge at given estimates.
#[derive(Debug, Clone)]
pub struct ResidualEvaluation {
    /// Index into `graph.edges()`.
    pub edge_index: usize,
    pub residual: Twist,
    /// Chi-square contribution `r^T Omega r`.
    pub whitened_norm_sq: f64,
}

/// Continuation state of a GNC solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GncState {
    /// Continuation parameter of the TLS surrogate.
    pub mu: f64,
    /// Per-loop-edge weights in [0, 1], indexed by loop ordinal.
    pub weights: Vec<f64>,
    /// Completed outer iterations.
    pub iteration: usize,
    /// Value of mu at each outer iteration, nondecreasing.
    pub mu_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Loop ordinals classified inlier (weight >= 0.5).
    pub inlier_edges: BTreeSet<usize>,
    /// Loop ordinals classified outlier.
    pub outlier_edges: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLabel {
    Inlier,
    Outlier,
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub rel_cost_tolerance: f64,
    pub initial_lambda: f64,
    /// Damping multiplier on rejected steps; divisor on accepted ones.
    pub lambda_factor: f64,
    pub max_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> LmConfig {
        LmConfig {
            max_iterations: 100,
            step_tolerance: 1e-8,
            rel_cost_tolerance: 1e-9,
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_lambda: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GncConfig {
    /// TLS inlier threshold epsilon^2 on the whitened residual; the default
    /// is the 0.99 quantile of chi-square with 6 degrees of freedom.
    pub chi2_threshold: f64,
    pub mu_growth: f64,
    pub mu_stop: f64,
    pub mu_min: f64,
    /// Outer loop stops when no weight moves by more than this.
    pub weight_stabilize_tol: f64,
    /// Safety cap on outer iterations.
    pub max_outer_iterations: usize,
    pub lm: LmConfig,
}

impl Default for GncConfig {
    fn default() -> GncConfig {
        GncConfig {
            chi2_threshold: 16.81,
            mu_growth: 1.4,
            mu_stop: 1e6,
            mu_min: 1e-6,
            weight_stabilize_tol: 1e-3,
            max_outer_iterations: 200,
            lm: LmConfig::default(),
        }
    }
}

/// Error pose and residual twist of one edge: `r = Log(Z^-1 X_from^-1 X_to)`.
fn edge_residual(edge: &PoseEdge, estimates: &[Pose]) -> Result<Twist, GeometryError> {
    let x_from = &estimates[edge.from];
    let x_to = &estimates[edge.to];
    edge.measurement
        .inverse()
        .compose(&x_from.between(x_to))
        .log()
}

/// Evaluates one edge residual and its chi-square contribution.
pub fn evaluate_residual(
    graph: &PoseGraph,
    edge_index: usize,
    estimates: &[Pose],
) -> Result<ResidualEvaluation, OptimizerError> {
    let edge = &graph.edges()[edge_index];
    let r = edge_residual(edge, estimates)?;
    let rv = r.as_vector();
    let whitened_norm_sq = (rv.transpose() * edge.information * rv)[0];
    Ok(ResidualEvaluation {
        edge_index,
        residual: r,
        whitened_norm_sq,
    })
}

/// Analytic Jacobian of an edge residual w.r.t. left-multiplicative
/// perturbations of its endpoints. Returns `(J_from, J_to)`.
pub fn edge_jacobians(
    edge: &PoseEdge,
    estimates: &[Pose],
) -> Result<(nalgebra::Matrix6<f64>, nalgebra::Matrix6<f64>), OptimizerError> {
    let a = edge
        .measurement
        .inverse()
        .compose(&estimates[edge.from].inverse());
    let r = a.compose(&estimates[edge.to]).log()?;
    let j_to = se3_left_jacobian_inverse(&r) * a.adjoint();
    Ok((-j_to, j_to))
}

/// Maps each edge to its loop ordinal (position among loop edges).
fn loop_ordinals(graph: &PoseGraph) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(graph.edges().len());
    let mut next = 0;
    for e in graph.edges() {
        if e.kind == EdgeKind::LoopClosure {
            out.push(Some(next));
            next += 1;
        } else {
            out.push(None);
        }
    }
    out
}

fn edge_weight(ordinals: &[Option<usize>], weights: &[f64], edge_index: usize) -> f64 {
    match ordinals[edge_index] {
        Some(ord) => weights[ord],
        None => 1.0,
    }
}

/// Weighted total cost and per-loop unweighted chi-squares.
///
/// A loop edge whose residual rotation reaches the log-map singularity is a
/// maximally wrong measurement: its chi-square is reported as infinite, which
/// makes any state relying on it (weight > 0) unacceptable to the line search
/// and drives its TLS weight to zero. The singularity on an odometry edge is
/// a genuine error and propagates.
fn evaluate_cost(
    graph: &PoseGraph,
    estimates: &[Pose],
    weights: &[f64],
    ordinals: &[Option<usize>],
) -> Result<(f64, Vec<f64>), OptimizerError> {
    let mut cost = 0.0;
    let mut loop_chi2 = vec![0.0; weights.len()];
    for (idx, edge) in graph.edges().iter().enumerate() {
        let w = edge_weight(ordinals, weights, idx);
        let chi2 = match edge_residual(edge, estimates) {
            Ok(r) => {
                let rv = r.as_vector();
                (rv.transpose() * edge.information * rv)[0]
            }
            Err(e) if ordinals[idx].is_some() => {
                let _ = e;
                f64::INFINITY
            }
            Err(e) => return Err(e.into()),
        };
        if w > 0.0 {
            cost += w * chi2;
        }
        if let Some(ord) = ordinals[idx] {
            loop_chi2[ord] = chi2;
        }
    }
    Ok((cost, loop_chi2))
}

/// Builds the gauge-reduced normal equations `H delta = -g` at the given
/// estimates.
fn linearize(
    graph: &PoseGraph,
    estimates: &[Pose],
    weights: &[f64],
    ordinals: &[Option<usize>],
) -> Result<(DMatrix<f64>, DVector<f64>), OptimizerError> {
    let n_vars = 6 * (graph.node_count() - 1);
    let mut h = DMatrix::<f64>::zeros(n_vars, n_vars);
    let mut g = DVector::<f64>::zeros(n_vars);

    for (idx, edge) in graph.edges().iter().enumerate() {
        let w = edge_weight(ordinals, weights, idx);
        if w == 0.0 {
            continue;
        }
        let a = edge
            .measurement
            .inverse()
            .compose(&estimates[edge.from].inverse());
        let r = a.compose(&estimates[edge.to]).log()?;
        let rv = r.as_vector();
        let omega = &edge.information;

        let j_to = se3_left_jacobian_inverse(&r) * a.adjoint();
        let jt_omega = j_to.transpose() * omega;
        let block = jt_omega * j_to * w; // J_to^T O J_to, shared by all four blocks
        let grad = jt_omega * rv * w; // J_to^T O r

        let fi = edge.from;
        let ti = edge.to;
        if ti > 0 {
            let t0 = 6 * (ti - 1);
            let mut hd = h.view_mut((t0, t0), (6, 6));
            hd += block;
            let mut gd = g.rows_mut(t0, 6);
            gd += grad;
        }
        if fi > 0 {
            let f0 = 6 * (fi - 1);
            let mut hd = h.view_mut((f0, f0), (6, 6));
            hd += block;
            let mut gd = g.rows_mut(f0, 6);
            gd -= grad;
        }
        if fi > 0 && ti > 0 {
            let f0 = 6 * (fi - 1);
            let t0 = 6 * (ti - 1);
            let mut ho = h.view_mut((f0, t0), (6, 6));
            ho -= block;
            let mut ho2 = h.view_mut((t0, f0), (6, 6));
            ho2 -= block;
        }
    }
    Ok((h, g))
}

fn apply_step(estimates: &[Pose], delta: &DVector<f64>) -> Vec<Pose> {
    let mut out = estimates.to_vec();
    for k in 1..estimates.len() {
        let d = delta.rows(6 * (k - 1), 6);
        let twist = Twist::new(
            nalgebra::Vector3::new(d[0], d[1], d[2]),
            nalgebra::Vector3::new(d[3], d[4], d[5]),
        );
        out[k] = Pose::exp(&twist).compose(&estimates[k]);
    }
    out
}

fn partition_by_weights(weights: &[f64]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut inliers = BTreeSet::new();
    let mut outliers = BTreeSet::new();
    for (ord, &w) in weights.iter().enumerate() {
        if w >= 0.5 {
            inliers.insert(ord);
        } else {
            outliers.insert(ord);
        }
    }
    (inliers, outliers)
}

struct LmOutcome {
    estimates: Vec<Pose>,
    report: OptimizeReport,
    loop_chi2: Vec<f64>,
}

fn optimize_lm_from(
    graph: &PoseGraph,
    initial: Vec<Pose>,
    weights: &[f64],
    config: &LmConfig,
    ordinals: &[Option<usize>],
) -> Result<LmOutcome, OptimizerError> {
    let (inlier_edges, outlier_edges) = partition_by_weights(weights);
    let mut estimates = initial;
    let (initial_cost, mut loop_chi2) = evaluate_cost(graph, &estimates, weights, ordinals)?;
    let mut cost = initial_cost;
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;

    if graph.node_count() <= 1 {
        converged = true;
    }

    'outer: while !converged && iterations < config.max_iterations {
        let (h, g) = linearize(graph, &estimates, weights, ordinals)?;
        loop {
            // Damped system: (H + lambda I) delta = -g.
            let mut damped = h.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda;
            }
            let Some(chol) = nalgebra::linalg::Cholesky::new(damped) else {
                lambda *= config.lambda_factor;
                if lambda > config.max_lambda {
                    return Err(OptimizerError::SingularNormalEquations { lambda });
                }
                continue;
            };
            let delta = chol.solve(&(-&g));
            iterations += 1;
            let candidate = apply_step(&estimates, &delta);
            let (new_cost, new_loop_chi2) =
                evaluate_cost(graph, &candidate, weights, ordinals)?;
            if new_cost <= cost {
                let decrease = cost - new_cost;
                estimates = candidate;
                loop_chi2 = new_loop_chi2;
                cost = new_cost;
                lambda /= config.lambda_factor;
                if delta.norm() < config.step_tolerance
                    || decrease < config.rel_cost_tolerance * cost.max(1e-300)
                {
                    converged = true;
                }
                continue 'outer;
            }
            lambda *= config.lambda_factor;
            if lambda > config.max_lambda {
                // Not even an infinitesimal damped step decreases the cost:
                // numerically at a minimum.
                converged = true;
                continue 'outer;
            }
            if iterations >= config.max_iterations {
                continue 'outer;
            }
        }
    }

    Ok(LmOutcome {
        estimates,
        report: OptimizeReport {
            converged,
            iterations,
            initial_cost,
            final_cost: cost,
            inlier_edges,
            outlier_edges,
        },
        loop_chi2,
    })
}

/// Weighted Levenberg-Marquardt over all graph edges, starting from the
/// graph's stored estimates. `weights` holds one entry per loop edge
/// (ordinal order); odometry edges always weigh 1. Node 0 stays fixed.
pub fn optimize_lm(
    graph: &PoseGraph,
    weights: &[f64],
    config: &LmConfig,
) -> Result<(Vec<Pose>, OptimizeReport), OptimizerError> {
    graph.validate_chain()?;
    let ordinals = loop_ordinals(graph);
    if weights.len() != graph.loop_edge_count() {
        return Err(OptimizerError::WeightCountMismatch {
            expected: graph.loop_edge_count(),
            got: weights.len(),
        });
    }
    let out = optimize_lm_from(graph, graph.estimates(), weights, config, &ordinals)?;
    Ok((out.estimates, out.report))
}

/// Truncated-least-squares surrogate weight for one residual.
fn tls_weight(chi2: f64, mu: f64, eps2: f64) -> f64 {
    let upper = (mu + 1.0) / mu * eps2;
    let lower = mu / (mu + 1.0) * eps2;
    if chi2 >= upper {
        0.0
    } else if chi2 <= lower {
        1.0
    } else {
        // Clamp guards the boundary arithmetic.
        ((eps2 * mu * (mu + 1.0) / chi2).sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// Robust pose-graph solve via Graduated Non-Convexity with TLS weights.
///
/// Returns the optimized estimates, the final continuation state, and a
/// report whose inlier/outlier partition is the binarized final weights.
/// The report's cost fields are those of the final weighted inner solve.
pub fn gnc_solve(
    graph: &PoseGraph,
    config: &GncConfig,
) -> Result<(Vec<Pose>, GncState, OptimizeReport), OptimizerError> {
    graph.validate_chain()?;
    let ordinals = loop_ordinals(graph);
    let n_loops = graph.loop_edge_count();
    let eps2 = config.chi2_threshold;

    if n_loops == 0 {
        let out = optimize_lm_from(graph, graph.estimates(), &[], &config.lm, &ordinals)?;
        return Ok((
            out.estimates,
            GncState {
                mu: config.mu_stop,
                weights: Vec::new(),
                iteration: 0,
                mu_history: Vec::new(),
            },
            out.report,
        ));
    }

    let mut estimates = graph.estimates();
    let (_, mut loop_chi2) = evaluate_cost(graph, &estimates, &vec![1.0; n_loops], &ordinals)?;
    let r2_max = loop_chi2.iter().cloned().fold(0.0, f64::max);

    // mu_0 = eps^2 / (2 r_max^2 - eps^2); if every residual is already inside
    // the inlier region the surrogate starts (and ends) fully non-convex.
    let denom = 2.0 * r2_max - eps2;
    let mut mu = if denom > 0.0 {
        (eps2 / denom).max(config.mu_min)
    } else {
        config.mu_stop
    };

    let mut prev_weights = vec![1.0; n_loops];
    let mut weights = vec![1.0; n_loops];
    let mut total_iterations = 0;
    let mut iteration = 0;
    let mut last_report: Option<OptimizeReport> = None;
    let mut hit_cap = true;
    let mut mu_history = Vec::new();

    while iteration < config.max_outer_iterations {
        mu_history.push(mu);
        for (ord, chi2) in loop_chi2.iter().enumerate() {
            weights[ord] = tls_weight(*chi2, mu, eps2);
        }
        let out = optimize_lm_from(graph, estimates, &weights, &config.lm, &ordinals)?;
        estimates = out.estimates;
        loop_chi2 = out.loop_chi2;
        total_iterations += out.report.iterations;
        last_report = Some(out.report);
        iteration += 1;

        let max_change = weights
            .iter()
            .zip(prev_weights.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if mu >= config.mu_stop || max_change < config.weight_stabilize_tol {
            hit_cap = false;
            break;
        }
        prev_weights.copy_from_slice(&weights);
        mu *= config.mu_growth;
    }

    let (inliers, outliers) = partition_by_weights(&weights);
    let mut report = last_report.expect("at least one inner solve ran");
    report.iterations = total_iterations;
    report.converged = report.converged && !hit_cap;
    report.inlier_edges = inliers;
    report.outlier_edges = outliers;

    Ok((
        estimates,
        GncState {
            mu,
            weights,
            iteration,
            mu_history,
        },
        report,
    ))
}

/// Per-loop-edge labels from a finished solve, indexed by loop ordinal.
pub fn classify_matches(report: &OptimizeReport) -> Vec<MatchLabel> {
    let n = report.inlier_edges.len() + report.outlier_edges.len();
    let mut labels = vec![MatchLabel::Inlier; n];
    for &ord in &report.outlier_edges {
        labels[ord] = MatchLabel::Outlier;
    }
    labels
}
