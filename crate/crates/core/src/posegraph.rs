//! Pose graphs on SE(3) and their robust optimization.
//!
//! Nodes are absolute poses; node 0 is the gauge and stays fixed. An edge
//! `(s, t)` carries a measurement `T_{s,t}` and an information matrix `Ω`.
//! The edge residual is `r = log(T⁻¹ X_s⁻¹ X_t)`.
//!
//! `optimize` minimizes
//!
//! ```text
//! F = Σ_certain rᵀΩr + Σ_uncertain [ l rᵀΩr + mu (√l - 1)² ]
//! ```
//!
//! alternating the closed-form line-process weights `l = (mu / (mu + rᵀΩr))²`
//! with Levenberg-Marquardt steps on the poses (right perturbation
//! `X ← X exp(δ)`).

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{format_f64, se3_right_jacobian_inv, GeometryError, Mat6, Pose, Twist, Vec6};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("edge {index} ({s}, {t}) is invalid: {reason}")]
    InvalidEdge {
        index: usize,
        s: usize,
        t: usize,
        reason: String,
    },
    #[error("node 0 must be the identity (gauge)")]
    GaugeNotIdentity,
    #[error("graph has no nodes")]
    Empty,
    #[error("node {0} is not reachable from node 0")]
    Disconnected(usize),
    #[error("invalid optimizer parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot parse graph dump line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub s: usize,
    pub t: usize,
    /// `T_{s,t}`: node `t` coordinates into node `s` coordinates.
    pub measurement: Pose,
    pub information: Mat6,
    pub uncertain: bool,
}

impl Edge {
    pub fn new(s: usize, t: usize, measurement: Pose, information: Mat6, uncertain: bool) -> Self {
        Self {
            s,
            t,
            measurement,
            information,
            uncertain,
        }
    }

    fn energy(&self, r: &Vec6) -> f64 {
        (r.transpose() * self.information * r)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new(nodes: Vec<Pose>, edges: Vec<Edge>) -> Result<Self, PoseGraphError> {
        let g = Self { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// Edge indices in range with `s < t`, information symmetric PSD within
    /// 1e-9, node 0 the identity.
    pub fn validate(&self) -> Result<(), PoseGraphError> {
        let Some(first) = self.nodes.first() else {
            return Err(PoseGraphError::Empty);
        };
        let (dt, dr) = crate::geometry::pose_error(first, &Pose::identity());
        if dt > 1e-9 || dr > 1e-9 {
            return Err(PoseGraphError::GaugeNotIdentity);
        }
        for (index, e) in self.edges.iter().enumerate() {
            let bad = |reason: &str| PoseGraphError::InvalidEdge {
                index,
                s: e.s,
                t: e.t,
                reason: reason.into(),
            };
            if e.s >= e.t || e.t >= self.nodes.len() {
                return Err(bad("need s < t < node count"));
            }
            let om = &e.information;
            if om.iter().any(|x| !x.is_finite()) {
                return Err(bad("information is not finite"));
            }
            let scale = om.amax().max(1.0);
            if (om - om.transpose()).amax() > 1e-9 * scale {
                return Err(bad("information is not symmetric"));
            }
            let sym = (om + om.transpose()) * 0.5;
            if sym.symmetric_eigenvalues().min() < -1e-9 * scale {
                return Err(bad("information is not positive semidefinite"));
            }
        }
        Ok(())
    }

    /// Breadth-first reachability from node 0 over edges in either direction.
    pub fn check_connected(&self) -> Result<(), PoseGraphError> {
        match unreachable_node(self.nodes.len(), self.edges.iter()) {
            Some(n) => Err(PoseGraphError::Disconnected(n)),
            None => Ok(()),
        }
    }
}

fn unreachable_node<'a>(n: usize, edges: impl Iterator<Item = &'a Edge>) -> Option<usize> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.s].push(e.t);
        adj[e.t].push(e.s);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.iter().position(|s| !s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeParams {
    pub max_outer_iters: usize,
    pub lm_damping_init: f64,
    /// Uncertain edges whose final line-process weight is below this are pruned.
    pub edge_prune_threshold: f64,
    /// Line-process scale (squared meters).
    pub mu: f64,
    /// Stop once the relative objective decrease falls below this.
    pub convergence_tol: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            lm_damping_init: 1e-4,
            edge_prune_threshold: 0.25,
            mu: 0.05 * 0.05,
            convergence_tol: 1e-8,
        }
    }
}

impl OptimizeParams {
    pub fn validate(&self) -> Result<(), PoseGraphError> {
        let ok = self.max_outer_iters > 0
            && self.lm_damping_init > 0.0
            && self.edge_prune_threshold > 0.0
            && self.mu > 0.0
            && self.convergence_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PoseGraphError::InvalidParams("all optimizer parameters must be positive".into()))
        }
    }
}

/// `log(T⁻¹ X_s⁻¹ X_t)` for edge `e`.
pub fn edge_residual(graph: &PoseGraph, e: &Edge) -> Result<Vec6, PoseGraphError> {
    let err = e
        .measurement
        .inverse()
        .compose(&graph.nodes[e.s].inverse())
        .compose(&graph.nodes[e.t]);
    Ok(err.log()?.to_vector())
}

/// Closed-form line-process weight for an edge energy `rᵀΩr`.
pub fn line_process_weight(energy: f64, mu: f64) -> f64 {
    let a = mu / (mu + energy);
    a * a
}

struct Evaluation {
    residuals: Vec<Vec6>,
    weights: Vec<f64>,
    objective: f64,
}

fn evaluate(graph: &PoseGraph, mu: f64) -> Result<Evaluation, PoseGraphError> {
    let mut residuals = Vec::with_capacity(graph.edges.len());
    let mut weights = Vec::with_capacity(graph.edges.len());
    let mut objective = 0.0;
    for e in &graph.edges {
        let r = edge_residual(graph, e)?;
        let energy = e.energy(&r);
        if e.uncertain {
            let l = line_process_weight(energy, mu);
            objective += l * energy + mu * (l.sqrt() - 1.0).powi(2);
            weights.push(l);
        } else {
            objective += energy;
            weights.push(1.0);
        }
        residuals.push(r);
    }
    Ok(Evaluation {
        residuals,
        weights,
        objective,
    })
}

/// Robust objective `F` with the line-process weights at their optimum.
pub fn objective(graph: &PoseGraph, params: &OptimizeParams) -> Result<f64, PoseGraphError> {
    Ok(evaluate(graph, params.mu)?.objective)
}

/// Jacobian blocks of edge `e`'s residual with respect to `δ_s` and `δ_t`.
fn edge_jacobians(graph: &PoseGraph, e: &Edge, r: &Vec6) -> (Mat6, Mat6) {
    let jr_inv = se3_right_jacobian_inv(&Twist::from_vector(r));
    let rel = graph.nodes[e.t].inverse().compose(&graph.nodes[e.s]);
    (-jr_inv * rel.adjoint(), jr_inv)
}

/// Gauss-Newton normal equations over all nodes (6 rows per node, node 0
/// included); the gradient is `∂F/∂δ`.
fn normal_equations(graph: &PoseGraph, eval: &Evaluation) -> (DMatrix<f64>, DVector<f64>) {
    let n = 6 * graph.nodes.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for ((e, r), w) in graph.edges.iter().zip(&eval.residuals).zip(&eval.weights) {
        let (js, jt) = edge_jacobians(graph, e, r);
        let om = e.information * *w;
        let blocks = [(e.s, js), (e.t, jt)];
        for (a, ja) in &blocks {
            let grad = ja.transpose() * om * r * 2.0;
            let mut rows = g.rows_mut(6 * a, 6);
            rows += grad;
            for (b, jb) in &blocks {
                let hb = ja.transpose() * om * jb * 2.0;
                let mut view = h.view_mut((6 * a, 6 * b), (6, 6));
                view += hb;
            }
        }
    }
    (h, g)
}

/// Analytic gradient `∂F/∂δ` (6 entries per node, node 0 included).
pub fn gradient(graph: &PoseGraph, params: &OptimizeParams) -> Result<Vec<f64>, PoseGraphError> {
    let eval = evaluate(graph, params.mu)?;
    Ok(normal_equations(graph, &eval).1.iter().copied().collect())
}

/// Applies `X_i ← X_i exp(δ_i)`; `delta` holds 6 entries per node.
pub fn retract(graph: &PoseGraph, delta: &[f64]) -> PoseGraph {
    let mut out = graph.clone();
    for (i, node) in out.nodes.iter_mut().enumerate() {
        let d: [f64; 6] = delta[6 * i..6 * i + 6].try_into().unwrap();
        *node = node.compose(&Pose::exp(&Twist::from_slice(&d)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedEdge {
    pub edge: Edge,
    /// Line-process weight when the edge was pruned.
    pub line_process: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    /// Optimized nodes; edges are the input edges minus the pruned ones.
    pub graph: PoseGraph,
    /// Final line-process weight per kept edge (1 for certain edges).
    pub line_process: Vec<f64>,
    /// Uncertain edges removed because their final weight fell below the threshold.
    pub pruned: Vec<PrunedEdge>,
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_outer_iters` was hit; poses are the best found.
    pub converged: bool,
}

struct Run {
    graph: PoseGraph,
    eval: Evaluation,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(graph: PoseGraph, params: &OptimizeParams) -> Result<Run, PoseGraphError> {
    let mut graph = graph;
    let mut eval = evaluate(&graph, params.mu)?;
    let mut lambda = params.lm_damping_init;
    let free = 6 * (graph.nodes.len() - 1);
    let mut iterations = 0;
    let mut converged = free == 0 || graph.edges.is_empty();
    while !converged && iterations < params.max_outer_iters {
        iterations += 1;
        if eval.objective <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        let (h, g) = normal_equations(&graph, &eval);
        let h = h.view((6, 6), (free, free)).into_owned();
        let g = g.rows(6, free).into_owned();
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for i in 0..free {
                let d = h[(i, i)];
                damped[(i, i)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -chol.solve(&g);
            let mut delta = vec![0.0; 6];
            delta.extend(step.iter());
            let cand = retract(&graph, &delta);
            let Ok(cand_eval) = evaluate(&cand, params.mu) else {
                lambda *= 10.0;
                continue;
            };
            if cand_eval.objective <= eval.objective {
                let decrease = (eval.objective - cand_eval.objective) / eval.objective;
                log::debug!(
                    "pose graph iter={iterations} objective={:.6e} lambda={lambda:.1e}",
                    cand_eval.objective
                );
                graph = cand;
                eval = cand_eval;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if decrease < params.convergence_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damping level improves the objective: local minimum
            converged = true;
        }
    }
    Ok(Run {
        graph,
        eval,
        iterations,
        converged,
    })
}

/// Optimizes node poses. Uncertain edges whose final weight falls below
/// `edge_prune_threshold` are removed (unless that would disconnect the
/// graph) and the remaining graph is optimized again.
pub fn optimize(graph: &PoseGraph, params: &OptimizeParams) -> Result<OptimizeOutcome, PoseGraphError> {
    params.validate()?;
    graph.validate()?;
    graph.check_connected()?;
    let first = levenberg_marquardt(graph.clone(), params)?;

    let mut candidates: Vec<usize> = (0..graph.edges.len())
        .filter(|&i| graph.edges[i].uncertain && first.eval.weights[i] < params.edge_prune_threshold)
        .collect();
    candidates.sort_by(|&a, &b| first.eval.weights[a].total_cmp(&first.eval.weights[b]).then(a.cmp(&b)));
    let mut removed = vec![false; graph.edges.len()];
    for i in candidates {
        removed[i] = true;
        let kept = graph.edges.iter().zip(&removed).filter(|(_, r)| !**r).map(|(e, _)| e);
        if unreachable_node(graph.nodes.len(), kept).is_some() {
            removed[i] = false;
        }
    }
    if !removed.iter().any(|r| *r) {
        return Ok(OptimizeOutcome {
            line_process: first.eval.weights,
            objective: first.eval.objective,
            iterations: first.iterations,
            converged: first.converged,
            graph: first.graph,
            pruned: Vec::new(),
        });
    }
    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for ((e, r), l) in graph.edges.iter().zip(&removed).zip(&first.eval.weights) {
        if *r {
            pruned.push(PrunedEdge {
                edge: e.clone(),
                line_process: *l,
            });
        } else {
            kept.push(e.clone());
        }
    }
    log::debug!("pose graph pruned {} uncertain edges", pruned.len());
    let second = levenberg_marquardt(
        PoseGraph {
            nodes: first.graph.nodes,
            edges: kept,
        },
        params,
    )?;
    Ok(OptimizeOutcome {
        line_process: second.eval.weights,
        objective: second.eval.objective,
        iterations: first.iterations + second.iterations,
        converged: first.converged && second.converged,
        graph: second.graph,
        pruned,
    })
}

/// Text dump: `NODE i <16 floats>` per node, then
/// `EDGE s t <16 floats> <21 upper-triangular information floats> <0|1>`.
pub fn write_graph_dump(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        writeln!(out, "NODE {i} {}", n.format_row_major()).unwrap();
    }
    for e in &graph.edges {
        write!(out, "EDGE {} {} {}", e.s, e.t, e.measurement.format_row_major()).unwrap();
        for r in 0..6 {
            for c in r..6 {
                write!(out, " {}", format_f64(e.information[(r, c)])).unwrap();
            }
        }
        writeln!(out, " {}", u8::from(e.uncertain)).unwrap();
    }
    out
}

pub fn parse_graph_dump(text: &str) -> Result<PoseGraph, PoseGraphError> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let err = |message: String| PoseGraphError::Parse {
            line: line_no,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let floats = |toks: &[&str]| -> Result<Vec<f64>, PoseGraphError> {
            toks.iter()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
                .collect()
        };
        let index = |t: &str| t.parse::<usize>().map_err(|e| err(format!("{t:?}: {e}")));
        match tokens[0] {
            "NODE" if tokens.len() == 18 => {
                if index(tokens[1])? != nodes.len() {
                    return Err(err("nodes must be listed in order".into()));
                }
                let pose = Pose::from_row_major(&floats(&tokens[2..18])?).map_err(|e| err(e.to_string()))?;
                nodes.push(pose);
            }
            "EDGE" if tokens.len() == 41 => {
                let (s, t) = (index(tokens[1])?, index(tokens[2])?);
                let measurement =
                    Pose::from_row_major(&floats(&tokens[3..19])?).map_err(|e| err(e.to_string()))?;
                let upper = floats(&tokens[19..40])?;
                let mut info = Mat6::zeros();
                let mut k = 0;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = upper[k];
                        info[(c, r)] = upper[k];
                        k += 1;
                    }
                }
                let uncertain = match tokens[40] {
                    "0" => false,
                    "1" => true,
                    other => return Err(err(format!("uncertain flag must be 0 or 1, got {other:?}"))),
                };
                edges.push(Edge::new(s, t, measurement, info, uncertain));
            }
            other => return Err(err(format!("unexpected record {other:?} with {} fields", tokens.len()))),
        }
    }
    PoseGraph::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn info() -> Mat6 {
        Mat6::identity() * 100.0
    }

    fn chain() -> (Vec<Pose>, Vec<Edge>) {
        let m1 = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)).compose(&Pose::rot_z(0.1));
        let m2 = Pose::from_translation(Vec3::new(0.5, 0.2, 0.0)).compose(&Pose::rot_y(-0.2));
        let truth = vec![Pose::identity(), m1, m1.compose(&m2)];
        let edges = vec![Edge::new(0, 1, m1, info(), false), Edge::new(1, 2, m2, info(), false)];
        (truth, edges)
    }

    #[test]
    fn consistent_edge_has_zero_residual() {
        let m = Pose::from_translation(Vec3::new(0.3, 0.0, 0.1));
        let g = PoseGraph::new(vec![Pose::identity(), m], vec![Edge::new(0, 1, m, info(), false)]).unwrap();
        assert!(edge_residual(&g, &g.edges[0]).unwrap().norm() < 1e-12);
        let mut moved = g.clone();
        moved.nodes[1] = m.compose(&Pose::from_translation(Vec3::new(1e-3, 0.0, 0.0)));
        let r = edge_residual(&moved, &moved.edges[0]).unwrap();
        assert!((r.fixed_rows::<3>(3).norm() - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn chain_recovers_composition() {
        let (truth, edges) = chain();
        let g = PoseGraph::new(vec![Pose::identity(); 3], edges).unwrap();
        let out = optimize(&g, &OptimizeParams::default()).unwrap();
        assert!(out.converged);
        for (a, b) in out.graph.nodes.iter().zip(&truth) {
            assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-8);
        }
    }

    #[test]
    fn consistent_loop_edge() {
        let (truth, mut edges) = chain();
        edges.push(Edge::new(0, 2, truth[2], info(), true));
        let g = PoseGraph::new(vec![Pose::identity(); 3], edges).unwrap();
        let out = optimize(&g, &OptimizeParams::default()).unwrap();
        assert!(out.pruned.is_empty());
        for (a, b) in out.graph.nodes.iter().zip(&truth) {
            assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-8);
        }
    }

    #[test]
    fn wrong_loop_edge_is_pruned() {
        let (truth, mut edges) = chain();
        let wrong = truth[2].compose(&Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));
        edges.push(Edge::new(0, 2, wrong, info(), true));
        let g = PoseGraph::new(truth.clone(), edges).unwrap();
        let out = optimize(&g, &OptimizeParams::default()).unwrap();
        assert_eq!(out.pruned.len(), 1);
        assert!(out.pruned[0].line_process < 0.25);
        assert_eq!(out.graph.edges.len(), 2);
        for (a, b) in out.graph.nodes.iter().zip(&truth) {
            assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_graphs() {
        let m = Pose::identity();
        assert!(matches!(
            PoseGraph::new(vec![m, m], vec![Edge::new(1, 0, m, info(), false)]),
            Err(PoseGraphError::InvalidEdge { .. })
        ));
        let mut neg = info();
        neg[(0, 0)] = -1.0;
        assert!(PoseGraph::new(vec![m, m], vec![Edge::new(0, 1, m, neg, false)]).is_err());
        let g = PoseGraph::new(vec![m, m, m], vec![Edge::new(0, 1, m, info(), false)]).unwrap();
        assert!(matches!(
            optimize(&g, &OptimizeParams::default()),
            Err(PoseGraphError::Disconnected(2))
        ));
        assert!(matches!(
            PoseGraph::new(vec![Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))], vec![]),
            Err(PoseGraphError::GaugeNotIdentity)
        ));
    }

    #[test]
    fn dump_round_trip() {
        let (truth, mut edges) = chain();
        let mut om = info();
        om[(0, 3)] = 0.5;
        om[(3, 0)] = 0.5;
        edges.push(Edge::new(0, 2, truth[2], om, true));
        let g = PoseGraph::new(truth, edges).unwrap();
        let text = write_graph_dump(&g);
        assert!(text.starts_with("NODE 0 "));
        assert_eq!(text.lines().filter(|l| l.starts_with("EDGE")).count(), 3);
        assert_eq!(parse_graph_dump(&text).unwrap(), g);
        assert!(parse_graph_dump("EDGE 0 1 2").is_err());
    }
}
