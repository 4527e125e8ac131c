use std::ops::Range;

use rayon::prelude::*;

use super::{PipelineConfig, PipelineError};
use crate::cloud::{merge, transform_cloud, voxel_downsample, PointCloud};
use crate::geometry::Pose;
use crate::ingest::{back_project, PinholeIntrinsics, RgbdNode};
use crate::odometry::{compute_odometry, OdometryResult};
use crate::posegraph::{optimize, Edge, PoseGraph};

/// `⌈m / n⌉`.
pub fn fragment_count(m: usize, n: usize) -> usize {
    m.div_ceil(n)
}

/// Consecutive groups of `n` frame positions; the last may be shorter.
pub fn window_ranges(m: usize, n: usize) -> Vec<Range<usize>> {
    (0..fragment_count(m, n)).map(|k| k * n..((k + 1) * n).min(m)).collect()
}

#[derive(Debug, Clone)]
pub struct FragmentBuild {
    /// Merged, down-sampled cloud in the coordinates of the window's first frame.
    pub cloud: PointCloud,
    /// Optimized window graph; node `i` is the `i`-th frame of the window.
    pub graph: PoseGraph,
    pub edges_total: usize,
    pub edges_pruned: usize,
}

#[derive(Debug, Clone)]
pub struct FragmentSet {
    pub fragments: Vec<PointCloud>,
    /// Fragment frame to world, from chained odometry.
    pub base_poses: Vec<Pose>,
    /// Per fragment, the frame indices it covers.
    pub frame_indices: Vec<Vec<usize>>,
    /// Per fragment, each frame's pose in fragment coordinates.
    pub frame_poses: Vec<Vec<Pose>>,
    pub graphs: Vec<PoseGraph>,
    pub edges_total: usize,
    pub edges_pruned: usize,
}

impl FragmentSet {
    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }
}

fn odometry_pair(
    nodes: &[RgbdNode],
    s: usize,
    t: usize,
    k: &PinholeIntrinsics,
    init: &Pose,
    cfg: &PipelineConfig,
) -> OdometryResult {
    let r = compute_odometry(&nodes[s], &nodes[t], k, init, &cfg.odometry);
    log::debug!(
        "odometry {}->{}: success={} rmse={:.5} pixels={}",
        nodes[s].index,
        nodes[t].index,
        r.success,
        r.final_rmse,
        r.valid_pixel_count
    );
    r
}

fn broken(s: &RgbdNode, t: &RgbdNode, r: &OdometryResult) -> PipelineError {
    PipelineError::OdometryChainBroken {
        s: s.index,
        t: t.index,
        reason: r.failure.as_ref().map(|f| f.to_string()).unwrap_or_default(),
    }
}

/// Registers the frames of one window against each other and fuses them.
///
/// Adjacent pairs start from the identity and give certain edges; every
/// other pair `s < t` starts from the chained estimate and, if it succeeds,
/// gives an uncertain edge.
pub fn build_fragment(
    nodes: &[RgbdNode],
    k: &PinholeIntrinsics,
    cfg: &PipelineConfig,
) -> Result<FragmentBuild, PipelineError> {
    let m = nodes.len();
    if m == 0 || m > cfg.n {
        return Err(PipelineError::Config(format!("window of {m} frames, need 1..={}", cfg.n)));
    }
    let adjacent: Vec<OdometryResult> = (0..m - 1)
        .into_par_iter()
        .map(|i| odometry_pair(nodes, i, i + 1, k, &Pose::identity(), cfg))
        .collect();
    let mut chain = vec![Pose::identity()];
    for (i, r) in adjacent.iter().enumerate() {
        if !r.success {
            return Err(broken(&nodes[i], &nodes[i + 1], r));
        }
        chain.push(chain[i].compose(&r.pose));
    }

    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|s| (s + 2..m).map(move |t| (s, t)))
        .collect();
    let others: Vec<OdometryResult> = pairs
        .par_iter()
        .map(|&(s, t)| odometry_pair(nodes, s, t, k, &chain[s].inverse().compose(&chain[t]), cfg))
        .collect();

    let mut edges: Vec<Edge> = adjacent
        .iter()
        .enumerate()
        .map(|(i, r)| Edge::new(i, i + 1, r.pose, r.correspondence_information, false))
        .collect();
    for (&(s, t), r) in pairs.iter().zip(&others) {
        if r.success {
            edges.push(Edge::new(s, t, r.pose, r.correspondence_information, true));
        }
    }
    let edges_total = edges.len();
    let stage = "make-fragments";
    let graph = PoseGraph::new(chain, edges).map_err(|source| PipelineError::PoseGraph { stage, source })?;
    let outcome = optimize(&graph, &cfg.optimize).map_err(|source| PipelineError::PoseGraph { stage, source })?;
    if !outcome.converged {
        log::warn!("window starting at frame {}: pose graph did not converge", nodes[0].index);
    }

    let clouds: Vec<PointCloud> = nodes
        .par_iter()
        .zip(&outcome.graph.nodes)
        .map(|(node, pose)| back_project(node, k).map(|c| transform_cloud(&c, pose)))
        .collect::<Result<_, _>>()
        .map_err(|source| PipelineError::Ingest { stage, source })?;
    let merged = merge(&clouds).map_err(|source| PipelineError::Cloud { stage, source })?;
    let cloud = voxel_downsample(&merged, cfg.voxel_fragment);
    Ok(FragmentBuild {
        cloud,
        edges_pruned: outcome.pruned.len(),
        graph: outcome.graph,
        edges_total,
    })
}

/// Splits the sequence into windows of `cfg.n` frames, builds one fragment
/// per window and chains the fragments with odometry between the last frame
/// of each window and the first frame of the next.
pub fn local_registration(
    nodes: &[RgbdNode],
    k: &PinholeIntrinsics,
    cfg: &PipelineConfig,
) -> Result<FragmentSet, PipelineError> {
    let m = nodes.len();
    if m < 2 {
        return Err(PipelineError::Config(format!("need at least 2 frames, have {m}")));
    }
    if cfg.n > m {
        return Err(PipelineError::Config(format!("N = {} exceeds the {m} available frames", cfg.n)));
    }
    let windows = window_ranges(m, cfg.n);
    let builds: Vec<Result<FragmentBuild, PipelineError>> = windows
        .par_iter()
        .map(|w| build_fragment(&nodes[w.clone()], k, cfg))
        .collect();
    let builds: Vec<FragmentBuild> = builds.into_iter().collect::<Result<_, _>>()?;

    let links: Vec<OdometryResult> = windows
        .windows(2)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|w| odometry_pair(nodes, w[0].end - 1, w[1].start, k, &Pose::identity(), cfg))
        .collect();
    let mut base_poses = vec![Pose::identity()];
    for (i, r) in links.iter().enumerate() {
        let (last, first) = (windows[i].end - 1, windows[i + 1].start);
        if !r.success {
            return Err(broken(&nodes[last], &nodes[first], r));
        }
        let last_in_fragment = builds[i].graph.nodes.last().expect("window has frames");
        base_poses.push(base_poses[i].compose(last_in_fragment).compose(&r.pose));
    }

    let edges_total = builds.iter().map(|b| b.edges_total).sum();
    let edges_pruned = builds.iter().map(|b| b.edges_pruned).sum();
    let frame_indices = windows.iter().map(|w| nodes[w.clone()].iter().map(|n| n.index).collect()).collect();
    let mut fragments = Vec::with_capacity(builds.len());
    let mut frame_poses = Vec::with_capacity(builds.len());
    let mut graphs = Vec::with_capacity(builds.len());
    for b in builds {
        fragments.push(b.cloud);
        frame_poses.push(b.graph.nodes.clone());
        graphs.push(b.graph);
    }
    Ok(FragmentSet {
        fragments,
        base_poses,
        frame_indices,
        frame_poses,
        graphs,
        edges_total,
        edges_pruned,
    })
}
