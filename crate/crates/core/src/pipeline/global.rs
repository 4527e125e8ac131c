use rayon::prelude::*;

use super::icp::{register_fragment_pair, FragmentPairResult};
use super::{FragmentSet, PipelineConfig, PipelineError};
use crate::cloud::{merge, transform_cloud, voxel_downsample, PointCloud};
use crate::geometry::{Mat6, Pose, Vec3};
use crate::posegraph::{optimize, Edge, PoseGraph};

/// Information for a sequential edge whose ICP found no overlap: the chained
/// odometry guess is kept but barely trusted.
const FALLBACK_INFORMATION: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GlobalResult {
    /// Merged scene, down-sampled at `voxel_global`.
    pub cloud: PointCloud,
    /// Optimized fragment-to-world poses.
    pub fragment_poses: Vec<Pose>,
    /// Optimized graph (pruned edges removed).
    pub graph: PoseGraph,
    pub edges_total: usize,
    pub edges_pruned: usize,
}

fn world_bounds(cloud: &PointCloud, pose: &Pose) -> Option<(Vec3, Vec3)> {
    let (lo, hi) = cloud.bounds()?;
    let mut wlo = Vec3::repeat(f64::INFINITY);
    let mut whi = Vec3::repeat(f64::NEG_INFINITY);
    for i in 0..8 {
        let corner = Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        );
        let w = pose.apply(&corner);
        wlo = wlo.inf(&w);
        whi = whi.sup(&w);
    }
    Some((wlo, whi))
}

fn boxes_overlap(a: &(Vec3, Vec3), b: &(Vec3, Vec3)) -> bool {
    (0..3).all(|i| a.0[i] <= b.1[i] && b.0[i] <= a.1[i])
}

/// ICP for every sequential fragment pair and, with `loop_closure_fragments`,
/// for non-adjacent pairs whose world bounding boxes overlap under the
/// initial base poses.
pub fn register_fragment_pairs(
    frags: &FragmentSet,
    cfg: &PipelineConfig,
) -> Result<Vec<FragmentPairResult>, PipelineError> {
    let k = frags.len();
    let mut pairs: Vec<(usize, usize)> = (1..k).map(|t| (t - 1, t)).collect();
    if cfg.loop_closure_fragments {
        let bounds: Vec<_> = frags
            .fragments
            .iter()
            .zip(&frags.base_poses)
            .map(|(c, p)| world_bounds(c, p))
            .collect();
        for s in 0..k {
            for t in s + 2..k {
                if let (Some(a), Some(b)) = (&bounds[s], &bounds[t]) {
                    if boxes_overlap(a, b) {
                        pairs.push((s, t));
                    }
                }
            }
        }
    }
    let results: Vec<Result<FragmentPairResult, PipelineError>> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let init = frags.base_poses[s].inverse().compose(&frags.base_poses[t]);
            let icp = register_fragment_pair(&frags.fragments[s], &frags.fragments[t], &init, cfg).map_err(
                |e| match e {
                    PipelineError::TooSparse { fragment, have } => PipelineError::TooSparse {
                        fragment: if fragment == 0 { s } else { t },
                        have,
                    },
                    other => other,
                },
            )?;
            log::debug!(
                "fragments {s}->{t}: fitness={:.4} rmse={:.5} no_overlap={}",
                icp.fitness,
                icp.rmse,
                icp.no_overlap
            );
            Ok(FragmentPairResult { s, t, icp })
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for (r, (s, t)) in results.into_iter().zip(&pairs) {
        match r {
            Ok(r) => out.push(r),
            Err(e) if t - s == 1 => return Err(e),
            Err(e) => log::warn!("skipping loop closure {s}->{t}: {e}"),
        }
    }
    Ok(out)
}

/// Optimizes the fragment graph built from `pairs` and merges the fragments.
pub fn integrate_fragments(
    frags: &FragmentSet,
    pairs: &[FragmentPairResult],
    cfg: &PipelineConfig,
) -> Result<GlobalResult, PipelineError> {
    let stage = "integrate";
    let mut edges = Vec::with_capacity(pairs.len());
    for p in pairs {
        let sequential = p.t == p.s + 1;
        if p.icp.no_overlap {
            if sequential {
                log::warn!("fragments {}->{} do not overlap; keeping the odometry estimate", p.s, p.t);
                edges.push(Edge::new(p.s, p.t, p.icp.pose, Mat6::identity() * FALLBACK_INFORMATION, false));
            }
            continue;
        }
        // normalized by the inlier count so the line-process scale is in squared meters
        let info = p.icp.information / p.icp.inliers.max(1) as f64;
        edges.push(Edge::new(p.s, p.t, p.icp.pose, info, !sequential));
    }
    let edges_total = edges.len();
    let graph = PoseGraph::new(frags.base_poses.clone(), edges).map_err(|source| PipelineError::PoseGraph { stage, source })?;
    let outcome = optimize(&graph, &cfg.optimize).map_err(|source| PipelineError::PoseGraph { stage, source })?;
    if !outcome.converged {
        log::warn!("fragment pose graph did not converge");
    }
    let placed: Vec<PointCloud> = frags
        .fragments
        .par_iter()
        .zip(&outcome.graph.nodes)
        .map(|(c, p)| transform_cloud(c, p))
        .collect();
    let merged = merge(&placed).map_err(|source| PipelineError::Cloud { stage, source })?;
    Ok(GlobalResult {
        cloud: voxel_downsample(&merged, cfg.voxel_global),
        fragment_poses: outcome.graph.nodes.clone(),
        edges_total,
        edges_pruned: outcome.pruned.len(),
        graph: outcome.graph,
    })
}

/// Pairwise fragment registration followed by the global optimization.
pub fn global_registration(frags: &FragmentSet, cfg: &PipelineConfig) -> Result<GlobalResult, PipelineError> {
    let pairs = register_fragment_pairs(frags, cfg)?;
    integrate_fragments(frags, &pairs, cfg)
}
