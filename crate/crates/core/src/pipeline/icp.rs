use nalgebra::Vector6;
use rayon::prelude::*;

use super::{PipelineConfig, PipelineError};
use crate::cloud::{estimate_normals, voxel_downsample, KdIndex, PointCloud};
use crate::geometry::{Mat6, Pose, Twist, Vec3, Vec6};

/// Both clouds need this many points after down-sampling at `voxel_global`.
pub const MIN_ICP_POINTS: usize = 100;

/// Below this fitness the pair is flagged as not overlapping.
pub const NO_OVERLAP_FITNESS: f64 = 0.05;

const MAX_ITERS: usize = 30;
const STEP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps the second cloud's coordinates into the first cloud's.
    pub pose: Pose,
    /// Point-to-plane normal equations `Σ JJᵀ` of the fine pass at the final pose.
    pub information: Mat6,
    /// Inlier fraction of the moving (second) cloud's points.
    pub fitness: f64,
    /// RMS point-to-point distance over inliers (meters).
    pub rmse: f64,
    pub inliers: usize,
    /// Fitness fell below `NO_OVERLAP_FITNESS`; `pose` is the initial guess.
    pub no_overlap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentPairResult {
    pub s: usize,
    pub t: usize,
    pub icp: IcpResult,
}

struct Fixed {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
    index: KdIndex,
}

struct Linearization {
    h: Mat6,
    b: Vec6,
    inliers: usize,
    sq_dist: f64,
}

fn linearize(fixed: &Fixed, moving: &[Vec3], pose: &Pose, max_dist: f64) -> Linearization {
    let terms: Vec<Option<(Vec6, f64, f64)>> = moving
        .par_iter()
        .map(|q| {
            let y = pose.apply(q);
            let hit = fixed.index.nearest_within(&y, max_dist)?;
            let x = fixed.positions[hit.index];
            let n = fixed.normals[hit.index];
            let mut j = Vector6::zeros();
            j.fixed_rows_mut::<3>(0).copy_from(&y.cross(&n));
            j.fixed_rows_mut::<3>(3).copy_from(&n);
            Some((j, (y - x).dot(&n), hit.dist_sq))
        })
        .collect();
    let mut out = Linearization {
        h: Mat6::zeros(),
        b: Vec6::zeros(),
        inliers: 0,
        sq_dist: 0.0,
    };
    for (j, r, d2) in terms.into_iter().flatten() {
        out.h += j * j.transpose();
        out.b += j * r;
        out.inliers += 1;
        out.sq_dist += d2;
    }
    out
}

fn prepare_fixed(cloud: &PointCloud, k: usize) -> Result<Fixed, crate::cloud::CloudError> {
    let with_normals = estimate_normals(cloud, k, &Vec3::zeros())?;
    Ok(Fixed {
        index: KdIndex::new(with_normals.positions()),
        positions: with_normals.positions().to_vec(),
        normals: with_normals.normals().expect("normals estimated").to_vec(),
    })
}

fn icp_pass(fixed: &Fixed, moving: &[Vec3], init: &Pose, max_dist: f64) -> Pose {
    let mut pose = *init;
    for _ in 0..MAX_ITERS {
        let lin = linearize(fixed, moving, &pose, max_dist);
        if lin.inliers < 6 {
            break;
        }
        let Some(chol) = lin.h.cholesky() else {
            break;
        };
        let step = -chol.solve(&lin.b);
        pose = Pose::exp(&Twist::from_vector(&step)).compose(&pose);
        if step.norm() < STEP_TOL {
            break;
        }
    }
    pose
}

/// Multiscale point-to-plane ICP of `target` (moving) onto `source` (fixed),
/// starting from `init`. A coarse pass runs at `2 * voxel_global` with
/// `icp_distance_coarse`, then a fine pass at `voxel_global` with
/// `icp_distance_fine`.
///
/// `TooSparse` reports `fragment` 0 for `source` and 1 for `target`.
pub fn register_fragment_pair(
    source: &PointCloud,
    target: &PointCloud,
    init: &Pose,
    cfg: &PipelineConfig,
) -> Result<IcpResult, PipelineError> {
    let fine_fixed = voxel_downsample(source, cfg.voxel_global);
    let fine_moving = voxel_downsample(target, cfg.voxel_global);
    for (fragment, c) in [(0, &fine_fixed), (1, &fine_moving)] {
        if c.len() < MIN_ICP_POINTS {
            return Err(PipelineError::TooSparse {
                fragment,
                have: c.len(),
            });
        }
    }
    let cloud_err = |source| PipelineError::Cloud {
        stage: "register-fragments",
        source,
    };
    let mut pose = *init;
    let coarse_fixed = voxel_downsample(source, 2.0 * cfg.voxel_global);
    let coarse_moving = voxel_downsample(target, 2.0 * cfg.voxel_global);
    if coarse_fixed.len() >= cfg.normal_k.max(3) && coarse_moving.len() >= 6 {
        let fixed = prepare_fixed(&coarse_fixed, cfg.normal_k).map_err(cloud_err)?;
        pose = icp_pass(&fixed, coarse_moving.positions(), &pose, cfg.icp_distance_coarse);
    }
    let fixed = prepare_fixed(&fine_fixed, cfg.normal_k).map_err(cloud_err)?;
    pose = icp_pass(&fixed, fine_moving.positions(), &pose, cfg.icp_distance_fine);

    let lin = linearize(&fixed, fine_moving.positions(), &pose, cfg.icp_distance_fine);
    let fitness = lin.inliers as f64 / fine_moving.len() as f64;
    let no_overlap = fitness < NO_OVERLAP_FITNESS;
    Ok(IcpResult {
        pose: if no_overlap { *init } else { pose },
        information: (lin.h + lin.h.transpose()) * 0.5,
        fitness,
        rmse: if lin.inliers > 0 {
            (lin.sq_dist / lin.inliers as f64).sqrt()
        } else {
            0.0
        },
        inliers: lin.inliers,
        no_overlap,
    })
}
