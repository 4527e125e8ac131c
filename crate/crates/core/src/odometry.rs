//! Dense RGB-D odometry.
//!
//! Estimates `T_{s,t}` (target coordinates into source coordinates) by
//! warping every valid source pixel into the target image and minimizing
//!
//! ```text
//! E = Σ ρ(I_s(x) - I_t(w(x))) + λ Σ (D_t(w(x)) - z(w(x)))²
//! ```
//!
//! with Gauss-Newton, coarse to fine. `ρ` is a Huber loss, `λ` the depth
//! weight. The warp is parametrized on the source-to-target motion
//! `G = T_{s,t}^-1` with left updates `G ← exp(ξ) G`. Target lookups use
//! bilinear interpolation and the Jacobian is the exact derivative of that
//! interpolant.

use nalgebra::{Matrix3x6, RowVector3, RowVector6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Mat6, Pose, Twist, Vec3, Vec6};
use crate::ingest::{PinholeIntrinsics, RgbdNode};

/// Coarsest pyramid level must be at least this many pixels per side.
pub const MIN_LEVEL_SIZE: usize = 8;

/// Maximum condition number of the normal equations.
pub const MAX_CONDITION: f64 = 1e12;

const MAX_STEP_HALVINGS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("pyramid level {level} would be {width}x{height}, below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}")]
    TooSmall {
        level: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid odometry parameters: {0}")]
    InvalidParams(String),
    #[error("frame size {got_w}x{got_h} does not match intrinsics {want_w}x{want_h}")]
    SizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryParams {
    pub pyramid_levels: usize,
    pub max_iters_per_level: usize,
    /// Minimum overlapping pixels at the finest level (scaled by 4^-level on
    /// coarser levels). `None` means 3% of the image area.
    pub min_valid_pixels: Option<usize>,
    /// A level stops once the relative energy decrease falls below this.
    pub convergence_tol: f64,
    pub use_depth_term: bool,
    pub depth_weight: f64,
    /// Huber threshold on photometric residuals (intensity units in [0, 1]).
    pub huber_delta: f64,
    /// Correspondences whose depth disagrees by more than this (meters) are
    /// treated as occluded.
    pub max_depth_diff: f64,
}

impl Default for OdometryParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            max_iters_per_level: 10,
            min_valid_pixels: None,
            convergence_tol: 1e-7,
            use_depth_term: true,
            depth_weight: 0.5,
            huber_delta: 0.1,
            max_depth_diff: 0.07,
        }
    }
}

impl OdometryParams {
    pub fn validate(&self) -> Result<(), OdometryError> {
        let bad = |m: &str| Err(OdometryError::InvalidParams(m.into()));
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be >= 1");
        }
        if self.max_iters_per_level < 1 {
            return bad("max_iters_per_level must be >= 1");
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be > 0");
        }
        if !(self.depth_weight >= 0.0 && self.huber_delta > 0.0 && self.max_depth_diff > 0.0) {
            return bad("depth_weight must be >= 0, huber_delta and max_depth_diff > 0");
        }
        Ok(())
    }

    fn min_valid_at(&self, level: usize, finest_area: usize) -> usize {
        let base = self
            .min_valid_pixels
            .unwrap_or_else(|| (0.03 * finest_area as f64).ceil() as usize);
        (base >> (2 * level)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdometryFailure {
    /// Fewer overlapping pixels than `min_valid_pixels` at some level.
    MinValidPixels {
        level: usize,
        count: usize,
        needed: usize,
    },
    /// Normal equations singular or condition number above `MAX_CONDITION`.
    Singular { level: usize, condition: f64 },
    /// A frame could not be turned into a pyramid.
    Pyramid(OdometryError),
}

impl std::fmt::Display for OdometryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::MinValidPixels { level, count, needed } => {
                write!(f, "min_valid_pixels: {count} overlapping pixels at level {level}, need {needed}")
            }
            Self::Singular { level, condition } => {
                write!(f, "singular normal equations at level {level} (condition {condition:.3e})")
            }
            Self::Pyramid(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    pub level: usize,
    pub iter: usize,
    /// Objective after the accepted step.
    pub energy: f64,
    pub rmse: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryResult {
    pub success: bool,
    /// `T_{s,t}`: maps target coordinates into source coordinates.
    pub pose: Pose,
    /// `JᵀWJ` at the finest level at the final estimate.
    pub information: Mat6,
    /// Geometric information of the final correspondences; see
    /// [`AlignmentProblem::correspondence_information`].
    pub correspondence_information: Mat6,
    /// Photometric RMSE over overlapping pixels at the finest level.
    pub final_rmse: f64,
    pub valid_pixel_count: usize,
    pub failure: Option<OdometryFailure>,
    pub trace: Vec<IterationTrace>,
}

impl OdometryResult {
    fn failed(init: &Pose, failure: OdometryFailure, trace: Vec<IterationTrace>) -> Self {
        Self {
            success: false,
            pose: *init,
            information: Mat6::zeros(),
            correspondence_information: Mat6::zeros(),
            final_rmse: f64::NAN,
            valid_pixel_count: 0,
            failure: Some(failure),
            trace,
        }
    }
}

fn box_down(node: &RgbdNode) -> RgbdNode {
    let (w, h) = (node.width() / 2, node.height() / 2);
    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let px = [
                (2 * u, 2 * v),
                (2 * u + 1, 2 * v),
                (2 * u, 2 * v + 1),
                (2 * u + 1, 2 * v + 1),
            ];
            let mut c = [0u32; 3];
            let (mut dsum, mut dn) = (0.0, 0usize);
            for (x, y) in px {
                let rgb = node.color_at(x, y);
                for i in 0..3 {
                    c[i] += rgb[i] as u32;
                }
                let d = node.depth_at(x, y);
                if d > 0.0 {
                    dsum += d;
                    dn += 1;
                }
            }
            color.push(c.map(|s| ((s + 2) / 4) as u8));
            depth.push(if dn > 0 { dsum / dn as f64 } else { 0.0 });
        }
    }
    RgbdNode::new(node.index, w, h, color, depth).expect("pyramid level buffers sized")
}

fn crop(node: &RgbdNode, w: usize, h: usize) -> RgbdNode {
    if w == node.width() && h == node.height() {
        return node.clone();
    }
    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            color.push(node.color_at(u, v));
            depth.push(node.depth_at(u, v));
        }
    }
    RgbdNode::new(node.index, w, h, color, depth).expect("crop buffers sized")
}

/// Level 0 is the input (cropped to a multiple of `2^(levels-1)`); each next
/// level halves both dimensions. Color uses a 2×2 box filter, depth the mean
/// of the valid pixels of each 2×2 block (0 if none).
pub fn build_pyramid(node: &RgbdNode, levels: usize) -> Result<Vec<RgbdNode>, OdometryError> {
    if levels < 1 {
        return Err(OdometryError::InvalidParams("pyramid_levels must be >= 1".into()));
    }
    let m = 1usize << (levels - 1);
    let (w, h) = (node.width() / m * m, node.height() / m * m);
    for level in 0..levels {
        let (lw, lh) = (w >> level, h >> level);
        if lw < MIN_LEVEL_SIZE || lh < MIN_LEVEL_SIZE {
            return Err(OdometryError::TooSmall {
                level,
                width: lw,
                height: lh,
            });
        }
    }
    let mut out = vec![crop(node, w, h)];
    for _ in 1..levels {
        let next = box_down(out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

struct Level {
    k: PinholeIntrinsics,
    /// Valid source pixels: (back-projected point, intensity).
    source: Vec<(Vec3, f64)>,
    target_intensity: Vec<f64>,
    target_depth: Vec<f64>,
}

/// Photometric and depth residuals of one source pixel with their Jacobians
/// with respect to a left perturbation of the source-to-target motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelResidual {
    pub photometric: f64,
    pub photometric_jacobian: Vec6,
    /// `D_t(w(x)) - z(w(x))` and its Jacobian, when the target depth around
    /// the warped pixel is valid.
    pub depth: Option<(f64, Vec6)>,
}

#[derive(Debug, Clone)]
struct Normal {
    h: Mat6,
    g: Vec6,
    energy: f64,
    photo_sq: f64,
    count: usize,
}

/// Precomputed pyramids for one source/target pair.
pub struct AlignmentProblem {
    levels: Vec<Level>,
    params: OdometryParams,
    finest_area: usize,
}

impl AlignmentProblem {
    pub fn new(
        source: &RgbdNode,
        target: &RgbdNode,
        k: &PinholeIntrinsics,
        params: &OdometryParams,
    ) -> Result<Self, OdometryError> {
        params.validate()?;
        for n in [source, target] {
            if n.width() != k.width || n.height() != k.height {
                return Err(OdometryError::SizeMismatch {
                    got_w: n.width(),
                    got_h: n.height(),
                    want_w: k.width,
                    want_h: k.height,
                });
            }
        }
        let sp = build_pyramid(source, params.pyramid_levels)?;
        let tp = build_pyramid(target, params.pyramid_levels)?;
        let mut kl = k.cropped(sp[0].width(), sp[0].height());
        let finest_area = kl.width * kl.height;
        let mut levels = Vec::with_capacity(sp.len());
        for (s, t) in sp.iter().zip(&tp) {
            let intensity = s.intensity();
            let mut pts = Vec::with_capacity(s.valid_count());
            for v in 0..s.height() {
                for u in 0..s.width() {
                    let z = s.depth_at(u, v);
                    if z > 0.0 {
                        pts.push((
                            kl.back_project_pixel(u as f64, v as f64, z),
                            intensity[v * s.width() + u],
                        ));
                    }
                }
            }
            levels.push(Level {
                k: kl,
                source: pts,
                target_intensity: t.intensity(),
                target_depth: t.depth().to_vec(),
            });
            kl = kl.halved();
        }
        Ok(Self {
            levels,
            params: params.clone(),
            finest_area,
        })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Number of valid source pixels at `level`.
    pub fn source_pixel_count(&self, level: usize) -> usize {
        self.levels[level].source.len()
    }

    /// Back-projected source point of the `i`-th valid source pixel.
    pub fn source_point(&self, level: usize, i: usize) -> Vec3 {
        self.levels[level].source[i].0
    }

    /// Residuals of the `i`-th valid source pixel under motion `g`
    /// (source to target); `None` if the pixel has no valid correspondence.
    pub fn pixel_residual(&self, level: usize, i: usize, g: &Pose) -> Option<PixelResidual> {
        let lvl = &self.levels[level];
        let (p, intensity) = lvl.source[i];
        self.residual_at(lvl, &g.apply(&p), intensity)
    }

    fn residual_at(&self, lvl: &Level, q: &Vec3, source_intensity: f64) -> Option<PixelResidual> {
        let k = &lvl.k;
        if q.z <= 0.0 {
            return None;
        }
        let inv_z = 1.0 / q.z;
        let u = k.fx * q.x * inv_z + k.cx;
        let v = k.fy * q.y * inv_z + k.cy;
        if !(u >= 0.0 && v >= 0.0 && u < (k.width - 1) as f64 && v < (k.height - 1) as f64) {
            return None;
        }
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let w = k.width;
        let idx = [v0 * w + u0, v0 * w + u0 + 1, (v0 + 1) * w + u0, (v0 + 1) * w + u0 + 1];
        let d = idx.map(|i| lvl.target_depth[i]);
        let bilinear = |s: [f64; 4]| {
            let val = (1.0 - fv) * ((1.0 - fu) * s[0] + fu * s[1]) + fv * ((1.0 - fu) * s[2] + fu * s[3]);
            let du = (1.0 - fv) * (s[1] - s[0]) + fv * (s[3] - s[2]);
            let dv = (1.0 - fu) * (s[2] - s[0]) + fu * (s[3] - s[1]);
            (val, du, dv)
        };
        let depth_sample = if d.iter().all(|x| *x > 0.0) {
            let (dt, ddu, ddv) = bilinear(d);
            if (dt - q.z).abs() > self.params.max_depth_diff {
                // occluded or disoccluded
                return None;
            }
            Some((dt - q.z, ddu, ddv))
        } else {
            None
        };
        let (it, idu, idv) = bilinear(idx.map(|i| lvl.target_intensity[i]));

        // d(u, v)/dq
        let du_dq = RowVector3::new(k.fx * inv_z, 0.0, -k.fx * q.x * inv_z * inv_z);
        let dv_dq = RowVector3::new(0.0, k.fy * inv_z, -k.fy * q.y * inv_z * inv_z);
        // dq/dξ for q' = exp(ξ) q
        let mut dq = Matrix3x6::zeros();
        dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(q)));
        dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());

        let photo_row: RowVector6<f64> = -(du_dq * idu + dv_dq * idv) * dq;
        let depth = depth_sample.map(|(r, ddu, ddv)| {
            let row: RowVector6<f64> = (du_dq * ddu + dv_dq * ddv - RowVector3::new(0.0, 0.0, 1.0)) * dq;
            (r, row.transpose())
        });
        Some(PixelResidual {
            photometric: source_intensity - it,
            photometric_jacobian: photo_row.transpose(),
            depth,
        })
    }

    fn normal_equations(&self, level: usize, g: &Pose) -> Normal {
        let lvl = &self.levels[level];
        let delta = self.params.huber_delta;
        let lambda = if self.params.use_depth_term { self.params.depth_weight } else { 0.0 };
        let mut acc = Normal {
            h: Mat6::zeros(),
            g: Vec6::zeros(),
            energy: 0.0,
            photo_sq: 0.0,
            count: 0,
        };
        for (p, intensity) in &lvl.source {
            let Some(r) = self.residual_at(lvl, &g.apply(p), *intensity) else {
                continue;
            };
            let a = r.photometric.abs();
            let (w, rho) = if a <= delta {
                (1.0, a * a)
            } else {
                (delta / a, 2.0 * delta * a - delta * delta)
            };
            let jp = &r.photometric_jacobian;
            acc.h += jp * jp.transpose() * w;
            acc.g += jp * (w * r.photometric);
            acc.energy += rho;
            acc.photo_sq += r.photometric * r.photometric;
            if let (true, Some((rd, jd))) = (lambda > 0.0, r.depth) {
                acc.h += jd * jd.transpose() * lambda;
                acc.g += jd * (lambda * rd);
                acc.energy += lambda * rd * rd;
            }
            acc.count += 1;
        }
        acc
    }

    /// Mean over overlapping finest-level pixels of `GᵀG`, where
    /// `G = [-[q]×, I]` is the Jacobian of the warped point `q` with respect
    /// to the motion. `δᵀΩδ` is then the mean squared point displacement
    /// caused by a perturbation `δ`.
    pub fn correspondence_information(&self, g: &Pose) -> Mat6 {
        let lvl = &self.levels[0];
        let mut sum = Mat6::zeros();
        let mut n = 0usize;
        for (p, intensity) in &lvl.source {
            let q = g.apply(p);
            if self.residual_at(lvl, &q, *intensity).is_none() {
                continue;
            }
            let s = skew(&q);
            let mut block = Mat6::identity();
            block.fixed_view_mut::<3, 3>(0, 0).copy_from(&(s.transpose() * s));
            block.fixed_view_mut::<3, 3>(0, 3).copy_from(&s);
            block.fixed_view_mut::<3, 3>(3, 0).copy_from(&s.transpose());
            sum += block;
            n += 1;
        }
        if n > 0 {
            sum / n as f64
        } else {
            sum
        }
    }

    /// Objective value and overlap count at `level` under motion `g`.
    pub fn energy(&self, level: usize, g: &Pose) -> (f64, usize) {
        let n = self.normal_equations(level, g);
        (n.energy, n.count)
    }

    /// Runs the coarse-to-fine optimization from `init` (`T_{s,t}` guess).
    pub fn solve(&self, init: &Pose) -> OdometryResult {
        let params = &self.params;
        let mut g = init.inverse();
        let mut trace = Vec::new();
        for level in (0..self.levels.len()).rev() {
            let needed = params.min_valid_at(level, self.finest_area);
            let mut current = self.normal_equations(level, &g);
            if current.count < needed {
                return OdometryResult::failed(
                    init,
                    OdometryFailure::MinValidPixels {
                        level,
                        count: current.count,
                        needed,
                    },
                    trace,
                );
            }
            for iter in 0..params.max_iters_per_level {
                if current.energy <= 1e-20 * current.count as f64 {
                    // exact alignment
                    break;
                }
                let condition = condition_number(&current.h);
                if !(condition <= MAX_CONDITION) {
                    return OdometryResult::failed(init, OdometryFailure::Singular { level, condition }, trace);
                }
                let Some(chol) = current.h.cholesky() else {
                    return OdometryResult::failed(init, OdometryFailure::Singular { level, condition }, trace);
                };
                let step = -chol.solve(&current.g);
                let mut scale = 1.0;
                let mut accepted = None;
                for _ in 0..=MAX_STEP_HALVINGS {
                    let cand = Pose::exp(&Twist::from_vector(&(step * scale))).compose(&g);
                    let eval = self.normal_equations(level, &cand);
                    if eval.count >= needed && eval.energy <= current.energy {
                        accepted = Some((cand, eval));
                        break;
                    }
                    scale *= 0.5;
                }
                let Some((cand, eval)) = accepted else {
                    break;
                };
                let decrease = (current.energy - eval.energy) / current.energy;
                let t = IterationTrace {
                    level,
                    iter,
                    energy: eval.energy,
                    rmse: (eval.photo_sq / eval.count as f64).sqrt(),
                    step_norm: step.norm() * scale,
                };
                log::debug!(
                    "odometry level={} iter={} rmse={:.6e} step={:.3e}",
                    t.level,
                    t.iter,
                    t.rmse,
                    t.step_norm
                );
                trace.push(t);
                g = cand;
                current = eval;
                if decrease < params.convergence_tol {
                    break;
                }
            }
        }
        let finest = self.normal_equations(0, &g);
        let ci = self.correspondence_information(&g);
        OdometryResult {
            success: true,
            pose: g.inverse(),
            information: (finest.h + finest.h.transpose()) * 0.5,
            correspondence_information: (ci + ci.transpose()) * 0.5,
            final_rmse: (finest.photo_sq / finest.count.max(1) as f64).sqrt(),
            valid_pixel_count: finest.count,
            failure: None,
            trace,
        }
    }
}

fn condition_number(h: &Mat6) -> f64 {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Estimates `T_{s,t}` between two frames starting from `init`.
pub fn compute_odometry(
    source: &RgbdNode,
    target: &RgbdNode,
    k: &PinholeIntrinsics,
    init: &Pose,
    params: &OdometryParams,
) -> OdometryResult {
    match AlignmentProblem::new(source, target, k, params) {
        Ok(problem) => problem.solve(init),
        Err(e) => OdometryResult::failed(init, OdometryFailure::Pyramid(e), Vec::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use crate::ingest::synthetic::{default_intrinsics, SyntheticScene};

    fn node(w: usize, h: usize, depth: Vec<f64>) -> RgbdNode {
        RgbdNode::new(1, w, h, vec![[100, 100, 100]; w * h], depth).unwrap()
    }

    #[test]
    fn pyramid_single_level_is_input() {
        let n = node(16, 16, vec![1.0; 256]);
        let p = build_pyramid(&n, 1).unwrap();
        assert_eq!(p, vec![n]);
    }

    #[test]
    fn pyramid_constant_depth() {
        let n = node(16, 16, vec![2.0; 256]);
        let p = build_pyramid(&n, 2).unwrap();
        assert_eq!((p[1].width(), p[1].height()), (8, 8));
        assert!(p[1].depth().iter().all(|d| *d == 2.0));
    }

    #[test]
    fn pyramid_depth_averages_valid_pixels_only() {
        let mut depth = vec![1.0; 256];
        depth[0] = 1.0;
        depth[1] = 2.0;
        depth[16] = 0.0;
        depth[17] = 0.0;
        let p = build_pyramid(&node(16, 16, depth), 2).unwrap();
        assert_eq!(p[1].depth_at(0, 0), 1.5);
        let mut none = vec![1.0; 256];
        for i in [0, 1, 16, 17] {
            none[i] = 0.0;
        }
        assert_eq!(build_pyramid(&node(16, 16, none), 2).unwrap()[1].depth_at(0, 0), 0.0);
    }

    #[test]
    fn pyramid_too_small_and_cropping() {
        let n = node(20, 18, vec![1.0; 360]);
        assert!(matches!(build_pyramid(&n, 3), Err(OdometryError::TooSmall { level: 2, .. })));
        let p = build_pyramid(&node(34, 33, vec![1.0; 34 * 33]), 3).unwrap();
        assert_eq!((p[0].width(), p[0].height()), (32, 32));
        assert_eq!((p[2].width(), p[2].height()), (8, 8));
    }

    fn render_pair(a: &Pose, b: &Pose, w: usize, h: usize) -> (RgbdNode, RgbdNode, PinholeIntrinsics) {
        let k = default_intrinsics(w, h);
        let scene = SyntheticScene::from_seed(21);
        (scene.render(1, a, &k), scene.render(2, b, &k), k)
    }

    #[test]
    fn self_alignment_is_identity() {
        let (a, _, k) = render_pair(&Pose::identity(), &Pose::identity(), 160, 120);
        let r = compute_odometry(&a, &a, &k, &Pose::identity(), &OdometryParams::default());
        assert!(r.success);
        assert!((r.pose.to_matrix() - nalgebra::Matrix4::identity()).amax() < 1e-10);
        assert!(r.final_rmse < 1e-10);
        let info = r.information;
        assert!((info - info.transpose()).amax() < 1e-9);
        assert!(SymmetricEigen::new(info).eigenvalues.min() > -1e-9);
    }

    #[test]
    fn zero_motion_warp_has_zero_residual() {
        let (a, _, k) = render_pair(&Pose::identity(), &Pose::identity(), 64, 48);
        let problem = AlignmentProblem::new(&a, &a, &k, &OdometryParams::default()).unwrap();
        let mut seen = 0;
        for i in 0..problem.source_pixel_count(0) {
            if let Some(r) = problem.pixel_residual(0, i, &Pose::identity()) {
                assert!(r.photometric.abs() < 1e-12 && r.depth.unwrap().0.abs() < 1e-12);
                seen += 1;
            }
        }
        assert!(seen > 64 * 48 / 2);
    }

    #[test]
    fn recovers_small_synthetic_motion() {
        let xs = Pose::from_translation(Vec3::new(0.0, 0.0, 0.1));
        let motion = Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)).compose(&Pose::rot_y(0.5f64.to_radians()));
        let xt = xs.compose(&motion);
        let (s, t, k) = render_pair(&xs, &xt, 320, 240);
        let r = compute_odometry(&s, &t, &k, &Pose::identity(), &OdometryParams::default());
        assert!(r.success, "{:?}", r.failure);
        let truth = xs.inverse().compose(&xt);
        let (dt, dr) = pose_error(&r.pose, &truth);
        assert!(dt < 1e-3, "translation error {dt}");
        assert!(dr.to_degrees() < 0.05, "rotation error {}", dr.to_degrees());
        for pair in r.trace.windows(2) {
            if pair[0].level == pair[1].level {
                assert!(pair[1].energy <= pair[0].energy);
            }
        }
    }

    #[test]
    fn all_invalid_source_depth_fails() {
        let (a, b, k) = render_pair(&Pose::identity(), &Pose::identity(), 64, 48);
        let blank = a.with_depth(vec![0.0; 64 * 48]).unwrap();
        let r = compute_odometry(&blank, &b, &k, &Pose::identity(), &OdometryParams::default());
        assert!(!r.success);
        assert!(matches!(r.failure, Some(OdometryFailure::MinValidPixels { .. })));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = OdometryParams {
            convergence_tol: 0.0,
            ..OdometryParams::default()
        };
        assert!(p.validate().is_err());
    }
}
