//! Ray-cast synthetic RGB-D sequences of a textured room.
//!
//! The scene is the inside of an axis-aligned box painted with a seeded solid
//! texture (plane waves plus a soft 3D checker), which gives dense photometric
//! gradients everywhere. Depth is exact up to `f64` rounding.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IngestError, PinholeIntrinsics, RgbdNode};
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone)]
struct Wave {
    k: Vec3,
    phase: f64,
    amp: f64,
}

/// Solid (3D) texture, so the albedo is continuous across wall seams.
#[derive(Debug, Clone)]
struct SolidTexture {
    base: Vec3,
    tint: Vec3,
    waves: Vec<Wave>,
    checker_freq: f64,
    checker_phase: Vec3,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

impl SolidTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut channel = || Vec3::new(rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0));
        let base = channel();
        let tint = channel();
        let waves = (0..8)
            .map(|_| {
                let wavelength = rng.gen_range(0.4..1.2);
                Wave {
                    k: random_unit(rng) * (TAU / wavelength),
                    phase: rng.gen_range(0.0..TAU),
                    amp: rng.gen_range(0.5..1.0),
                }
            })
            .collect();
        Self {
            base,
            tint,
            waves,
            checker_freq: TAU / rng.gen_range(0.9..1.5),
            checker_phase: Vec3::new(rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)),
        }
    }

    fn albedo(&self, p: &Vec3) -> Vec3 {
        let total: f64 = self.waves.iter().map(|w| w.amp).sum();
        let noise: f64 = self.waves.iter().map(|w| w.amp * (w.k.dot(p) + w.phase).sin()).sum::<f64>() / total;
        let c = (p * self.checker_freq + self.checker_phase).map(f64::sin);
        let checker = (3.0 * c.x * c.y * c.z).tanh();
        let t = (0.5 + 0.3 * noise + 0.18 * checker).clamp(0.0, 1.0);
        let mix = 0.5 + 0.5 * (self.waves[0].k.dot(p) * 0.37).sin();
        self.base.lerp(&self.tint, mix) * (0.15 + 0.85 * t)
    }
}

/// Textured room box bounded by `room_min` / `room_max`.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub room_min: Vec3,
    pub room_max: Vec3,
    texture: SolidTexture,
}

impl SyntheticScene {
    /// The room is fixed in size (camera frame convention: y points down,
    /// the floor is at `y = 1.0`); the seed drives the wall textures.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = SolidTexture::random(&mut rng);
        Self {
            room_min: Vec3::new(-1.6, -1.2, -1.0),
            room_max: Vec3::new(1.6, 1.0, 2.4),
            texture,
        }
    }

    /// Exit hit of a ray cast from inside the room: `(t, point, wall)`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for axis in 0..3 {
            let d = dir[axis];
            if d.abs() < 1e-15 {
                continue;
            }
            let (bound, wall) = if d > 0.0 {
                (self.room_max[axis], 2 * axis + 1)
            } else {
                (self.room_min[axis], 2 * axis)
            };
            let t = (bound - origin[axis]) / d;
            if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, wall));
            }
        }
        best.map(|(t, wall)| (t, origin + dir * t, wall))
    }

    /// Linear RGB albedo in [0, 1] at a world point.
    pub fn albedo(&self, p: &Vec3) -> Vec3 {
        self.texture.albedo(p)
    }

    /// Euclidean distance from `p` to the nearest wall surface.
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        let below = self.room_min - p;
        let above = p - self.room_max;
        let outside = below.sup(&above).sup(&Vec3::zeros());
        if outside.amax() > 0.0 {
            return outside.norm();
        }
        let to_min = p - self.room_min;
        let to_max = self.room_max - p;
        to_min.inf(&to_max).min()
    }

    /// Renders the view from `camera_to_world`.
    pub fn render(&self, index: usize, camera_to_world: &Pose, k: &PinholeIntrinsics) -> RgbdNode {
        let n = k.width * k.height;
        let mut color = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        let origin = *camera_to_world.translation();
        for v in 0..k.height {
            for u in 0..k.width {
                let ray_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let ray = camera_to_world.rotate(&ray_cam);
                match self.cast(&origin, &ray) {
                    Some((t, p, _)) => {
                        let c = self.albedo(&p);
                        color.push([0, 1, 2].map(|i| (c[i].clamp(0.0, 1.0) * 255.0).round() as u8));
                        depth.push(t);
                    }
                    None => {
                        color.push([0, 0, 0]);
                        depth.push(0.0);
                    }
                }
            }
        }
        RgbdNode::new(index, k.width, k.height, color, depth).expect("render buffers sized")
    }
}

/// Renders one frame per trajectory pose; frames are numbered from 1.
/// Returns the frames and the ground-truth camera-to-world poses.
pub fn generate_synthetic_sequence(
    scene_seed: u64,
    trajectory: &[Pose],
    k: &PinholeIntrinsics,
) -> Result<(Vec<RgbdNode>, Vec<Pose>), IngestError> {
    if trajectory.is_empty() {
        return Err(IngestError::EmptyTrajectory);
    }
    let scene = SyntheticScene::from_seed(scene_seed);
    use rayon::prelude::*;
    let nodes = trajectory
        .par_iter()
        .enumerate()
        .map(|(i, pose)| scene.render(i + 1, pose, k))
        .collect();
    Ok((nodes, trajectory.to_vec()))
}

/// Smooth hand-held style sweep through the room.
pub fn default_trajectory(frames: usize) -> Vec<Pose> {
    (0..frames)
        .map(|i| {
            let s = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.0 };
            let position = Vec3::new(
                -0.15 + 0.3 * s,
                -0.03 * (TAU * s).sin(),
                0.2 * (std::f64::consts::PI * s).sin(),
            );
            let yaw = (-8.0 + 16.0 * s).to_radians();
            let pitch = (3.0 * (TAU * s).sin()).to_radians();
            let roll = (1.0 * (std::f64::consts::PI * s).sin()).to_radians();
            let r = Pose::rot_y(yaw).compose(&Pose::rot_x(pitch)).compose(&Pose::rot_z(roll));
            Pose::from_parts_unchecked(*r.rotation(), position)
        })
        .collect()
}

/// 0.6 × width focal length, principal point at the image center.
pub fn default_intrinsics(width: usize, height: usize) -> PinholeIntrinsics {
    let f = 0.6 * width as f64;
    PinholeIntrinsics::new(
        f,
        f,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
    .expect("default intrinsics are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::transform_cloud;
    use crate::ingest::back_project;

    #[test]
    fn single_frame_points_lie_on_walls() {
        let k = default_intrinsics(64, 48);
        let (nodes, gt) = generate_synthetic_sequence(1, &[Pose::identity()], &k).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].index, 1);
        let scene = SyntheticScene::from_seed(1);
        let world = transform_cloud(&back_project(&nodes[0], &k).unwrap(), &gt[0]);
        assert_eq!(world.len(), 64 * 48);
        for p in world.positions() {
            assert!(scene.distance_to_surface(p) < 1e-12);
        }
    }

    #[test]
    fn identical_poses_give_identical_frames() {
        let k = default_intrinsics(32, 24);
        let pose = default_trajectory(5)[2];
        let (nodes, _) = generate_synthetic_sequence(4, &[pose, pose], &k).unwrap();
        assert_eq!(nodes[0].color(), nodes[1].color());
        assert_eq!(nodes[0].depth(), nodes[1].depth());
        let (again, _) = generate_synthetic_sequence(4, &[pose], &k).unwrap();
        assert_eq!(again[0].depth(), nodes[0].depth());
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let k = default_intrinsics(32, 24);
        assert!(matches!(
            generate_synthetic_sequence(0, &[], &k),
            Err(IngestError::EmptyTrajectory)
        ));
    }

    #[test]
    fn default_views_stay_within_default_truncation() {
        let k = default_intrinsics(64, 48);
        let (nodes, _) = generate_synthetic_sequence(0, &default_trajectory(60), &k).unwrap();
        for n in &nodes {
            let far = n.depth().iter().filter(|d| **d > 3.0).count();
            assert!(far * 50 < n.depth().len(), "frame {} has {far} far pixels", n.index);
            assert!(n.depth().iter().all(|d| *d > 0.0));
        }
    }

    #[test]
    fn distance_to_surface_inside_and_outside() {
        let s = SyntheticScene::from_seed(0);
        assert!((s.distance_to_surface(&Vec3::new(0.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((s.distance_to_surface(&Vec3::new(2.6, 0.0, 0.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn texture_has_contrast() {
        let k = default_intrinsics(64, 48);
        let (nodes, _) = generate_synthetic_sequence(2, &[Pose::identity()], &k).unwrap();
        let i = nodes[0].intensity();
        let mean = i.iter().sum::<f64>() / i.len() as f64;
        let var = i.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / i.len() as f64;
        assert!(var.sqrt() > 0.05);
    }
}
