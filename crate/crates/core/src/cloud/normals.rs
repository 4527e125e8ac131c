use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use super::{CloudError, KdIndex, PointCloud};
use crate::geometry::{Mat3, Vec3};

pub const DEFAULT_NORMAL_K: usize = 30;

/// Per-point normal from the k-NN covariance (smallest eigenvector), flipped
/// so that `n · (viewpoint - p) >= 0`.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    viewpoint: &Vec3,
) -> Result<PointCloud, CloudError> {
    let k = k.max(3);
    if cloud.len() < k {
        return Err(CloudError::TooFewPoints {
            needed: k,
            have: cloud.len(),
        });
    }
    let index = KdIndex::new(cloud.positions());
    let positions = cloud.positions();
    let normals: Vec<Vec3> = positions
        .par_iter()
        .map(|p| {
            let hits = index.knn(p, k);
            let mean = hits
                .iter()
                .fold(Vec3::zeros(), |acc, h| acc + positions[h.index])
                / hits.len() as f64;
            let mut cov = Mat3::zeros();
            for h in &hits {
                let d = positions[h.index] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let smallest = eig.eigenvalues.imin();
            let mut n: Vec3 = eig.eigenvectors.column(smallest).into_owned();
            n.normalize_mut();
            if n.dot(&(viewpoint - p)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect();
    Ok(PointCloud::from_parts_unchecked(
        cloud.positions().to_vec(),
        cloud.colors().to_vec(),
        Some(normals),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane() -> PointCloud {
        let pts: Vec<Vec3> = (0..100)
            .map(|i| Vec3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0))
            .collect();
        PointCloud::new(pts, vec![Vec3::zeros(); 100]).unwrap()
    }

    #[test]
    fn plane_normals_face_viewpoint() {
        let up = estimate_normals(&plane(), 10, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        for n in up.normals().unwrap() {
            assert!((n - Vec3::z()).amax() < 1e-6);
        }
        let down = estimate_normals(&plane(), 10, &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        for n in down.normals().unwrap() {
            assert!((n + Vec3::z()).amax() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial_near_pole() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..4000)
            .map(|_| {
                let v = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                v.normalize()
            })
            .collect();
        let c = PointCloud::new(pts, vec![Vec3::zeros(); 4000]).unwrap();
        let with = estimate_normals(&c, DEFAULT_NORMAL_K, &Vec3::new(0.0, 0.0, 10.0)).unwrap();
        let mut checked = 0;
        for (p, n) in with.positions().iter().zip(with.normals().unwrap()) {
            if p.z > 0.95 {
                let angle = n.dot(p).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 5.0, "angle {angle} at {p:?}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn too_few_points() {
        let c = PointCloud::new(vec![Vec3::zeros(); 5], vec![Vec3::zeros(); 5]).unwrap();
        assert!(matches!(
            estimate_normals(&c, 10, &Vec3::zeros()),
            Err(CloudError::TooFewPoints { needed: 10, have: 5 })
        ));
    }
}
