use std::collections::BTreeMap;

use super::PointCloud;
use crate::geometry::Vec3;

#[derive(Default)]
struct Accum {
    count: usize,
    position: Vec3,
    color: Vec3,
    normal: Vec3,
}

/// Replaces the points of each occupied voxel with their centroid.
///
/// Voxels are cells of the grid `floor(p / voxel_size)`. Output order is
/// ascending by voxel key compared as `(z, y, x)`. Colors and normals are
/// averaged the same way; averaged normals are re-normalized (a voxel whose
/// normals cancel keeps the first member's normal).
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let normals = cloud.normals();
    let mut cells: BTreeMap<(i64, i64, i64), (Accum, usize)> = BTreeMap::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = (
            (p.z / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.x / voxel_size).floor() as i64,
        );
        let (acc, _) = cells.entry(key).or_insert_with(|| (Accum::default(), i));
        acc.count += 1;
        acc.position += p;
        acc.color += cloud.colors()[i];
        if let Some(ns) = normals {
            acc.normal += ns[i];
        }
    }

    let mut positions = Vec::with_capacity(cells.len());
    let mut colors = Vec::with_capacity(cells.len());
    let mut out_normals = normals.map(|_| Vec::with_capacity(cells.len()));
    for (acc, first) in cells.into_values() {
        let n = acc.count as f64;
        positions.push(acc.position / n);
        colors.push((acc.color / n).map(|c| c.clamp(0.0, 1.0)));
        if let (Some(out), Some(ns)) = (out_normals.as_mut(), normals) {
            let len = acc.normal.norm();
            out.push(if len > 1e-12 { acc.normal / len } else { ns[first] });
        }
    }
    PointCloud::from_parts_unchecked(positions, colors, out_normals)
}
