//! Colored point clouds and the operations the pipeline needs on them.

mod kdtree;
mod normals;
pub mod pcd;
mod voxel;

use thiserror::Error;

use crate::geometry::{Pose, Vec3};

pub use kdtree::{KdIndex, Neighbor};
pub use normals::{estimate_normals, DEFAULT_NORMAL_K};
pub use pcd::{decode_pcd, encode_pcd, read_pcd, write_pcd, PcdEncoding};
pub use voxel::voxel_downsample;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("attribute length mismatch: {positions} positions, {other} {what}")]
    LengthMismatch {
        positions: usize,
        other: usize,
        what: &'static str,
    },
    #[error("invalid point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },
    #[error("cannot merge clouds with and without normals")]
    NormalPresenceMismatch,
    #[error("need at least {needed} points, cloud has {have}")]
    TooFewPoints { needed: usize, have: usize },
    #[error("unsupported PCD: {0}")]
    UnsupportedPcd(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Positions in meters, colors in [0, 1], optional unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self, CloudError> {
        Self::from_parts(positions, colors, None)
    }

    pub fn from_parts(
        positions: Vec<Vec3>,
        colors: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
    ) -> Result<Self, CloudError> {
        let cloud = Self {
            positions,
            colors,
            normals,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Skips validation; used where the construction already guarantees it.
    pub(crate) fn from_parts_unchecked(
        positions: Vec<Vec3>,
        colors: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
    ) -> Self {
        debug_assert_eq!(positions.len(), colors.len());
        Self {
            positions,
            colors,
            normals,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let n = self.positions.len();
        if self.colors.len() != n {
            return Err(CloudError::LengthMismatch {
                positions: n,
                other: self.colors.len(),
                what: "colors",
            });
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(CloudError::LengthMismatch {
                    positions: n,
                    other: normals.len(),
                    what: "normals",
                });
            }
        }
        for (i, (p, c)) in self.positions.iter().zip(&self.colors).enumerate() {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(CloudError::InvalidPoint {
                    index: i,
                    reason: "non-finite position".into(),
                });
            }
            if !c.iter().all(|x| (0.0..=1.0).contains(x)) {
                return Err(CloudError::InvalidPoint {
                    index: i,
                    reason: format!("color {c:?} outside [0, 1]"),
                });
            }
            if let Some(normals) = &self.normals {
                if (normals[i].norm() - 1.0).abs() > 1e-6 {
                    return Err(CloudError::InvalidPoint {
                        index: i,
                        reason: "normal is not unit length".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Vec3] {
        &self.colors
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    /// Axis-aligned bounding box, `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self.positions.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.len() as f64)
    }
}

/// Positions mapped by `pose`, normals rotated, colors kept.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|p| pose.apply(p)).collect(),
        colors: cloud.colors.clone(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| pose.rotate(n)).collect()),
    }
}

/// Concatenation in input order.
pub fn merge(clouds: &[PointCloud]) -> Result<PointCloud, CloudError> {
    let Some(first) = clouds.first() else {
        return Ok(PointCloud::empty());
    };
    let with_normals = first.has_normals();
    if clouds.iter().any(|c| c.has_normals() != with_normals) {
        return Err(CloudError::NormalPresenceMismatch);
    }
    let total = clouds.iter().map(PointCloud::len).sum();
    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut normals = with_normals.then(|| Vec::with_capacity(total));
    for c in clouds {
        positions.extend_from_slice(&c.positions);
        colors.extend_from_slice(&c.colors);
        if let (Some(out), Some(ns)) = (normals.as_mut(), c.normals.as_ref()) {
            out.extend_from_slice(ns);
        }
    }
    Ok(PointCloud {
        positions,
        colors,
        normals,
    })
}
