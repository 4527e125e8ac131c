//! Offline RGB-D reconstruction.
//!
//! A recorded sequence of aligned color/depth frames is turned into one
//! registered, colored point cloud:
//!
//! 1. frames are grouped into windows of `N` consecutive frames;
//! 2. every in-window frame pair is aligned with dense RGB-D odometry and the
//!    window's pose graph is optimized, giving one fused fragment per window;
//! 3. consecutive fragments are aligned with multiscale point-to-plane ICP;
//! 4. the fragment-level pose graph is optimized and all fragments are merged
//!    and written as PCD.

pub mod cloud;
pub mod geometry;
pub mod ingest;
pub mod odometry;
pub mod pipeline;
pub mod posegraph;

pub use cloud::PointCloud;
pub use geometry::{Pose, Twist};
