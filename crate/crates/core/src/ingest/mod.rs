//! Frame ingestion: intrinsics, aligned color/depth pairs and back-projection.
//!
//! On-disk layout of a dataset:
//!
//! ```text
//! <root>/intrinsics.json      {"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..}
//! <root>/color/000001.png     8-bit RGB
//! <root>/depth/000001.png     16-bit gray, units of 1/depth_scale meters
//! ```

pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::Vec3;

pub use synthetic::{default_intrinsics, default_trajectory, generate_synthetic_sequence, SyntheticScene};

pub const INTRINSICS_FILE: &str = "intrinsics.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("dataset directory {0} does not exist")]
    MissingDataset(String),
    #[error("frame {frame:06} has a {present} image but no {missing} image")]
    MismatchedPair {
        frame: usize,
        present: &'static str,
        missing: &'static str,
    },
    #[error("frame {frame:06}: {what} is {got_w}x{got_h}, intrinsics say {want_w}x{want_h}")]
    SizeMismatch {
        frame: usize,
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("frames must be numbered 1..=M without gaps; expected {expected:06}, found {found:06}")]
    NonContiguous { expected: usize, found: usize },
    #[error("need at least 2 frames, found {0}")]
    TooFewFrames(usize),
    #[error("synthetic trajectory is empty")]
    EmptyTrajectory,
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("invalid ingest config: {0}")]
    InvalidConfig(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> IngestError + '_ {
    move |source| IngestError::Image {
        path: path.display().to_string(),
        source,
    }
}

/// Pinhole camera without distortion. Pixel `(u, v)` integer coordinates are
/// pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, IngestError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn back_project_pixel(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Intrinsics of an image downsampled 2× by 2×2 box averaging.
    pub fn halved(&self) -> Self {
        Self {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx + 0.5) / 2.0 - 0.5,
            cy: (self.cy + 0.5) / 2.0 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Same principal point and focal length on a cropped (top-left anchored) image.
    pub fn cropped(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..*self
        }
    }
}

pub fn load_intrinsics(path: impl AsRef<Path>) -> Result<PinholeIntrinsics, IngestError> {
    let path = path.as_ref();
    let parse_err = |message: String| IngestError::Parse {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
    let k: PinholeIntrinsics = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    k.validate()?;
    Ok(k)
}

pub fn save_intrinsics(k: &PinholeIntrinsics, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(k).expect("intrinsics serialize");
    fs::write(path, text).map_err(io_err(path))
}

/// One aligned color/depth frame. Depth is in meters; 0 means no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdNode {
    pub index: usize,
    width: usize,
    height: usize,
    color: Vec<[u8; 3]>,
    depth: Vec<f64>,
}

impl RgbdNode {
    pub fn new(
        index: usize,
        width: usize,
        height: usize,
        color: Vec<[u8; 3]>,
        depth: Vec<f64>,
    ) -> Result<Self, IngestError> {
        let n = width * height;
        if color.len() != n || depth.len() != n {
            return Err(IngestError::InvalidNode(format!(
                "{width}x{height} frame needs {n} pixels, got {} color / {} depth",
                color.len(),
                depth.len()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(IngestError::InvalidNode(format!("depth value {bad} is not finite and >= 0")));
        }
        Ok(Self {
            index,
            width,
            height,
            color,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn color(&self) -> &[[u8; 3]] {
        &self.color
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn color_at(&self, u: usize, v: usize) -> [u8; 3] {
        self.color[v * self.width + u]
    }

    /// Gray level `(r + g + b) / 3` scaled to [0, 1], row-major.
    pub fn intensity(&self) -> Vec<f64> {
        self.color
            .iter()
            .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / (3.0 * 255.0))
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Invalidates depths beyond `max_depth`.
    pub fn truncate_depth(&mut self, max_depth: f64) {
        for d in &mut self.depth {
            if *d > max_depth {
                *d = 0.0;
            }
        }
    }

    pub fn with_depth(&self, depth: Vec<f64>) -> Result<Self, IngestError> {
        Self::new(self.index, self.width, self.height, self.color.clone(), depth)
    }

    fn check_size(&self, k: &PinholeIntrinsics) -> Result<(), IngestError> {
        if self.width != k.width || self.height != k.height {
            return Err(IngestError::SizeMismatch {
                frame: self.index,
                what: "frame",
                got_w: self.width,
                got_h: self.height,
                want_w: k.width,
                want_h: k.height,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub dataset_root: PathBuf,
    /// Stored depth units per meter.
    pub depth_scale: f64,
    /// Depths beyond this (meters) are treated as missing.
    pub depth_trunc: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("dataset"),
            depth_scale: 1000.0,
            depth_trunc: 3.0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.depth_scale > 0.0) {
            return Err(IngestError::InvalidConfig(format!("depth_scale {} must be > 0", self.depth_scale)));
        }
        if !(self.depth_trunc > 0.0) {
            return Err(IngestError::InvalidConfig(format!("depth_trunc {} must be > 0", self.depth_trunc)));
        }
        Ok(())
    }
}

fn frame_number(path: &Path) -> Option<usize> {
    if path.extension()?.to_str()? != "png" {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

fn list_frames(dir: &Path) -> Result<BTreeMap<usize, PathBuf>, IngestError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if let Some(n) = frame_number(&path) {
            out.insert(n, path);
        }
    }
    Ok(out)
}

pub fn color_path(root: &Path, frame: usize) -> PathBuf {
    root.join("color").join(format!("{frame:06}.png"))
}

pub fn depth_path(root: &Path, frame: usize) -> PathBuf {
    root.join("depth").join(format!("{frame:06}.png"))
}

fn load_frame(
    frame: usize,
    color_file: &Path,
    depth_file: &Path,
    k: &PinholeIntrinsics,
    cfg: &IngestConfig,
) -> Result<RgbdNode, IngestError> {
    let color = image::open(color_file).map_err(image_err(color_file))?.to_rgb8();
    let depth = image::open(depth_file).map_err(image_err(depth_file))?.to_luma16();
    for (what, (w, h)) in [("color image", color.dimensions()), ("depth image", depth.dimensions())] {
        if w as usize != k.width || h as usize != k.height {
            return Err(IngestError::SizeMismatch {
                frame,
                what,
                got_w: w as usize,
                got_h: h as usize,
                want_w: k.width,
                want_h: k.height,
            });
        }
    }
    let color: Vec<[u8; 3]> = color.pixels().map(|p| p.0).collect();
    let depth: Vec<f64> = depth
        .pixels()
        .map(|p| {
            let d = p.0[0] as f64 / cfg.depth_scale;
            if d > cfg.depth_trunc {
                0.0
            } else {
                d
            }
        })
        .collect();
    RgbdNode::new(frame, k.width, k.height, color, depth)
}

/// Loads every frame under `cfg.dataset_root`, ordered by frame number.
pub fn load_sequence(cfg: &IngestConfig) -> Result<Vec<RgbdNode>, IngestError> {
    cfg.validate()?;
    let root = &cfg.dataset_root;
    if !root.is_dir() {
        return Err(IngestError::MissingDataset(root.display().to_string()));
    }
    let k = load_intrinsics(root.join(INTRINSICS_FILE))?;
    let colors = list_frames(&root.join("color"))?;
    let depths = list_frames(&root.join("depth"))?;
    for &f in colors.keys() {
        if !depths.contains_key(&f) {
            return Err(IngestError::MismatchedPair {
                frame: f,
                present: "color",
                missing: "depth",
            });
        }
    }
    for &f in depths.keys() {
        if !colors.contains_key(&f) {
            return Err(IngestError::MismatchedPair {
                frame: f,
                present: "depth",
                missing: "color",
            });
        }
    }
    for (expected, &found) in (1..).zip(colors.keys()) {
        if expected != found {
            return Err(IngestError::NonContiguous { expected, found });
        }
    }
    if colors.len() < 2 {
        return Err(IngestError::TooFewFrames(colors.len()));
    }
    let frames: Vec<(usize, &PathBuf, &PathBuf)> = colors
        .iter()
        .map(|(f, c)| (*f, c, &depths[f]))
        .collect();
    frames
        .par_iter()
        .map(|(f, c, d)| load_frame(*f, c, d, &k, cfg))
        .collect()
}

/// Writes one frame in the dataset layout; depth is stored as
/// `round(depth * depth_scale)` clamped to the u16 range.
pub fn write_frame(root: &Path, node: &RgbdNode, depth_scale: f64) -> Result<(), IngestError> {
    for sub in ["color", "depth"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let (w, h) = (node.width as u32, node.height as u32);
    let color: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w, h, node.color.iter().flatten().copied().collect())
            .expect("color buffer size");
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        w,
        h,
        node.depth
            .iter()
            .map(|d| (d * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect(),
    )
    .expect("depth buffer size");
    let cp = color_path(root, node.index);
    color.save(&cp).map_err(image_err(&cp))?;
    let dp = depth_path(root, node.index);
    depth.save(&dp).map_err(image_err(&dp))?;
    Ok(())
}

/// Colored points for every pixel with positive depth, in row-major order.
pub fn back_project(node: &RgbdNode, k: &PinholeIntrinsics) -> Result<PointCloud, IngestError> {
    node.check_size(k)?;
    let mut positions = Vec::with_capacity(node.valid_count());
    let mut colors = Vec::with_capacity(positions.capacity());
    for v in 0..node.height {
        for u in 0..node.width {
            let z = node.depth_at(u, v);
            if z > 0.0 {
                positions.push(k.back_project_pixel(u as f64, v as f64, z));
                let c = node.color_at(u, v);
                colors.push(Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0);
            }
        }
    }
    Ok(PointCloud::from_parts_unchecked(positions, colors, None))
}
