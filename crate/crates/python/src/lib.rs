//! Python bindings for the `rgbd_recon` reconstruction library.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rgbd_recon::cloud::{read_pcd, transform_cloud, voxel_downsample, write_pcd, PcdEncoding, PointCloud};
use rgbd_recon::geometry::{Mat6, Pose, Twist, Vec3};
use rgbd_recon::ingest::{back_project, default_intrinsics, PinholeIntrinsics, RgbdNode, SyntheticScene};
use rgbd_recon::odometry::{compute_odometry, OdometryParams};
use rgbd_recon::pipeline::{self, PipelineConfig};
use rgbd_recon::posegraph::{optimize, Edge, OptimizeParams, PoseGraph};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn mat6_rows(m: &Mat6) -> Vec<Vec<f64>> {
    (0..6).map(|r| (0..6).map(|c| m[(r, c)]).collect()).collect()
}

fn mat6_from_rows(rows: &[Vec<f64>]) -> PyResult<Mat6> {
    if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
        return Err(PyValueError::new_err("information must be 6x6"));
    }
    Ok(Mat6::from_fn(|r, c| rows[r][c]))
}

/// Rigid transform in SE(3). Twists are `[wx, wy, wz, vx, vy, vz]`.
#[pyclass(name = "Pose", module = "rgbd_recon", skip_from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: Pose,
}

#[pymethods]
impl PyPose {
    /// From a 4x4 row-major matrix; identity when omitted.
    #[new]
    #[pyo3(signature = (matrix = None))]
    fn new(matrix: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let Some(m) = matrix else {
            return Ok(Self { inner: Pose::identity() });
        };
        if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
            return Err(PyValueError::new_err("matrix must be 4x4"));
        }
        let flat: Vec<f64> = m.into_iter().flatten().collect();
        Ok(Self {
            inner: Pose::from_row_major(&flat).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn exp(xi: [f64; 6]) -> Self {
        Self {
            inner: Pose::exp(&Twist::from_slice(&xi)),
        }
    }

    #[staticmethod]
    fn from_translation(t: [f64; 3]) -> Self {
        Self {
            inner: Pose::from_translation(Vec3::new(t[0], t[1], t[2])),
        }
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let v = self.inner.log().map_err(value_err)?.to_vector();
        Ok([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    fn compose(&self, other: PyRef<'_, PyPose>) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn __matmul__(&self, other: PyRef<'_, PyPose>) -> Self {
        self.compose(other)
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.inner.apply(&Vec3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        self.inner.to_row_major().chunks(4).map(|r| r.to_vec()).collect()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t.x, t.y, t.z]
    }

    #[getter]
    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!(
            "Pose(t=[{:.6}, {:.6}, {:.6}], angle={:.6})",
            t.x,
            t.y,
            t.z,
            self.inner.rotation_angle()
        )
    }
}

#[pyclass(name = "PinholeIntrinsics", module = "rgbd_recon", skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics {
    inner: PinholeIntrinsics,
}

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Ok(Self {
            inner: PinholeIntrinsics::new(fx, fy, cx, cy, width, height).map_err(value_err)?,
        })
    }

    /// Intrinsics used by the synthetic renderer.
    #[staticmethod]
    fn synthetic(width: usize, height: usize) -> Self {
        Self {
            inner: default_intrinsics(width, height),
        }
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        self.inner.project(&Vec3::new(p[0], p[1], p[2]))
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!(
            "PinholeIntrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    }
}

/// Aligned color/depth frame.
#[pyclass(name = "Frame", module = "rgbd_recon", skip_from_py_object)]
#[derive(Clone)]
struct PyFrame {
    inner: RgbdNode,
}

#[pymethods]
impl PyFrame {
    /// Renders the synthetic room seen from `camera_to_world`.
    #[staticmethod]
    #[pyo3(signature = (camera_to_world, intrinsics, seed = 7, index = 1))]
    fn synthetic(
        camera_to_world: PyRef<'_, PyPose>,
        intrinsics: PyRef<'_, PyIntrinsics>,
        seed: u64,
        index: usize,
    ) -> Self {
        let scene = SyntheticScene::from_seed(seed);
        Self {
            inner: scene.render(index, &camera_to_world.inner, &intrinsics.inner),
        }
    }

    #[getter]
    fn index(&self) -> usize {
        self.inner.index
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn valid_count(&self) -> usize {
        self.inner.valid_count()
    }

    /// Row-major depth in meters; 0 marks a missing measurement.
    fn depth(&self) -> Vec<f64> {
        self.inner.depth().to_vec()
    }

    fn to_cloud(&self, intrinsics: PyRef<'_, PyIntrinsics>) -> PyResult<PyPointCloud> {
        Ok(PyPointCloud {
            inner: back_project(&self.inner, &intrinsics.inner).map_err(value_err)?,
        })
    }
}

#[pyclass(name = "PointCloud", module = "rgbd_recon", skip_from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: PointCloud,
}

#[pymethods]
impl PyPointCloud {
    /// Positions in meters, colors in `[0, 1]` (gray when omitted).
    #[new]
    #[pyo3(signature = (positions, colors = None))]
    fn new(positions: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>) -> PyResult<Self> {
        let colors = colors.unwrap_or_else(|| vec![[0.5; 3]; positions.len()]);
        let to_vec = |v: Vec<[f64; 3]>| v.into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
        Ok(Self {
            inner: PointCloud::new(to_vec(positions), to_vec(colors)).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: read_pcd(path).map_err(runtime_err)?,
        })
    }

    #[pyo3(signature = (path, binary = true))]
    fn write(&self, path: &str, binary: bool) -> PyResult<()> {
        let encoding = if binary { PcdEncoding::Binary } else { PcdEncoding::Ascii };
        write_pcd(&self.inner, path, encoding).map_err(runtime_err)
    }

    fn voxel_downsample(&self, voxel_size: f64) -> PyResult<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(PyValueError::new_err("voxel_size must be positive"));
        }
        Ok(Self {
            inner: voxel_downsample(&self.inner, voxel_size),
        })
    }

    fn transformed(&self, pose: PyRef<'_, PyPose>) -> Self {
        Self {
            inner: transform_cloud(&self.inner, &pose.inner),
        }
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions().iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn colors(&self) -> Vec<[f64; 3]> {
        self.inner.colors().iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

/// Dense RGB-D odometry; returns a dict with `success`, `pose` (T_{s,t}),
/// `rmse`, `valid_pixels`, `information` and `failure`.
#[pyfunction(name = "compute_odometry")]
#[pyo3(signature = (source, target, intrinsics, init = None))]
fn py_compute_odometry<'py>(
    py: Python<'py>,
    source: PyRef<'py, PyFrame>,
    target: PyRef<'py, PyFrame>,
    intrinsics: PyRef<'py, PyIntrinsics>,
    init: Option<PyRef<'py, PyPose>>,
) -> PyResult<Bound<'py, PyDict>> {
    let init = init.map(|p| p.inner).unwrap_or_else(Pose::identity);
    let (s, t, k) = (source.inner.clone(), target.inner.clone(), intrinsics.inner);
    let r = py.detach(|| compute_odometry(&s, &t, &k, &init, &OdometryParams::default()));
    let d = PyDict::new(py);
    d.set_item("success", r.success)?;
    d.set_item("pose", PyPose { inner: r.pose })?;
    d.set_item("rmse", r.final_rmse)?;
    d.set_item("valid_pixels", r.valid_pixel_count)?;
    d.set_item("information", mat6_rows(&r.correspondence_information))?;
    d.set_item("failure", r.failure.map(|f| f.to_string()))?;
    Ok(d)
}

/// Robust pose-graph optimization. `edges` are
/// `(s, t, measurement, information_6x6, uncertain)`; returns
/// `(poses, kept_edges, pruned_edges, converged)` with edges as `(s, t)`.
#[pyfunction]
#[pyo3(signature = (nodes, edges, mu = None))]
#[allow(clippy::type_complexity)]
fn optimize_pose_graph(
    nodes: Vec<PyRef<'_, PyPose>>,
    edges: Vec<(usize, usize, PyRef<'_, PyPose>, Vec<Vec<f64>>, bool)>,
    mu: Option<f64>,
) -> PyResult<(Vec<PyPose>, Vec<(usize, usize)>, Vec<(usize, usize)>, bool)> {
    let nodes: Vec<Pose> = nodes.iter().map(|p| p.inner).collect();
    let edges = edges
        .iter()
        .map(|(s, t, m, info, u)| Ok(Edge::new(*s, *t, m.inner, mat6_from_rows(info)?, *u)))
        .collect::<PyResult<Vec<_>>>()?;
    let graph = PoseGraph::new(nodes, edges).map_err(value_err)?;
    let mut params = OptimizeParams::default();
    if let Some(mu) = mu {
        params.mu = mu;
    }
    let out = optimize(&graph, &params).map_err(value_err)?;
    Ok((
        out.graph.nodes.iter().map(|p| PyPose { inner: *p }).collect(),
        out.graph.edges.iter().map(|e| (e.s, e.t)).collect(),
        out.pruned.iter().map(|p| (p.edge.s, p.edge.t)).collect(),
        out.converged,
    ))
}

/// Number of fragments for `m` frames in windows of `n`.
#[pyfunction]
fn fragment_count(m: usize, n: usize) -> PyResult<usize> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be positive"));
    }
    Ok(pipeline::fragment_count(m, n))
}

#[pyclass(name = "PipelineConfig", module = "rgbd_recon", skip_from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    /// Defaults, optionally overridden by a JSON object string.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => PipelineConfig::from_json(text).map_err(value_err)?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Reads a config file; relative paths resolve against its directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(path).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn dataset_root(&self) -> String {
        self.inner.ingest.dataset_root.display().to_string()
    }

    #[setter]
    fn set_dataset_root(&mut self, path: &str) {
        self.inner.ingest.dataset_root = path.into();
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    #[setter]
    fn set_output_dir(&mut self, path: &str) {
        self.inner.output_dir = path.into();
    }

    #[getter(N)]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[setter(N)]
    fn set_n(&mut self, n: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.n = n;
        next.validate().map_err(value_err)?;
        self.inner = next;
        Ok(())
    }

    /// Sets the synthetic dataset size used by `synth`.
    #[pyo3(signature = (frames, width = 320, height = 240, seed = 7))]
    fn set_synth(&mut self, frames: usize, width: usize, height: usize, seed: u64) {
        self.inner.synth.frames = frames;
        self.inner.synth.width = width;
        self.inner.synth.height = height;
        self.inner.synth.seed = seed;
    }
}

/// Renders the synthetic dataset; returns the ground-truth poses.
#[pyfunction]
fn synth(py: Python<'_>, config: PyRef<'_, PyPipelineConfig>) -> PyResult<Vec<PyPose>> {
    let cfg = config.inner.clone();
    let poses = py.detach(|| pipeline::synth(&cfg)).map_err(runtime_err)?;
    Ok(poses.into_iter().map(|inner| PyPose { inner }).collect())
}

/// Runs every stage; returns the report as a JSON string.
#[pyfunction]
fn run_all(py: Python<'_>, config: PyRef<'_, PyPipelineConfig>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py.detach(|| pipeline::run_all(&cfg)).map_err(runtime_err)?;
    serde_json::to_string(&report).map_err(runtime_err)
}

#[pymodule(name = "rgbd_recon")]
fn rgbd_recon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_function(wrap_pyfunction!(py_compute_odometry, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_pose_graph, m)?)?;
    m.add_function(wrap_pyfunction!(fragment_count, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
