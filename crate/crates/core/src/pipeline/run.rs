use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::global::{integrate_fragments, register_fragment_pairs};
use super::icp::{FragmentPairResult, IcpResult};
use super::{local_registration, FragmentSet, PipelineConfig, PipelineError};
use crate::cloud::{read_pcd, write_pcd, PcdEncoding, PointCloud};
use crate::geometry::{Mat6, Pose};
use crate::ingest::{
    default_intrinsics, default_trajectory, generate_synthetic_sequence, load_intrinsics, load_sequence,
    save_intrinsics, write_frame, INTRINSICS_FILE,
};
use crate::posegraph::{parse_graph_dump, write_graph_dump};

pub const FRAGMENTS_DIR: &str = "fragments";
pub const FRAGMENTS_STATE: &str = "fragments.json";
pub const REGISTRATION_FILE: &str = "registration.json";
pub const SCENE_FILE: &str = "scene.pcd";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const REPORT_FILE: &str = "report.json";
pub const GLOBAL_GRAPH_FILE: &str = "global_graph.txt";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub frames: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub edges_total: usize,
    pub edges_pruned: usize,
    /// Mean ICP fitness over registered fragment pairs; `None` when K = 1.
    pub mean_fitness: Option<f64>,
    pub stage_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FragmentRecord {
    file: String,
    graph_file: String,
    frame_indices: Vec<usize>,
    base_pose: Vec<f64>,
    frame_poses: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FragmentsState {
    frames: usize,
    #[serde(rename = "N")]
    n: usize,
    edges_total: usize,
    edges_pruned: usize,
    seconds: f64,
    fragments: Vec<FragmentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    s: usize,
    t: usize,
    pose: Vec<f64>,
    information: Vec<f64>,
    fitness: f64,
    rmse: f64,
    inliers: usize,
    no_overlap: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistrationState {
    seconds: f64,
    pairs: Vec<PairRecord>,
}

fn io_error(stage: &'static str, path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Io {
        stage,
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_text(stage: &'static str, path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| io_error(stage, path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &'static str, path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(stage, path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(stage, path, e))
}

fn pose_from(stage: &'static str, path: &Path, v: &[f64]) -> Result<Pose, PipelineError> {
    Pose::from_row_major(v).map_err(|e| io_error(stage, path, e))
}

fn ensure_dir(stage: &'static str, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_error(stage, dir, e))
}

fn fragment_file(k: usize) -> String {
    format!("fragment_{k:03}.pcd")
}

/// Loads the dataset, builds the fragments and writes them with their state.
pub fn make_fragments(cfg: &PipelineConfig) -> Result<FragmentSet, PipelineError> {
    let stage = "make-fragments";
    let start = Instant::now();
    cfg.validate()?;
    let nodes = load_sequence(&cfg.ingest).map_err(|source| PipelineError::Ingest { stage, source })?;
    let k = load_intrinsics(cfg.ingest.dataset_root.join(INTRINSICS_FILE))
        .map_err(|source| PipelineError::Ingest { stage, source })?;
    let frags = local_registration(&nodes, &k, cfg)?;
    log::info!("{stage}: {} frames -> {} fragments", nodes.len(), frags.len());

    let dir = cfg.output_dir.join(FRAGMENTS_DIR);
    ensure_dir(stage, &dir)?;
    let mut records = Vec::with_capacity(frags.len());
    for (i, cloud) in frags.fragments.iter().enumerate() {
        let file = fragment_file(i);
        write_pcd(cloud, dir.join(&file), PcdEncoding::Binary).map_err(|source| PipelineError::Cloud { stage, source })?;
        let graph_file = format!("fragment_{i:03}_graph.txt");
        write_text(stage, &dir.join(&graph_file), &write_graph_dump(&frags.graphs[i]))?;
        records.push(FragmentRecord {
            file,
            graph_file,
            frame_indices: frags.frame_indices[i].clone(),
            base_pose: frags.base_poses[i].to_row_major().to_vec(),
            frame_poses: frags.frame_poses[i].iter().map(|p| p.to_row_major().to_vec()).collect(),
        });
    }
    let state = FragmentsState {
        frames: nodes.len(),
        n: cfg.n,
        edges_total: frags.edges_total,
        edges_pruned: frags.edges_pruned,
        seconds: start.elapsed().as_secs_f64(),
        fragments: records,
    };
    let text = serde_json::to_string_pretty(&state).expect("state serializes");
    write_text(stage, &dir.join(FRAGMENTS_STATE), &text)?;
    Ok(frags)
}

fn load_fragments(stage: &'static str, cfg: &PipelineConfig) -> Result<(FragmentsState, FragmentSet), PipelineError> {
    let dir = cfg.output_dir.join(FRAGMENTS_DIR);
    let state_path = dir.join(FRAGMENTS_STATE);
    let state: FragmentsState = read_json(stage, &state_path)?;
    let mut set = FragmentSet {
        fragments: Vec::new(),
        base_poses: Vec::new(),
        frame_indices: Vec::new(),
        frame_poses: Vec::new(),
        graphs: Vec::new(),
        edges_total: state.edges_total,
        edges_pruned: state.edges_pruned,
    };
    for r in &state.fragments {
        let cloud: PointCloud =
            read_pcd(dir.join(&r.file)).map_err(|source| PipelineError::Cloud { stage, source })?;
        set.fragments.push(cloud);
        set.base_poses.push(pose_from(stage, &state_path, &r.base_pose)?);
        set.frame_indices.push(r.frame_indices.clone());
        let poses = r
            .frame_poses
            .iter()
            .map(|p| pose_from(stage, &state_path, p))
            .collect::<Result<Vec<_>, _>>()?;
        set.frame_poses.push(poses);
        let graph_path = dir.join(&r.graph_file);
        let text = fs::read_to_string(&graph_path).map_err(|e| io_error(stage, &graph_path, e))?;
        set.graphs
            .push(parse_graph_dump(&text).map_err(|source| PipelineError::PoseGraph { stage, source })?);
    }
    if set.fragments.is_empty() {
        return Err(io_error(stage, &state_path, "no fragments recorded"));
    }
    Ok((state, set))
}

/// Registers the fragments written by `make_fragments`.
pub fn register_fragments(cfg: &PipelineConfig) -> Result<Vec<FragmentPairResult>, PipelineError> {
    let stage = "register-fragments";
    let start = Instant::now();
    cfg.validate()?;
    let (_, frags) = load_fragments(stage, cfg)?;
    let pairs = register_fragment_pairs(&frags, cfg)?;
    let state = RegistrationState {
        seconds: start.elapsed().as_secs_f64(),
        pairs: pairs
            .iter()
            .map(|p| PairRecord {
                s: p.s,
                t: p.t,
                pose: p.icp.pose.to_row_major().to_vec(),
                information: p.icp.information.transpose().iter().copied().collect(),
                fitness: p.icp.fitness,
                rmse: p.icp.rmse,
                inliers: p.icp.inliers,
                no_overlap: p.icp.no_overlap,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&state).expect("registration serializes");
    write_text(stage, &cfg.output_dir.join(REGISTRATION_FILE), &text)?;
    Ok(pairs)
}

/// Optimizes the fragment graph and writes the scene, trajectory and report.
pub fn integrate(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let stage = "integrate";
    let start = Instant::now();
    cfg.validate()?;
    let (state, frags) = load_fragments(stage, cfg)?;
    let reg_path = cfg.output_dir.join(REGISTRATION_FILE);
    let reg: RegistrationState = read_json(stage, &reg_path)?;
    let mut pairs = Vec::with_capacity(reg.pairs.len());
    for p in &reg.pairs {
        if p.information.len() != 36 || p.s >= p.t || p.t >= frags.len() {
            return Err(io_error(stage, &reg_path, format!("malformed pair record {}->{}", p.s, p.t)));
        }
        pairs.push(FragmentPairResult {
            s: p.s,
            t: p.t,
            icp: IcpResult {
                pose: pose_from(stage, &reg_path, &p.pose)?,
                information: Mat6::from_row_slice(&p.information),
                fitness: p.fitness,
                rmse: p.rmse,
                inliers: p.inliers,
                no_overlap: p.no_overlap,
            },
        });
    }
    let global = integrate_fragments(&frags, &pairs, cfg)?;

    write_pcd(&global.cloud, cfg.output_dir.join(SCENE_FILE), PcdEncoding::Binary)
        .map_err(|source| PipelineError::Cloud { stage, source })?;
    let mut trajectory = String::new();
    for (f, fragment_pose) in global.fragment_poses.iter().enumerate() {
        for (index, local) in frags.frame_indices[f].iter().zip(&frags.frame_poses[f]) {
            let world = fragment_pose.compose(local);
            writeln!(trajectory, "{index} {}", world.format_row_major()).unwrap();
        }
    }
    write_text(stage, &cfg.output_dir.join(TRAJECTORY_FILE), &trajectory)?;
    write_text(stage, &cfg.output_dir.join(GLOBAL_GRAPH_FILE), &write_graph_dump(&global.graph))?;

    let mean_fitness = (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.icp.fitness).sum::<f64>() / pairs.len() as f64);
    let mut stage_seconds = BTreeMap::new();
    stage_seconds.insert("make-fragments".to_string(), state.seconds);
    stage_seconds.insert("register-fragments".to_string(), reg.seconds);
    stage_seconds.insert(stage.to_string(), start.elapsed().as_secs_f64());
    let report = Report {
        frames: state.frames,
        n: state.n,
        k: frags.len(),
        edges_total: state.edges_total + global.edges_total,
        edges_pruned: state.edges_pruned + global.edges_pruned,
        mean_fitness,
        stage_seconds,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(stage, &cfg.output_dir.join(REPORT_FILE), &text)?;
    Ok(report)
}

/// All three stages in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    make_fragments(cfg)?;
    register_fragments(cfg)?;
    integrate(cfg)
}

/// Renders the synthetic room sequence described by `cfg.synth` into
/// `cfg.ingest.dataset_root`, with camera-to-world ground truth in
/// `groundtruth.txt` (frame index followed by 16 row-major values).
pub fn synth(cfg: &PipelineConfig) -> Result<Vec<Pose>, PipelineError> {
    let stage = "synth";
    cfg.validate()?;
    let s = &cfg.synth;
    let k = default_intrinsics(s.width, s.height);
    let trajectory = default_trajectory(s.frames);
    let (nodes, truth) =
        generate_synthetic_sequence(s.seed, &trajectory, &k).map_err(|source| PipelineError::Ingest { stage, source })?;
    let root = &cfg.ingest.dataset_root;
    ensure_dir(stage, root)?;
    save_intrinsics(&k, root.join(INTRINSICS_FILE)).map_err(|source| PipelineError::Ingest { stage, source })?;
    for node in &nodes {
        write_frame(root, node, cfg.ingest.depth_scale).map_err(|source| PipelineError::Ingest { stage, source })?;
    }
    let mut gt = String::new();
    for (node, pose) in nodes.iter().zip(&truth) {
        writeln!(gt, "{} {}", node.index, pose.format_row_major()).unwrap();
    }
    write_text(stage, &root.join(GROUNDTRUTH_FILE), &gt)?;
    Ok(truth)
}
