//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbd_recon::cloud::{decode_pcd, encode_pcd, read_pcd, transform_cloud, voxel_downsample, PcdEncoding, PointCloud};
use rgbd_recon::geometry::{pose_error, Mat6, Pose, Twist, Vec3};
use rgbd_recon::ingest::{default_intrinsics, SyntheticScene};
use rgbd_recon::odometry::{AlignmentProblem, OdometryParams};
use rgbd_recon::pipeline::{
    fragment_count, local_registration, register_fragment_pair, run_all, synth, PipelineConfig, SCENE_FILE,
    TRAJECTORY_FILE,
};
use rgbd_recon::posegraph::{optimize, Edge, OptimizeParams, PoseGraph};

const COUNT_LAW_MAX_M: usize = 64;
const COUNT_LAW_BUDGET: Duration = Duration::from_secs(60);

const E2E_FRAMES: usize = 60;
const E2E_N: usize = 15;
const E2E_MAX_TRANSLATION: f64 = 5e-3;
const E2E_MAX_ROTATION_DEG: f64 = 0.5;
const E2E_MAX_SURFACE_RMS: f64 = 0.05;
const E2E_BUDGET: Duration = Duration::from_secs(300);

const JACOBIAN_FD_STEP: f64 = 1e-6;
const JACOBIAN_MAX_REL_ERROR: f64 = 1e-4;
const JACOBIAN_PIXELS: usize = 100;
const JACOBIAN_STATES: usize = 20;

const GRAPH_COUNT: usize = 20;
const GRAPH_POSE_TOL: f64 = 1e-6;
const GRAPH_PRUNE_WEIGHT: f64 = 0.25;

const ICP_POINTS: usize = 10_000;
const ICP_MAX_TRANSLATION: f64 = 1e-3;
const ICP_MAX_ROTATION_DEG: f64 = 0.1;
const ICP_MIN_FITNESS: f64 = 0.99;

const VOXEL_ORACLE_POINTS: usize = 1000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fragment_count_law() -> Outcome {
    let start = Instant::now();
    let scene = SyntheticScene::from_seed(3);
    let k = default_intrinsics(8, 8);
    let frame = scene.render(1, &Pose::identity(), &k);
    let nodes: Vec<_> = (1..=240)
        .map(|i| {
            let mut n = frame.clone();
            n.index = i;
            n
        })
        .collect();
    let mut cfg = PipelineConfig::default();
    cfg.odometry.pyramid_levels = 1;
    let mut checked = 0;
    for m in 2..=COUNT_LAW_MAX_M {
        for n in 2..=m {
            cfg.n = n;
            let set = local_registration(&nodes[..m], &k, &cfg).map_err(|e| format!("M={m} N={n}: {e}"))?;
            if set.len() != m.div_ceil(n) || set.len() != fragment_count(m, n) {
                return Err(format!("M={m} N={n}: {} fragments", set.len()));
            }
            checked += 1;
        }
    }
    for (n, want) in [(60, 4), (50, 5)] {
        cfg.n = n;
        let set = local_registration(&nodes, &k, &cfg).map_err(|e| e.to_string())?;
        if set.len() != want {
            return Err(format!("M=240 N={n}: {} fragments, expected {want}", set.len()));
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < COUNT_LAW_BUDGET,
        format!("{checked} (M, N) pairs plus M=240 with N=60 -> 4, N=50 -> 5 in {:.1}s", elapsed.as_secs_f64()),
    )
}

struct E2eRun {
    scene_pcd: Vec<u8>,
}

fn e2e_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.ingest.dataset_root = dir.join("dataset");
    cfg.output_dir = dir.join("output");
    cfg.n = E2E_N;
    cfg.synth.frames = E2E_FRAMES;
    cfg
}

fn trajectory_recovery(run: &mut Option<E2eRun>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = e2e_config(dir.path());
    let truth = synth(&cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = run_all(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let text = std::fs::read_to_string(cfg.output_dir.join(TRAJECTORY_FILE)).map_err(|e| e.to_string())?;
    let to_first = truth[0].inverse();
    let (mut worst_t, mut worst_r, mut frames) = (0.0f64, 0.0f64, 0);
    for line in text.lines() {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let pose = Pose::from_row_major(&v[1..]).map_err(|e| e.to_string())?;
        let expected = to_first.compose(&truth[v[0] as usize - 1]);
        let (dt, dr) = pose_error(&pose, &expected);
        worst_t = worst_t.max(dt);
        worst_r = worst_r.max(dr.to_degrees());
        frames += 1;
    }
    let scene_path = cfg.output_dir.join(SCENE_FILE);
    let scene_cloud = read_pcd(&scene_path).map_err(|e| e.to_string())?;
    let room = SyntheticScene::from_seed(cfg.synth.seed);
    let rms = (scene_cloud
        .positions()
        .iter()
        .map(|p| room.distance_to_surface(&truth[0].apply(p)).powi(2))
        .sum::<f64>()
        / scene_cloud.len() as f64)
        .sqrt();
    *run = Some(E2eRun {
        scene_pcd: std::fs::read(&scene_path).map_err(|e| e.to_string())?,
    });
    check(
        frames == E2E_FRAMES
            && report.k == 4
            && worst_t < E2E_MAX_TRANSLATION
            && worst_r < E2E_MAX_ROTATION_DEG
            && rms < E2E_MAX_SURFACE_RMS
            && elapsed < E2E_BUDGET,
        format!(
            "{frames} frames, K={}, worst {:.2} mm / {:.4} deg, scene RMS {:.4} m over {} points, {:.1}s",
            report.k,
            worst_t * 1e3,
            worst_r,
            rms,
            scene_cloud.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn relative_error(analytic: &[f64; 6], numeric: &[f64; 6]) -> f64 {
    let diff = (0..6).map(|i| (analytic[i] - numeric[i]).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Pixels whose warped position lies this close to a pixel-grid line are
/// skipped: there the bilinear interpolant has a kink and a central
/// difference straddles it.
const GRID_MARGIN: f64 = 1e-3;

fn odometry_jacobian() -> Outcome {
    let k = default_intrinsics(160, 120);
    let scene = SyntheticScene::from_seed(5);
    let xs = Pose::from_translation(Vec3::new(0.05, 0.0, 0.2));
    let xt = xs.compose(&Pose::from_translation(Vec3::new(0.01, -0.005, 0.01)).compose(&Pose::rot_y(0.01)));
    let (s, t) = (scene.render(1, &xs, &k), scene.render(2, &xt, &k));
    let problem = AlignmentProblem::new(&s, &t, &k, &OdometryParams::default()).map_err(|e| e.to_string())?;
    let base = xt.inverse().compose(&xs);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut samples) = (0.0f64, 0usize);
    for state in 0..JACOBIAN_STATES {
        let xi: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.01..0.01));
        let g = Pose::exp(&Twist::from_slice(&xi)).compose(&base);
        let mut got = 0;
        let mut attempts = 0;
        while got < JACOBIAN_PIXELS {
            attempts += 1;
            if attempts > 100 * JACOBIAN_PIXELS {
                return Err(format!("state {state}: only {got} usable pixels"));
            }
            let i = rng.gen_range(0..problem.source_pixel_count(0));
            let Some(r0) = problem.pixel_residual(0, i, &g) else { continue };
            let q = g.apply(&problem.source_point(0, i));
            let (u, v) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
            if (u - u.round()).abs() < GRID_MARGIN || (v - v.round()).abs() < GRID_MARGIN {
                continue;
            }
            let mut photo = [0.0; 6];
            let mut depth = [0.0; 6];
            let mut usable = r0.depth.is_some();
            for d in 0..6 {
                let mut e = [0.0; 6];
                e[d] = JACOBIAN_FD_STEP;
                let plus = Pose::exp(&Twist::from_slice(&e)).compose(&g);
                e[d] = -JACOBIAN_FD_STEP;
                let minus = Pose::exp(&Twist::from_slice(&e)).compose(&g);
                match (problem.pixel_residual(0, i, &plus), problem.pixel_residual(0, i, &minus)) {
                    (Some(a), Some(b)) => {
                        photo[d] = (a.photometric - b.photometric) / (2.0 * JACOBIAN_FD_STEP);
                        match (a.depth, b.depth) {
                            (Some(da), Some(db)) => depth[d] = (da.0 - db.0) / (2.0 * JACOBIAN_FD_STEP),
                            _ => usable = false,
                        }
                    }
                    _ => usable = false,
                }
            }
            if !usable {
                continue;
            }
            let analytic_photo: [f64; 6] = r0.photometric_jacobian.into();
            let analytic_depth: [f64; 6] = r0.depth.unwrap().1.into();
            worst = worst
                .max(relative_error(&analytic_photo, &photo))
                .max(relative_error(&analytic_depth, &depth));
            got += 1;
            samples += 1;
        }
    }
    check(
        worst < JACOBIAN_MAX_REL_ERROR,
        format!("{samples} pixel-states, worst relative error {worst:.2e}"),
    )
}

fn random_step(rng: &mut ChaCha8Rng) -> Pose {
    let xi: [f64; 6] = std::array::from_fn(|i| if i < 3 { rng.gen_range(-0.3..0.3) } else { rng.gen_range(-0.5..0.5) });
    Pose::exp(&Twist::from_slice(&xi))
}

fn pose_graph_optimizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let info = Mat6::identity() * 100.0;
    let params = OptimizeParams::default();
    let (mut worst_clean, mut worst_adv, mut max_weight) = (0.0f64, 0.0f64, 0.0f64);
    for g in 0..GRAPH_COUNT {
        let n = rng.gen_range(5..=20);
        let mut truth = vec![Pose::identity()];
        for i in 1..n {
            truth.push(truth[i - 1].compose(&random_step(&mut rng)));
        }
        let rel = |s: usize, t: usize| truth[s].inverse().compose(&truth[t]);
        let mut edges: Vec<Edge> = (1..n).map(|t| Edge::new(t - 1, t, rel(t - 1, t), info, false)).collect();
        for _ in 0..rng.gen_range(1..=3) {
            let s = rng.gen_range(0..n - 2);
            let t = rng.gen_range(s + 2..n);
            edges.push(Edge::new(s, t, rel(s, t), info, true));
        }
        // start away from the solution
        let init: Vec<Pose> = truth
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 {
                    *p
                } else {
                    let xi: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
                    p.compose(&Pose::exp(&Twist::from_slice(&xi)))
                }
            })
            .collect();
        let graph = PoseGraph::new(init.clone(), edges.clone()).map_err(|e| e.to_string())?;
        let out = optimize(&graph, &params).map_err(|e| format!("graph {g}: {e}"))?;
        for (a, b) in out.graph.nodes.iter().zip(&truth) {
            worst_clean = worst_clean.max((a.to_matrix() - b.to_matrix()).amax());
        }

        let s = rng.gen_range(0..n - 2);
        let t = rng.gen_range(s + 2..n);
        let wrong = rel(s, t).compose(&Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));
        let mut adversarial = edges;
        adversarial.push(Edge::new(s, t, wrong, info, true));
        let graph = PoseGraph::new(init, adversarial).map_err(|e| e.to_string())?;
        let out = optimize(&graph, &params).map_err(|e| format!("graph {g} adversarial: {e}"))?;
        let Some(p) = out.pruned.iter().find(|p| p.edge.s == s && p.edge.t == t && p.edge.measurement == wrong) else {
            return Err(format!("graph {g}: adversarial edge {s}->{t} was not pruned"));
        };
        max_weight = max_weight.max(p.line_process);
        for (a, b) in out.graph.nodes.iter().zip(&truth) {
            worst_adv = worst_adv.max((a.to_matrix() - b.to_matrix()).amax());
        }
    }
    check(
        worst_clean < GRAPH_POSE_TOL && worst_adv < GRAPH_POSE_TOL && max_weight < GRAPH_PRUNE_WEIGHT,
        format!(
            "{GRAPH_COUNT} graphs: clean error {worst_clean:.1e}, adversarial chain error {worst_adv:.1e}, \
             max adversarial weight {max_weight:.1e}"
        ),
    )
}

/// Uniform samples on the inside of the synthetic room box.
fn room_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let scene = SyntheticScene::from_seed(2);
    let (lo, hi) = (scene.room_min, scene.room_max);
    let ext = hi - lo;
    let areas = [ext.y * ext.z, ext.x * ext.z, ext.x * ext.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    while positions.len() < n {
        let mut pick = rng.gen_range(0.0..total);
        let mut wall = 0;
        while pick > 2.0 * areas[wall / 2] && wall < 4 {
            pick -= 2.0 * areas[wall / 2];
            wall += 2;
        }
        let axis = wall / 2;
        let mut p = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        p[axis] = if rng.gen_bool(0.5) { lo[axis] } else { hi[axis] };
        colors.push(scene.albedo(&p));
        positions.push(p);
    }
    PointCloud::new(positions, colors).unwrap()
}

fn icp_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cloud = room_cloud(ICP_POINTS, &mut rng);
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let t0 = Pose::from_translation(dir * rng.gen_range(0.02..0.05))
        .compose(&Pose::from_axis_angle(axis, rng.gen_range(2.0f64..5.0).to_radians()));
    let moved = transform_cloud(&cloud, &t0);
    let r = register_fragment_pair(&cloud, &moved, &Pose::identity(), &PipelineConfig::default())
        .map_err(|e| e.to_string())?;
    let (dt, dr) = pose_error(&r.pose, &t0.inverse());
    check(
        dt < ICP_MAX_TRANSLATION && dr.to_degrees() < ICP_MAX_ROTATION_DEG && r.fitness > ICP_MIN_FITNESS,
        format!(
            "|T0| = {:.1} cm / {:.2} deg; error {:.3} mm / {:.4} deg; fitness {:.4}",
            t0.translation().norm() * 100.0,
            t0.rotation_angle().to_degrees(),
            dt * 1e3,
            dr.to_degrees(),
            r.fitness
        ),
    )
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let positions: Vec<Vec3> =
        (0..VOXEL_ORACLE_POINTS).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-2.0..2.0))).collect();
    let colors: Vec<Vec3> = (0..VOXEL_ORACLE_POINTS).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
    let cloud = PointCloud::new(positions.clone(), colors).unwrap();
    let first = encode_pcd(&cloud, PcdEncoding::Binary);
    let decoded = decode_pcd(&first).map_err(|e| e.to_string())?;
    let second = encode_pcd(&decoded, PcdEncoding::Binary);
    if first != second {
        return Err("binary re-write differs".into());
    }

    let voxel = 0.25;
    let mut bins: HashMap<[i64; 3], (Vec3, usize)> = HashMap::new();
    for p in &positions {
        let key = [0, 1, 2].map(|i| (p[i] / voxel).floor() as i64);
        let e = bins.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let mut expected: Vec<[f64; 3]> = bins.values().map(|(s, n)| (s / *n as f64).into()).collect();
    let mut got: Vec<[f64; 3]> = voxel_downsample(&cloud, voxel).positions().iter().map(|p| (*p).into()).collect();
    let key = |a: &[f64; 3], b: &[f64; 3]| a.partial_cmp(b).unwrap();
    expected.sort_by(key);
    got.sort_by(key);
    let worst = expected
        .iter()
        .zip(&got)
        .map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    check(
        got.len() == expected.len() && worst < 1e-12,
        format!(
            "{} byte PCD re-written identically; {} voxels vs oracle {}, worst centroid diff {worst:.1e}",
            first.len(),
            got.len(),
            expected.len()
        ),
    )
}

fn determinism(first: &Option<E2eRun>) -> Outcome {
    let Some(first) = first else {
        return Err("first pipeline run did not complete".into());
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = e2e_config(dir.path());
    synth(&cfg).map_err(|e| e.to_string())?;
    run_all(&cfg).map_err(|e| e.to_string())?;
    let second = std::fs::read(cfg.output_dir.join(SCENE_FILE)).map_err(|e| e.to_string())?;
    check(
        second == first.scene_pcd,
        format!("scene.pcd {} vs {} bytes", first.scene_pcd.len(), second.len()),
    )
}

fn main() {
    let mut run = None;
    let results = [
        ("fragment-count law", fragment_count_law()),
        ("synthetic trajectory recovery", trajectory_recovery(&mut run)),
        ("odometry jacobian", odometry_jacobian()),
        ("pose-graph optimizer", pose_graph_optimizer()),
        ("icp recovery", icp_recovery()),
        ("serialization", serialization()),
        ("determinism", determinism(&run)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
