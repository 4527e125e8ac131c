//! End-to-end reconstruction: windowed fragments, fragment registration,
//! global optimization and the on-disk stages driving them.

mod config;
mod fragment;
mod global;
mod icp;
mod run;

use thiserror::Error;

pub use config::{PipelineConfig, SynthConfig};
pub use fragment::{build_fragment, fragment_count, local_registration, window_ranges, FragmentBuild, FragmentSet};
pub use global::{global_registration, integrate_fragments, register_fragment_pairs, GlobalResult};
pub use icp::{register_fragment_pair, FragmentPairResult, IcpResult, MIN_ICP_POINTS, NO_OVERLAP_FITNESS};
pub use run::{
    integrate, make_fragments, register_fragments, run_all, synth, Report, FRAGMENTS_DIR, FRAGMENTS_STATE,
    GLOBAL_GRAPH_FILE, GROUNDTRUTH_FILE, REGISTRATION_FILE, REPORT_FILE, SCENE_FILE, TRAJECTORY_FILE,
};

use crate::cloud::CloudError;
use crate::ingest::IngestError;
use crate::posegraph::PoseGraphError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("odometry between frames {s} and {t} failed: {reason}")]
    OdometryChainBroken { s: usize, t: usize, reason: String },
    #[error("fragment registration needs at least {MIN_ICP_POINTS} points, fragment {fragment} has {have}")]
    TooSparse { fragment: usize, have: usize },
    #[error("{stage}: {source}")]
    Ingest {
        stage: &'static str,
        #[source]
        source: IngestError,
    },
    #[error("{stage}: {source}")]
    Cloud {
        stage: &'static str,
        #[source]
        source: CloudError,
    },
    #[error("{stage}: {source}")]
    PoseGraph {
        stage: &'static str,
        #[source]
        source: PoseGraphError,
    },
    #[error("{stage}: cannot read or write {path}: {message}")]
    Io {
        stage: &'static str,
        path: String,
        message: String,
    },
}
