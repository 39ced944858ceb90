//! facefit: multi-view blendshape head tracking and evaluation.
//!
//! The crate fits a blendshape head model (identity + expression bases,
//! linear blend skinning, optional static per-vertex deformations) jointly
//! across frames and cameras against probabilistic 2D vertex alignments,
//! and ships the matching evaluation tools: a screen-space motion error
//! benchmark built on software flow rasterization, and keypoint+ICP aligned
//! scan-to-mesh chamfer distance.
//!
//! Start with the runnable examples (`cargo run --example fit_synthetic`)
//! or the `facefit` binary for file-based pipelines.

pub mod bvh;
pub mod camera;
pub mod config;
pub mod energy;
pub mod error;
pub mod fit;
pub mod gradient;
pub mod model;
pub mod procedural;
pub mod recon;
pub mod rotation;
pub mod ssme;
pub mod synth;
pub mod tracking;

pub use bvh::{closest_point_on_triangle, exhaustive_closest_point, ClosestHit, TriangleBvh};
pub use camera::{project, transform_points, Camera, Projection, RigidTransform};
pub use error::{Error, Result};
pub use config::{load_config, EnergyConfig};
pub use energy::{total_energy, EnergyBreakdown};
pub use fit::{default_init, fit, ConvergenceReason, FitReport, IterationStats};
pub use gradient::{gradient, gradient_check, GradCheckReport, ParamLayout};
pub use model::{
    apply_lbs, evaluate_model, neutral_vertices, BlendshapeModel, ModelParams, Region, VertexSet,
};
pub use recon::{
    align_and_measure, chamfer_scan_to_mesh, icp_refine, procrustes_rigid, ChamferDirection,
    ChamferStats, IcpOptions, IcpResult, TriangleMesh,
};
pub use ssme::{
    epe, rasterize_flow, ssme_aggregate, ssme_h, ssme_report, temporal_gaussian_filter, FlowField,
    RegionKey, ScreenMesh, SsmeOptions, SsmeReport,
};
pub use synth::{generate_sequence, perturb_params, MotionModel, SigmaMode, SynthSpec};
pub use tracking::{AlignmentObservation, MeshSequence, SequenceDataset, TrackingParams};
