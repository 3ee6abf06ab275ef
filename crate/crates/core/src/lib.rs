//! Global localization against an object map.
//!
//! Map and query objects are ellipsoids with a class label and an optional
//! text embedding. The pipeline builds semantic graphs over both sets,
//! describes every object with a histogram of class walks, mixes that with
//! embedding cosine similarity, proposes correspondences, keeps mutually
//! consistent groups as maximal cliques of a compatibility graph and fits a
//! weighted rigid transform to each group.
//!
//! ```
//! use cliqueloc::{generate_scene, localize, PipelineConfig, SceneSpec};
//!
//! let scene = generate_scene(&SceneSpec::noiseless(20, 1)).unwrap();
//! let loc = localize(&scene.map, &scene.observation, Some(&scene.embeddings), &PipelineConfig::default()).unwrap();
//! let err = (loc.best().pose.translation() - scene.pose.translation()).norm();
//! assert!(err < 1e-6);
//! ```

pub mod baselines;
pub mod descriptors;
pub mod error;
pub mod harness;
pub mod inlier;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod pose;
pub mod scene;

pub use descriptors::{EmbeddingTable, HybridScore, SemanticGraph, SemanticHistogram, WalkMode};
pub use error::{Error, Result};
pub use harness::{generate_scene, EvalReport, SceneSpec, SyntheticScene};
pub use inlier::{CliqueHypothesis, CompatibilityGraph};
pub use matching::{Correspondence, MatchingConfig, MatchingStrategy, SimilarityMatrix};
pub use pipeline::{localize, Extractor, Localization, PipelineConfig};
pub use pose::{PoseEstimate, WeightMode};
pub use scene::{fit_ellipsoid, EllipsoidLandmark, ObjectMap, ObservationSet, Pose};
