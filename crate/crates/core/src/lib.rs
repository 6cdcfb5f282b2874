//! Decomposition of aligned face-image pairs into albedo, shading, normal and
//! 9-dimensional spherical-harmonic lighting under the Lambertian model, plus
//! the downstream uses of the recovered components: relighting, light
//! transfer, de-lighting, Poisson compositing and evaluation metrics.
//!
//! The decomposition minimizes a hierarchical energy in two stages: first
//! albedo/shading from the image pair, then normal/lighting from the shading,
//! followed by a light-refinement and joint-polish phase.

pub mod decompose;
pub mod energy;
pub mod error;
pub mod grid;
pub mod io;
pub mod lambertian;
pub mod metrics;
pub mod poisson;
pub mod sh;
pub mod synth;

pub use decompose::{
    decompose_pair, init_state, relight, stage_asd, stage_nld, transfer_light,
    DecompositionResult, DecompositionState, Member, NldPhase, PairInput, SolverConfig,
    SolverTrace, TraceRow,
};
pub use energy::{DetachMode, LightTargets, LossWeights, Phase, StateGrad, TermValues};
pub use error::{Error, Result};
pub use grid::{AlbedoMap, Image, Mask, NormalMap, ShadingMap};
pub use lambertian::{decode_normal_map, delight, encode_normal_map, recompose, render, Delighted};
pub use metrics::{angular_error_stats, kmeans_lights, light_classification_accuracy, mae, rmse, AngularStats};
pub use poisson::poisson_blend;
pub use sh::{eval_shading, sh_basis, solve_light_lsq, LightSolution, ShBasis, ShCoefficients};
