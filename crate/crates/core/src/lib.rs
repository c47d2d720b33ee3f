//! Real-time controllable head avatars built from mesh-anchored hash-table
//! blendshapes.
//!
//! A parametric head mesh carries small multi-resolution hash tables on a
//! subset of its vertices. Per expression, a UV-space convolutional network
//! predicts blend weights that linearly merge each vertex's tables; a tiny MLP
//! decodes the merged embeddings of a query point's nearest vertices into
//! colour and density, which are volume rendered.

pub mod error;
pub mod autodiff;
pub mod avatar;
pub mod conv;
pub mod gradcheck;
pub mod hash_blendshapes;
pub mod knn_search;
pub mod metrics_io;
pub mod mlp;
pub mod param_mesh;
pub mod radiance_field;
pub mod trainer;
pub mod uv_net;
pub mod volume_renderer;

pub use avatar::{Avatar, AvatarConfig};
pub use error::{Error, Result};
pub use knn_search::KnnMode;
pub use param_mesh::{ExpressionInput, ParametricHeadModel};
pub use trainer::{TrainConfig, TrainState};
pub use volume_renderer::{Camera, RenderOptions, RgbImage, SamplingPlan};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
