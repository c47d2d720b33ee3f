//! Shared fixtures for the criterion benchmarks.

use avatar_core::knn_search::bench_scene;
use avatar_core::param_mesh::{make_synthetic_model, with_anchor_count, DEFAULT_ANCHOR_COUNT};
use avatar_core::{Avatar, AvatarConfig, Result, Vec3};

/// Surface-proximal queries and the standard 1772 anchors of a 5023-vertex head.
pub fn knn_scene(queries: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    bench_scene(5023, DEFAULT_ANCHOR_COUNT, queries, seed)
}

/// Untrained toy-sized avatar: 1000 vertices, 300 anchors, 8 expression
/// coefficients, desk network sizes.
pub fn toy_avatar(seed: u64, blendshapes: usize) -> Result<Avatar> {
    let model = with_anchor_count(make_synthetic_model(seed, 1000, 8)?, 300)?;
    Avatar::new(model, AvatarConfig::desk(blendshapes, 1), seed)
}
