//! End-to-end use of the public API on the tiny scene.

use avatar_core::knn_search::{bench_scene, brute_force_knn, hierarchical_knn};
use avatar_core::metrics_io::{checkpoint_from_bytes, checkpoint_to_bytes, masked_psnr};
use avatar_core::trainer::{avatar_for, evaluate_heldout, generate_synthetic_dataset, train, DatasetConfig};
use avatar_core::volume_renderer::render_avatar;
use avatar_core::{ExpressionInput, KnnMode, RenderOptions, SamplingPlan, TrainConfig, TrainState};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        rays_per_image: 32,
        images_per_batch: 2,
        plan: SamplingPlan {
            n_coarse: 8,
            n_fine: 8,
            jitter: true,
        },
        elastic_samples: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_steps_are_finite_and_resumable() {
    let ds = generate_synthetic_dataset(&DatasetConfig::tiny(3)).unwrap();
    let config = tiny_config();
    let mut a = TrainState::new(avatar_for(&ds, 2, 3).unwrap(), 3);
    let logs = train(&mut a, &config, &ds, 6, |_| {}).unwrap();
    assert_eq!(logs.len(), 6);
    assert!(logs.iter().all(|l| l.loss.total.is_finite()));

    let mut b = checkpoint_from_bytes(&checkpoint_to_bytes(&a), None).unwrap();
    train(&mut a, &config, &ds, 3, |_| {}).unwrap();
    train(&mut b, &config, &ds, 3, |_| {}).unwrap();
    assert_eq!(a.step, 9);
    assert_eq!(checkpoint_to_bytes(&a), checkpoint_to_bytes(&b));
}

#[test]
fn render_is_deterministic_and_in_range() {
    let ds = generate_synthetic_dataset(&DatasetConfig::tiny(5)).unwrap();
    let avatar = avatar_for(&ds, 2, 5).unwrap();
    let expr = ExpressionInput::neutral(&ds.model);
    let cam = &ds.heldout_cameras[0];
    let opts = RenderOptions::default();
    let a = render_avatar(&avatar, &expr, cam, &opts, KnnMode::Exact, None).unwrap();
    let b = render_avatar(&avatar, &expr, cam, &opts, KnnMode::Exact, None).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.image.data.len(), cam.width * cam.height);
    assert!(a.image.data.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.transmittance.iter().all(|t| (0.0..=1.0).contains(t)));

    let ones = vec![1.0; cam.width * cam.height];
    assert_eq!(masked_psnr(&a.image, &b.image, &ones).unwrap(), 99.0);
    let report = evaluate_heldout(&avatar, &ds, KnnMode::Exact).unwrap();
    assert!(report.psnr.is_finite() && (0.0..=1.0).contains(&report.ssim));
}

#[test]
fn hierarchical_knn_matches_brute_force_with_full_candidates() {
    let (queries, anchors) = bench_scene(600, 120, 2000, 11).unwrap();
    let exact = brute_force_knn(&queries, &anchors, 3).unwrap();
    let full = hierarchical_knn(&queries, &anchors, 16, anchors.len(), 3).unwrap();
    assert_eq!(full.recall_against(&exact), 1.0);
    let pruned = hierarchical_knn(&queries, &anchors, 16, 12, 3).unwrap();
    assert!(pruned.recall_against(&exact) > 0.9);
}
