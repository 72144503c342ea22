use vprmine_core::evaluation::*;
use vprmine_core::mining::{mine, MiningConfig, TupleStatus};
use vprmine_core::simulator::{generate, TrajectoryKind, WorldConfig};
use vprmine_core::training::{train, EmbeddingHead, TrainConfig};

fn experiment(sig_dims: usize, dim: usize, scale: f64, noise: f64, lr: f64, epochs: usize, seed: u64) {
    let cell = 1.0;
    let radius = 0.8;
    let base = WorldConfig {
        trajectory: TrajectoryKind::Loop,
        keyframes: 160,
        descriptor_dim: dim,
        signature_dims: sig_dims,
        signature_scale: scale,
        descriptor_noise: noise,
        cell_size: cell,
        revisit_radius: radius,
        ..WorldConfig::default()
    };
    let train_world = generate(&WorldConfig { seed, ..base }).unwrap();
    let heldout = generate(&WorldConfig { seed: seed + 1000, ..base }).unwrap();

    let (tuples, _, _, _, _) = mine(
        &train_world.descriptors, &train_world.observations, &train_world.odometry,
        &MiningConfig::default()).unwrap();
    let inliers: Vec<_> = tuples.iter().filter(|t| t.status == TupleStatus::Inlier).cloned().collect();

    let identity = EmbeddingHead::identity(dim);
    let cfg = TrainConfig { learning_rate: lr, epochs, ..TrainConfig::default() };
    let (tuned, _) = train(&identity, &inliers, &train_world.descriptors, &cfg).unwrap();

    let ctx = EvalContext {
        descriptors: &heldout.descriptors,
        observations: &heldout.observations,
        ground_truth: &heldout.ground_truth,
        odometry: Some(&heldout.odometry),
    };
    let ecfg = EvalConfig { radius, ..EvalConfig::default() };
    let tuned_store = embed_store(&tuned, &heldout.descriptors).unwrap();
    let grid = shared_threshold_grid(&[&heldout.descriptors, &tuned_store], ecfg.window, 50).unwrap();
    let cm_raw = correct_match_percentage(&ctx, None, &grid, &ecfg).unwrap();
    let cm_tuned = correct_match_percentage(&ctx, Some(&tuned), &grid, &ecfg).unwrap();
    let sep_raw = separation_stats(&identity, &inliers, &train_world.descriptors).unwrap();
    let sep_tuned = separation_stats(&tuned, &inliers, &train_world.descriptors).unwrap();
    let filter = GeometricFilter::compute(&ctx, &ecfg).unwrap();
    let pr_raw = pr_sweep_with_filter(&ctx, None, &grid, &filter, &ecfg).unwrap();
    let pr_tuned = pr_sweep_with_filter(&ctx, Some(&tuned), &grid, &filter, &ecfg).unwrap();
    let dominates = pr_tuned.weakly_dominates(&pr_raw);
    println!("Dp={sig_dims}/{dim} s={scale} n={noise} lr={lr} ep={epochs} seed={seed}: cm {:.2}->{:.2} ({}) | pos {:.4}->{:.4} ({}) | neg {:.4}->{:.4} | gap {:.4}->{:.4} | dominates {}",
        cm_raw.percentage, cm_tuned.percentage, if cm_tuned.percentage > cm_raw.percentage {"OK"} else {"XX"},
        sep_raw.mean_positive, sep_tuned.mean_positive, if sep_tuned.mean_positive < sep_raw.mean_positive {"OK"} else {"XX"},
        sep_raw.mean_negative, sep_tuned.mean_negative,
        sep_raw.gap, sep_tuned.gap, if dominates {"OK"} else {"XX"});
}

#[test]
fn scratch_improvement() {
    for seed in [100u64, 101, 102, 103, 104] {
        experiment(4, 32, 0.22, 0.05, 0.01, 30, seed);
    }
    println!();
    for seed in [100u64, 101, 102, 103, 104] {
        experiment(8, 32, 0.15, 0.05, 0.01, 30, seed);
    }
    println!();
    for seed in [100u64, 101, 102, 103, 104] {
        experiment(8, 32, 0.15, 0.05, 0.005, 15, seed);
    }
}
