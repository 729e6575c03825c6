mod common;

use common::*;
use dipsgnn_core::gnn::model::draw_noise;
use dipsgnn_core::gnn::{forward, ForwardConfig, LossKind, ModelDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn noise_free_forward_matches_reference() {
    let gap = noise_free_gap(50, 11);
    assert!(gap < 1e-10, "max gap {gap:e}");
}

#[test]
fn frozen_noise_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = ModelDims { feature_width: 4, num_items: 9, item_dim: 5, user_dim: 3 };
    for i in 0..20 {
        let params = random_params(dims, 100 + i);
        let graph = random_graph(9, 6, &mut rng);
        let features = random_features(4, &mut rng);
        let noise = draw_noise(graph.node_items.len(), dims.joint_dim(), 0.7, 2, &mut rng);
        let config = ForwardConfig { steps: 2, embed_norm: 1.0, loss: LossKind::Bce };
        let trace = forward(&params, &features, &graph, &noise, &config).unwrap();
        let reference = reference_forward(&params, &features, &graph, &noise, 2, 1.0, 0, LossKind::Bce);
        for (a, b) in trace.logits.iter().zip(&reference.logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((trace.loss(0, LossKind::Bce) - reference.loss).abs() < 1e-10);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for loss in [LossKind::Bce, LossKind::Ce] {
        for steps in [1, 2] {
            for (name, err) in gradient_check(3, steps, loss) {
                assert!(err < 1e-4, "{name} ({loss:?}, T={steps}): relative error {err:e}");
            }
        }
    }
}
