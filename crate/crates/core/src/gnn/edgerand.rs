//! EdgeRand baseline: Gaussian noise added straight to the adjacency
//! matrices, once per graph, before training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::model::GraphInput;
use crate::error::{Error, Result};
use crate::graph_pipeline::BehaviorGraph;
use crate::privacy_accountant::PrivacySpec;

/// Budget for EdgeRand: one released adjacency pair with edge-count
/// sensitivity 1, so `T = 1` and `C = 1` in the accountant.
pub fn edgerand_spec(epsilon1: f64, epsilon2: f64, delta: f64) -> Result<PrivacySpec> {
    PrivacySpec::calibrated(epsilon1, epsilon2, delta, 1, 1.0)
}

/// `a_out + N(0, σ²)` and `a_in + N(0, σ²)` with independent draws.
pub fn edgerand_perturb<R: Rng + ?Sized>(graph: &BehaviorGraph, spec: &PrivacySpec, rng: &mut R) -> Result<GraphInput> {
    let mut input = GraphInput::from(graph);
    if spec.sigma == 0.0 {
        return Ok(input);
    }
    let normal = Normal::new(0.0, spec.sigma)
        .map_err(|e| Error::InvalidParameter(format!("EdgeRand sigma {}: {e}", spec.sigma)))?;
    input.a_out.mapv_inplace(|v| v + normal.sample(rng));
    input.a_in.mapv_inplace(|v| v + normal.sample(rng));
    Ok(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_pipeline::build_graph_from_indices;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_with_sigma(sigma: f64) -> PrivacySpec {
        PrivacySpec { epsilon1: 20.0, epsilon2: 5.0, delta: 1e-5, steps: 1, embed_norm: 1.0, sigma }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let g = build_graph_from_indices(&[0, 1, 2, 1, 0]).unwrap();
        let out = edgerand_perturb(&g, &spec_with_sigma(0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, GraphInput::from(&g));
    }

    #[test]
    fn zero_graph_gets_unit_variance_noise() {
        let seq: Vec<usize> = (0..320).collect();
        let mut g = build_graph_from_indices(&seq).unwrap();
        g.a_out.fill(0);
        g.a_in.fill(0);
        let out = edgerand_perturb(&g, &spec_with_sigma(1.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for m in [&out.a_out, &out.a_in] {
            let n = m.len() as f64;
            let mean = m.sum() / n;
            let var = m.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
            assert!((var - 1.0).abs() < 0.05, "{var}");
        }
    }

    #[test]
    fn noise_breaks_transpose_relation() {
        let g = build_graph_from_indices(&[0, 1, 2, 0]).unwrap();
        let out = edgerand_perturb(&g, &spec_with_sigma(1.0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_ne!(out.a_in, out.a_out.t());
    }

    #[test]
    fn spec_calibrated_with_unit_sensitivity() {
        let spec = edgerand_spec(20.0, 5.0, 1e-5).unwrap();
        assert!((spec.sigma - 1.0545338152895137).abs() < 1e-12);
        assert_eq!(spec.steps, 1);
    }
}
