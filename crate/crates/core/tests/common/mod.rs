//! Dense loop-based reference model shared by the integration tests. Written
//! against the model equations directly; no ndarray arithmetic.

#![allow(dead_code)]

use dipsgnn_core::gnn::{GraphInput, LossKind, ModelDims, ModelParams, StepNoise};
use dipsgnn_core::graph_pipeline::build_graph_from_indices;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn to_vec(a: &Array1<f64>) -> Vec<f64> {
    a.to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

/// `M · v` for a matrix stored out × in.
fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for row in m.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub struct Reference {
    pub z_user: Vec<f64>,
    pub logits: Vec<f64>,
    pub final_items: Mat,
    pub loss: f64,
}

/// Forward pass and loss for one graph. `noise` is one `(out, in)` pair per
/// step, or empty.
pub fn reference_forward(
    p: &ModelParams,
    features: &[f64],
    graph: &GraphInput,
    noise: &[StepNoise],
    steps: usize,
    embed_norm: f64,
    label: usize,
    loss: LossKind,
) -> Reference {
    let d = p.dims.item_dim;
    let du = p.dims.user_dim;
    let n = graph.node_items.len();

    let eu = to_mat(&p.user_embed);
    let user: Vec<f64> = (0..du).map(|j| (0..features.len()).map(|i| features[i] * eu[i][j]).sum()).collect();
    let ev = to_mat(&p.item_embed);
    let mut items: Mat = graph.node_items.iter().map(|&i| ev[i].clone()).collect();
    let a_out = to_mat(&graph.a_out);
    let a_in = to_mat(&graph.a_in);

    for t in 0..steps {
        // Joint rows rescaled to norm C.
        let mut h: Mat = items.iter().map(|r| r.iter().chain(&user).copied().collect()).collect();
        for row in h.iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v = if norm > 0.0 { *v * embed_norm / norm } else { 0.0 };
            }
        }
        let mut p_out = matmul(&a_out, &h);
        let mut p_in = matmul(&a_in, &h);
        if let Some(s) = noise.get(t) {
            for i in 0..n {
                for j in 0..d + du {
                    p_out[i][j] += s.out[[i, j]];
                    p_in[i][j] += s.inc[[i, j]];
                }
            }
        }
        let mut x_out = matmul(&p_out, &to_mat(&p.w_out));
        add_bias(&mut x_out, p.b_out.as_slice().unwrap());
        let mut x_in = matmul(&p_in, &to_mat(&p.w_in));
        add_bias(&mut x_in, p.b_in.as_slice().unwrap());
        let a: Mat = (0..n).map(|i| x_out[i].iter().chain(&x_in[i]).copied().collect()).collect();

        let gate = |w: &Array2<f64>, u: &Array2<f64>, b: &Array1<f64>, e: &Mat| {
            let mut g = matmul(&a, &to_mat(w));
            let ue = matmul(e, &to_mat(u));
            for i in 0..n {
                for j in 0..d {
                    g[i][j] += ue[i][j] + b[j];
                }
            }
            g
        };
        let z: Mat = gate(&p.w_update, &p.u_update, &p.b_update, &items).into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect();
        let r: Mat = gate(&p.w_reset, &p.u_reset, &p.b_reset, &items).into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect();
        let re: Mat = (0..n).map(|i| (0..d).map(|j| r[i][j] * items[i][j]).collect()).collect();
        let cand: Mat = gate(&p.w_cand, &p.u_cand, &p.b_cand, &re).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
        items = (0..n).map(|i| (0..d).map(|j| (1.0 - z[i][j]) * items[i][j] + z[i][j] * cand[i][j]).collect()).collect();
    }

    // Readout.
    let seq: Mat = graph.positions.iter().map(|&pos| items[pos].clone()).collect();
    let last = seq.last().unwrap().clone();
    let w1_last = matvec(&to_mat(&p.w1), &last);
    let w2 = to_mat(&p.w2);
    let mut z_global = vec![0.0; d];
    for row in &seq {
        let w2_row = matvec(&w2, row);
        let alpha: f64 = (0..d).map(|j| p.q[j] * sigmoid(w1_last[j] + w2_row[j] + p.c[j])).sum();
        for j in 0..d {
            z_global[j] += alpha * row[j];
        }
    }
    let concat: Vec<f64> = z_global.iter().chain(&last).chain(&user).copied().collect();
    let z_user = matvec(&to_mat(&p.w3), &concat);
    let logits = matvec(&ev, &z_user);

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| (v - max).exp() / total).collect();
    let ce = -probs[label].ln();
    let loss = match loss {
        LossKind::Ce => ce,
        LossKind::Bce => ce - probs.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, q)| (1.0 - q).ln()).sum::<f64>(),
    };
    Reference { z_user, logits, final_items: items, loss }
}

pub fn random_params(dims: ModelDims, seed: u64) -> ModelParams {
    ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Count graph of a random sequence over `items`, possibly with repeats.
pub fn random_graph<R: Rng>(items: usize, len: usize, rng: &mut R) -> GraphInput {
    let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..items)).collect();
    GraphInput::from(&build_graph_from_indices(&seq).unwrap())
}

/// Same graph with real-valued adjacency entries (as EdgeRand produces).
pub fn perturb_adjacency<R: Rng>(g: &GraphInput, rng: &mut R) -> GraphInput {
    let mut out = g.clone();
    out.a_out.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    out.a_in.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    out
}

pub fn random_features<R: Rng>(width: usize, rng: &mut R) -> Vec<f64> {
    (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over every
/// parameter entry, per tensor, with noise frozen and central differences.
pub fn gradient_check(seed: u64, steps: usize, loss: LossKind) -> Vec<(&'static str, f64)> {
    use dipsgnn_core::gnn::model::draw_noise;
    use dipsgnn_core::gnn::params::TENSOR_NAMES;
    use dipsgnn_core::gnn::{backward, forward, ForwardConfig};

    let dims = ModelDims { feature_width: 3, num_items: 5, item_dim: 4, user_dim: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(dims, seed);
    let features = random_features(3, &mut rng);
    // Three distinct nodes, with a repeat so some adjacency entries are 2.
    let graph = GraphInput::from(&build_graph_from_indices(&[3, 0, 4, 0, 4, 3, 0]).unwrap());
    assert_eq!(graph.node_items.len(), 3);
    let noise = draw_noise(3, dims.joint_dim(), 0.3, steps, &mut rng);
    let config = ForwardConfig { steps, embed_norm: 0.8, loss };
    let label = 2;

    let trace = forward(&params, &features, &graph, &noise, &config).unwrap();
    let mut grads = params.zeros_like();
    backward(&params, &features, &graph, label, &trace, &config, &mut grads);

    let loss_at = |p: &ModelParams| forward(p, &features, &graph, &noise, &config).unwrap().loss(label, loss);
    let h = 1e-5;
    let floor = 1e-6;
    let analytic = grads.tensors().map(|t| t.to_vec());
    let mut worst = Vec::new();
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        let mut max_err = 0.0f64;
        for k in 0..analytic[ti].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti][k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti][k] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic[ti][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_err = max_err.max(err);
        }
        worst.push((*name, max_err));
    }
    worst
}

/// Largest absolute gap between the library forward pass and the reference
/// over `instances` random graphs without noise.
pub fn noise_free_gap(instances: usize, seed: u64) -> f64 {
    use dipsgnn_core::gnn::{forward, ForwardConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let dims = ModelDims {
            feature_width: rng.random_range(1..6),
            num_items: rng.random_range(3..12),
            item_dim: rng.random_range(1..7),
            user_dim: rng.random_range(1..4),
        };
        let params = random_params(dims, seed.wrapping_add(i as u64));
        let mut graph = random_graph(dims.num_items, rng.random_range(1..9), &mut rng);
        if i % 3 == 0 {
            graph = perturb_adjacency(&graph, &mut rng);
        }
        let features = random_features(dims.feature_width, &mut rng);
        let steps = rng.random_range(1..4);
        let embed_norm = rng.random_range(0.1..3.0);
        let loss = if i % 2 == 0 { LossKind::Bce } else { LossKind::Ce };
        let label = rng.random_range(0..dims.num_items);
        let config = ForwardConfig { steps, embed_norm, loss };

        let trace = forward(&params, &features, &graph, &[], &config).unwrap();
        let reference = reference_forward(&params, &features, &graph, &[], steps, embed_norm, label, loss);
        let gaps = trace
            .z_user
            .iter()
            .zip(&reference.z_user)
            .chain(trace.logits.iter().zip(&reference.logits))
            .chain(trace.final_items.iter().zip(reference.final_items.iter().flatten()))
            .map(|(a, b)| (a - b).abs())
            .chain(std::iter::once((trace.loss(label, loss) - reference.loss).abs()));
        for g in gaps {
            worst = worst.max(g);
        }
    }
    worst
}
