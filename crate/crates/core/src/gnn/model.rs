//! Forward pass and hand-derived backward pass for one sequence.
//!
//! Per propagation step, item states `E` (n × d) are joined with the user
//! embedding, row-clipped to norm `C`, aggregated over the out/in adjacency
//! with Gaussian noise, linearly transformed and fed to a GRU cell. The
//! readout combines attention over sequence positions, the last item and the
//! user embedding, and scores every item against the item table.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::graph_pipeline::BehaviorGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy of the softmax vector summed over all items.
    #[default]
    Bce,
    /// Plain categorical cross-entropy, `−log ŷ_label`.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub steps: usize,
    pub embed_norm: f64,
    pub loss: LossKind,
}

/// Real-valued adjacency of one local graph. EdgeRand produces these with
/// noise already added.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub node_items: Vec<usize>,
    pub positions: Vec<usize>,
    pub a_out: Array2<f64>,
    pub a_in: Array2<f64>,
}

impl From<&BehaviorGraph> for GraphInput {
    fn from(g: &BehaviorGraph) -> Self {
        GraphInput {
            node_items: g.node_items.clone(),
            positions: g.positions.clone(),
            a_out: g.a_out.mapv(f64::from),
            a_in: g.a_in.mapv(f64::from),
        }
    }
}

impl GraphInput {
    pub fn num_nodes(&self) -> usize {
        self.node_items.len()
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        let n = self.num_nodes();
        if n == 0 || self.positions.is_empty() {
            return Err(Error::Shape("graph has no nodes".into()));
        }
        if self.a_out.dim() != (n, n) || self.a_in.dim() != (n, n) {
            return Err(Error::Shape(format!("adjacency must be {n}×{n}")));
        }
        if self.positions.iter().any(|&p| p >= n) {
            return Err(Error::Shape("sequence position refers to a missing node".into()));
        }
        if let Some(&bad) = self.node_items.iter().find(|&&i| i >= params.dims.num_items) {
            return Err(Error::Shape(format!("item index {bad} outside vocabulary of {}", params.dims.num_items)));
        }
        Ok(())
    }
}

/// Gaussian noise for the two aggregations of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub out: Array2<f64>,
    pub inc: Array2<f64>,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Draws noise for every step, or nothing when `σ = 0`.
pub fn draw_noise<R: Rng + ?Sized>(nodes: usize, width: usize, sigma: f64, steps: usize, rng: &mut R) -> Vec<StepNoise> {
    if sigma == 0.0 {
        return Vec::new();
    }
    (0..steps)
        .map(|_| StepNoise {
            out: gaussian_matrix(nodes, width, sigma, rng),
            inc: gaussian_matrix(nodes, width, sigma, rng),
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Initial user embedding `x̂_u · E_U` and item embedding (row of `E_V`).
pub fn init_embeddings(features: &[f64], item_index: usize, params: &ModelParams) -> Result<(Array1<f64>, Array1<f64>)> {
    let user = user_embedding(features, params)?;
    if item_index >= params.dims.num_items {
        return Err(Error::Config(format!("item index {item_index} outside vocabulary")));
    }
    Ok((user, params.item_embed.row(item_index).to_owned()))
}

fn user_embedding(features: &[f64], params: &ModelParams) -> Result<Array1<f64>> {
    if features.len() != params.dims.feature_width {
        return Err(Error::Config(format!(
            "feature width {} != model feature width {}",
            features.len(),
            params.dims.feature_width
        )));
    }
    Ok(ArrayView1::from(features).dot(&params.user_embed))
}

/// Rescales every nonzero row to L2 norm `c`; zero rows stay zero.
pub fn clip_rows(h: &Array2<f64>, c: f64) -> Array2<f64> {
    clip_rows_with_norms(h, c).0
}

fn clip_rows_with_norms(h: &Array2<f64>, c: f64) -> (Array2<f64>, Array1<f64>) {
    let norms = h.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    let mut out = h.clone();
    for (mut row, &norm) in out.rows_mut().into_iter().zip(&norms) {
        if norm > 0.0 {
            row *= c / norm;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

/// Gradient through `h ↦ C·h/‖h‖`, i.e. `(C/‖h‖)(g − ĥ(ĥ·g))`.
fn clip_rows_backward(grad: &Array2<f64>, clipped: &Array2<f64>, norms: &Array1<f64>, c: f64) -> Array2<f64> {
    let mut out = Array2::zeros(grad.dim());
    for i in 0..grad.nrows() {
        if norms[i] == 0.0 {
            continue;
        }
        let unit = clipped.row(i).mapv(|v| v / c);
        let g = grad.row(i);
        let proj = unit.dot(&g);
        let scale = c / norms[i];
        Zip::from(out.row_mut(i)).and(&g).and(&unit).for_each(|o, &gi, &ui| *o = scale * (gi - ui * proj));
    }
    out
}

/// `a · h_bar` plus i.i.d. `N(0, σ²)` noise per entry.
pub fn noisy_aggregate<R: Rng + ?Sized>(a: &Array2<f64>, h_bar: &Array2<f64>, sigma: f64, rng: &mut R) -> Result<Array2<f64>> {
    if a.ncols() != h_bar.nrows() {
        return Err(Error::Shape(format!("{:?} · {:?}", a.dim(), h_bar.dim())));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be non-negative, got {sigma}")));
    }
    let sum = a.dot(h_bar);
    if sigma == 0.0 {
        return Ok(sum);
    }
    Ok(sum + gaussian_matrix(a.nrows(), h_bar.ncols(), sigma, rng))
}

/// State carried between propagation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    pub user_embed: Array1<f64>,
    pub item_embeds: Array2<f64>,
    /// Joint matrix `H`, its clipped form and the noisy aggregates of the
    /// step that produced this state; empty before the first step.
    pub joint: Array2<f64>,
    pub clipped: Array2<f64>,
    pub agg_out: Array2<f64>,
    pub agg_in: Array2<f64>,
}

impl ForwardState {
    pub fn initial(user_embed: Array1<f64>, item_embeds: Array2<f64>) -> Self {
        let empty = Array2::zeros((0, 0));
        ForwardState {
            user_embed,
            item_embeds,
            joint: empty.clone(),
            clipped: empty.clone(),
            agg_out: empty.clone(),
            agg_in: empty,
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    e_prev: Array2<f64>,
    joint: Array2<f64>,
    norms: Array1<f64>,
    clipped: Array2<f64>,
    p_out: Array2<f64>,
    p_in: Array2<f64>,
    a: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    h_tilde: Array2<f64>,
}

fn joint_rows(items: &Array2<f64>, user: &Array1<f64>) -> Array2<f64> {
    let n = items.nrows();
    let users = user.broadcast((n, user.len())).expect("broadcast user row");
    concatenate![Axis(1), *items, users]
}

fn step_forward(
    e_prev: &Array2<f64>,
    user: &Array1<f64>,
    graph: &GraphInput,
    params: &ModelParams,
    embed_norm: f64,
    noise: Option<&StepNoise>,
) -> (Array2<f64>, StepCache) {
    let joint = joint_rows(e_prev, user);
    let (clipped, norms) = clip_rows_with_norms(&joint, embed_norm);
    let mut p_out = graph.a_out.dot(&clipped);
    let mut p_in = graph.a_in.dot(&clipped);
    if let Some(noise) = noise {
        p_out += &noise.out;
        p_in += &noise.inc;
    }
    let a_out = p_out.dot(&params.w_out) + &params.b_out;
    let a_in = p_in.dot(&params.w_in) + &params.b_in;
    let a = concatenate![Axis(1), a_out, a_in];

    let z = (a.dot(&params.w_update) + e_prev.dot(&params.u_update) + &params.b_update).mapv(sigmoid);
    let r = (a.dot(&params.w_reset) + e_prev.dot(&params.u_reset) + &params.b_reset).mapv(sigmoid);
    let h_tilde = (a.dot(&params.w_cand) + (&r * e_prev).dot(&params.u_cand) + &params.b_cand).mapv(f64::tanh);
    let e_next = e_prev + &(&z * &(&h_tilde - e_prev));

    let cache = StepCache { e_prev: e_prev.clone(), joint, norms, clipped, p_out, p_in, a, z, r, h_tilde };
    (e_next, cache)
}

/// Returns `dL/dE_{t−1}`; adds parameter gradients and `dL/de_u`.
fn step_backward(
    g_next: &Array2<f64>,
    cache: &StepCache,
    graph: &GraphInput,
    params: &ModelParams,
    embed_norm: f64,
    grads: &mut ModelParams,
    g_user: &mut Array1<f64>,
) -> Array2<f64> {
    let d = params.dims.item_dim;
    let StepCache { e_prev, norms, clipped, p_out, p_in, a, z, r, h_tilde, .. } = cache;

    let g_z = g_next * &(h_tilde - e_prev);
    let g_ht = g_next * z;
    let mut g_e = g_next * &z.mapv(|v| 1.0 - v);

    // Candidate.
    let g_qh = &g_ht * &h_tilde.mapv(|v| 1.0 - v * v);
    let re = r * e_prev;
    grads.w_cand += &a.t().dot(&g_qh);
    grads.u_cand += &re.t().dot(&g_qh);
    grads.b_cand += &g_qh.sum_axis(Axis(0));
    let mut g_a = g_qh.dot(&params.w_cand.t());
    let g_re = g_qh.dot(&params.u_cand.t());
    let g_r = &g_re * e_prev;
    g_e += &(&g_re * r);

    // Update gate.
    let g_qz = &g_z * &z.mapv(|v| v * (1.0 - v));
    grads.w_update += &a.t().dot(&g_qz);
    grads.u_update += &e_prev.t().dot(&g_qz);
    grads.b_update += &g_qz.sum_axis(Axis(0));
    g_a += &g_qz.dot(&params.w_update.t());
    g_e += &g_qz.dot(&params.u_update.t());

    // Reset gate.
    let g_qr = &g_r * &r.mapv(|v| v * (1.0 - v));
    grads.w_reset += &a.t().dot(&g_qr);
    grads.u_reset += &e_prev.t().dot(&g_qr);
    grads.b_reset += &g_qr.sum_axis(Axis(0));
    g_a += &g_qr.dot(&params.w_reset.t());
    g_e += &g_qr.dot(&params.u_reset.t());

    // Linear transforms of the aggregates.
    let g_aout = g_a.slice(s![.., ..d]);
    let g_ain = g_a.slice(s![.., d..]);
    grads.w_out += &p_out.t().dot(&g_aout);
    grads.b_out += &g_aout.sum_axis(Axis(0));
    grads.w_in += &p_in.t().dot(&g_ain);
    grads.b_in += &g_ain.sum_axis(Axis(0));
    let g_pout = g_aout.dot(&params.w_out.t());
    let g_pin = g_ain.dot(&params.w_in.t());

    // Aggregation (noise is constant) and clipping.
    let g_clipped = graph.a_out.t().dot(&g_pout) + graph.a_in.t().dot(&g_pin);
    let g_joint = clip_rows_backward(&g_clipped, clipped, norms, embed_norm);
    g_e += &g_joint.slice(s![.., ..d]);
    *g_user += &g_joint.slice(s![.., d..]).sum_axis(Axis(0));
    g_e
}

/// One propagation step with freshly drawn noise.
pub fn propagate_step<R: Rng + ?Sized>(
    state: &ForwardState,
    graph: &GraphInput,
    params: &ModelParams,
    embed_norm: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ForwardState> {
    graph.check(params)?;
    if state.item_embeds.dim() != (graph.num_nodes(), params.dims.item_dim) {
        return Err(Error::Shape(format!("item state {:?} does not fit graph", state.item_embeds.dim())));
    }
    if state.user_embed.len() != params.dims.user_dim {
        return Err(Error::Shape("user embedding width".into()));
    }
    let noise = draw_noise(graph.num_nodes(), params.dims.joint_dim(), sigma, 1, rng);
    let (items, cache) = step_forward(&state.item_embeds, &state.user_embed, graph, params, embed_norm, noise.first());
    Ok(ForwardState {
        user_embed: state.user_embed.clone(),
        item_embeds: items,
        joint: cache.joint,
        clipped: cache.clipped,
        agg_out: cache.p_out,
        agg_in: cache.p_in,
    })
}

#[derive(Debug, Clone)]
struct ReadoutCache {
    seq: Array2<f64>,
    e_last: Array1<f64>,
    gates: Array2<f64>,
    alpha: Array1<f64>,
    concat: Array1<f64>,
}

fn readout_forward(final_items: &Array2<f64>, positions: &[usize], user: &Array1<f64>, params: &ModelParams) -> (Array1<f64>, ReadoutCache) {
    let seq = final_items.select(Axis(0), positions);
    let e_last = seq.row(seq.nrows() - 1).to_owned();
    let base = params.w1.dot(&e_last) + &params.c;
    let gates = (seq.dot(&params.w2.t()) + &base).mapv(sigmoid);
    let alpha = gates.dot(&params.q);
    let z_global = seq.t().dot(&alpha);
    let concat = concatenate![Axis(0), z_global, e_last, *user];
    let z_user = params.w3.dot(&concat);
    (z_user, ReadoutCache { seq, e_last, gates, alpha, concat })
}

/// Returns `dL/dE_T` over local nodes; adds parameter gradients and `dL/de_u`.
fn readout_backward(
    g_zu: &Array1<f64>,
    cache: &ReadoutCache,
    positions: &[usize],
    nodes: usize,
    params: &ModelParams,
    grads: &mut ModelParams,
    g_user: &mut Array1<f64>,
) -> Array2<f64> {
    let d = params.dims.item_dim;
    let ReadoutCache { seq, e_last, gates, alpha, concat } = cache;
    grads.w3 += &outer(g_zu.view(), concat.view());
    let g_concat = params.w3.t().dot(g_zu);
    let g_zg = g_concat.slice(s![..d]);
    let mut g_last = g_concat.slice(s![d..2 * d]).to_owned();
    *g_user += &g_concat.slice(s![2 * d..]);

    let mut g_seq = outer(alpha.view(), g_zg);
    let g_alpha = seq.dot(&g_zg);
    grads.q += &gates.t().dot(&g_alpha);
    let g_gates = outer(g_alpha.view(), params.q.view());
    let g_pre = &g_gates * &gates.mapv(|v| v * (1.0 - v));
    grads.w2 += &g_pre.t().dot(seq);
    g_seq += &g_pre.dot(&params.w2);
    let g_base = g_pre.sum_axis(Axis(0));
    grads.c += &g_base;
    grads.w1 += &outer(g_base.view(), e_last.view());
    g_last += &params.w1.t().dot(&g_base);

    let mut g_final = Array2::zeros((nodes, d));
    for (s, &p) in positions.iter().enumerate() {
        let mut row = g_final.row_mut(p);
        row += &g_seq.row(s);
    }
    let mut row = g_final.row_mut(*positions.last().expect("non-empty sequence"));
    row += &g_last;
    g_final
}

/// Unified user representation `z_u` from final item states.
pub fn readout(final_items: &Array2<f64>, positions: &[usize], user_embed: &Array1<f64>, params: &ModelParams) -> Result<Array1<f64>> {
    if positions.is_empty() {
        return Err(Error::InvalidParameter("readout of an empty sequence".into()));
    }
    if positions.iter().any(|&p| p >= final_items.nrows()) {
        return Err(Error::Shape("sequence position outside item states".into()));
    }
    Ok(readout_forward(final_items, positions, user_embed, params).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// Softmax probabilities over the whole vocabulary.
    pub probs: Array1<f64>,
    pub loss: f64,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let z = e.sum();
    e / z
}

fn loss_value(logits: &Array1<f64>, probs: &Array1<f64>, label: usize, kind: LossKind) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_z = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let ce = -(logits[label] - m - log_z);
    match kind {
        LossKind::Ce => ce,
        LossKind::Bce => {
            let rest: f64 = probs.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &p)| -(-p).ln_1p()).sum();
            ce + rest
        }
    }
}

/// `dL/dlogits` for the chosen loss.
fn loss_gradient(probs: &Array1<f64>, label: usize, kind: LossKind) -> Array1<f64> {
    match kind {
        LossKind::Ce => {
            let mut g = probs.clone();
            g[label] -= 1.0;
            g
        }
        LossKind::Bce => {
            // ŷ_i·∂L/∂ŷ_i is −1 at the label and ŷ_i/(1 − ŷ_i) elsewhere.
            let weighted: Array1<f64> = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| if i == label { -1.0 } else { p / (1.0 - p) })
                .collect();
            let total = weighted.sum();
            &weighted - &(probs * total)
        }
    }
}

/// Softmax over `item_table · z_u` and the loss against `label`.
pub fn predict_and_loss(z_user: &Array1<f64>, item_table: &Array2<f64>, label: usize, kind: LossKind) -> Result<PredictionOutput> {
    if label >= item_table.nrows() {
        return Err(Error::InvalidParameter(format!("label {label} outside vocabulary of {}", item_table.nrows())));
    }
    let logits = item_table.dot(z_user);
    let probs = softmax(&logits);
    let loss = loss_value(&logits, &probs, label, kind);
    Ok(PredictionOutput { probs, loss })
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub user_embed: Array1<f64>,
    pub final_items: Array2<f64>,
    pub z_user: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    steps: Vec<StepCache>,
    readout: ReadoutCache,
}

/// Full forward pass. `noise` is either empty (noise-free) or holds one
/// draw per step.
pub fn forward(params: &ModelParams, features: &[f64], graph: &GraphInput, noise: &[StepNoise], config: &ForwardConfig) -> Result<Trace> {
    graph.check(params)?;
    if !noise.is_empty() && noise.len() != config.steps {
        return Err(Error::Shape(format!("{} noise draws for {} steps", noise.len(), config.steps)));
    }
    let user = user_embedding(features, params)?;
    let mut items = params.item_embed.select(Axis(0), &graph.node_items);
    let mut steps = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let (next, cache) = step_forward(&items, &user, graph, params, config.embed_norm, noise.get(t));
        steps.push(cache);
        items = next;
    }
    let (z_user, readout) = readout_forward(&items, &graph.positions, &user, params);
    let logits = params.item_embed.dot(&z_user);
    let probs = softmax(&logits);
    Ok(Trace { user_embed: user, final_items: items, z_user, logits, probs, steps, readout })
}

impl Trace {
    pub fn loss(&self, label: usize, kind: LossKind) -> f64 {
        loss_value(&self.logits, &self.probs, label, kind)
    }
}

/// Accumulates `dL/dθ` for one sample into `grads`.
pub fn backward(
    params: &ModelParams,
    features: &[f64],
    graph: &GraphInput,
    label: usize,
    trace: &Trace,
    config: &ForwardConfig,
    grads: &mut ModelParams,
) {
    let g_logits = loss_gradient(&trace.probs, label, config.loss);
    grads.item_embed += &outer(g_logits.view(), trace.z_user.view());
    let g_zu = params.item_embed.t().dot(&g_logits);

    let mut g_user = Array1::zeros(params.dims.user_dim);
    let mut g_items =
        readout_backward(&g_zu, &trace.readout, &graph.positions, graph.num_nodes(), params, grads, &mut g_user);
    for cache in trace.steps.iter().rev() {
        g_items = step_backward(&g_items, cache, graph, params, config.embed_norm, grads, &mut g_user);
    }
    for (row, &item) in g_items.rows().into_iter().zip(&graph.node_items) {
        let mut target = grads.item_embed.row_mut(item);
        target += &row;
    }
    grads.user_embed += &outer(ArrayView1::from(features), g_user.view());
}
