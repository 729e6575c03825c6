use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Encoded user feature width `d₀`.
    pub feature_width: usize,
    pub num_items: usize,
    /// Item embedding width `d`.
    pub item_dim: usize,
    /// User embedding width `d′`.
    pub user_dim: usize,
}

impl ModelDims {
    /// Width of a joint item ⊕ user row.
    pub fn joint_dim(&self) -> usize {
        self.item_dim + self.user_dim
    }
}

/// All trainable tensors.
///
/// Matrices applied to row-vector activations (`x · W`) are stored
/// `in × out`; the readout matrices `w1`, `w2`, `w3` act on column vectors
/// (`W · e`) and are stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `E_U`, `d₀ × d′`.
    pub user_embed: Array2<f64>,
    /// `E_V`, `|V| × d`.
    pub item_embed: Array2<f64>,
    /// `(d + d′) × d`.
    pub w_out: Array2<f64>,
    pub w_in: Array2<f64>,
    pub b_out: Array1<f64>,
    pub b_in: Array1<f64>,
    /// GRU input weights are `2d × d`, recurrent weights `d × d`.
    pub w_update: Array2<f64>,
    pub u_update: Array2<f64>,
    pub b_update: Array1<f64>,
    pub w_reset: Array2<f64>,
    pub u_reset: Array2<f64>,
    pub b_reset: Array1<f64>,
    pub w_cand: Array2<f64>,
    pub u_cand: Array2<f64>,
    pub b_cand: Array1<f64>,
    /// Attention readout.
    pub q: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub c: Array1<f64>,
    /// `d × (2d + d′)`.
    pub w3: Array2<f64>,
}

pub const TENSOR_COUNT: usize = 20;

pub const TENSOR_NAMES: [&str; TENSOR_COUNT] = [
    "user_embed", "item_embed", "w_out", "w_in", "b_out", "b_in", "w_update", "u_update", "b_update",
    "w_reset", "u_reset", "b_reset", "w_cand", "u_cand", "b_cand", "q", "w1", "w2", "c", "w3",
];

macro_rules! tensor_fields {
    ($self:ident, $as:ident) => {
        [
            $self.user_embed.$as(), $self.item_embed.$as(), $self.w_out.$as(), $self.w_in.$as(),
            $self.b_out.$as(), $self.b_in.$as(), $self.w_update.$as(), $self.u_update.$as(),
            $self.b_update.$as(), $self.w_reset.$as(), $self.u_reset.$as(), $self.b_reset.$as(),
            $self.w_cand.$as(), $self.u_cand.$as(), $self.b_cand.$as(), $self.q.$as(),
            $self.w1.$as(), $self.w2.$as(), $self.c.$as(), $self.w3.$as(),
        ]
    };
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.item_dim;
        let m = dims.joint_dim();
        let z2 = |r, c| Array2::zeros((r, c));
        let z1 = |n| Array1::zeros(n);
        ModelParams {
            dims,
            user_embed: z2(dims.feature_width, dims.user_dim),
            item_embed: z2(dims.num_items, d),
            w_out: z2(m, d),
            w_in: z2(m, d),
            b_out: z1(d),
            b_in: z1(d),
            w_update: z2(2 * d, d),
            u_update: z2(d, d),
            b_update: z1(d),
            w_reset: z2(2 * d, d),
            u_reset: z2(d, d),
            b_reset: z1(d),
            w_cand: z2(2 * d, d),
            u_cand: z2(d, d),
            b_cand: z1(d),
            q: z1(d),
            w1: z2(d, d),
            w2: z2(d, d),
            c: z1(d),
            w3: z2(d, 2 * d + dims.user_dim),
        }
    }

    /// Every entry uniform in `[-1/√d, 1/√d]`.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.item_dim == 0 || dims.user_dim == 0 || dims.num_items == 0 || dims.feature_width == 0 {
            return Err(Error::Config(format!("all model dimensions must be positive: {dims:?}")));
        }
        let bound = 1.0 / (dims.item_dim as f64).sqrt();
        let mut params = ModelParams::zeros(dims);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims)
    }

    pub fn tensors(&self) -> [&[f64]; TENSOR_COUNT] {
        tensor_fields!(self, as_slice).map(|t| t.expect("parameters are in standard layout"))
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; TENSOR_COUNT] {
        tensor_fields!(self, as_slice_mut).map(|t| t.expect("parameters are in standard layout"))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Checks that every tensor has the shape implied by `dims`.
    pub fn validate(&self) -> Result<()> {
        let expected = ModelParams::zeros(self.dims);
        for ((name, a), b) in TENSOR_NAMES.iter().zip(self.tensors()).zip(expected.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Shape(format!("tensor `{name}` has {} entries, expected {}", a.len(), b.len())));
            }
        }
        let shapes = [
            (self.user_embed.dim(), expected.user_embed.dim()),
            (self.item_embed.dim(), expected.item_embed.dim()),
            (self.w_out.dim(), expected.w_out.dim()),
            (self.w_in.dim(), expected.w_in.dim()),
            (self.w3.dim(), expected.w3.dim()),
        ];
        if shapes.iter().any(|(a, b)| a != b) {
            return Err(Error::Shape(format!("matrix shapes do not match dims {:?}", self.dims)));
        }
        if !self.is_finite() {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.learning_rate;
        let eps = self.eps;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
