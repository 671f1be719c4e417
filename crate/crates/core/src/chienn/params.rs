use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ChiennError;
use crate::autonn::Tensor;

/// Nonlinearity inside the k-ary message MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiActivation {
    #[default]
    Elu,
    /// Purely linear messages; only useful for testing the collapse to
    /// permutation invariance.
    Identity,
}

/// `uniform(−1/√fan_in, 1/√fan_in)` entries.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

/// Weights of one ChiENN layer.
///
/// `x'_jk = W1·x_jk + b1 + W2·x_kj + b2 + Σ_p ψ(window_p)` with
/// `ψ(w) = W3·σ(W4·w + b4) + b3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiennParams {
    pub k: usize,
    pub hidden: usize,
    pub hidden_mid: usize,
    #[serde(rename = "W1")]
    pub w1: Tensor,
    pub b1: Tensor,
    #[serde(rename = "W2")]
    pub w2: Tensor,
    pub b2: Tensor,
    #[serde(rename = "W3")]
    pub w3: Tensor,
    pub b3: Tensor,
    #[serde(rename = "W4")]
    pub w4: Tensor,
    pub b4: Tensor,
    #[serde(default)]
    pub psi: PsiActivation,
}

impl ChiennParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        k: usize,
        hidden: usize,
        hidden_mid: usize,
    ) -> Result<Self, ChiennError> {
        if k == 0 {
            return Err(ChiennError::InvalidArity);
        }
        let h = hidden;
        Ok(Self {
            k,
            hidden,
            hidden_mid,
            w1: uniform_tensor(rng, vec![h, h], h),
            b1: uniform_tensor(rng, vec![h], h),
            w2: uniform_tensor(rng, vec![h, h], h),
            b2: uniform_tensor(rng, vec![h], h),
            w3: uniform_tensor(rng, vec![h, hidden_mid], hidden_mid),
            b3: uniform_tensor(rng, vec![h], hidden_mid),
            w4: uniform_tensor(rng, vec![hidden_mid, k * h], k * h),
            b4: uniform_tensor(rng, vec![hidden_mid], k * h),
            psi: PsiActivation::Elu,
        })
    }

    /// All-zero weights with the right shapes.
    pub fn zeros(k: usize, hidden: usize, hidden_mid: usize) -> Result<Self, ChiennError> {
        if k == 0 {
            return Err(ChiennError::InvalidArity);
        }
        let h = hidden;
        Ok(Self {
            k,
            hidden,
            hidden_mid,
            w1: Tensor::zeros(vec![h, h]),
            b1: Tensor::zeros(vec![h]),
            w2: Tensor::zeros(vec![h, h]),
            b2: Tensor::zeros(vec![h]),
            w3: Tensor::zeros(vec![h, hidden_mid]),
            b3: Tensor::zeros(vec![h]),
            w4: Tensor::zeros(vec![hidden_mid, k * h]),
            b4: Tensor::zeros(vec![hidden_mid]),
            psi: PsiActivation::Elu,
        })
    }

    pub fn validate(&self) -> Result<(), ChiennError> {
        if self.k == 0 {
            return Err(ChiennError::InvalidArity);
        }
        let (h, m, k) = (self.hidden, self.hidden_mid, self.k);
        let expect: [(&str, &Tensor, Vec<usize>); 8] = [
            ("W1", &self.w1, vec![h, h]),
            ("b1", &self.b1, vec![h]),
            ("W2", &self.w2, vec![h, h]),
            ("b2", &self.b2, vec![h]),
            ("W3", &self.w3, vec![h, m]),
            ("b3", &self.b3, vec![h]),
            ("W4", &self.w4, vec![m, k * h]),
            ("b4", &self.b4, vec![m]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(ChiennError::DimensionMismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }
}

/// Affine map from `e_ij | x_i | x_j` to the initial hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    #[serde(rename = "A")]
    pub w: Tensor,
    pub b: Tensor,
}

impl Embedding {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        Self {
            w: uniform_tensor(rng, vec![hidden, input_dim], input_dim),
            b: uniform_tensor(rng, vec![hidden], input_dim),
        }
    }
}

/// Mean-pool followed by `W2·σ(W1·h + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutHead {
    #[serde(rename = "W1")]
    pub w1: Tensor,
    pub b1: Tensor,
    #[serde(rename = "W2")]
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ReadoutHead {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize, head_hidden: usize, outputs: usize) -> Self {
        Self {
            w1: uniform_tensor(rng, vec![head_hidden, hidden], hidden),
            b1: uniform_tensor(rng, vec![head_hidden], hidden),
            w2: uniform_tensor(rng, vec![outputs, head_hidden], head_hidden),
            b2: uniform_tensor(rng, vec![outputs], head_hidden),
        }
    }

    pub fn zeros(hidden: usize, head_hidden: usize, outputs: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![head_hidden, hidden]),
            b1: Tensor::zeros(vec![head_hidden]),
            w2: Tensor::zeros(vec![outputs, head_hidden]),
            b2: Tensor::zeros(vec![outputs]),
        }
    }
}
