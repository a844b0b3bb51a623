//! Noise-aware uncertainty estimator.
//!
//! A small MLP regresses the standard deviation of the Gaussian noise that
//! was injected into a modality's raw features. In `Variance` mode it reads
//! the encoder's embedding variance (on a log scale); in `Raw` mode it reads
//! the raw features directly. The squared prediction is the modality's
//! inference uncertainty.

use rand::Rng;

use crate::autodiff::{softplus_scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamId, ParamStore};

/// Lower bound on the inference uncertainty.
pub const RHO_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorInput {
    Variance,
    Raw,
}

impl std::str::FromStr for EstimatorInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variance" => Ok(EstimatorInput::Variance),
            "raw" => Ok(EstimatorInput::Raw),
            _ => Err(format!("expected variance|raw, got {s:?}")),
        }
    }
}

impl std::fmt::Display for EstimatorInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorInput::Variance => "variance",
            EstimatorInput::Raw => "raw",
        })
    }
}

#[derive(Clone, Debug)]
pub struct NoiseEstimator {
    net: Mlp,
    input: EstimatorInput,
}

impl NoiseEstimator {
    /// Two-layer MLP `in_dim -> hidden -> 1`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, input: EstimatorInput) -> Self {
        NoiseEstimator {
            net: Mlp::new(store, name, &[in_dim, hidden, 1]),
            input,
        }
    }

    pub fn input_mode(&self) -> EstimatorInput {
        self.input
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
    }

    /// Predicted noise level `softplus(net(input))`, shape `[batch]`.
    pub fn predict_sigma(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::shape("predict_sigma", &shape, &[shape[0], self.in_dim()]));
        }
        let features = match self.input {
            EstimatorInput::Variance => tape.log(input)?,
            EstimatorInput::Raw => input,
        };
        let out = self.net.forward(tape, store, features)?;
        let flat = tape.reshape(out, &[shape[0]])?;
        Ok(tape.softplus(flat))
    }

    /// Mean squared error between predicted and true noise levels.
    ///
    /// `input` must not carry a gradient path into the encoders; callers
    /// detach it first.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, input: Var, sigma_true: &[f64]) -> Result<Var> {
        let batch = tape.value(input).rows();
        if sigma_true.len() != batch {
            return Err(Error::shape("estimator_loss", &[batch], &[sigma_true.len()]));
        }
        let pred = self.predict_sigma(tape, store, input)?;
        let target = tape.constant(Tensor::vector(sigma_true.to_vec()));
        tape.mse(pred, target)
    }

    /// Inference uncertainty of a clean forward pass.
    pub fn uncertainty(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Vec<f64>> {
        let sigma = self.predict_sigma(tape, store, input)?;
        Ok(inference_uncertainty(tape.value(sigma).data()))
    }
}

/// `rho = sigma_hat^2 + RHO_FLOOR`.
pub fn inference_uncertainty(sigma_hat: &[f64]) -> Vec<f64> {
    sigma_hat.iter().map(|s| s * s + RHO_FLOOR).collect()
}

/// `softplus` applied to a raw estimator output, for callers working off-tape.
pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus_scalar(raw)
}

/// Discrete set of training noise levels, sampled uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    levels: Vec<f64>,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid {
            levels: (0..=10).map(f64::from).collect(),
        }
    }
}

impl NoiseGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels[0] != 0.0 {
            return Err(Error::config("noise_grid", "must start at 0"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("noise_grid", "levels must be finite and strictly increasing"));
        }
        Ok(NoiseGrid { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.levels[rng.random_range(0..self.levels.len())]
    }
}
