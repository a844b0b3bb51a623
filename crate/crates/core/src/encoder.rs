//! Probabilistic modality encoders producing diagonal Gaussian embeddings.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Linear, Mlp, ParamId, ParamStore};

/// Lower bound added to every embedding variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-sample Gaussian `N(mu, diag(sigma2))`, both `[batch, d]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianEmbedding {
    pub mu: Var,
    pub sigma2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Train,
    Eval,
}

/// Shared trunk followed by a mean head and a variance head.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    trunk: Mlp,
    mu_head: Linear,
    var_head: Linear,
}

impl ModalityEncoder {
    /// Trunk `feat -> hidden -> hidden` (ReLU between the layers, linear output), heads `hidden -> embed`.
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        ModalityEncoder {
            trunk: Mlp::new(store, &format!("{name}.trunk"), &[feat_dim, hidden, hidden]),
            mu_head: Linear::new(store, &format!("{name}.mu"), hidden, embed_dim),
            var_head: Linear::new(store, &format!("{name}.var"), hidden, embed_dim),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.mu_head.out_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.mu_head.params());
        p.extend(self.var_head.params());
        p
    }

    pub fn var_head(&self) -> &Linear {
        &self.var_head
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.trunk.init(store, rng);
        self.mu_head.init(store, rng);
        self.var_head.init(store, rng);
    }

    pub fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.trunk.forward(tape, store, x)
    }

    /// Variance head on trunk features: `softplus(var_head(h)) + floor`.
    pub fn variance(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let raw = self.var_head.forward(tape, store, h)?;
        let sp = tape.softplus(raw);
        Ok(tape.add_scalar(sp, VARIANCE_FLOOR))
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<GaussianEmbedding> {
        let h = self.features(tape, store, x)?;
        let mu = self.mu_head.forward(tape, store, h)?;
        let sigma2 = self.variance(tape, store, h)?;
        Ok(GaussianEmbedding { mu, sigma2 })
    }
}

/// Reparameterised sample in training mode, the mean in evaluation mode.
pub fn embed_sample<R: Rng + ?Sized>(
    tape: &mut Tape,
    emb: &GaussianEmbedding,
    mode: EmbedMode,
    rng: &mut R,
) -> Result<Var> {
    match mode {
        EmbedMode::Train => tape.gaussian_sample(emb.mu, emb.sigma2, rng),
        EmbedMode::Eval => Ok(emb.mu),
    }
}
