//! Fusion strategies and modality weight computation.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimator::RHO_FLOOR;
use crate::nn::{Linear, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Uniform weights; plain concatenation.
    Static,
    /// Inverse mean embedding variance.
    Pe,
    /// Inverse of uncertainty times dependency.
    Udml,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Static, Strategy::Pe, Strategy::Udml];
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "static" => Ok(Strategy::Static),
            "pe" => Ok(Strategy::Pe),
            "udml" => Ok(Strategy::Udml),
            _ => Err(format!("expected static|pe|udml, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Static => "static",
            Strategy::Pe => "pe",
            Strategy::Udml => "udml",
        })
    }
}

/// Per-sample weights with the quantities they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    /// `[batch, M]`, rows sum to one.
    pub w: Tensor,
    /// `[batch, M]`, every entry at least `RHO_FLOOR`.
    pub rho: Tensor,
    pub alpha: Vec<f64>,
}

impl FusionWeights {
    pub fn mean_w(&self) -> Vec<f64> {
        column_means(&self.w)
    }

    pub fn mean_rho(&self) -> Vec<f64> {
        column_means(&self.rho)
    }
}

pub fn column_means(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.max(1) as f64);
    out
}

/// Weighted concatenation followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct FusionHead {
    classifier: Linear,
    num_modalities: usize,
    embed_dim: usize,
    pub strategy: Strategy,
}

impl FusionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_modalities: usize,
        embed_dim: usize,
        num_classes: usize,
        strategy: Strategy,
    ) -> Self {
        FusionHead {
            classifier: Linear::new(store, &format!("{name}.classifier"), num_modalities * embed_dim, num_classes),
            num_modalities,
            embed_dim,
            strategy,
        }
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.classifier.params()
    }

    fn check_inputs(&self, tape: &Tape, z: &[Var]) -> Result<usize> {
        if z.len() != self.num_modalities {
            return Err(Error::shape("fuse", &[z.len()], &[self.num_modalities]));
        }
        let batch = tape.value(z[0]).rows();
        for &zm in z {
            let s = tape.value(zm).shape();
            if s != [batch, self.embed_dim] {
                return Err(Error::shape("fuse", s, &[batch, self.embed_dim]));
            }
        }
        Ok(batch)
    }

    /// Plain concatenation of the embeddings into the classifier.
    pub fn fuse_static(&self, tape: &mut Tape, store: &ParamStore, z: &[Var]) -> Result<Var> {
        self.check_inputs(tape, z)?;
        let cat = tape.concat(z, 1)?;
        self.classifier.forward(tape, store, cat)
    }

    /// Scales each `z[m]` row-wise by `M * w[:, m]`, concatenates, classifies.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, z: &[Var], w: &Tensor) -> Result<Var> {
        let batch = self.check_inputs(tape, z)?;
        if w.shape() != [batch, self.num_modalities] {
            return Err(Error::shape("fuse", w.shape(), &[batch, self.num_modalities]));
        }
        let m = self.num_modalities as f64;
        let mut scaled = Vec::with_capacity(z.len());
        for (k, &zm) in z.iter().enumerate() {
            let mut factors = Vec::with_capacity(batch * self.embed_dim);
            for r in 0..batch {
                factors.extend(std::iter::repeat_n(m * w.row(r)[k], self.embed_dim));
            }
            let f = tape.constant(Tensor::new(&[batch, self.embed_dim], factors)?);
            scaled.push(tape.mul(zm, f)?);
        }
        let cat = tape.concat(&scaled, 1)?;
        self.classifier.forward(tape, store, cat)
    }
}

pub fn uniform_weights(batch: usize, num_modalities: usize) -> Tensor {
    Tensor::full(&[batch, num_modalities], 1.0 / num_modalities as f64)
}

fn normalize_rows(mut raw: Tensor) -> Tensor {
    let cols = raw.cols();
    for row in raw.data_mut().chunks_mut(cols) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    raw
}

/// `w[i, m] ∝ 1 / (rho[i, m] * alpha[m])`, normalised per row.
pub fn unbiased_weights(rho: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    if rho.shape().len() != 2 || rho.cols() != alpha.len() {
        return Err(Error::shape("unbiased_weights", rho.shape(), &[rho.rows(), alpha.len()]));
    }
    let cols = alpha.len();
    let raw: Vec<f64> = rho
        .data()
        .iter()
        .enumerate()
        .map(|(i, r)| 1.0 / (r * alpha[i % cols]))
        .collect();
    Ok(normalize_rows(Tensor::new(rho.shape(), raw)?))
}

/// Per-row mean of a `[batch, d]` variance tensor.
pub fn row_means(sigma2: &Tensor) -> Vec<f64> {
    let d = sigma2.cols() as f64;
    (0..sigma2.rows()).map(|r| sigma2.row(r).iter().sum::<f64>() / d).collect()
}

/// Stacks per-modality row means into `[batch, M]`.
pub fn variance_scores(sigma2: &[&Tensor]) -> Result<Tensor> {
    let m = sigma2.len();
    if m == 0 {
        return Err(Error::Contract("no modalities".into()));
    }
    let batch = sigma2[0].rows();
    let means: Vec<Vec<f64>> = sigma2.iter().map(|s| row_means(s)).collect();
    if let Some(bad) = means.iter().find(|v| v.len() != batch) {
        return Err(Error::shape("variance_scores", &[bad.len()], &[batch]));
    }
    let mut data = Vec::with_capacity(batch * m);
    for r in 0..batch {
        data.extend(means.iter().map(|v| v[r]));
    }
    Tensor::new(&[batch, m], data)
}

/// `w[i, m] ∝ 1 / mean(sigma2[m][i, :])`, normalised per row.
pub fn pe_baseline_weights(sigma2: &[&Tensor]) -> Result<Tensor> {
    let s = variance_scores(sigma2)?;
    let raw = s.data().iter().map(|v| 1.0 / v).collect();
    Ok(normalize_rows(Tensor::new(s.shape(), raw)?))
}

/// Uncertainty proxy built from embedding variance instead of the estimator.
pub fn variance_uncertainty(sigma2: &[&Tensor]) -> Result<Tensor> {
    let s = variance_scores(sigma2)?;
    let data = s.data().iter().map(|v| v + RHO_FLOOR).collect();
    Tensor::new(s.shape(), data)
}
