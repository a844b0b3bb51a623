//! Full multimodal network: encoders, fusion head and per-modality noise
//! estimators sharing one parameter store.

use std::collections::HashSet;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{GaussianEmbedding, ModalityEncoder};
use crate::error::{Error, Result};
use crate::estimator::{inference_uncertainty, EstimatorInput, NoiseEstimator};
use crate::fusion::{FusionHead, Strategy};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub estimator_hidden: usize,
    pub estimator_input: EstimatorInput,
    pub strategy: Strategy,
}

#[derive(Clone, Debug)]
pub struct UdmlModel {
    pub store: ParamStore,
    pub encoders: Vec<ModalityEncoder>,
    pub head: FusionHead,
    pub estimators: Vec<NoiseEstimator>,
    config: ModelConfig,
}

impl UdmlModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.dims.is_empty() {
            return Err(Error::config("dims", "need at least one modality"));
        }
        if config.num_classes < 2 || config.hidden == 0 || config.embed_dim == 0 || config.estimator_hidden == 0 {
            return Err(Error::config("model", "class count must be ≥ 2 and layer widths positive"));
        }
        let mut store = ParamStore::new();
        let encoders: Vec<ModalityEncoder> = config
            .dims
            .iter()
            .enumerate()
            .map(|(m, &d)| ModalityEncoder::new(&mut store, &format!("enc{m}"), d, config.hidden, config.embed_dim))
            .collect();
        let head = FusionHead::new(
            &mut store,
            "fusion",
            config.dims.len(),
            config.embed_dim,
            config.num_classes,
            config.strategy,
        );
        let estimators = config
            .dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let in_dim = match config.estimator_input {
                    EstimatorInput::Variance => config.embed_dim,
                    EstimatorInput::Raw => d,
                };
                NoiseEstimator::new(&mut store, &format!("est{m}"), in_dim, config.estimator_hidden, config.estimator_input)
            })
            .collect();
        let mut model = UdmlModel { store, encoders, head, estimators, config };
        model.init(rng);
        Ok(model)
    }

    /// Re-draws every parameter in a fixed order: encoders, head, estimators.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for e in &self.encoders {
            e.init(&mut self.store, rng);
        }
        self.head.classifier().init(&mut self.store, rng);
        for e in &self.estimators {
            e.init(&mut self.store, rng);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Encoders plus fusion head.
    pub fn encoder_group(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoders.iter().flat_map(|e| e.params()).collect();
        ids.extend(self.head.params());
        ids
    }

    pub fn estimator_group(&self) -> Vec<ParamId> {
        self.estimators.iter().flat_map(|e| e.params()).collect()
    }

    /// The two optimiser groups must not share a parameter and must together
    /// cover the store.
    pub fn check_groups(&self) -> Result<()> {
        let a: HashSet<ParamId> = self.encoder_group().into_iter().collect();
        let b: HashSet<ParamId> = self.estimator_group().into_iter().collect();
        if let Some(shared) = a.intersection(&b).next() {
            return Err(Error::Contract(format!(
                "parameter `{}` is in both optimiser groups",
                self.store.name(*shared)
            )));
        }
        if a.len() + b.len() != self.store.len() {
            return Err(Error::Contract("optimiser groups do not cover every parameter".into()));
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, x: &[Var]) -> Result<Vec<GaussianEmbedding>> {
        if x.len() != self.encoders.len() {
            return Err(Error::shape("encode", &[x.len()], &[self.encoders.len()]));
        }
        self.encoders
            .iter()
            .zip(x)
            .map(|(e, &xm)| e.encode(tape, &self.store, xm))
            .collect()
    }

    /// Estimated noise level of modality `m` for each row; `input` is the
    /// variance or raw features depending on the estimator mode.
    pub fn predict_sigma(&self, tape: &mut Tape, m: usize, input: Var) -> Result<Var> {
        self.estimator(m)?.predict_sigma(tape, &self.store, input)
    }

    /// `[batch, M]` inference uncertainty from clean variances or raw inputs,
    /// computed on a scratch tape.
    pub fn uncertainty(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut cols = Vec::with_capacity(inputs.len());
        for (m, x) in inputs.iter().enumerate() {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let s = self.predict_sigma(&mut tape, m, v)?;
            cols.push(inference_uncertainty(tape.value(s).data()));
        }
        stack_columns(&cols)
    }

    fn estimator(&self, m: usize) -> Result<&NoiseEstimator> {
        self.estimators
            .get(m)
            .ok_or(Error::Index { op: "estimator", index: m, len: self.estimators.len() })
    }
}

/// `[batch, M]` tensor from `M` equal-length columns.
pub fn stack_columns(cols: &[Vec<f64>]) -> Result<Tensor> {
    let batch = cols.first().map_or(0, Vec::len);
    if let Some(bad) = cols.iter().find(|c| c.len() != batch) {
        return Err(Error::shape("stack_columns", &[bad.len()], &[batch]));
    }
    let mut data = Vec::with_capacity(batch * cols.len());
    for r in 0..batch {
        data.extend(cols.iter().map(|c| c[r]));
    }
    Tensor::new(&[batch, cols.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(input: EstimatorInput) -> ModelConfig {
        ModelConfig {
            dims: vec![5, 7],
            num_classes: 3,
            hidden: 8,
            embed_dim: 4,
            estimator_hidden: 6,
            estimator_input: input,
            strategy: Strategy::Udml,
        }
    }

    #[test]
    fn groups_are_disjoint_and_cover_the_store() {
        let model = UdmlModel::new(config(EstimatorInput::Variance), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        model.check_groups().unwrap();
        let est: Vec<&str> = model.estimator_group().iter().map(|&id| model.store.name(id)).collect();
        assert!(est.iter().all(|n| n.starts_with("est")));
        let enc: Vec<&str> = model.encoder_group().iter().map(|&id| model.store.name(id)).collect();
        assert!(enc.iter().all(|n| n.starts_with("enc") || n.starts_with("fusion")));
    }

    #[test]
    fn estimator_width_follows_input_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = UdmlModel::new(config(EstimatorInput::Variance), &mut rng).unwrap();
        assert!(v.estimators.iter().all(|e| e.in_dim() == 4));
        let r = UdmlModel::new(config(EstimatorInput::Raw), &mut rng).unwrap();
        assert_eq!(r.estimators.iter().map(|e| e.in_dim()).collect::<Vec<_>>(), vec![5, 7]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = UdmlModel::new(config(EstimatorInput::Variance), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = UdmlModel::new(config(EstimatorInput::Variance), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.store.entries().zip(b.store.entries()).all(|(x, y)| x == y));
    }

    #[test]
    fn uncertainty_shape_and_floor() {
        let model = UdmlModel::new(config(EstimatorInput::Variance), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s2 = Tensor::full(&[3, 4], 0.5);
        let rho = model.uncertainty(&[s2.clone(), s2]).unwrap();
        assert_eq!(rho.shape(), &[3, 2]);
        assert!(rho.data().iter().all(|&r| r >= crate::estimator::RHO_FLOOR));
        assert!(model.uncertainty(&[Tensor::full(&[3, 5], 0.5)]).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = config(EstimatorInput::Variance);
        c.dims.clear();
        assert!(UdmlModel::new(c, &mut rng).is_err());
        let mut c = config(EstimatorInput::Variance);
        c.num_classes = 1;
        assert!(UdmlModel::new(c, &mut rng).is_err());
    }

    #[test]
    fn stack_columns_layout() {
        let t = stack_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(stack_columns(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
