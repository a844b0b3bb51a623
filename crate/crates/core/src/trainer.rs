//! Two-stage training: clean pre-training of encoders and head, then
//! noise-aware training where the estimators learn from injected noise
//! behind a gradient block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dependency::{dependency_scores, drop_modality_logits, DependencyState, DEFAULT_DECAY};
use crate::encoder::{embed_sample, EmbedMode, GaussianEmbedding};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorInput, NoiseGrid};
use crate::fusion::{
    column_means, pe_baseline_weights, unbiased_weights, uniform_weights, variance_uncertainty, FusionWeights,
    Strategy,
};
use crate::model::{ModelConfig, UdmlModel};
use crate::nn::{Checkpoint, Optimizer, OptimizerKind};
use crate::synthdata::{ModalityBatch, SyntheticData};

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// Running average over training batches.
    Ema,
    /// One validation pass at the end of every epoch.
    EvalPass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstGradScope {
    /// The estimator loss reaches only the estimator.
    EstimatorOnly,
    /// The estimator loss also reaches each encoder's variance head.
    VarianceHead,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(format!(concat!("expected one of:", $(" ", $text),+, "; got {:?}"), s)),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(OptimizerChoice { Sgd => "sgd", Adam => "adam" });
keyword_enum!(AlphaMode { Ema => "ema", EvalPass => "eval_pass" });
keyword_enum!(EstGradScope { EstimatorOnly => "estimator_only", VarianceHead => "variance_head" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Estimator never trained; embedding variance stands in for uncertainty.
    pub nue_off: bool,
    /// Dependency correction disabled (alpha fixed at one).
    pub mc_off: bool,
    /// Single-stage training with the full loss from the first epoch.
    pub pos_off: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub stage1_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub est_lr: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub ablations: Ablations,
    pub noise_grid: NoiseGrid,
    pub alpha_mode: AlphaMode,
    pub alpha_decay: f64,
    pub est_grad_scope: EstGradScope,
    pub eval_sample: bool,
    pub estimator_input: EstimatorInput,
    pub hidden: usize,
    pub embed_dim: usize,
    pub estimator_hidden: usize,
    pub stage2_dynamic_task: bool,
    pub stage2_noisy_task: bool,
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            stage1_fraction: 0.5,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            est_lr: 1e-3,
            seed: 0,
            strategy: Strategy::Udml,
            ablations: Ablations::default(),
            noise_grid: NoiseGrid::default(),
            alpha_mode: AlphaMode::Ema,
            alpha_decay: DEFAULT_DECAY,
            est_grad_scope: EstGradScope::EstimatorOnly,
            eval_sample: false,
            estimator_input: EstimatorInput::Variance,
            hidden: 64,
            embed_dim: 32,
            estimator_hidden: 64,
            stage2_dynamic_task: true,
            stage2_noisy_task: false,
            plateau_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be positive and finite"))
            }
        };
        if self.epochs < 2 {
            return Err(Error::config("epochs", "must be at least 2"));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(Error::config("stage1_fraction", "must lie strictly between 0 and 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        positive("lr", self.lr)?;
        positive("est_lr", self.est_lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (key, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.alpha_decay) {
            return Err(Error::config("alpha_decay", "must lie in [0, 1)"));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.estimator_hidden == 0 {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience", "must be positive"));
        }
        Ok(())
    }

    /// Number of clean pre-training epochs.
    pub fn stage1_epochs(&self) -> usize {
        if self.ablations.pos_off {
            0
        } else {
            ((self.stage1_fraction * self.epochs as f64).ceil() as usize).min(self.epochs)
        }
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: self.momentum },
            OptimizerChoice::Adam => OptimizerKind::Adam { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    NoiseAware,
}

impl Stage {
    pub fn number(self) -> usize {
        match self {
            Stage::Pretrain => 1,
            Stage::NoiseAware => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub uni: f64,
    /// Absent when the estimator branch did not run.
    pub est: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_w: Vec<f64>,
    pub mean_rho: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_task: f64,
    pub train_uni: f64,
    pub train_est: Option<f64>,
    pub val: EvalMetrics,
}

impl EpochRecord {
    pub fn train_loss(&self) -> f64 {
        self.train_task + self.train_uni + self.train_est.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub stage1_epochs: usize,
    pub epochs: Vec<EpochRecord>,
    /// Clean test split under the configured strategy.
    pub test: EvalMetrics,
}

fn fmt_num(v: f64) -> String {
    format!("{v:.8}")
}

impl RunRecord {
    pub fn csv_header(num_modalities: usize) -> String {
        let mut cols: Vec<String> = [
            "epoch", "stage", "lr", "train_loss", "train_task", "train_uni", "train_est", "val_loss", "val_acc",
            "val_f1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for prefix in ["alpha", "rho", "w"] {
            cols.extend((1..=num_modalities).map(|m| format!("{prefix}_m{m}")));
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let m = self.test.alpha.len();
        let mut out = Self::csv_header(m);
        out.push('\n');
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.stage.number().to_string(),
                fmt_num(e.lr),
                fmt_num(e.train_loss()),
                fmt_num(e.train_task),
                fmt_num(e.train_uni),
                e.train_est.map(fmt_num).unwrap_or_default(),
                fmt_num(e.val.loss),
                fmt_num(e.val.accuracy),
                fmt_num(e.val.macro_f1),
            ];
            for series in [&e.val.alpha, &e.val.mean_rho, &e.val.mean_w] {
                row.extend(series.iter().map(|v| fmt_num(*v)));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Final metrics as `key=value` pairs.
    pub fn summary_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("epochs_run".to_string(), self.epochs.len().to_string()),
            (
                "stage_boundary".to_string(),
                if self.config.ablations.pos_off { "none".to_string() } else { self.stage1_epochs.to_string() },
            ),
            ("test_loss".to_string(), fmt_num(self.test.loss)),
            ("test_acc".to_string(), fmt_num(self.test.accuracy)),
            ("test_f1".to_string(), fmt_num(self.test.macro_f1)),
        ];
        for (m, v) in self.test.alpha.iter().enumerate() {
            out.push((format!("alpha_m{}", m + 1), fmt_num(*v)));
        }
        for (m, v) in self.test.mean_rho.iter().enumerate() {
            out.push((format!("rho_m{}", m + 1), fmt_num(*v)));
        }
        for (m, v) in self.test.mean_w.iter().enumerate() {
            out.push((format!("w_m{}", m + 1), fmt_num(*v)));
        }
        if let Some(last) = self.epochs.last() {
            out.push(("val_acc".to_string(), fmt_num(last.val.accuracy)));
        }
        out
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the labels or the predictions.
pub fn macro_f1(pred: &[usize], labels: &[usize]) -> f64 {
    let k = pred.iter().chain(labels).copied().max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fneg) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &l) in pred.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..k {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64;
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Adds `sigma[i] * N(0, 1)` to every coordinate of row `i`.
pub fn inject_rowwise<R: Rng + ?Sized>(x: &Tensor, sigma: &[f64], rng: &mut R) -> Result<Tensor> {
    if sigma.len() != x.rows() {
        return Err(Error::shape("inject_rowwise", &[x.rows()], &[sigma.len()]));
    }
    let cols = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = sigma[i / cols];
            if s == 0.0 {
                *v
            } else {
                v + s * rng.sample::<f64, _>(StandardNormal)
            }
        })
        .collect();
    Tensor::new(x.shape(), data)
}

#[derive(Clone, Debug)]
struct Plateau {
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    fn new() -> Self {
        Plateau { best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Returns true when the learning rate should be halved.
    fn observe(&mut self, loss: f64, patience: usize) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            false
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= patience {
                self.bad_epochs = 0;
                true
            } else {
                false
            }
        }
    }
}

pub struct Trainer {
    config: TrainConfig,
    pub model: UdmlModel,
    pub dependency: DependencyState,
    enc_opt: Optimizer,
    est_opt: Optimizer,
    task_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    epoch: usize,
    plateau: Plateau,
    /// When false, stage-2 steps skip the estimator branch entirely.
    pub compute_est: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig, dims: &[usize], num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model_config = ModelConfig {
            dims: dims.to_vec(),
            num_classes,
            hidden: config.hidden,
            embed_dim: config.embed_dim,
            estimator_hidden: config.estimator_hidden,
            estimator_input: config.estimator_input,
            strategy: config.strategy,
        };
        let model = UdmlModel::new(model_config, &mut stream(config.seed, 0))?;
        model.check_groups()?;
        let kind = config.optimizer_kind();
        let enc_opt = Optimizer::new(kind, config.lr, config.weight_decay, model.encoder_group(), &model.store);
        let est_opt = Optimizer::new(kind, config.est_lr, config.weight_decay, model.estimator_group(), &model.store);
        Ok(Trainer {
            dependency: DependencyState::new(dims.len(), config.alpha_decay)?,
            task_rng: stream(config.seed, 1),
            noise_rng: stream(config.seed, 2),
            model,
            enc_opt,
            est_opt,
            epoch: 0,
            plateau: Plateau::new(),
            compute_est: true,
            config,
        })
    }

    /// Rebuilds a trained model from a checkpoint written by
    /// [`Trainer::checkpoint`].
    pub fn from_checkpoint(config: TrainConfig, dims: &[usize], num_classes: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, dims, num_classes)?;
        t.model.store.load_from(ckpt)?;
        let find = |name: &str| {
            ckpt.iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.data().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let alpha = find("dependency.alpha")?;
        let raw = find("dependency.raw_d_ema")?;
        let updates = find("dependency.updates")?;
        t.dependency.restore(&alpha, &raw, updates.first().copied().unwrap_or(0.0) as u64)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut out: Checkpoint = self.model.store.entries().map(|(n, t)| (n.to_string(), t.clone())).collect();
        out.push(("dependency.alpha".into(), Tensor::vector(self.dependency.alpha().to_vec())));
        out.push(("dependency.raw_d_ema".into(), Tensor::vector(self.dependency.raw_d_ema().to_vec())));
        out.push(("dependency.updates".into(), Tensor::vector(vec![self.dependency.updates() as f64])));
        out
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn encoder_lr(&self) -> f64 {
        self.enc_opt.lr()
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.config.stage1_epochs() {
            Stage::Pretrain
        } else {
            Stage::NoiseAware
        }
    }

    /// Alpha as applied to weights (ones under the dependency ablation).
    pub fn applied_alpha(&self) -> Vec<f64> {
        if self.config.ablations.mc_off {
            vec![1.0; self.model.num_modalities()]
        } else {
            self.dependency.alpha().to_vec()
        }
    }

    /// Estimator inputs for each modality: clean variances or raw features.
    fn estimator_inputs(&self, sigma2: &[Tensor], raw: &[Tensor]) -> Vec<Tensor> {
        match self.config.estimator_input {
            EstimatorInput::Variance => sigma2.to_vec(),
            EstimatorInput::Raw => raw.to_vec(),
        }
    }

    /// Fusion weights for `strategy` given clean variances and raw inputs.
    pub fn weights(&self, strategy: Strategy, sigma2: &[Tensor], raw: &[Tensor]) -> Result<FusionWeights> {
        let refs: Vec<&Tensor> = sigma2.iter().collect();
        let rho = if self.config.ablations.nue_off {
            variance_uncertainty(&refs)?
        } else {
            self.model.uncertainty(&self.estimator_inputs(sigma2, raw))?
        };
        let alpha = self.applied_alpha();
        let w = match strategy {
            Strategy::Static => uniform_weights(rho.rows(), alpha.len()),
            Strategy::Pe => pe_baseline_weights(&refs)?,
            Strategy::Udml => unbiased_weights(&rho, &alpha)?,
        };
        Ok(FusionWeights { w, rho, alpha })
    }

    fn noisy_inputs(&mut self, features: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
        let mut xs = Vec::with_capacity(features.len());
        let mut sigmas = Vec::with_capacity(features.len());
        for x in features {
            let s: Vec<f64> = (0..x.rows()).map(|_| self.config.noise_grid.sample(&mut self.noise_rng)).collect();
            xs.push(inject_rowwise(x, &s, &mut self.noise_rng)?);
            sigmas.push(s);
        }
        Ok((xs, sigmas))
    }

    /// Estimator input for one modality on the tape, with the gradient block
    /// placed according to `est_grad_scope`.
    fn blocked_estimator_input(&self, tape: &mut Tape, m: usize, x: Var) -> Result<Var> {
        if self.config.estimator_input == EstimatorInput::Raw {
            return Ok(x);
        }
        let enc = &self.model.encoders[m];
        let h = enc.features(tape, &self.model.store, x)?;
        Ok(match self.config.est_grad_scope {
            EstGradScope::EstimatorOnly => {
                let s2 = enc.variance(tape, &self.model.store, h)?;
                tape.detach(s2)
            }
            EstGradScope::VarianceHead => {
                let hd = tape.detach(h);
                enc.variance(tape, &self.model.store, hd)?
            }
        })
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, batch: &ModalityBatch, stage: Stage) -> Result<StepLosses> {
        let m = self.model.num_modalities();
        let noise_aware = stage == Stage::NoiseAware;
        let run_est = noise_aware && self.compute_est && !self.config.ablations.nue_off;
        let noisy = if noise_aware && (run_est || self.config.stage2_noisy_task) {
            Some(self.noisy_inputs(&batch.features)?)
        } else {
            None
        };
        let task_features = match (&noisy, self.config.stage2_noisy_task) {
            (Some((xs, _)), true) => xs.clone(),
            _ => batch.features.clone(),
        };

        self.model.store.zero_grad_all();
        let mut tape = Tape::new();
        let xs: Vec<Var> = task_features.iter().map(|x| tape.constant(x.clone())).collect();
        let emb = self.model.encode(&mut tape, &xs)?;
        let z = emb
            .iter()
            .map(|e| embed_sample(&mut tape, e, EmbedMode::Train, &mut self.task_rng))
            .collect::<Result<Vec<_>>>()?;

        let static_logits = self.model.head.fuse_static(&mut tape, &self.model.store, &z)?;
        let dynamic = noise_aware && self.config.stage2_dynamic_task && self.config.strategy != Strategy::Static;
        let task_logits = if dynamic {
            let sigma2: Vec<Tensor> = emb.iter().map(|e| tape.value(e.sigma2).clone()).collect();
            let fw = self.weights(self.config.strategy, &sigma2, &task_features)?;
            self.model.head.fuse(&mut tape, &self.model.store, &z, &fw.w)?
        } else {
            static_logits
        };
        let l_task = tape.softmax_cross_entropy(task_logits, &batch.labels)?;

        // Unimodal branches: every modality but one zeroed, shared head.
        let mut keep_only = Vec::with_capacity(m);
        let mut l_uni: Option<Var> = None;
        for k in 0..m {
            let others: Vec<usize> = (0..m).filter(|&j| j != k).collect();
            let logits = drop_modality_logits(&mut tape, &self.model.store, &self.model.head, &z, None, &others)?;
            let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
            l_uni = Some(match l_uni {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            keep_only.push(logits);
        }
        let l_uni = l_uni.expect("at least one modality");

        if self.config.alpha_mode == AlphaMode::Ema {
            let dropped: Vec<Tensor> = if m == 2 {
                vec![tape.value(keep_only[1]).clone(), tape.value(keep_only[0]).clone()]
            } else {
                (0..m)
                    .map(|k| {
                        drop_modality_logits(&mut tape, &self.model.store, &self.model.head, &z, None, &[k])
                            .map(|v| tape.value(v).clone())
                    })
                    .collect::<Result<_>>()?
            };
            let d = dependency_scores(tape.value(static_logits), &dropped)?;
            self.dependency.update(&d)?;
        }

        let mut total = tape.add(l_task, l_uni)?;
        let mut est_value = None;
        if run_est {
            let (noisy_x, sigmas) = noisy.as_ref().expect("noise drawn when the estimator runs");
            let mut l_est: Option<Var> = None;
            for k in 0..m {
                let x = tape.constant(noisy_x[k].clone());
                let input = self.blocked_estimator_input(&mut tape, k, x)?;
                let loss = self.model.estimators[k].loss(&mut tape, &self.model.store, input, &sigmas[k])?;
                l_est = Some(match l_est {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let l_est = l_est.expect("at least one modality");
            est_value = Some(tape.value(l_est).item());
            total = tape.add(total, l_est)?;
        }

        let losses = StepLosses { task: tape.value(l_task).item(), uni: tape.value(l_uni).item(), est: est_value };
        if !(losses.task.is_finite() && losses.uni.is_finite()) {
            return Err(Error::Domain { op: "train_step", msg: "non-finite loss".into() });
        }
        crate::nn::backward(&mut tape, total, &mut self.model.store)?;
        self.enc_opt.step(&mut self.model.store)?;
        if run_est {
            self.est_opt.step(&mut self.model.store)?;
        }
        Ok(losses)
    }

    /// Trains one epoch and evaluates on the validation split.
    pub fn run_epoch(&mut self, data: &SyntheticData) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let stage = self.stage_of(epoch);
        if epoch > 0 && epoch == self.config.stage1_epochs() {
            self.plateau = Plateau::new();
        }
        let n = data.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.task_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut task, mut uni, mut est, mut est_rows) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.train.select(chunk);
            let l = self.train_step(&batch, stage)?;
            let w = chunk.len() as f64;
            task += l.task * w;
            uni += l.uni * w;
            if let Some(e) = l.est {
                est += e * w;
                est_rows += chunk.len();
            }
        }
        let lr = self.enc_opt.lr();
        if self.config.alpha_mode == AlphaMode::EvalPass {
            let d = self.dependency_pass(&data.val)?;
            self.dependency.set_from_scores(&d)?;
        }
        let eval_strategy = if stage == Stage::Pretrain { Strategy::Static } else { self.config.strategy };
        let val = self.evaluate(&data.val, eval_strategy)?;
        if self.plateau.observe(val.loss, self.config.plateau_patience) {
            self.enc_opt.set_lr(lr * 0.5);
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            stage,
            lr,
            train_task: task / n as f64,
            train_uni: uni / n as f64,
            train_est: (est_rows > 0).then(|| est / est_rows as f64),
            val,
        })
    }

    pub fn train(&mut self, data: &SyntheticData) -> Result<RunRecord> {
        if data.dims() != self.model.config().dims || data.num_classes != self.model.config().num_classes {
            return Err(Error::Contract("dataset shape does not match the model".into()));
        }
        let mut epochs = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            epochs.push(self.run_epoch(data)?);
            self.model.check_groups()?;
        }
        let test = self.evaluate(&data.test, self.config.strategy)?;
        Ok(RunRecord { config: self.config.clone(), stage1_epochs: self.config.stage1_epochs(), epochs, test })
    }

    /// Clean embeddings `(mu, sigma2)` per modality, computed in chunks.
    pub fn embeddings(&self, features: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let m = features.len();
        let rows = features.first().map_or(0, Tensor::rows);
        let mut mu: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut s2: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut start = 0;
        while start < rows {
            let end = (start + EVAL_CHUNK).min(rows);
            let mut tape = Tape::new();
            let xs: Vec<Var> = features.iter().map(|x| tape.constant(slice_rows(x, start, end))).collect();
            let emb: Vec<GaussianEmbedding> = self.model.encode(&mut tape, &xs)?;
            for (k, e) in emb.iter().enumerate() {
                mu[k].extend_from_slice(tape.value(e.mu).data());
                s2[k].extend_from_slice(tape.value(e.sigma2).data());
            }
            start = end;
        }
        let d = self.model.config().embed_dim;
        let build = |v: Vec<Vec<f64>>| v.into_iter().map(|data| Tensor::new(&[rows, d], data)).collect::<Result<Vec<_>>>();
        Ok((build(mu)?, build(s2)?))
    }

    /// Per-row estimated noise level for modality `m` on the given inputs.
    pub fn estimate_noise(&self, features: &[Tensor], m: usize) -> Result<Vec<f64>> {
        if m >= features.len() {
            return Err(Error::Index { op: "estimate_noise", index: m, len: features.len() });
        }
        let input = match self.config.estimator_input {
            EstimatorInput::Variance => self.embeddings(features)?.1.swap_remove(m),
            EstimatorInput::Raw => features[m].clone(),
        };
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let s = self.model.predict_sigma(&mut tape, m, v)?;
        Ok(tape.value(s).data().to_vec())
    }

    fn eval_embeddings(&self, features: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (mu, s2) = self.embeddings(features)?;
        if !self.config.eval_sample {
            return Ok((mu, s2));
        }
        let mut rng = stream(self.config.seed, 3);
        let z = mu
            .iter()
            .zip(&s2)
            .map(|(m, v)| {
                let data = m
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(a, b)| a + b.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(m.shape(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((z, s2))
    }

    /// Deterministic evaluation on `batch` with weights from `strategy`.
    pub fn evaluate(&self, batch: &ModalityBatch, strategy: Strategy) -> Result<EvalMetrics> {
        let (z, s2) = self.eval_embeddings(&batch.features)?;
        let fw = self.weights(strategy, &s2, &batch.features)?;
        let mut tape = Tape::new();
        let zv: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let logits = match strategy {
            Strategy::Static => self.model.head.fuse_static(&mut tape, &self.model.store, &zv)?,
            _ => self.model.head.fuse(&mut tape, &self.model.store, &zv, &fw.w)?,
        };
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let pred = argmax_rows(tape.value(logits));
        Ok(EvalMetrics {
            loss: tape.value(loss).item(),
            accuracy: accuracy(&pred, &batch.labels),
            macro_f1: macro_f1(&pred, &batch.labels),
            mean_w: column_means(&fw.w),
            mean_rho: column_means(&fw.rho),
            alpha: self.dependency.alpha().to_vec(),
        })
    }

    /// Dependency scores from one deterministic pass over `batch`.
    pub fn dependency_pass(&self, batch: &ModalityBatch) -> Result<Vec<f64>> {
        let (mu, _) = self.embeddings(&batch.features)?;
        let mut tape = Tape::new();
        let z: Vec<Var> = mu.iter().map(|t| tape.constant(t.clone())).collect();
        let full = self.model.head.fuse_static(&mut tape, &self.model.store, &z)?;
        let dropped = (0..z.len())
            .map(|k| {
                drop_modality_logits(&mut tape, &self.model.store, &self.model.head, &z, None, &[k])
                    .map(|v| tape.value(v).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        dependency_scores(tape.value(full), &dropped)
    }
}

fn slice_rows(x: &Tensor, start: usize, end: usize) -> Tensor {
    let cols = x.cols();
    Tensor::new(&[end - start, cols], x.data()[start * cols..end * cols].to_vec()).expect("row slice")
}
