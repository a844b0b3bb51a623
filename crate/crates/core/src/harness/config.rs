//! Flat `key = value` experiment configuration.
//!
//! Every training option and every synthetic-data option has one key.
//! Per-modality data keys are written `m<i>.<field>` with `i` counted from 1.
//! `#` starts a comment. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::NoiseGrid;
use crate::synthdata::{ModalitySpec, NoiseKind, SyntheticSpec, Warp};
use crate::trainer::TrainConfig;

/// Options that only the harness commands read.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOptions {
    /// 1-based modality corrupted by `sweep`.
    pub sweep_modality: usize,
    pub sweep_sigmas: Vec<f64>,
    pub compare_noises: Vec<NoiseKind>,
    pub compare_epsilons: Vec<f64>,
    pub compare_fraction: f64,
    /// Relative chance of each modality being the corrupted one; empty means uniform.
    pub compare_modality_weights: Vec<f64>,
    /// Split whose samples `calibrate` corrupts.
    pub calibrate_split: CalibrateSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrateSplit {
    Val,
    Test,
}

impl FromStr for CalibrateSplit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val" => Ok(CalibrateSplit::Val),
            "test" => Ok(CalibrateSplit::Test),
            _ => Err(format!("expected val|test, got {s:?}")),
        }
    }
}

impl std::fmt::Display for CalibrateSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CalibrateSplit::Val => "val",
            CalibrateSplit::Test => "test",
        })
    }
}

impl Default for CommandOptions {
    fn default() -> Self {
        CommandOptions {
            sweep_modality: 2,
            sweep_sigmas: (0..=12).map(f64::from).collect(),
            compare_noises: vec![NoiseKind::Gaussian, NoiseKind::Salt],
            compare_epsilons: vec![5.0, 10.0],
            compare_fraction: 0.5,
            compare_modality_weights: Vec::new(),
            calibrate_split: CalibrateSplit::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub commands: CommandOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            commands: CommandOptions::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "stage1_fraction",
    "batch_size",
    "lr",
    "optimizer",
    "momentum",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "est_lr",
    "seed",
    "strategy",
    "nue_off",
    "mc_off",
    "pos_off",
    "noise_grid",
    "alpha_mode",
    "alpha_decay",
    "est_grad_scope",
    "eval_sample",
    "estimator_input",
    "hidden",
    "embed_dim",
    "estimator_hidden",
    "stage2_dynamic_task",
    "stage2_noisy_task",
    "plateau_patience",
];

const DATA_KEYS: &[&str] = &["num_classes", "num_modalities", "train_samples", "val_samples", "test_samples", "data_seed"];

const MODALITY_FIELDS: &[&str] = &["feat_dim", "separation", "warp", "intra_class_std"];

const COMMAND_KEYS: &[&str] = &[
    "sweep.modality",
    "sweep.sigmas",
    "compare.noises",
    "compare.epsilons",
    "compare.fraction",
    "compare.modality_weights",
    "calibrate.split",
];

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got {raw:?}")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "stage1_fraction" => t.stage1_fraction = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "optimizer" => t.optimizer = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "est_lr" => t.est_lr = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "strategy" => t.strategy = parse(key, value)?,
            "nue_off" => t.ablations.nue_off = parse(key, value)?,
            "mc_off" => t.ablations.mc_off = parse(key, value)?,
            "pos_off" => t.ablations.pos_off = parse(key, value)?,
            "noise_grid" => t.noise_grid = NoiseGrid::new(parse_list(key, value)?)?,
            "alpha_mode" => t.alpha_mode = parse(key, value)?,
            "alpha_decay" => t.alpha_decay = parse(key, value)?,
            "est_grad_scope" => t.est_grad_scope = parse(key, value)?,
            "eval_sample" => t.eval_sample = parse(key, value)?,
            "estimator_input" => t.estimator_input = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "estimator_hidden" => t.estimator_hidden = parse(key, value)?,
            "stage2_dynamic_task" => t.stage2_dynamic_task = parse(key, value)?,
            "stage2_noisy_task" => t.stage2_noisy_task = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "num_classes" => self.data.num_classes = parse(key, value)?,
            "num_modalities" => {
                let m: usize = parse(key, value)?;
                if m == 0 {
                    return Err(Error::config(key, "need at least one modality"));
                }
                let template = self.data.modalities.last().cloned().unwrap_or(ModalitySpec {
                    feat_dim: 20,
                    separation: 8.0,
                    warp: Warp::None,
                    intra_class_std: 2.0,
                });
                self.data.modalities.resize(m, template);
            }
            "train_samples" => self.data.train_samples = parse(key, value)?,
            "val_samples" => self.data.val_samples = parse(key, value)?,
            "test_samples" => self.data.test_samples = parse(key, value)?,
            "data_seed" => self.data.seed = parse(key, value)?,
            "sweep.modality" => self.commands.sweep_modality = parse(key, value)?,
            "sweep.sigmas" => self.commands.sweep_sigmas = parse_list(key, value)?,
            "compare.noises" => self.commands.compare_noises = parse_list(key, value)?,
            "compare.epsilons" => self.commands.compare_epsilons = parse_list(key, value)?,
            "compare.fraction" => self.commands.compare_fraction = parse(key, value)?,
            "compare.modality_weights" => self.commands.compare_modality_weights = parse_list(key, value)?,
            "calibrate.split" => self.commands.calibrate_split = parse(key, value)?,
            _ => return self.set_modality(key, value),
        }
        Ok(())
    }

    fn set_modality(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::config(key, "unknown key");
        let (head, field) = key.split_once('.').ok_or_else(unknown)?;
        let index: usize = head.strip_prefix('m').and_then(|i| i.parse().ok()).ok_or_else(unknown)?;
        if index == 0 || index > self.data.modalities.len() {
            return Err(Error::config(
                key,
                format!("modality index out of range 1..={} (set num_modalities first)", self.data.modalities.len()),
            ));
        }
        let spec = &mut self.data.modalities[index - 1];
        match field {
            "feat_dim" => spec.feat_dim = parse(key, value)?,
            "separation" => spec.separation = parse(key, value)?,
            "warp" => spec.warp = parse(key, value)?,
            "intra_class_std" => spec.intra_class_std = parse(key, value)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Sets both the training seed and the data seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        let c = &self.commands;
        if c.sweep_modality == 0 || c.sweep_modality > self.data.modalities.len() {
            return Err(Error::config("sweep.modality", "out of range"));
        }
        if c.sweep_sigmas.is_empty() || c.sweep_sigmas.windows(2).any(|w| w[1] <= w[0]) || c.sweep_sigmas[0] < 0.0 {
            return Err(Error::config("sweep.sigmas", "must be nonnegative and strictly increasing"));
        }
        if c.compare_epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("compare.epsilons", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&c.compare_fraction) {
            return Err(Error::config("compare.fraction", "must lie in [0, 1]"));
        }
        if !c.compare_modality_weights.is_empty()
            && (c.compare_modality_weights.len() != self.data.modalities.len()
                || c.compare_modality_weights.iter().any(|w| *w < 0.0)
                || c.compare_modality_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::config("compare.modality_weights", "need one nonnegative weight per modality"));
        }
        Ok(())
    }

    /// Every key with its effective value; parsing the result reproduces
    /// this config.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("epochs", t.epochs.to_string());
        put("stage1_fraction", t.stage1_fraction.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("optimizer", t.optimizer.to_string());
        put("momentum", t.momentum.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("est_lr", t.est_lr.to_string());
        put("seed", t.seed.to_string());
        put("strategy", t.strategy.to_string());
        put("nue_off", t.ablations.nue_off.to_string());
        put("mc_off", t.ablations.mc_off.to_string());
        put("pos_off", t.ablations.pos_off.to_string());
        put("noise_grid", join(t.noise_grid.levels()));
        put("alpha_mode", t.alpha_mode.to_string());
        put("alpha_decay", t.alpha_decay.to_string());
        put("est_grad_scope", t.est_grad_scope.to_string());
        put("eval_sample", t.eval_sample.to_string());
        put("estimator_input", t.estimator_input.to_string());
        put("hidden", t.hidden.to_string());
        put("embed_dim", t.embed_dim.to_string());
        put("estimator_hidden", t.estimator_hidden.to_string());
        put("stage2_dynamic_task", t.stage2_dynamic_task.to_string());
        put("stage2_noisy_task", t.stage2_noisy_task.to_string());
        put("plateau_patience", t.plateau_patience.to_string());
        let d = &self.data;
        put("num_classes", d.num_classes.to_string());
        put("num_modalities", d.modalities.len().to_string());
        for (i, m) in d.modalities.iter().enumerate() {
            put(&format!("m{}.feat_dim", i + 1), m.feat_dim.to_string());
            put(&format!("m{}.separation", i + 1), m.separation.to_string());
            put(&format!("m{}.warp", i + 1), m.warp.to_string());
            put(&format!("m{}.intra_class_std", i + 1), m.intra_class_std.to_string());
        }
        put("train_samples", d.train_samples.to_string());
        put("val_samples", d.val_samples.to_string());
        put("test_samples", d.test_samples.to_string());
        put("data_seed", d.seed.to_string());
        let c = &self.commands;
        put("sweep.modality", c.sweep_modality.to_string());
        put("sweep.sigmas", join(&c.sweep_sigmas));
        put("compare.noises", join(&c.compare_noises));
        put("compare.epsilons", join(&c.compare_epsilons));
        put("compare.fraction", c.compare_fraction.to_string());
        put("compare.modality_weights", join(&c.compare_modality_weights));
        put("calibrate.split", c.calibrate_split.to_string());
        s
    }

    /// Every accepted key, with per-modality keys expanded for the current
    /// modality count.
    pub fn known_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = TRAIN_KEYS.iter().chain(DATA_KEYS).map(|k| k.to_string()).collect();
        for i in 1..=self.data.modalities.len() {
            keys.extend(MODALITY_FIELDS.iter().map(|f| format!("m{i}.{f}")));
        }
        keys.extend(COMMAND_KEYS.iter().map(|k| k.to_string()));
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Strategy;

    #[test]
    fn defaults_echo_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn echo_lists_every_key_once() {
        let cfg = ExperimentConfig::default();
        let echoed: Vec<String> =
            cfg.echo().lines().map(|l| l.split_once(" = ").unwrap().0.to_string()).collect();
        assert_eq!(echoed.len(), cfg.known_keys().len());
        for k in cfg.known_keys() {
            assert!(echoed.contains(&k), "{k} missing from echo");
        }
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "
            # comment line
            epochs = 12   # trailing comment
            strategy = pe
            noise_grid = 0, 0.5, 3
            pos_off = true
            num_modalities = 3
            m3.separation = 1.25
            m3.warp = nonlinear
            compare.modality_weights = 0.2,0.3,0.5
            lr = 0.00025
        ";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.train.strategy, Strategy::Pe);
        assert_eq!(cfg.train.noise_grid.levels(), &[0.0, 0.5, 3.0]);
        assert!(cfg.train.ablations.pos_off);
        assert_eq!(cfg.data.modalities.len(), 3);
        assert_eq!(cfg.data.modalities[2].separation, 1.25);
        assert_eq!(cfg.data.modalities[2].warp, Warp::Nonlinear);
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        for text in ["epoch = 3", "m1.colour = red", "m9.separation = 1", "zz"] {
            let err = ExperimentConfig::from_text(text).unwrap_err();
            let msg = err.to_string();
            let key = text.split('=').next().unwrap().trim();
            assert!(matches!(err, Error::Config { .. }), "{text}: {msg}");
            if key != "zz" {
                assert!(msg.contains(key), "{msg} should name {key}");
            }
        }
        let err = ExperimentConfig::from_text("lr = fast").unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn overrides_apply_after_file() {
        let mut cfg = ExperimentConfig::from_text("epochs = 4").unwrap();
        cfg.apply_override("epochs=9").unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert!(cfg.apply_override("epochs").is_err());
        cfg.set_seed(17);
        assert_eq!((cfg.train.seed, cfg.data.seed), (17, 17));
    }

    #[test]
    fn validation_catches_bad_command_options() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("sweep.modality", "3").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("sweep.sigmas", "0,2,1").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("compare.modality_weights", "1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
