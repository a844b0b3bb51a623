//! Experiment commands behind the `udml` binary: data generation, training,
//! noise sweeps, method comparison and estimator calibration.

pub mod config;
pub mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::synthdata::{
    corrupt_modality, corrupt_split, generate, read_dataset, write_dataset, ModalityBatch, NoiseKind, SyntheticData,
};
use crate::trainer::{RunRecord, Trainer};

pub use config::{CalibrateSplit, CommandOptions, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT: &str = "sweep.svg";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";

/// RNG stream ids used by the evaluation commands; training uses 0..=3.
const SWEEP_STREAM: u64 = 16;
const COMPARE_STREAM: u64 = 32;
const CALIBRATE_STREAM: u64 = 64;

fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn num(v: f64) -> String {
    format!("{v:.8}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads split files from `dir` when given, otherwise generates from the spec.
pub fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<SyntheticData> {
    match dir {
        Some(d) => read_dataset(d),
        None => generate(&cfg.data),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticData> {
    let data = generate(&cfg.data)?;
    write_dataset(&data, out)?;
    Ok(data)
}

fn ablation_label(cfg: &ExperimentConfig) -> String {
    let a = cfg.train.ablations;
    let on: Vec<&str> = [("nue_off", a.nue_off), ("mc_off", a.mc_off), ("pos_off", a.pos_off)]
        .iter()
        .filter(|(_, v)| *v)
        .map(|(k, _)| *k)
        .collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join(",")
    }
}

/// Trains and writes `config.txt`, `run.csv`, `summary.txt` and `model.ckpt`.
pub fn cmd_train(cfg: &ExperimentConfig, data: &SyntheticData, out: &Path) -> Result<RunRecord> {
    let mut trainer = Trainer::new(cfg.train.clone(), &data.dims(), data.num_classes)?;
    let record = trainer.train(data)?;
    write_file(&out.join(CONFIG_FILE), &cfg.echo())?;
    write_file(&out.join(RUN_FILE), &record.to_csv())?;
    let mut summary = String::new();
    writeln!(summary, "strategy={}", cfg.train.strategy).unwrap();
    writeln!(summary, "ablations={}", ablation_label(cfg)).unwrap();
    for (k, v) in record.summary_pairs() {
        writeln!(summary, "{k}={v}").unwrap();
    }
    writeln!(summary, "checkpoint={CHECKPOINT_FILE}").unwrap();
    write_file(&out.join(SUMMARY_FILE), &summary)?;
    let ckpt = trainer.checkpoint();
    write_checkpoint(&out.join(CHECKPOINT_FILE), ckpt.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(record)
}

/// Config and trained model of a finished run directory.
pub fn load_run(run_dir: &Path, data: &SyntheticData) -> Result<(ExperimentConfig, Trainer)> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ExperimentConfig::from_text(&text)?;
    let ckpt = read_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let trainer = Trainer::from_checkpoint(cfg.train.clone(), &data.dims(), data.num_classes, &ckpt)?;
    Ok((cfg, trainer))
}

/// Data for a run: split files when given, else regenerated from the run's config.
pub fn run_data(run_dir: &Path, data_dir: Option<&Path>) -> Result<SyntheticData> {
    if let Some(d) = data_dir {
        return read_dataset(d);
    }
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    generate(&ExperimentConfig::from_text(&text)?.data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    /// Unbiased weights.
    pub w: Vec<f64>,
    /// Baseline inverse-variance weights.
    pub w_pe: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    pub acc_static: f64,
    pub acc_pe: f64,
    pub acc_udml: f64,
}

/// Gaussian noise of each level in `sigmas` on modality `m` (0-based) of the test split.
pub fn sweep_rows(trainer: &Trainer, data: &SyntheticData, m: usize, sigmas: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    if m >= data.dims().len() {
        return Err(Error::Index { op: "sweep", index: m, len: data.dims().len() });
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let mut rng = eval_rng(seed, SWEEP_STREAM + i as u64);
        let batch = corrupt_modality(&data.test, m, NoiseKind::Gaussian, sigma, &data.stats, &mut rng)?;
        let udml = trainer.evaluate(&batch, Strategy::Udml)?;
        let pe = trainer.evaluate(&batch, Strategy::Pe)?;
        let st = trainer.evaluate(&batch, Strategy::Static)?;
        rows.push(SweepRow {
            sigma,
            w: udml.mean_w,
            w_pe: pe.mean_w,
            rho: udml.mean_rho,
            alpha: trainer.applied_alpha(),
            acc_static: st.accuracy,
            acc_pe: pe.accuracy,
            acc_udml: udml.accuracy,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let m = rows.first().map_or(0, |r| r.w.len());
    let mut cols = vec!["sigma".to_string()];
    for prefix in ["w", "rho", "alpha"] {
        cols.extend((1..=m).map(|i| format!("{prefix}_m{i}")));
    }
    cols.extend(["acc_static", "acc_pe", "acc_udml"].map(String::from));
    let mut out = cols.join(",");
    out.push('\n');
    for r in rows {
        let mut fields = vec![r.sigma.to_string()];
        for series in [&r.w, &r.rho, &r.alpha] {
            fields.extend(series.iter().map(|v| num(*v)));
        }
        fields.extend([r.acc_static, r.acc_pe, r.acc_udml].map(num));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn sweep_plot(rows: &[SweepRow], m: usize) -> String {
    let count = rows.first().map_or(0, |r| r.w.len());
    let mut series: Vec<svg::Series> = (0..count)
        .map(|k| svg::Series {
            label: format!("udml w_m{}", k + 1),
            points: rows.iter().map(|r| (r.sigma, r.w[k])).collect(),
        })
        .collect();
    series.push(svg::Series {
        label: format!("pe w_m{}", m + 1),
        points: rows.iter().map(|r| (r.sigma, r.w_pe[m])).collect(),
    });
    svg::line_plot(&format!("Fusion weights, Gaussian noise on modality {}", m + 1), "sigma", "mean weight", &series)
}

pub fn cmd_sweep(opts: &CommandOptions, run_dir: &Path, data: &SyntheticData, out: &Path) -> Result<Vec<SweepRow>> {
    let (cfg, trainer) = load_run(run_dir, data)?;
    if opts.sweep_modality == 0 || opts.sweep_modality > data.dims().len() {
        return Err(Error::config("sweep.modality", format!("must lie in 1..={}", data.dims().len())));
    }
    let m = opts.sweep_modality - 1;
    let rows = sweep_rows(&trainer, data, m, &opts.sweep_sigmas, cfg.train.seed)?;
    write_file(&out.join(SWEEP_FILE), &sweep_csv(&rows))?;
    write_file(&out.join(SWEEP_PLOT), &sweep_plot(&rows, m))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: Strategy,
    /// `None` for the clean test split.
    pub noise: Option<NoiseKind>,
    pub epsilon: f64,
    pub acc: f64,
    pub f1: f64,
}

/// Test splits for every (noise, epsilon) pair, clean first. The same
/// corrupted samples are shared by every method.
pub fn comparison_splits(opts: &CommandOptions, data: &SyntheticData, seed: u64) -> Result<Vec<(Option<NoiseKind>, f64, ModalityBatch)>> {
    let weights = (!opts.compare_modality_weights.is_empty()).then_some(opts.compare_modality_weights.as_slice());
    let mut out = vec![(None, 0.0, data.test.clone())];
    let mut stream = COMPARE_STREAM;
    for &kind in &opts.compare_noises {
        for &eps in &opts.compare_epsilons {
            let mut rng = eval_rng(seed, stream);
            stream += 1;
            let b = corrupt_split(&data.test, opts.compare_fraction, kind, eps, &data.stats, weights, &mut rng)?;
            out.push((Some(kind), eps, b));
        }
    }
    Ok(out)
}

/// Evaluates one checkpoint per strategy under `<run_root>/<strategy>/`,
/// training any that are missing with `cfg`.
pub fn cmd_compare(cfg: &ExperimentConfig, run_root: &Path, data: &SyntheticData, out: &Path) -> Result<Vec<CompareRow>> {
    let splits = comparison_splits(&cfg.commands, data, cfg.train.seed)?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let dir: PathBuf = run_root.join(strategy.to_string());
        if !dir.join(CHECKPOINT_FILE).exists() {
            let mut c = cfg.clone();
            c.train.strategy = strategy;
            cmd_train(&c, data, &dir)?;
        }
        let (_, trainer) = load_run(&dir, data)?;
        for (noise, eps, batch) in &splits {
            let e = trainer.evaluate(batch, strategy)?;
            rows.push(CompareRow { method: strategy, noise: *noise, epsilon: *eps, acc: e.accuracy, f1: e.macro_f1 });
        }
    }
    let mut csv = String::from("method,noise,epsilon,acc,f1\n");
    for r in &rows {
        let noise = r.noise.map_or("clean".to_string(), |k| k.to_string());
        writeln!(csv, "{},{},{},{},{}", r.method, noise, r.epsilon, num(r.acc), num(r.f1)).unwrap();
    }
    write_file(&out.join(COMPARE_FILE), &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub sigma: f64,
    /// 0-based.
    pub modality: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Estimated noise level on `batch` with Gaussian noise of every grid level
/// injected into each modality in turn.
pub fn calibration_rows(trainer: &Trainer, batch: &ModalityBatch, stats: &[crate::synthdata::FeatureStats], seed: u64) -> Result<Vec<CalibrationRow>> {
    let levels = trainer.config().noise_grid.levels().to_vec();
    let mut rows = Vec::new();
    let mut stream = CALIBRATE_STREAM;
    for &sigma in &levels {
        for m in 0..batch.num_modalities() {
            let mut rng = eval_rng(seed, stream);
            stream += 1;
            let noisy = corrupt_modality(batch, m, NoiseKind::Gaussian, sigma, stats, &mut rng)?;
            let est = trainer.estimate_noise(&noisy.features, m)?;
            let n = est.len();
            let mean = est.iter().sum::<f64>() / n as f64;
            let var = est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            rows.push(CalibrationRow { sigma, modality: m, mean, std: var.sqrt(), n });
        }
    }
    Ok(rows)
}

pub fn cmd_calibrate(opts: &CommandOptions, run_dir: &Path, data: &SyntheticData, out: &Path) -> Result<Vec<CalibrationRow>> {
    let (cfg, trainer) = load_run(run_dir, data)?;
    let batch = match opts.calibrate_split {
        CalibrateSplit::Val => &data.val,
        CalibrateSplit::Test => &data.test,
    };
    let rows = calibration_rows(&trainer, batch, &data.stats, cfg.train.seed)?;
    let mut csv = String::from("sigma,modality,sigma_hat_mean,sigma_hat_std,n\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.sigma, r.modality + 1, num(r.mean), num(r.std), r.n).unwrap();
    }
    write_file(&out.join(CALIBRATION_FILE), &csv)?;
    Ok(rows)
}

/// Process exit status for an error: 2 for configuration problems, 3 for
/// file-system failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}
