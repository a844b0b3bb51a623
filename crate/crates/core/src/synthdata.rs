//! Synthetic multimodal classification data with per-modality difficulty
//! controls, feature-space corruption and the split file format.
//!
//! Each modality draws one class mean per class on a sphere of radius
//! `separation`; samples are `mean + N(0, std^2 I)`, optionally pushed
//! through a fixed invertible warp `x -> s B tanh(A x / s)` with random
//! square `A`, `B` and `s` the per-coordinate RMS of the unwarped samples, so
//! the warped features keep the modality's scale. Warping keeps the Bayes
//! error but makes the classes harder to separate linearly.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Probability cap for salt corruption.
pub const SALT_MAX_RATE: f64 = 0.5;
/// Salt replaces a coordinate by `mean ± SALT_SPREAD * std`.
pub const SALT_SPREAD: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Warp {
    None,
    Nonlinear,
}

impl std::str::FromStr for Warp {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Warp::None),
            "nonlinear" => Ok(Warp::Nonlinear),
            _ => Err(format!("expected none|nonlinear, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Warp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Warp::None => "none",
            Warp::Nonlinear => "nonlinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub feat_dim: usize,
    pub separation: f64,
    pub warp: Warp,
    pub intra_class_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Six classes, an easy linear modality and a hard warped one.
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 6,
            modalities: vec![
                ModalitySpec {
                    feat_dim: 20,
                    separation: 8.0,
                    warp: Warp::None,
                    intra_class_std: 2.0,
                },
                ModalitySpec {
                    feat_dim: 20,
                    separation: 7.0,
                    warp: Warp::Nonlinear,
                    intra_class_std: 2.0,
                },
            ],
            train_samples: 6000,
            val_samples: 1000,
            test_samples: 2000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Strongly asymmetric pair: modality A well separated and linear,
    /// modality B weakly separated and warped.
    pub fn asymmetric() -> Self {
        let mut spec = SyntheticSpec::default();
        spec.modalities[0].separation = 8.0;
        spec.modalities[1].separation = 2.0;
        spec.modalities[1].warp = Warp::Nonlinear;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "need at least one modality"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            let key = |f: &str| format!("m{}.{f}", i + 1);
            if m.feat_dim < 2 {
                return Err(Error::config(key("feat_dim"), "must be at least 2"));
            }
            if !(m.separation >= 0.0 && m.separation.is_finite()) {
                return Err(Error::config(key("separation"), "must be finite and non-negative"));
            }
            if !(m.intra_class_std >= 0.0 && m.intra_class_std.is_finite()) {
                return Err(Error::config(key("intra_class_std"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.feat_dim).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Salt,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt" => Ok(NoiseKind::Salt),
            _ => Err(format!("expected gaussian|salt, got {s:?}")),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Salt => "salt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionTag {
    pub modality: usize,
    pub kind: NoiseKind,
    pub epsilon: f64,
}

/// Labelled multimodal samples; row `i` of every modality belongs to sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Global sample index (unique across splits of one generated dataset).
    pub ids: Vec<usize>,
    pub tags: Vec<Option<CorruptionTag>>,
}

impl ModalityBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn select(&self, rows: &[usize]) -> ModalityBatch {
        let features = self
            .features
            .iter()
            .map(|t| {
                let c = t.cols();
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    data.extend_from_slice(t.row(r));
                }
                Tensor::new(&[rows.len(), c], data).expect("row selection keeps width")
            })
            .collect();
        ModalityBatch {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            tags: rows.iter().map(|&r| self.tags[r]).collect(),
        }
    }
}

/// Per-coordinate training-set mean and standard deviation of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn from_tensor(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
        FeatureStats { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub num_classes: usize,
    pub train: ModalityBatch,
    pub val: ModalityBatch,
    pub test: ModalityBatch,
    /// Training-split statistics, one entry per modality.
    pub stats: Vec<FeatureStats>,
}

impl SyntheticData {
    pub fn from_splits(
        num_classes: usize,
        train: ModalityBatch,
        val: ModalityBatch,
        test: ModalityBatch,
    ) -> Self {
        let stats = train.features.iter().map(FeatureStats::from_tensor).collect();
        SyntheticData {
            num_classes,
            train,
            val,
            test,
            stats,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.train.features.iter().map(Tensor::cols).collect()
    }
}

struct ModalityGenerator {
    means: Vec<Vec<f64>>,
    std: f64,
    warp: Option<(Vec<f64>, Vec<f64>)>,
    /// Per-coordinate RMS of the unwarped samples; the warp preserves it.
    scale: f64,
    dim: usize,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d * d)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl ModalityGenerator {
    fn new(spec: &ModalitySpec, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.feat_dim;
        let means = (0..k)
            .map(|_| {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.into_iter().map(|v| spec.separation * v / norm).collect()
            })
            .collect();
        let warp = match spec.warp {
            Warp::None => None,
            Warp::Nonlinear => Some((gaussian_matrix(rng, d), gaussian_matrix(rng, d))),
        };
        let scale = (spec.intra_class_std.powi(2) + spec.separation.powi(2) / d as f64).sqrt();
        ModalityGenerator {
            means,
            std: spec.intra_class_std,
            warp,
            scale,
            dim: d,
        }
    }

    fn sample(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let d = self.dim;
        let x: Vec<f64> = self.means[label]
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        match &self.warp {
            None => out.extend_from_slice(&x),
            Some((a, b)) => {
                let s = self.scale;
                let h: Vec<f64> = (0..d)
                    .map(|i| ((0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>() / s).tanh())
                    .collect();
                out.extend((0..d).map(|i| s * (0..d).map(|j| b[i * d + j] * h[j]).sum::<f64>()));
            }
        }
    }
}

/// Generates train/val/test splits; fully determined by `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let gens: Vec<ModalityGenerator> = spec
        .modalities
        .iter()
        .map(|m| ModalityGenerator::new(m, k, &mut rng))
        .collect();

    let mut next_id = 0;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(rng);
        let mut feats: Vec<Vec<f64>> = gens.iter().map(|g| Vec::with_capacity(n * g.dim)).collect();
        for &label in &labels {
            for (g, buf) in gens.iter().zip(feats.iter_mut()) {
                g.sample(label, rng, buf);
            }
        }
        let features = feats
            .into_iter()
            .zip(&gens)
            .map(|(data, g)| Tensor::new(&[n, g.dim], data).expect("generated sizes agree"))
            .collect();
        let ids = (next_id..next_id + n).collect();
        next_id += n;
        ModalityBatch {
            features,
            labels,
            ids,
            tags: vec![None; n],
        }
    };
    let train = split(spec.train_samples, &mut rng);
    let val = split(spec.val_samples, &mut rng);
    let test = split(spec.test_samples, &mut rng);
    Ok(SyntheticData::from_splits(k, train, val, test))
}

fn check_epsilon(op: &'static str, epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain {
            op,
            msg: format!("noise level must be finite and non-negative, got {epsilon}"),
        });
    }
    Ok(())
}

fn gaussian_row<R: Rng + ?Sized>(row: &mut [f64], epsilon: f64, rng: &mut R) {
    for v in row {
        *v += epsilon * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Salt rate for intensity `epsilon`: `min(0.5, epsilon / 20)`.
pub fn salt_rate(epsilon: f64) -> f64 {
    (epsilon / 20.0).min(SALT_MAX_RATE)
}

fn salt_row<R: Rng + ?Sized>(row: &mut [f64], epsilon: f64, stats: &FeatureStats, rng: &mut R) -> usize {
    let p = salt_rate(epsilon);
    let mut hits = 0;
    for (i, v) in row.iter_mut().enumerate() {
        if rng.random::<f64>() < p {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *v = stats.mean[i] + sign * SALT_SPREAD * stats.std[i];
            hits += 1;
        }
    }
    hits
}

/// Adds `N(0, epsilon^2)` to every element; `epsilon` is a standard deviation.
pub fn inject_gaussian<R: Rng + ?Sized>(x: &Tensor, epsilon: f64, rng: &mut R) -> Result<Tensor> {
    check_epsilon("inject_gaussian", epsilon)?;
    let mut out = x.clone();
    if epsilon > 0.0 {
        gaussian_row(out.data_mut(), epsilon, rng);
    }
    Ok(out)
}

/// Replaces each coordinate with probability `salt_rate(epsilon)` by an
/// extreme value `mean ± 5 std` of that coordinate.
pub fn inject_salt<R: Rng + ?Sized>(
    x: &Tensor,
    epsilon: f64,
    stats: &FeatureStats,
    rng: &mut R,
) -> Result<Tensor> {
    check_epsilon("inject_salt", epsilon)?;
    let d = x.cols();
    if stats.mean.len() != d {
        return Err(Error::shape("inject_salt", x.shape(), &[stats.mean.len()]));
    }
    let mut out = x.clone();
    if epsilon > 0.0 {
        for row in out.data_mut().chunks_mut(d) {
            salt_row(row, epsilon, stats, rng);
        }
    }
    Ok(out)
}

/// Corrupts one modality of a random `fraction` of samples.
///
/// Corrupted modalities are drawn uniformly, or proportionally to
/// `modality_weights` when given.
#[allow(clippy::too_many_arguments)]
pub fn corrupt_split<R: Rng + ?Sized>(
    batch: &ModalityBatch,
    fraction: f64,
    kind: NoiseKind,
    epsilon: f64,
    stats: &[FeatureStats],
    modality_weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<ModalityBatch> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain {
            op: "corrupt_split",
            msg: format!("fraction must lie in [0, 1], got {fraction}"),
        });
    }
    check_epsilon("corrupt_split", epsilon)?;
    let m = batch.num_modalities();
    if stats.len() != m {
        return Err(Error::shape("corrupt_split", &[m], &[stats.len()]));
    }
    let weights: Vec<f64> = match modality_weights {
        Some(w) if w.len() == m && w.iter().all(|v| *v >= 0.0) && w.iter().sum::<f64>() > 0.0 => {
            w.to_vec()
        }
        Some(w) => {
            return Err(Error::Domain {
                op: "corrupt_split",
                msg: format!("invalid modality weights {w:?} for {m} modalities"),
            })
        }
        None => vec![1.0; m],
    };
    let total: f64 = weights.iter().sum();

    let n = batch.len();
    let count = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = batch.clone();
    let dims: Vec<usize> = batch.features.iter().map(Tensor::cols).collect();
    for &row in &order[..count] {
        let mut u = rng.random::<f64>() * total;
        let mut modality = m - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                modality = i;
                break;
            }
            u -= w;
        }
        let d = dims[modality];
        let slice = &mut out.features[modality].data_mut()[row * d..(row + 1) * d];
        match kind {
            NoiseKind::Gaussian => gaussian_row(slice, epsilon, rng),
            NoiseKind::Salt => {
                salt_row(slice, epsilon, &stats[modality], rng);
            }
        }
        out.tags[row] = Some(CorruptionTag {
            modality,
            kind,
            epsilon,
        });
    }
    Ok(out)
}

/// Corrupts every row of one modality at level `epsilon`.
pub fn corrupt_modality<R: Rng + ?Sized>(
    batch: &ModalityBatch,
    modality: usize,
    kind: NoiseKind,
    epsilon: f64,
    stats: &[FeatureStats],
    rng: &mut R,
) -> Result<ModalityBatch> {
    if modality >= batch.num_modalities() {
        return Err(Error::Index {
            op: "corrupt_modality",
            index: modality,
            len: batch.num_modalities(),
        });
    }
    let mut out = batch.clone();
    out.features[modality] = match kind {
        NoiseKind::Gaussian => inject_gaussian(&batch.features[modality], epsilon, rng)?,
        NoiseKind::Salt => inject_salt(&batch.features[modality], epsilon, &stats[modality], rng)?,
    };
    for tag in &mut out.tags {
        *tag = Some(CorruptionTag {
            modality,
            kind,
            epsilon,
        });
    }
    Ok(out)
}

/// Serialises one split: a `# udml-dataset v1` header, then one CSV row per
/// sample with the label followed by every modality's features.
pub fn format_split(batch: &ModalityBatch, num_classes: usize) -> String {
    let dims: Vec<String> = batch.features.iter().map(|t| t.cols().to_string()).collect();
    let mut s = format!(
        "# udml-dataset v1 K={} M={} dims={}\n",
        num_classes,
        batch.num_modalities(),
        dims.join(",")
    );
    for r in 0..batch.len() {
        write!(s, "{}", batch.labels[r]).expect("write to string");
        for t in &batch.features {
            for v in t.row(r) {
                write!(s, ",{v:.16e}").expect("write to string");
            }
        }
        s.push('\n');
    }
    s
}

/// Parses a split file. Sample ids are assigned starting at `id_offset`.
pub fn parse_split(text: &str, id_offset: usize) -> Result<(usize, ModalityBatch)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let rest = header
        .strip_prefix("# udml-dataset v1 ")
        .ok_or_else(|| Error::Format(format!("bad dataset header {header:?}")))?;
    let (mut k, mut m, mut dims) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
        let bad = || Error::Format(format!("bad header value {field:?}"));
        match key {
            "K" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
            "M" => m = Some(value.parse::<usize>().map_err(|_| bad())?),
            "dims" => {
                dims = Some(
                    value
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad())?,
                )
            }
            _ => return Err(Error::Format(format!("unknown header field {key:?}"))),
        }
    }
    let (k, m, dims) = match (k, m, dims) {
        (Some(k), Some(m), Some(d)) if d.len() == m => (k, m, d),
        _ => return Err(Error::Format(format!("incomplete dataset header {header:?}"))),
    };
    let width = 1 + dims.iter().sum::<usize>();
    let mut labels = Vec::new();
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::Format(format!(
                "row {}: expected {width} fields, found {}",
                lineno + 2,
                cells.len()
            )));
        }
        let label: usize = cells[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad label", lineno + 2)))?;
        if label >= k {
            return Err(Error::Format(format!("row {}: label {label} >= K={k}", lineno + 2)));
        }
        labels.push(label);
        let mut at = 1;
        for (mi, &d) in dims.iter().enumerate() {
            for cell in &cells[at..at + d] {
                feats[mi].push(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad value {cell:?}", lineno + 2)))?,
                );
            }
            at += d;
        }
    }
    let n = labels.len();
    let features = feats
        .into_iter()
        .zip(&dims)
        .map(|(data, &d)| Tensor::new(&[n, d], data))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        k,
        ModalityBatch {
            features,
            labels,
            ids: (id_offset..id_offset + n).collect(),
            tags: vec![None; n],
        },
    ))
}

pub const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];

pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in SPLIT_FILES.iter().zip([&data.train, &data.val, &data.test]) {
        let path = dir.join(name);
        std::fs::write(&path, format_split(split, data.num_classes)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticData> {
    let mut splits = Vec::new();
    let mut offset = 0;
    let mut classes = None;
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (k, batch) = parse_split(&text, offset)?;
        if classes.is_some_and(|c| c != k) {
            return Err(Error::Format(format!("{name}: class count {k} differs from other splits")));
        }
        classes = Some(k);
        offset += batch.len();
        splits.push(batch);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SyntheticData::from_splits(classes.expect("three splits"), train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_samples: 300,
            val_samples: 60,
            test_samples: 90,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().train, a.train);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate(&small_spec()).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (300, 60, 90));
        let mut seen = HashSet::new();
        for id in d.train.ids.iter().chain(&d.val.ids).chain(&d.test.ids) {
            assert!(seen.insert(*id));
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = small_spec();
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.modalities[0].feat_dim = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn gaussian_zero_is_identity_and_keeps_shape() {
        let d = generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = &d.test.features[0];
        assert_eq!(&inject_gaussian(x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(inject_gaussian(x, 3.0, &mut rng).unwrap().shape(), x.shape());
        assert!(inject_gaussian(x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_noise_has_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::zeros(&[1000, 100]);
        let y = inject_gaussian(&x, 5.0, &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 5.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn salt_rates() {
        let stats = FeatureStats {
            mean: vec![0.0; 100],
            std: vec![1.0; 100],
        };
        let x = Tensor::full(&[1000, 100], 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(inject_salt(&x, 0.0, &stats, &mut rng).unwrap(), x);
        let y = inject_salt(&x, 10.0, &stats, &mut rng).unwrap();
        let replaced = y.data().iter().filter(|&&v| v != 0.25).count() as f64 / y.len() as f64;
        assert!((replaced - 0.5).abs() < 0.01, "rate {replaced}");
        assert!(y.data().iter().all(|&v| v == 0.25 || v.abs() == 5.0));
        assert_eq!(salt_rate(20.0), 0.5);
        assert_eq!(salt_rate(5.0), 0.25);
    }

    #[test]
    fn corrupt_split_counts() {
        let mut spec = small_spec();
        spec.test_samples = 2000;
        let d = generate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let same = corrupt_split(&d.test, 0.0, NoiseKind::Gaussian, 5.0, &d.stats, None, &mut rng).unwrap();
        assert_eq!(same, d.test);

        let all = corrupt_split(&d.test, 1.0, NoiseKind::Gaussian, 5.0, &d.stats, None, &mut rng).unwrap();
        let mut per = [0usize; 2];
        for (r, tag) in all.tags.iter().enumerate() {
            let tag = tag.expect("every sample corrupted");
            per[tag.modality] += 1;
            let other = 1 - tag.modality;
            assert_eq!(all.features[other].row(r), d.test.features[other].row(r));
            assert_ne!(all.features[tag.modality].row(r), d.test.features[tag.modality].row(r));
        }
        for c in per {
            assert!((c as f64 / 2000.0 - 0.5).abs() < 0.03, "{per:?}");
        }

        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let a = corrupt_split(&d.test, 0.5, NoiseKind::Salt, 5.0, &d.stats, None, &mut r1).unwrap();
        let b = corrupt_split(&d.test, 0.5, NoiseKind::Salt, 5.0, &d.stats, None, &mut r2).unwrap();
        assert_eq!(a.tags, b.tags);
        assert_eq!(a.tags.iter().filter(|t| t.is_some()).count(), 1000);
    }

    #[test]
    fn split_file_roundtrip() {
        let d = generate(&small_spec()).unwrap();
        let text = format_split(&d.val, d.num_classes);
        assert!(text.starts_with("# udml-dataset v1 K=6 M=2 dims=20,20\n"));
        let (k, back) = parse_split(&text, d.val.ids[0]).unwrap();
        assert_eq!(k, 6);
        assert_eq!(back, d.val);
        assert!(parse_split("# nope\n", 0).is_err());
        assert!(parse_split("# udml-dataset v1 K=2 M=1 dims=2\n0,1.0\n", 0).is_err());
    }
}
