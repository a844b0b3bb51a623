//! Modality dependency via modality dropout.
//!
//! `d[m]` is how far the fused logits move when modality `m`'s embedding is
//! replaced by zeros; `alpha` rescales those scores to sum to `M`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionHead;
use crate::nn::ParamStore;

pub const ALPHA_FLOOR: f64 = 0.05;
pub const DEFAULT_DECAY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyState {
    alpha: Vec<f64>,
    raw_d_ema: Vec<f64>,
    decay: f64,
    updates: u64,
}

impl DependencyState {
    /// Uniform `alpha`, zeroed score average.
    pub fn new(num_modalities: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("alpha_decay", "must lie in [0, 1)"));
        }
        Ok(DependencyState {
            alpha: vec![1.0; num_modalities],
            raw_d_ema: vec![0.0; num_modalities],
            decay,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn raw_d_ema(&self) -> &[f64] {
        &self.raw_d_ema
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, d: &[f64]) -> Result<()> {
        if d.len() != self.alpha.len() {
            return Err(Error::shape("update_dependency", &[d.len()], &[self.alpha.len()]));
        }
        for (e, v) in self.raw_d_ema.iter_mut().zip(d) {
            *e = self.decay * *e + (1.0 - self.decay) * v;
        }
        self.alpha = normalize_alpha(&self.raw_d_ema, self.alpha.len());
        self.updates += 1;
        Ok(())
    }

    /// Replaces the running average outright.
    pub fn set_from_scores(&mut self, d: &[f64]) -> Result<()> {
        if d.len() != self.alpha.len() {
            return Err(Error::shape("set_dependency", &[d.len()], &[self.alpha.len()]));
        }
        self.raw_d_ema = d.to_vec();
        self.alpha = normalize_alpha(d, d.len());
        self.updates += 1;
        Ok(())
    }

    /// Restores a saved state verbatim.
    pub fn restore(&mut self, alpha: &[f64], raw_d_ema: &[f64], updates: u64) -> Result<()> {
        let m = self.alpha.len();
        if alpha.len() != m || raw_d_ema.len() != m {
            return Err(Error::shape("restore_dependency", &[alpha.len(), raw_d_ema.len()], &[m, m]));
        }
        self.alpha = alpha.to_vec();
        self.raw_d_ema = raw_d_ema.to_vec();
        self.updates = updates;
        Ok(())
    }
}

/// `alpha[m] = M * d[m] / sum(d)`, floored at `ALPHA_FLOOR` and renormalised
/// to sum to `M`. All-zero (or empty-mass) input yields uniform ones.
pub fn normalize_alpha(d: &[f64], m: usize) -> Vec<f64> {
    let total: f64 = d.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return vec![1.0; m];
    }
    let target = m as f64;
    let mut alpha: Vec<f64> = d.iter().map(|v| target * v / total).collect();
    let mut floored = vec![false; m];
    loop {
        let newly: Vec<usize> = (0..m).filter(|&i| !floored[i] && alpha[i] < ALPHA_FLOOR).collect();
        if newly.is_empty() {
            break;
        }
        newly.iter().for_each(|&i| floored[i] = true);
        let free_mass: f64 = target - ALPHA_FLOOR * floored.iter().filter(|&&f| f).count() as f64;
        let free_sum: f64 = (0..m).filter(|&i| !floored[i]).map(|i| alpha[i]).sum();
        for i in 0..m {
            alpha[i] = if floored[i] { ALPHA_FLOOR } else { alpha[i] * free_mass / free_sum };
        }
    }
    // Largest entry absorbs the rounding residue.
    let largest = (0..m).max_by(|&a, &b| alpha[a].total_cmp(&alpha[b])).expect("m > 0");
    let rest: f64 = (0..m).filter(|&i| i != largest).map(|i| alpha[i]).sum();
    alpha[largest] = target - rest;
    alpha
}

/// `d[m]` = batch mean of the row-wise L1 distance between the full logits
/// and the logits with modality `m` dropped.
pub fn dependency_scores(pi_full: &Tensor, pi_dropped: &[Tensor]) -> Result<Vec<f64>> {
    let rows = pi_full.rows();
    pi_dropped
        .iter()
        .map(|p| {
            if p.shape() != pi_full.shape() {
                return Err(Error::shape("dependency_scores", pi_full.shape(), p.shape()));
            }
            let mut total = 0.0;
            for r in 0..rows {
                total += pi_full.row(r).iter().zip(p.row(r)).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
            Ok(total / rows as f64)
        })
        .collect()
}

/// Logits with each modality in `dropped` replaced by zeros of equal shape.
/// `w` of `None` means static weights.
pub fn drop_modality_logits(
    tape: &mut Tape,
    store: &ParamStore,
    head: &FusionHead,
    z: &[Var],
    w: Option<&Tensor>,
    dropped: &[usize],
) -> Result<Var> {
    let mut inputs = z.to_vec();
    for &m in dropped {
        if m >= z.len() {
            return Err(Error::Index { op: "drop_modality_logits", index: m, len: z.len() });
        }
        let shape = tape.value(z[m]).shape().to_vec();
        inputs[m] = tape.constant(Tensor::zeros(&shape));
    }
    match w {
        Some(w) => head.fuse(tape, store, &inputs, w),
        None => head.fuse_static(tape, store, &inputs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn score_example() {
        let full = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let drop1 = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let d = dependency_scores(&full, &[drop1.clone(), full.clone()]).unwrap();
        assert_eq!(d, vec![2.0, 0.0]);
        assert_eq!(dependency_scores(&full, &[full.clone(), full.clone()]).unwrap(), vec![0.0, 0.0]);
        assert!(dependency_scores(&full, &[Tensor::zeros(&[2, 2])]).is_err());
    }

    #[test]
    fn scores_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = || Tensor::new(&[8, 5], (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let full = rand_t();
        let drops = vec![rand_t(), rand_t()];
        let d = dependency_scores(&full, &drops).unwrap();
        for (m, p) in drops.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..8 {
                let mut row = 0.0;
                for c in 0..5 {
                    row += (full.row(r)[c] - p.row(r)[c]).abs();
                }
                acc += row;
            }
            assert_eq!(d[m], acc / 8.0);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_alpha(&[1.0, 1.0], 2), vec![1.0, 1.0]);
        assert!(close(&normalize_alpha(&[3.0, 1.0], 2), &[1.5, 0.5], 1e-12));
        assert_eq!(normalize_alpha(&[0.0, 0.0], 2), vec![1.0, 1.0]);
        let a = normalize_alpha(&[1.0, 0.0], 2);
        assert!(close(&a, &[1.95, 0.05], 1e-12));
        let a = normalize_alpha(&[100.0, 1.0, 0.0], 3);
        assert!((a.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(a.iter().all(|&v| v >= ALPHA_FLOOR - 1e-15));
        for d in [[0.3, 0.7], [5.0, 1e-3], [1.0, 3.7]] {
            let a = normalize_alpha(&d, 2);
            assert_eq!(a[0] + a[1], 2.0);
        }
    }

    #[test]
    fn update_examples() {
        let mut s = DependencyState::new(2, 0.0).unwrap();
        s.update(&[3.0, 1.0]).unwrap();
        assert!(close(s.alpha(), &[1.5, 0.5], 1e-12));

        let mut s = DependencyState::new(2, 0.99).unwrap();
        for _ in 0..2000 {
            s.update(&[3.0, 1.0]).unwrap();
        }
        assert!(close(s.alpha(), &normalize_alpha(&[3.0, 1.0], 2), 1e-6));
        assert_eq!(s.updates(), 2000);

        let mut s = DependencyState::new(2, 0.99).unwrap();
        for _ in 0..10 {
            s.update(&[0.0, 0.0]).unwrap();
        }
        assert_eq!(s.alpha(), &[1.0, 1.0]);
        assert!(DependencyState::new(2, 1.0).is_err());
    }

    #[test]
    fn ema_geometric_series() {
        // Starting from zero, the average after n constant updates is d * (1 - decay^n).
        let mut s = DependencyState::new(2, 0.9).unwrap();
        for _ in 0..7 {
            s.update(&[2.0, 4.0]).unwrap();
        }
        let factor = 1.0 - 0.9f64.powi(7);
        assert!(close(s.raw_d_ema(), &[2.0 * factor, 4.0 * factor], 1e-12));
    }

    fn head_setup() -> (ParamStore, FusionHead, Vec<Tensor>) {
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "fusion", 2, 3, 4, Strategy::Static);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        head.classifier().init(&mut store, &mut rng);
        let bias = head.classifier().bias;
        store.value_mut(bias).data_mut().copy_from_slice(&[0.5, -0.5, 0.25, 0.0]);
        let z = (0..2)
            .map(|_| Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        (store, head, z)
    }

    #[test]
    fn dropped_modality_has_no_influence() {
        let (store, head, z) = head_setup();
        let mut tape = Tape::new();
        let a: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let l1 = drop_modality_logits(&mut tape, &store, &head, &a, None, &[0]).unwrap();
        let other = tape.constant(Tensor::full(&[4, 3], -7.0));
        let l2 = drop_modality_logits(&mut tape, &store, &head, &[other, a[1]], None, &[0]).unwrap();
        assert_eq!(tape.value(l1), tape.value(l2));
        assert!(drop_modality_logits(&mut tape, &store, &head, &a, None, &[2]).is_err());
    }

    #[test]
    fn drop_all_gives_bias() {
        let (store, head, z) = head_setup();
        let mut tape = Tape::new();
        let a: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let l = drop_modality_logits(&mut tape, &store, &head, &a, None, &[0, 1]).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(l).row(r), &[0.5, -0.5, 0.25, 0.0]);
        }
    }

    #[test]
    fn single_modality_drop_gives_bias() {
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "fusion", 1, 2, 3, Strategy::Static);
        head.classifier().init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let bias = head.classifier().bias;
        store.value_mut(bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[2, 2], 0.4));
        let l = drop_modality_logits(&mut tape, &store, &head, &[z], None, &[0]).unwrap();
        assert_eq!(tape.value(l).row(1), &[1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn alpha_sum_and_floor(d in prop::collection::vec(0.0f64..10.0, 2..6)) {
            let m = d.len();
            let a = normalize_alpha(&d, m);
            prop_assert!((a.iter().sum::<f64>() - m as f64).abs() < 1e-9);
            prop_assert!(a.iter().all(|&v| v >= ALPHA_FLOOR - 1e-12));
        }

        #[test]
        fn alpha_scale_covariance(d in prop::collection::vec(1e-3f64..10.0, 2..6), c in 1e-4f64..1e4) {
            let m = d.len();
            let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
            prop_assert!(close(&normalize_alpha(&d, m), &normalize_alpha(&scaled, m), 1e-9));
        }

        #[test]
        fn state_invariants_hold_after_updates(
            stream in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..30),
        ) {
            let mut s = DependencyState::new(3, 0.9).unwrap();
            for d in &stream {
                s.update(d).unwrap();
                prop_assert!((s.alpha().iter().sum::<f64>() - 3.0).abs() < 1e-9);
                prop_assert!(s.alpha().iter().all(|&v| v >= ALPHA_FLOOR - 1e-12));
            }
        }
    }
}
