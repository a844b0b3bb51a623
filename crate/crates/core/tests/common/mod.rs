//! Shared helpers for the integration tests: a central-difference gradient
//! oracle and small tensor builders.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udml::autodiff::{Tape, Tensor, Var};
use udml::nn::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude is at least `gap`, with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(gap..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Error measure used by every gradient check: absolute difference scaled by
/// the larger magnitude, floored at one so tiny gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Projects a possibly non-scalar output onto a fixed random direction so
/// every output element contributes to the checked scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let shape = tape.value(out).shape().to_vec();
    let r = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn scalar_value(inputs: &[Tensor], seed: u64, f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out, seed);
    tape.value(loss).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every input element.
pub fn input_gradient_error(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out, seed);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (scalar_value(&plus, seed, &f) - scalar_value(&minus, seed, &f)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    worst
}

/// Same check for a network whose parameters live in `store`.
pub fn param_gradient_error(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> f64 {
    store.zero_grad_all();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    udml::nn::backward(&mut tape, loss, store).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).map_or_else(|| vec![0.0; store.value(id).len()], <[f64]>::to_vec))
        .collect();
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let l = f(&mut tape, s);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(store);
            store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic[k][j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

/// One randomised instance of every differentiable tape operation.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases: Vec<Case> = Vec::new();
    let (n, k) = (r.random_range(1..5), r.random_range(1..5));
    let a = uniform(&mut r, &[n, k], -2.0, 2.0);
    let b = uniform(&mut r, &[n, k], -2.0, 2.0);
    cases.push(("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())));
    cases.push(("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())));
    cases.push(("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())));
    cases.push(("mul-self", vec![a.clone()], Box::new(|t, v| t.mul(v[0], v[0]).unwrap())));
    cases.push(("mse", vec![a.clone(), b], Box::new(|t, v| t.mse(v[0], v[1]).unwrap())));

    let m = r.random_range(1..5);
    let c = uniform(&mut r, &[k, m], -2.0, 2.0);
    cases.push(("matmul", vec![a.clone(), c], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())));
    cases.push(("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]).unwrap())));
    let bias = uniform(&mut r, &[k], -1.0, 1.0);
    cases.push(("add_bias", vec![a.clone(), bias], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())));
    cases.push(("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.7))));
    cases.push(("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.3))));
    cases.push(("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))));
    cases.push(("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))));
    cases.push(("reshape", vec![a.clone()], Box::new(move |t, v| t.reshape(v[0], &[k, n]).unwrap())));

    let k2 = r.random_range(1..4);
    let d = uniform(&mut r, &[n, k2], -2.0, 2.0);
    let e = uniform(&mut r, &[n + 1, k], -2.0, 2.0);
    cases.push(("concat-cols", vec![a.clone(), d.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())));
    cases.push(("concat-rows", vec![a.clone(), e], Box::new(|t, v| t.concat(&[v[0], v[1]], 0).unwrap())));
    cases.push(("concat-repeat", vec![a.clone()], Box::new(|t, v| t.concat(&[v[0], v[0]], 1).unwrap())));
    cases.push(("slice-cols", vec![d], Box::new(move |t, v| t.slice(v[0], 1, 0..k2.div_ceil(2)).unwrap())));
    cases.push(("slice-rows", vec![a], Box::new(move |t, v| t.slice(v[0], 0, n - 1..n).unwrap())));

    let x = away_from_zero(&mut r, &[n, k], 0.05, 3.0);
    cases.push(("relu", vec![x.clone()], Box::new(|t, v| t.relu(v[0]))));
    cases.push(("tanh", vec![x.clone()], Box::new(|t, v| t.tanh(v[0]))));
    cases.push(("softplus", vec![x.clone()], Box::new(|t, v| t.softplus(v[0]))));
    cases.push(("exp", vec![x], Box::new(|t, v| t.exp(v[0]))));
    let pos = uniform(&mut r, &[n, k], 0.2, 4.0);
    cases.push(("log", vec![pos], Box::new(|t, v| t.log(v[0]).unwrap())));
    let tails = Tensor::vector(vec![-40.0, -8.0, 8.0, 40.0]);
    cases.push(("softplus-tails", vec![tails], Box::new(|t, v| t.softplus(v[0]))));

    let classes = r.random_range(2..6);
    let logits = uniform(&mut r, &[n, classes], -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    cases.push((
        "softmax_ce",
        vec![logits],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap()),
    ));
    let single = uniform(&mut r, &[classes], -3.0, 3.0);
    cases.push((
        "softmax_ce-vector",
        vec![single],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &[classes - 1]).unwrap()),
    ));
    let mu = uniform(&mut r, &[n, k], -1.0, 1.0);
    let s2 = uniform(&mut r, &[n, k], 0.1, 2.0);
    cases.push((
        "gaussian_sample",
        vec![mu, s2],
        Box::new(move |t, v| t.gaussian_sample(v[0], v[1], &mut rng(9000 + seed)).unwrap()),
    ));
    cases
}

/// Worst error per operation over `trials` random instances.
pub fn op_suite(trials: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for s in 0..trials {
        for (name, inputs, f) in op_cases(s) {
            let err = input_gradient_error(&inputs, s, |t, v| f(t, v));
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(entry) => entry.1 = entry.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}

/// A detached path contributes nothing; the undetached one receives the
/// detached value as its gradient, exactly.
pub fn detach_is_exact(seed: u64) -> bool {
    let x = uniform(&mut rng(seed), &[3, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(x.clone(), true);
    let b = tape.leaf(x, true);
    let e = tape.exp(a);
    let d = tape.detach(e);
    let mixed = tape.mul(d, b).unwrap();
    let blocked = tape.sum(mixed);
    tape.backward(blocked).unwrap();
    tape.grad(a).is_none() && tape.grad(b) == Some(tape.value(e).data())
}

/// Encoder, fusion head, estimator and an MLP in one loss, checked against
/// central differences in every parameter.
pub fn composite_error(seed: u64) -> f64 {
    use udml::encoder::ModalityEncoder;
    use udml::estimator::{EstimatorInput, NoiseEstimator};
    use udml::fusion::{FusionHead, Strategy};
    use udml::nn::Mlp;

    let mut r = rng(600 + seed);
    let mut store = ParamStore::new();
    let enc = ModalityEncoder::new(&mut store, "enc", 4, 5, 3);
    enc.init(&mut store, &mut r);
    let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let head = FusionHead::new(&mut store, "fusion", 2, 3, 3, Strategy::Udml);
    head.classifier().init(&mut store, &mut r);
    let w = Tensor::new(&[3, 2], vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap();
    let est = NoiseEstimator::new(&mut store, "est", 3, 4, EstimatorInput::Variance);
    est.init(&mut store, &mut r);
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 2]);
    mlp.init(&mut store, &mut r);
    let ids: Vec<_> = store.ids().collect();
    param_gradient_error(&mut store, &ids, |t, st| {
        let xv = t.constant(x.clone());
        let e = enc.encode(t, st, xv).unwrap();
        let z = t.gaussian_sample(e.mu, e.sigma2, &mut rng(77 + seed)).unwrap();
        let other = t.scale(e.mu, 0.5);
        let logits = head.fuse(t, st, &[z, other], &w).unwrap();
        let ce = t.softmax_cross_entropy(logits, &[0, 2, 1]).unwrap();
        let l_est = est.loss(t, st, e.sigma2, &[0.0, 1.0, 4.0]).unwrap();
        let m = mlp.forward(t, st, xv).unwrap();
        let aux = t.mean(m);
        let total = t.add(ce, l_est).unwrap();
        t.add(total, aux).unwrap()
    })
}
