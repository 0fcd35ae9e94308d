//! Shared oracles for the integration tests: central finite differences and
//! brute-force scalar references, written without the crate's kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssunet::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn binary(r: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if r.random_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// `|a - n|` relative to the larger magnitude, with a floor so that two
/// gradients that are both ~0 compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Reduce an arbitrary node to a scalar with fixed random weights so every
/// output element contributes a distinct amount to the gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let w = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let m = g.mean(prod);
    g.scale(m, shape.iter().product::<usize>() as f64)
}

/// Build `f` once to read analytic gradients, then compare each selected
/// input element against a central difference. Returns the worst relative
/// error. `pick(i, j)` chooses which element `j` of input `i` to test.
pub fn check_with<F>(inputs: &[Tensor<f64>], h: f64, pick: impl Fn(usize, usize) -> bool, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            if !pick(i, j) {
                continue;
            }
            let x0 = inputs[i].data()[j];
            vals[i].data_mut()[j] = x0 + h;
            let up = eval(&vals);
            vals[i].data_mut()[j] = x0 - h;
            let down = eval(&vals);
            vals[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check_with(inputs, 1e-6, |_, _| true, f)
}

// -- scalar references ------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Squared deviation of samples from the ground truth, averaged, plus the
/// mean of the variance samples.
pub fn spatial_oracle(probs: &[f64], vars: &[f64], y: f64) -> (f64, f64) {
    let n = probs.len() as f64;
    let ue = probs.iter().map(|p| (p - y) * (p - y)).sum::<f64>() / n;
    let ua = vars.iter().sum::<f64>() / vars.len().max(1) as f64;
    (ue, ua)
}

pub fn fusion_oracle(ys: [f64; 3]) -> f64 {
    ys.iter().map(|&y| y * sigmoid(y) + y).fold(f64::NEG_INFINITY, f64::max)
}

pub fn bce_oracle(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Pixel counts `(tp, fp, fn, tn)` by direct enumeration.
pub fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

pub fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `(dice, miou, macc)` from brute-force counting, empty sets scoring 1.
pub fn metric_oracle(pred: &[bool], gt: &[bool]) -> (f64, f64, f64) {
    let (tp, fp, fn_, tn) = counts(pred, gt);
    let dice = ratio_or_one(2 * tp, 2 * tp + fp + fn_);
    let miou = (ratio_or_one(tp, tp + fp + fn_) + ratio_or_one(tn, tn + fp + fn_)) / 2.0;
    let macc = (ratio_or_one(tp, tp + fn_) + ratio_or_one(tn, tn + fp)) / 2.0;
    (dice, miou, macc)
}

pub mod gradcheck;
