#![allow(dead_code)]

pub mod grad_cases;

use mtnet::data::{Label, Sample};
use mtnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `[lo, hi)` at least `gap` apart from each other and from every
/// point in `avoid`, so no kink of a piecewise op lies within the
/// finite-difference stencil.
pub fn separated(rng: &mut impl Rng, n: usize, lo: f64, hi: f64, gap: f64, avoid: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.random_range(lo..hi);
        if out.iter().chain(avoid).all(|o| (o - v).abs() >= gap) {
            out.push(v);
        }
    }
    out
}

/// Norm-wise relative error `|a - b| / (|a| + |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct amount to the checked gradient.
pub fn contract(out: &Tensor, weights: &[f64]) -> Tensor {
    let w = Tensor::new(out.shape(), weights[..out.numel()].to_vec()).unwrap();
    out.mul(&w).unwrap().sum()
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input. Returns the worst relative error over the inputs.
pub fn gradcheck(inputs: &[(Vec<usize>, Vec<f64>)], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|(s, d)| Tensor::param(s, d.clone()).unwrap()).collect();
    let out = f(&leaves);
    assert!(out.shape().is_empty(), "gradcheck needs a scalar output");
    out.backward().unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()])).collect();

    let eval = |which: usize, j: usize, delta: f64| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[j] += delta;
                }
                Tensor::new(s, d).unwrap()
            })
            .collect();
        f(&ts).item()
    };
    let mut worst: f64 = 0.0;
    for (i, (_, d)) in inputs.iter().enumerate() {
        let numeric: Vec<f64> =
            (0..d.len()).map(|j| (eval(i, j, FD_STEP) - eval(i, j, -FD_STEP)) / (2.0 * FD_STEP)).collect();
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Random binary mask data with roughly `density` ones.
pub fn random_mask(rng: &mut impl Rng, n: usize, density: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect()
}

/// Brute-force pixel counts `(tp, fp, fn)` for binary masks.
pub fn count_pixels(pred: &[f64], gt: &[f64]) -> (u64, u64, u64) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p > 0.5, g > 0.5) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    c
}

/// Plain cross-entropy, written without the tensor library.
pub fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / n as f64
}

/// A sample whose image and mask are constant planes.
pub fn flat_sample(label: Label, i: usize, size: usize) -> Sample {
    Sample {
        id: format!("{label}/flat{i:03}"),
        image: Tensor::full(&[1, size, size], 0.5),
        mask: Tensor::zeros(&[1, size, size]),
        label,
    }
}
