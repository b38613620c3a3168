//! One random finite-difference instance per differentiable op and loss.

use mtnet::losses::{dice_loss, focal_loss, total_loss, DiceMode, FocalParams, LossWeights};
use mtnet::tensor::nn;
use mtnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{contract, gradcheck, random_mask, separated, uniform};

pub type Case = fn(&mut ChaCha8Rng) -> f64;

fn unary(rng: &mut ChaCha8Rng, values: Vec<f64>, f: fn(&Tensor) -> Tensor) -> f64 {
    let n = values.len();
    let w = uniform(rng, n, -1.0, 1.0);
    gradcheck(&[(vec![n], values)], &|t| contract(&f(&t[0]), &w))
}

fn binary(rng: &mut ChaCha8Rng, a: Vec<f64>, b: Vec<f64>, f: fn(&Tensor, &Tensor) -> Tensor) -> f64 {
    let n = a.len();
    let w = uniform(rng, n, -1.0, 1.0);
    gradcheck(&[(vec![n], a), (vec![n], b)], &|t| contract(&f(&t[0], &t[1]), &w))
}

fn rand_shape(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=12)
}

fn case_add(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let (a, b) = (uniform(r, n, -2.0, 2.0), uniform(r, n, -2.0, 2.0));
    binary(r, a, b, |x, y| x.add(y).unwrap())
}

fn case_sub(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let (a, b) = (uniform(r, n, -2.0, 2.0), uniform(r, n, -2.0, 2.0));
    binary(r, a, b, |x, y| x.sub(y).unwrap())
}

fn case_mul(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let (a, b) = (uniform(r, n, -2.0, 2.0), uniform(r, n, -2.0, 2.0));
    binary(r, a, b, |x, y| x.mul(y).unwrap())
}

fn case_div(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let a = uniform(r, n, -2.0, 2.0);
    let b = (0..n).map(|_| r.random_range(0.5..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    binary(r, a, b, |x, y| x.div(y).unwrap())
}

fn case_scale(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, -2.0, 2.0);
    unary(r, v, |x| x.scale(-1.7))
}

fn case_add_scalar(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, -2.0, 2.0);
    unary(r, v, |x| x.add_scalar(0.3).rsub_scalar(1.0))
}

fn case_pow(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, 0.2, 2.0);
    let e = r.random_range(0..3);
    match e {
        0 => unary(r, v, |x| x.pow_scalar(2.0)),
        1 => unary(r, v, |x| x.pow_scalar(0.5)),
        _ => unary(r, v, |x| x.pow_scalar(-1.3)),
    }
}

fn case_exp(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, -2.0, 2.0);
    unary(r, v, Tensor::exp)
}

fn case_log(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, 0.1, 3.0);
    unary(r, v, Tensor::log)
}

fn case_clamp(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = separated(r, n, -2.0, 2.0, 1e-3, &[-0.5, 0.8]);
    unary(r, v, |x| x.clamp(-0.5, 0.8))
}

fn case_relu(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = separated(r, n, -2.0, 2.0, 1e-3, &[0.0]);
    unary(r, v, Tensor::relu)
}

fn case_sigmoid(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, -4.0, 4.0);
    unary(r, v, Tensor::sigmoid)
}

fn softmax_like(r: &mut ChaCha8Rng, log: bool) -> f64 {
    let shape = vec![r.random_range(1..4), r.random_range(2..5), r.random_range(1..4)];
    let n: usize = shape.iter().product();
    let axis = r.random_range(0..3);
    let v = uniform(r, n, -3.0, 3.0);
    let w = uniform(r, n, -1.0, 1.0);
    gradcheck(&[(shape, v)], &|t| {
        let out = if log { t[0].log_softmax(axis).unwrap() } else { t[0].softmax(axis).unwrap() };
        contract(&out, &w)
    })
}

fn case_softmax(r: &mut ChaCha8Rng) -> f64 {
    softmax_like(r, false)
}

fn case_log_softmax(r: &mut ChaCha8Rng) -> f64 {
    softmax_like(r, true)
}

fn case_sum_mean(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let v = uniform(r, n, -2.0, 2.0);
    gradcheck(&[(vec![n], v)], &|t| t[0].sum().scale(0.3).add(&t[0].mul(&t[0]).unwrap().mean()).unwrap())
}

fn case_sum_per_sample(r: &mut ChaCha8Rng) -> f64 {
    let shape = vec![r.random_range(1..4), r.random_range(1..4), 3];
    let n: usize = shape.iter().product();
    let v = uniform(r, n, -2.0, 2.0);
    let w = uniform(r, shape[0], -1.0, 1.0);
    gradcheck(&[(shape, v)], &|t| contract(&t[0].sum_per_sample().unwrap(), &w))
}

fn case_reshape(r: &mut ChaCha8Rng) -> f64 {
    let v = uniform(r, 12, -2.0, 2.0);
    let w = uniform(r, 12, -1.0, 1.0);
    gradcheck(&[(vec![3, 4], v)], &|t| contract(&t[0].reshape(&[2, 6]).unwrap().exp(), &w))
}

fn case_gather_rows(r: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (r.random_range(1..5), r.random_range(2..5));
    let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let v = uniform(r, n * k, -2.0, 2.0);
    let w = uniform(r, n, -1.0, 1.0);
    gradcheck(&[(vec![n, k], v)], &|t| contract(&t[0].gather_rows(&idx).unwrap(), &w))
}

fn case_concat(r: &mut ChaCha8Rng) -> f64 {
    let (n, ca, cb, h) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..3), 2);
    let a = uniform(r, n * ca * h * h, -2.0, 2.0);
    let b = uniform(r, n * cb * h * h, -2.0, 2.0);
    let w = uniform(r, n * (ca + cb) * h * h, -1.0, 1.0);
    gradcheck(&[(vec![n, ca, h, h], a), (vec![n, cb, h, h], b)], &|t| {
        contract(&nn::concat_channels(&t[0], &t[1]).unwrap(), &w)
    })
}

fn case_conv2d(r: &mut ChaCha8Rng) -> f64 {
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (k, stride, padding) = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (2, 2, 0)][r.random_range(0..5)];
    let h = r.random_range(3..6).max(k);
    let x = uniform(r, n * cin * h * h, -1.0, 1.0);
    let wt = uniform(r, cout * cin * k * k, -1.0, 1.0);
    let b = uniform(r, cout, -1.0, 1.0);
    let ho = (h + 2 * padding - k) / stride + 1;
    let w = uniform(r, n * cout * ho * ho, -1.0, 1.0);
    gradcheck(&[(vec![n, cin, h, h], x), (vec![cout, cin, k, k], wt), (vec![cout], b)], &|t| {
        contract(&nn::conv2d(&t[0], &t[1], &t[2], stride, padding).unwrap(), &w)
    })
}

fn case_maxpool(r: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (r.random_range(1..3), r.random_range(1..3));
    let h = 2 * r.random_range(1..4);
    let x = separated(r, n * c * h * h, -2.0, 2.0, 1e-3, &[]);
    let w = uniform(r, n * c * h * h / 4, -1.0, 1.0);
    gradcheck(&[(vec![n, c, h, h], x)], &|t| contract(&nn::maxpool2d(&t[0], 2, 2).unwrap(), &w))
}

fn case_upsample(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, f) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let x = uniform(r, n * c * h * h, -2.0, 2.0);
    let w = uniform(r, n * c * h * h * f * f, -1.0, 1.0);
    gradcheck(&[(vec![n, c, h, h], x)], &|t| contract(&nn::upsample_nearest2d(&t[0], f).unwrap(), &w))
}

fn case_global_avg_pool(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let x = uniform(r, n * c * h * h, -2.0, 2.0);
    let w = uniform(r, n * c, -1.0, 1.0);
    gradcheck(&[(vec![n, c, h, h], x)], &|t| contract(&nn::global_avg_pool(&t[0]).unwrap(), &w))
}

fn case_linear(r: &mut ChaCha8Rng) -> f64 {
    let (n, f, k) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
    let x = uniform(r, n * f, -2.0, 2.0);
    let wt = uniform(r, f * k, -1.0, 1.0);
    let b = uniform(r, k, -1.0, 1.0);
    let w = uniform(r, n * k, -1.0, 1.0);
    gradcheck(&[(vec![n, f], x), (vec![f, k], wt), (vec![k], b)], &|t| {
        contract(&nn::linear(&t[0], &t[1], &t[2]).unwrap(), &w)
    })
}

fn case_group_norm(r: &mut ChaCha8Rng) -> f64 {
    let groups = r.random_range(1..3);
    let c = groups * r.random_range(1..3);
    let (n, h) = (r.random_range(1..3), r.random_range(2..4));
    let x = uniform(r, n * c * h * h, -2.0, 2.0);
    let gamma = uniform(r, c, 0.5, 1.5);
    let beta = uniform(r, c, -0.5, 0.5);
    let w = uniform(r, n * c * h * h, -1.0, 1.0);
    gradcheck(&[(vec![n, c, h, h], x), (vec![c], gamma), (vec![c], beta)], &|t| {
        contract(&nn::group_norm(&t[0], groups, &t[1], &t[2], 1e-5).unwrap(), &w)
    })
}

fn case_dropout(r: &mut ChaCha8Rng) -> f64 {
    let n = rand_shape(r);
    let x = uniform(r, n, -2.0, 2.0);
    let w = uniform(r, n, -1.0, 1.0);
    let seed = r.random();
    gradcheck(&[(vec![n], x)], &|t| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        contract(&nn::dropout(&t[0], 0.4, true, &mut mask_rng).unwrap(), &w)
    })
}

fn case_focal(r: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (r.random_range(1..5), 3);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let gamma = [0.0, 0.5, 1.0, 2.0, 3.5][r.random_range(0..5)];
    let params = FocalParams::new(gamma, uniform(r, k, 0.2, 2.0)).unwrap();
    let x = uniform(r, n * k, -3.0, 3.0);
    gradcheck(&[(vec![n, k], x)], &|t| focal_loss(&t[0], &labels, &params).unwrap())
}

fn case_dice(r: &mut ChaCha8Rng) -> f64 {
    let (n, h) = (r.random_range(1..3), r.random_range(2..5));
    let mode = if r.random_bool(0.5) { DiceMode::Batch } else { DiceMode::PerImage };
    let masks = Tensor::new(&[n, 1, h, h], random_mask(r, n * h * h, 0.4)).unwrap();
    let x = uniform(r, n * h * h, -3.0, 3.0);
    gradcheck(&[(vec![n, 1, h, h], x)], &|t| dice_loss(&t[0], &masks, 1e-6, mode).unwrap())
}

fn case_total(r: &mut ChaCha8Rng) -> f64 {
    let lambda = r.random_range(0.0..=1.0);
    let w = LossWeights { lambda, eps: 1e-6 };
    let v = uniform(r, 2, 0.0, 2.0);
    gradcheck(&[(vec![], vec![v[0]]), (vec![], vec![v[1]])], &|t| {
        total_loss(&t[0].exp(), &t[1].pow_scalar(2.0), &w).unwrap()
    })
}

pub fn all() -> Vec<(&'static str, Case)> {
    vec![
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("div", case_div),
        ("scale", case_scale),
        ("add_scalar", case_add_scalar),
        ("pow_scalar", case_pow),
        ("exp", case_exp),
        ("log", case_log),
        ("clamp", case_clamp),
        ("relu", case_relu),
        ("sigmoid", case_sigmoid),
        ("softmax", case_softmax),
        ("log_softmax", case_log_softmax),
        ("sum_mean", case_sum_mean),
        ("sum_per_sample", case_sum_per_sample),
        ("reshape", case_reshape),
        ("gather_rows", case_gather_rows),
        ("concat_channels", case_concat),
        ("conv2d", case_conv2d),
        ("maxpool2d", case_maxpool),
        ("upsample_nearest2d", case_upsample),
        ("global_avg_pool", case_global_avg_pool),
        ("linear", case_linear),
        ("group_norm", case_group_norm),
        ("dropout", case_dropout),
        ("focal_loss", case_focal),
        ("dice_loss", case_dice),
        ("total_loss", case_total),
    ]
}

pub const INSTANCES: usize = 20;

/// Worst relative error of each case over `INSTANCES` random draws.
pub fn run_all(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = super::rng(seed);
    all().into_iter().map(|(name, case)| (name, (0..INSTANCES).map(|_| case(&mut rng)).fold(0.0, f64::max))).collect()
}
