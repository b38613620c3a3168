//! Elementwise arithmetic, reductions, activations and shape operations.

use super::{numel, Op, Tensor};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, op.name())?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, op, &[self, other]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op, &[self])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.scale(-1.0).add_scalar(c)
    }

    pub fn pow_scalar(&self, e: f64) -> Tensor {
        self.unary(Op::PowScalar(e), |x| x.powf(e))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    /// Clamps into `[min, max]`; gradient passes only where the input was inside.
    pub fn clamp(&self, min: f64, max: f64) -> Tensor {
        self.unary(Op::Clamp { min, max }, |x| x.clamp(min, max))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_extents(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        let x = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax { outer, len, inner }, &[self]))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_extents(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        let x = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::LogSoftmax { outer, len, inner }, &[self]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        Tensor::from_op(Vec::new(), vec![self.data().iter().sum()], Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor {
        let m = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op(Vec::new(), vec![m], Op::Mean, &[self])
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Result<Tensor> {
        let n = *self.shape().first().ok_or_else(|| Error::dim("sum_per_sample on a rank-0 tensor"))?;
        let per = self.numel() / n;
        let data = self.data().chunks(per).map(|c| c.iter().sum()).collect();
        Ok(Tensor::from_op(vec![n], data, Op::SumPerSample, &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape, &[self]))
    }

    /// Picks `x[i, indices[i]]` from a `[N, K]` tensor, giving `[N]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let &[n, k] = self.shape() else {
            return Err(Error::dim(format!("gather_rows needs [N, K], got {:?}", self.shape())));
        };
        if indices.len() != n {
            return Err(Error::dim(format!("gather_rows: {} indices for {n} rows", indices.len())));
        }
        let mut data = Vec::with_capacity(n);
        for (i, &j) in indices.iter().enumerate() {
            if j >= k {
                return Err(Error::Label { index: i, label: j, classes: k });
            }
            data.push(self.data()[i * k + j]);
        }
        Ok(Tensor::from_op(vec![n], data, Op::GatherRows { indices: indices.to_vec() }, &[self]))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pow_grad(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else if x == 0.0 {
        // d/dx x^e at 0: 0 for e > 1, 1 for e == 1, unbounded below that.
        // The unbounded case is treated as 0 so a saturated focal term cannot
        // inject non-finite values.
        if e == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        e * x.powf(e - 1.0)
    }
}

pub(super) fn backward(op: &Op, out: &Tensor, parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let x = parents[0].data();
    let y = out.data();
    let map = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    match op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Op::Mul => {
            let b = parents[1].data();
            vec![Some(map(&|i| g[i] * b[i])), Some(map(&|i| g[i] * x[i]))]
        }
        Op::Div => {
            let b = parents[1].data();
            vec![Some(map(&|i| g[i] / b[i])), Some(map(&|i| -g[i] * x[i] / (b[i] * b[i])))]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
        Op::PowScalar(e) => vec![Some(map(&|i| g[i] * pow_grad(x[i], *e)))],
        Op::Exp => vec![Some(map(&|i| g[i] * y[i]))],
        Op::Log => vec![Some(map(&|i| g[i] / x[i]))],
        Op::Clamp { min, max } => vec![Some(map(&|i| {
            if x[i] >= *min && x[i] <= *max {
                g[i]
            } else {
                0.0
            }
        }))],
        Op::Relu => vec![Some(map(&|i| if x[i] > 0.0 { g[i] } else { 0.0 }))],
        Op::Sigmoid => vec![Some(map(&|i| g[i] * y[i] * (1.0 - y[i])))],
        Op::Softmax { outer, len, inner } => {
            let mut dx = vec![0.0; g.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..*len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax { outer, len, inner } => {
            let mut dx = vec![0.0; g.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let total: f64 = (0..*len).map(|j| g[at(j)]).sum();
                    for j in 0..*len {
                        dx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Sum => vec![Some(vec![g[0]; x.len()])],
        Op::Mean => vec![Some(vec![g[0] / x.len() as f64; x.len()])],
        Op::SumPerSample => {
            let per = x.len() / g.len();
            vec![Some((0..x.len()).map(|i| g[i / per]).collect())]
        }
        Op::GatherRows { indices } => {
            let k = parents[0].shape()[1];
            let mut dx = vec![0.0; x.len()];
            for (i, &j) in indices.iter().enumerate() {
                dx[i * k + j] = g[i];
            }
            vec![Some(dx)]
        }
        other => unreachable!("{} is not an elementwise op", other.name()),
    }
}
