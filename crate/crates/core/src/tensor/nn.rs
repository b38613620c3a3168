//! Neural-network layers over `[N, C, H, W]` and `[N, F]` tensors.

use rand::Rng;

use super::gemm::gemm;
use super::{Op, Tensor};
use crate::error::{Error, Result};

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(format!("{what} expects [N, C, H, W], got {:?}", t.shape()))),
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox*stride + kj - padding`
    /// lies inside the image, as a half-open range.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.padding);
        let lo = pad.saturating_sub(kj).div_ceil(s);
        // ox*s + kj - pad <= w - 1
        let hi = if self.w + pad < kj + 1 { 0 } else { ((self.w + pad - kj - 1) / s + 1).min(self.wo) };
        (lo.min(hi), hi)
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let ix0 = lo * self.stride + kj - self.padding;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): folds columns back, summing overlaps.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kj - self.padding;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            dst[ix0..ix0 + line.len()].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                        } else {
                            for (k, v) in line.iter().enumerate() {
                                dst[ix0 + k * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let [_, cin, h, w] = dims4(input, "conv2d input")?;
    let [_, wcin, kh, kw] = dims4(weight, "conv2d weight")?;
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d: input {:?} has {cin} channels but weight {:?} expects {wcin}",
            input.shape(),
            weight.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::param("conv2d stride must be at least 1"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    })
}

/// 2-D cross-correlation plus per-channel bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geom = conv_geom(input, weight, stride, padding)?;
    let n = input.shape()[0];
    let cout = weight.shape()[0];
    if bias.shape() != [cout] {
        return Err(Error::dim(format!("conv2d: bias {:?} does not match {cout} output channels", bias.shape())));
    }
    let (k, p) = (geom.rows(), geom.cols());
    let in_per = geom.cin * geom.h * geom.w;
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let o = &mut out[s * cout * p..(s + 1) * cout * p];
        for (c, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[c]);
        }
        let rhs = if geom.is_pointwise() {
            x
        } else {
            geom.im2col(x, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight.data(), false, rhs, false, 1.0, o);
    }
    Ok(Tensor::from_op(vec![n, cout, geom.ho, geom.wo], out, Op::Conv2d { stride, padding }, &[input, weight, bias]))
}

fn conv2d_backward(parents: &[Tensor], g: &[f64], stride: usize, padding: usize) -> Vec<Option<Vec<f64>>> {
    let (input, weight) = (&parents[0], &parents[1]);
    let geom = conv_geom(input, weight, stride, padding).expect("validated in forward");
    let n = input.shape()[0];
    let cout = weight.shape()[0];
    let (k, p) = (geom.rows(), geom.cols());
    let in_per = geom.cin * geom.h * geom.w;

    let mut dx = input.requires_grad().then(|| vec![0.0; input.numel()]);
    let mut dw = weight.requires_grad().then(|| vec![0.0; weight.numel()]);
    let db = parents[2].requires_grad().then(|| {
        let mut db = vec![0.0; cout];
        for s in 0..n {
            for (c, d) in db.iter_mut().enumerate() {
                *d += g[(s * cout + c) * p..][..p].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for s in 0..n {
        let gs = &g[s * cout * p..(s + 1) * cout * p];
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let lhs_cols: &[f64] = if geom.is_pointwise() {
                x
            } else {
                geom.im2col(x, &mut cols);
                &cols
            };
            // dW[Cout, K] += g[Cout, P] · colsᵀ
            gemm(cout, p, k, gs, false, lhs_cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if geom.is_pointwise() {
                gemm(k, cout, p, weight.data(), true, gs, false, 1.0, dxs);
            } else {
                // dcols[K, P] = Wᵀ · g
                gemm(k, cout, p, weight.data(), true, gs, false, 0.0, &mut dcols);
                geom.col2im(&dcols, dxs);
            }
        }
    }
    vec![dx, dw, db]
}

/// Max pooling with a `k × k` window and stride `k` (the only supported mode).
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k != stride {
        return Err(Error::param(format!("maxpool2d supports only window == stride, got window {k}, stride {stride}")));
    }
    if k == 0 {
        return Err(Error::param("maxpool2d window must be at least 1"));
    }
    let [n, c, h, w] = dims4(input, "maxpool2d")?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!("maxpool2d: {h}x{w} is not divisible by {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Op::MaxPool2d { argmax }, &[input]))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest2d(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::param("upsample factor must be at least 1"));
    }
    let [n, c, h, w] = dims4(input, "upsample_nearest2d")?;
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            let row = &x[(plane * h + oy / factor) * w..][..w];
            for ox in 0..wo {
                out.push(row[ox / factor]);
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Op::UpsampleNearest2d { factor }, &[input]))
}

/// `input · weight + bias` with `input: [N, F]`, `weight: [F, K]`, `bias: [K]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[n, f], &[wf, k]) = (input.shape(), weight.shape()) else {
        return Err(Error::dim(format!(
            "linear expects [N, F] and [F, K], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    };
    if f != wf || bias.shape() != [k] {
        return Err(Error::dim(format!(
            "linear: input {:?}, weight {:?}, bias {:?} do not agree",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out: Vec<f64> = bias.data().iter().copied().cycle().take(n * k).collect();
    gemm(n, f, k, input.data(), false, weight.data(), false, 1.0, &mut out);
    Ok(Tensor::from_op(vec![n, k], out, Op::Linear, &[input, weight, bias]))
}

fn linear_backward(parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (input, weight) = (&parents[0], &parents[1]);
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[1];
    let dx = input.requires_grad().then(|| {
        let mut dx = vec![0.0; n * f];
        gemm(n, k, f, g, false, weight.data(), true, 0.0, &mut dx);
        dx
    });
    let dw = weight.requires_grad().then(|| {
        let mut dw = vec![0.0; f * k];
        gemm(f, n, k, input.data(), true, g, false, 0.0, &mut dw);
        dw
    });
    let db = parents[2].requires_grad().then(|| {
        let mut db = vec![0.0; k];
        for row in g.chunks(k) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        db
    });
    vec![dx, dw, db]
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4(input, "global_avg_pool")?;
    let hw = h * w;
    let out = input.data().chunks(hw).map(|plane| plane.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_op(vec![n, c], out, Op::GlobalAvgPool, &[input]))
}

/// Concatenates two `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = dims4(a, "concat_channels")?;
    let [nb, cb, hb, wb] = dims4(b, "concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::dim(format!(
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (pa + pb));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * pa..(s + 1) * pa]);
        out.extend_from_slice(&b.data()[s * pb..(s + 1) * pb]);
    }
    Ok(Tensor::from_op(vec![n, ca + cb, h, w], out, Op::ConcatChannels { first: ca }, &[a, b]))
}

/// Group normalization: standardize each (sample, channel group), then apply
/// the per-channel affine `gamma * x̂ + beta`.
pub fn group_norm(input: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = dims4(input, "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::param(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "group_norm: gamma {:?} / beta {:?} must both be [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::param("group_norm eps must be positive"));
    }
    let hw = h * w;
    let m = c / groups * hw;
    let x = input.data();
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    let mut out = vec![0.0; x.len()];
    for (gi, block) in x.chunks(m).enumerate() {
        let mean = block.iter().sum::<f64>() / m as f64;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        let base = gi * m;
        for (j, v) in block.iter().enumerate() {
            let xh = (v - mean) * rstd;
            let ch = (base + j) / hw % c;
            normalized[base + j] = xh;
            out[base + j] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok(Tensor::from_op(vec![n, c, h, w], out, Op::GroupNorm { groups, normalized, inv_std }, &[input, gamma, beta]))
}

fn group_norm_backward(
    parents: &[Tensor],
    g: &[f64],
    groups: usize,
    normalized: &[f64],
    inv_std: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let shape = parents[0].shape();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let m = c / groups * hw;
    let gamma = parents[1].data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&gv, &xh)) in g.iter().zip(normalized).enumerate() {
        let ch = i / hw % c;
        dgamma[ch] += gv * xh;
        dbeta[ch] += gv;
    }
    let dx = parents[0].requires_grad().then(|| {
        let mut dx = vec![0.0; g.len()];
        for (gi, &rstd) in inv_std.iter().enumerate() {
            let base = gi * m;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in base..base + m {
                let d = g[j] * gamma[j / hw % c];
                mean_d += d;
                mean_dx += d * normalized[j];
            }
            mean_d /= m as f64;
            mean_dx /= m as f64;
            for j in base..base + m {
                let d = g[j] * gamma[j / hw % c];
                dx[j] = rstd * (d - mean_d - normalized[j] * mean_dx);
            }
        }
        dx
    });
    vec![dx, parents[1].requires_grad().then_some(dgamma), parents[2].requires_grad().then_some(dbeta)]
}

/// Inverted dropout. In evaluation mode, or with `p == 0`, this is the
/// identity and consumes no randomness.
pub fn dropout<R: Rng + ?Sized>(input: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..input.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let out = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok(Tensor::from_op(input.shape().to_vec(), out, Op::Dropout { mask }, &[input]))
}

pub(super) fn backward(op: &Op, _out: &Tensor, parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Conv2d { stride, padding } => conv2d_backward(parents, g, *stride, *padding),
        Op::Linear => linear_backward(parents, g),
        Op::MaxPool2d { argmax } => {
            let mut dx = vec![0.0; parents[0].numel()];
            for (&src, gv) in argmax.iter().zip(g) {
                dx[src] += gv;
            }
            vec![Some(dx)]
        }
        Op::UpsampleNearest2d { factor } => {
            let [_, _, h, w] = dims4(&parents[0], "upsample").expect("validated in forward");
            let (ho, wo) = (h * factor, w * factor);
            let mut dx = vec![0.0; parents[0].numel()];
            for (i, gv) in g.iter().enumerate() {
                let plane = i / (ho * wo);
                let (oy, ox) = (i / wo % ho, i % wo);
                dx[(plane * h + oy / factor) * w + ox / factor] += gv;
            }
            vec![Some(dx)]
        }
        Op::GlobalAvgPool => {
            let shape = parents[0].shape();
            let hw = shape[2] * shape[3];
            let dx = (0..parents[0].numel()).map(|i| g[i / hw] / hw as f64).collect();
            vec![Some(dx)]
        }
        Op::ConcatChannels { first } => {
            let shape = parents[0].shape();
            let (n, hw) = (shape[0], shape[2] * shape[3]);
            let pa = first * hw;
            let pb = parents[1].numel() / n;
            let mut da = Vec::with_capacity(n * pa);
            let mut db = Vec::with_capacity(n * pb);
            for s in 0..n {
                let row = &g[s * (pa + pb)..(s + 1) * (pa + pb)];
                da.extend_from_slice(&row[..pa]);
                db.extend_from_slice(&row[pa..]);
            }
            vec![Some(da), Some(db)]
        }
        Op::GroupNorm { groups, normalized, inv_std } => group_norm_backward(parents, g, *groups, normalized, inv_std),
        Op::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(a, b)| a * b).collect())],
        other => unreachable!("{} is not a layer op", other.name()),
    }
}
