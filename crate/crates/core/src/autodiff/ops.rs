//! Forward operations and their gradient rules.

use super::conv::{self, ConvGeometry};
use super::{accumulate, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// How a batch-norm layer obtains its normalization statistics.
pub enum BatchNormMode<'a, T> {
    /// Batch statistics; running statistics are updated when provided.
    Train {
        running: Option<(&'a mut [T], &'a mut [T])>,
        momentum: f64,
    },
    /// Stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Output shape and, for every input element, its output slot.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = if keep.is_empty() {
        vec![1]
    } else {
        keep.iter().map(|&d| shape[d]).collect()
    };
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for &d in keep.iter().rev() {
        out_strides[d] = acc;
        acc *= shape[d];
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl<T: Real> Tape<T> {
    /// 2D cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("conv2d", self.shape(input))?;
        let (f, kc, kh, kw) = dims4("conv2d", self.shape(kernel))?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kc != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {f} filters", self.shape(b))));
            }
        }
        let g = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            padding,
            stride,
        };
        let out = conv::forward(
            &g,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, f, g.out_height(), g.out_width()], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
            },
            &inputs,
        )
    }

    /// Per-channel normalization of `[N, C, ...]`.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm", format!("affine parameters must be [{c}]")));
        }
        let m = n * spatial;
        let x = self.value(input).data();
        let at = |ni: usize, ci: usize| (ni * c + ci) * spatial;

        let mut means = vec![0f64; c];
        let mut inv_std = vec![T::zero(); c];
        let batch_stats = matches!(mode, BatchNormMode::Train { .. });
        match mode {
            BatchNormMode::Train { running, momentum } => {
                if m < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm",
                        detail: "a single value per channel has no variance".into(),
                    });
                }
                let mut vars = vec![0f64; c];
                for ci in 0..c {
                    let mut s = 0f64;
                    for ni in 0..n {
                        s += x[at(ni, ci)..at(ni, ci) + spatial].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut ss = 0f64;
                    for ni in 0..n {
                        ss += x[at(ni, ci)..at(ni, ci) + spatial]
                            .iter()
                            .map(|v| (v.to_f64_lossy() - mean).powi(2))
                            .sum::<f64>();
                    }
                    means[ci] = mean;
                    vars[ci] = ss / m as f64;
                    inv_std[ci] = T::from_f64_lossy(1.0 / (vars[ci] + eps).sqrt());
                }
                if let Some((rm, rv)) = running {
                    if rm.len() != c || rv.len() != c {
                        return Err(Error::shape("batchnorm", "running statistics length"));
                    }
                    let unbias = m as f64 / (m as f64 - 1.0);
                    for ci in 0..c {
                        rm[ci] = T::from_f64_lossy((1.0 - momentum) * rm[ci].to_f64_lossy() + momentum * means[ci]);
                        rv[ci] = T::from_f64_lossy(
                            (1.0 - momentum) * rv[ci].to_f64_lossy() + momentum * vars[ci] * unbias,
                        );
                    }
                }
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics length"));
                }
                for ci in 0..c {
                    means[ci] = mean[ci].to_f64_lossy();
                    inv_std[ci] = T::from_f64_lossy(1.0 / (var[ci].to_f64_lossy() + eps).sqrt());
                }
            }
        }

        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let mean = T::from_f64_lossy(means[ci]);
                let base = at(ni, ci);
                for k in base..base + spatial {
                    let xh = (x[k] - mean) * inv_std[ci];
                    xhat[k] = xh;
                    out[k] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )
    }

    fn unary(&mut self, name: &'static str, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(input);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary("relu", input, Op::Relu(input), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary("sigmoid", input, Op::Sigmoid(input), sigmoid)
    }

    /// `ln(input + eps)`; the input must be non-negative.
    pub fn log(&mut self, input: Var, eps: T) -> Result<Var> {
        if let Some(bad) = self.value(input).data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Contract(format!("log input must be >= 0, found {bad}")));
        }
        self.unary("log", input, Op::Log { input, eps }, |v| (v + eps).ln())
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        self.unary("abs", input, Op::Abs(input), |v| v.abs())
    }

    /// `scale · input + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Result<Var> {
        self.unary("affine", input, Op::Affine { input, scale }, |v| scale * v + shift)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    /// Nearest-neighbour enlargement of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (n, c, h, w) = dims4("upsample_nearest", self.shape(input))?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / factor) * w + x / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("upsample_nearest", value, Op::Upsample { input, factor }, &[input])
    }

    /// Mean over non-overlapping `factor x factor` windows.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("pool factor must be >= 1".into()));
        }
        let (n, c, h, w) = dims4("avg_pool", self.shape(input))?;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = T::from_f64_lossy(1.0 / (factor * factor) as f64);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    d[(y / factor) * ow + x / factor] += s[y * w + x];
                }
            }
            d.iter_mut().for_each(|v| *v *= norm);
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("avg_pool", value, Op::AvgPool { input, factor }, &[input])
    }

    /// `[N, D] x [D, K] + [K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("dense", format!("input must be [N, D], got {s:?}"))),
        };
        let k = match *self.shape(weight) {
            [wd, k] if wd == d => k,
            ref s => return Err(Error::shape("dense", format!("weight {s:?} for input width {d}"))),
        };
        if self.shape(bias) != [k] {
            return Err(Error::shape("dense", format!("bias {:?} for {k} outputs", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (k as isize, 1),
            T::one(),
            &mut out,
            (k as isize, 1),
        );
        let value = Tensor::new(vec![n, k], out)?;
        self.push("dense", value, Op::Dense { input, weight, bias }, &[input, weight, bias])
    }

    fn reduce(&mut self, name: &'static str, input: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if let Some(a) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape(name, format!("axis {a} out of range for {shape:?}")));
        }
        let (out_shape, map) = reduce_map(&shape, axes);
        let out_len: usize = out_shape.iter().product();
        let count = shape.iter().product::<usize>() / out_len;
        let mut acc = vec![0f64; out_len];
        for (v, &slot) in self.value(input).data().iter().zip(&map) {
            acc[slot] += v.to_f64_lossy();
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let out = acc.into_iter().map(|s| T::from_f64_lossy(s * scale)).collect();
        let value = Tensor::new(out_shape, out)?;
        self.push(
            name,
            value,
            Op::Reduce {
                input,
                axes: axes.to_vec(),
                mean,
            },
            &[input],
        )
    }

    /// Mean over `axes`; reducing every axis yields a `[1]` scalar.
    pub fn reduce_mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("reduce_mean", input, axes, true)
    }

    pub fn reduce_sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("reduce_sum", input, axes, false)
    }

    /// Mean over every element.
    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce_mean(input, &axes)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Joins `[N, C1, ...]` and `[N, C2, ...]` into `[N, C1 + C2, ...]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let spatial: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&db[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let value = Tensor::new(shape, out)?;
        self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Multiplies a `[N, 1, H, W]` mask into every channel of `[N, C, H, W]`.
    pub fn mask_apply(&mut self, mask: Var, input: Var) -> Result<Var> {
        let (mn, mc, mh, mw) = dims4("mask_apply", self.shape(mask))?;
        let (n, c, h, w) = dims4("mask_apply", self.shape(input))?;
        if mc != 1 || mn != n || mh != h || mw != w {
            return Err(Error::shape(
                "mask_apply",
                format!("mask {:?} vs input {:?}", self.shape(mask), self.shape(input)),
            ));
        }
        let p = h * w;
        let (m, x) = (self.value(mask).data(), self.value(input).data());
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            let mrow = &m[ni * p..(ni + 1) * p];
            for ci in 0..c {
                let base = (ni * c + ci) * p;
                for k in 0..p {
                    out[base + k] = mrow[k] * x[base + k];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push("mask_apply", value, Op::MaskApply { mask, input }, &[mask, input])
    }

    /// Forward difference `x[i + 1] - x[i]` along `axis`, shrinking it by one.
    pub fn shift_diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(Error::shape("shift_diff", format!("axis {axis} of {shape:?} needs extent >= 2")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (len - 1) * inner);
        for o in 0..outer {
            for i in 0..len - 1 {
                let a = (o * len + i) * inner;
                let b = a + inner;
                out.extend((0..inner).map(|k| x[b + k] - x[a + k]));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] -= 1;
        let value = Tensor::new(out_shape, out)?;
        self.push("shift_diff", value, Op::ShiftDiff { input, axis }, &[input])
    }

    /// Mean binary cross-entropy of `[N]` logits against fixed 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let mut acc = 0f64;
        for (&zi, &ti) in z.iter().zip(targets) {
            let zf = zi.to_f64_lossy();
            let softplus = zf.max(0.0) + (-zf.abs()).exp().ln_1p();
            acc += softplus - ti.to_f64_lossy() * zf;
        }
        let value = Tensor::scalar(T::from_f64_lossy(acc / z.len() as f64));
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }
}

/// Propagates the gradient `g` of node `i` into its inputs.
pub(crate) fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
            stride,
        } => {
            let s = val(*input).shape();
            let ks = val(*kernel).shape();
            let geo = ConvGeometry {
                batch: s[0],
                in_channels: s[1],
                height: s[2],
                width: s[3],
                filters: ks[0],
                kh: ks[2],
                kw: ks[3],
                padding: *padding,
                stride: *stride,
            };
            let mut dx = nodes[input.0].requires_grad.then(|| vec![T::zero(); val(*input).len()]);
            let mut dk = nodes[kernel.0].requires_grad.then(|| vec![T::zero(); val(*kernel).len()]);
            let mut db = bias
                .filter(|b| nodes[b.0].requires_grad)
                .map(|b| vec![T::zero(); val(b).len()]);
            conv::backward(
                &geo,
                val(*input).data(),
                val(*kernel).data(),
                g,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *input, |buf| add(buf, &dx));
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, *kernel, |buf| add(buf, &dk));
            }
            if let (Some(b), Some(db)) = (bias, db) {
                accumulate(nodes, grads, *b, |buf| add(buf, &db));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = out.shape();
            let (n, c) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let m = (n * spatial) as f64;
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    for k in base..base + spatial {
                        sum_g[ci] += g[k].to_f64_lossy();
                        sum_gx[ci] += (g[k] * xhat[k]).to_f64_lossy();
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |buf| {
                for ci in 0..c {
                    buf[ci] += T::from_f64_lossy(sum_gx[ci]);
                }
            });
            accumulate(nodes, grads, *beta, |buf| {
                for ci in 0..c {
                    buf[ci] += T::from_f64_lossy(sum_g[ci]);
                }
            });
            let gm = val(*gamma).data();
            accumulate(nodes, grads, *input, |buf| {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * spatial;
                        let scale = gm[ci] * inv_std[ci];
                        if *batch_stats {
                            let mg = T::from_f64_lossy(sum_g[ci] / m);
                            let mgx = T::from_f64_lossy(sum_gx[ci] / m);
                            for k in base..base + spatial {
                                buf[k] += scale * (g[k] - mg - xhat[k] * mgx);
                            }
                        } else {
                            for k in base..base + spatial {
                                buf[k] += scale * g[k];
                            }
                        }
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |buf| {
                for k in 0..buf.len() {
                    if xv[k] > T::zero() {
                        buf[k] += g[k];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] * y[k] * (T::one() - y[k]);
                }
            });
        }
        Op::Log { input, eps } => {
            let xv = val(*input).data();
            accumulate(nodes, grads, *input, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] / (xv[k] + *eps);
                }
            });
        }
        Op::Abs(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |buf| {
                for k in 0..buf.len() {
                    if xv[k] > T::zero() {
                        buf[k] += g[k];
                    } else if xv[k] < T::zero() {
                        buf[k] -= g[k];
                    }
                }
            });
        }
        Op::Affine { input, scale } => {
            accumulate(nodes, grads, *input, |buf| {
                for k in 0..buf.len() {
                    buf[k] += *scale * g[k];
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |buf| {
                buf.iter_mut().zip(g).for_each(|(b, v)| *b += *v);
            });
        }
        Op::Upsample { input, factor } => {
            let s = val(*input).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h * factor, w * factor);
            accumulate(nodes, grads, *input, |buf| {
                for plane in 0..s[0] * s[1] {
                    let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut buf[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(y / factor) * w + x / factor] += gs[y * ow + x];
                        }
                    }
                }
            });
        }
        Op::AvgPool { input, factor } => {
            let s = val(*input).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / factor, w / factor);
            let norm = T::from_f64_lossy(1.0 / (factor * factor) as f64);
            accumulate(nodes, grads, *input, |buf| {
                for plane in 0..s[0] * s[1] {
                    let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut buf[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            d[y * w + x] += norm * gs[(y / factor) * ow + x / factor];
                        }
                    }
                }
            });
        }
        Op::Dense { input, weight, bias } => {
            let s = val(*input).shape();
            let (n, d) = (s[0], s[1]);
            let k = val(*weight).shape()[1];
            let xv = val(*input).data();
            let wv = val(*weight).data();
            // dX = dY · W^T
            accumulate(nodes, grads, *input, |buf| {
                T::gemm(n, k, d, T::one(), g, (k as isize, 1), wv, (1, k as isize), T::one(), buf, (d as isize, 1));
            });
            // dW = X^T · dY
            accumulate(nodes, grads, *weight, |buf| {
                T::gemm(d, n, k, T::one(), xv, (1, d as isize), g, (k as isize, 1), T::one(), buf, (k as isize, 1));
            });
            accumulate(nodes, grads, *bias, |buf| {
                for row in g.chunks_exact(k) {
                    buf.iter_mut().zip(row).for_each(|(b, v)| *b += *v);
                }
            });
        }
        Op::Reduce { input, axes, mean } => {
            let shape = val(*input).shape();
            let (_, map) = reduce_map(shape, axes);
            let count = val(*input).len() / out.len();
            let scale = if *mean {
                T::from_f64_lossy(1.0 / count as f64)
            } else {
                T::one()
            };
            accumulate(nodes, grads, *input, |buf| {
                for (b, &slot) in buf.iter_mut().zip(&map) {
                    *b += scale * g[slot];
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
            accumulate(nodes, grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
            accumulate(nodes, grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, v)| *d -= *v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] * bv[k];
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] * av[k];
                }
            });
        }
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let spatial: usize = sa[2..].iter().product();
            let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
            let n = sa[0];
            accumulate(nodes, grads, *a, |buf| {
                for ni in 0..n {
                    let src = &g[ni * (ca + cb)..ni * (ca + cb) + ca];
                    buf[ni * ca..(ni + 1) * ca].iter_mut().zip(src).for_each(|(d, v)| *d += *v);
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for ni in 0..n {
                    let src = &g[ni * (ca + cb) + ca..(ni + 1) * (ca + cb)];
                    buf[ni * cb..(ni + 1) * cb].iter_mut().zip(src).for_each(|(d, v)| *d += *v);
                }
            });
        }
        Op::MaskApply { mask, input } => {
            let s = val(*input).shape();
            let (n, c, p) = (s[0], s[1], s[2] * s[3]);
            let (mv, xv) = (val(*mask).data(), val(*input).data());
            accumulate(nodes, grads, *mask, |buf| {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        for k in 0..p {
                            buf[ni * p + k] += g[base + k] * xv[base + k];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *input, |buf| {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        for k in 0..p {
                            buf[base + k] += g[base + k] * mv[ni * p + k];
                        }
                    }
                }
            });
        }
        Op::ShiftDiff { input, axis } => {
            let shape = val(*input).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let len = shape[*axis];
            accumulate(nodes, grads, *input, |buf| {
                for o in 0..outer {
                    for i in 0..len - 1 {
                        let a = (o * len + i) * inner;
                        let b = a + inner;
                        let go = (o * (len - 1) + i) * inner;
                        for k in 0..inner {
                            buf[b + k] += g[go + k];
                            buf[a + k] -= g[go + k];
                        }
                    }
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let z = val(*logits).data();
            let scale = g[0] / T::from_f64_lossy(z.len() as f64);
            accumulate(nodes, grads, *logits, |buf| {
                for k in 0..buf.len() {
                    buf[k] += scale * (sigmoid(z[k]) - targets[k]);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f32 * 0.3 - 2.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &k));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32).sin()));
        let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_extent_with_stride() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 7, 6]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, None, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 3]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let even = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, even, None, 0, 1), Err(Error::Config(_))));
        let wrong = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, wrong, None, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn batchnorm_constant_input_trains_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[4, 2, 3, 3], 7.5));
        let gm = tape.constant(Tensor::ones(&[2]));
        let bt = tape.constant(Tensor::zeros(&[2]));
        let mode = BatchNormMode::Train { running: None, momentum: 0.1 };
        let y = tape.batchnorm(x, gm, bt, mode, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2, 2, 2], |i| (i * i) as f32));
        let gm = tape.constant(Tensor::zeros(&[2]));
        let bt = tape.constant(t(&[2], &[0.25, -3.0]));
        let mode = BatchNormMode::Train { running: None, momentum: 0.1 };
        let y = tape.batchnorm(x, gm, bt, mode, 1e-5).unwrap();
        for (k, v) in tape.value(y).data().iter().enumerate() {
            let ch = (k / 4) % 2;
            assert_eq!(*v, [0.25, -3.0][ch]);
        }
    }

    #[test]
    fn batchnorm_single_value_batch_is_degenerate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gm = tape.constant(Tensor::ones(&[2]));
        let bt = tape.constant(Tensor::zeros(&[2]));
        let mode = BatchNormMode::Train { running: None, momentum: 0.1 };
        assert!(matches!(tape.batchnorm(x, gm, bt, mode, 1e-5), Err(Error::DegenerateBatch { .. })));
    }

    #[test]
    fn batchnorm_updates_running_stats_with_momentum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let gm = tape.constant(Tensor::ones(&[1]));
        let bt = tape.constant(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let mode = BatchNormMode::Train {
            running: Some((&mut rm, &mut rv)),
            momentum: 0.1,
        };
        tape.batchnorm(x, gm, bt, mode, 1e-5).unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let one = tape.constant(t(&[1], &[1.0]));
        let l = tape.log(one, 1e-8).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-7);
        let ones = tape.constant(Tensor::ones(&[2]));
        let m = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn log_rejects_negative_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1], &[-0.5]));
        assert!(matches!(tape.log(x, 1e-8), Err(Error::Contract(_))));
    }

    #[test]
    fn upsample_factor_one_and_two() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f32));
        let y = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let v = tape.constant(t(&[1, 1, 1, 1], &[4.5]));
        let u = tape.upsample_nearest(v, 2).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(u).data(), &[4.5; 4]);
        assert!(matches!(tape.upsample_nearest(v, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reductions_and_dense() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4], 1.75));
        let m = tape.mean_all(c).unwrap();
        assert_eq!(tape.value(m).data(), &[1.75]);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f32));
        let s = tape.reduce_sum(x, &[1]).unwrap();
        assert_eq!(tape.shape(s), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);

        let inp = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32 - 1.0));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(inp, eye, b).unwrap();
        assert_eq!(tape.value(y), tape.value(inp));
    }

    #[test]
    fn elementwise_ops_do_not_broadcast() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_and_shift_diff() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f32));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
        let m = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let dx = tape.shift_diff(m, 3).unwrap();
        assert_eq!(tape.value(dx).data(), &[1.0, 1.0]);
        let dy = tape.shift_diff(m, 2).unwrap();
        assert_eq!(tape.value(dy).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1], &[f32::MAX]));
        assert!(matches!(tape.affine(x, 10.0, 0.0), Err(Error::NonFinite(_))));
    }
}
