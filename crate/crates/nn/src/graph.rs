//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients into the nodes that
//! require them; only leaf gradients are retained afterwards.

use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Powf(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    AddChannel(Var, Var),
    AddSuffix(Var, Var),
    MulPrefix(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    RepeatBatch(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2(Var),
    AvgPool2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

/// Spatial bookkeeping for one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn ckk(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
    fn in_hw(&self) -> usize {
        self.h * self.w
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// A tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf node; gradients are kept for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ----- element-wise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// `x^p` for positive inputs.
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.powf(a, T::lit(0.5))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    // ----- linear algebra and shape -----

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} @ {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            out.data_mut(),
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose needs a matrix");
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[c, r], data), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Sums contiguous trailing blocks so the result has `out_shape`.
    pub fn sum_last(&mut self, a: Var, out_shape: &[usize]) -> Var {
        let rows: usize = out_shape.iter().product();
        let x = self.value(a);
        assert!(
            rows > 0 && x.numel().is_multiple_of(rows),
            "sum_last {:?} -> {out_shape:?}",
            x.shape()
        );
        let group = x.numel() / rows;
        let data = x.data().chunks(group).map(|c| c.iter().copied().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, data), Op::SumLast(a), rg)
    }

    /// `x[n, c, ..] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(self.value(b).numel(), c, "channel bias size");
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddChannel(x, b), rg)
    }

    /// Adds `b` broadcast over the leading axes of `x`.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Var {
        let bs = self.value(b).numel();
        assert!(bs > 0 && self.value(x).numel().is_multiple_of(bs), "suffix broadcast size");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bs) {
            chunk.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddSuffix(x, b), rg)
    }

    /// Multiplies each trailing block of `x` by one element of `s`.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Var {
        let ns = self.value(s).numel();
        assert!(ns > 0 && self.value(x).numel().is_multiple_of(ns), "prefix broadcast size");
        let inner = self.value(x).numel() / ns;
        let mut out = self.value(x).clone();
        let scale = self.value(s).data();
        for (chunk, &sc) in out.data_mut().chunks_mut(inner).zip(scale) {
            chunk.iter_mut().for_each(|v| *v *= sc);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::MulPrefix(x, s), rg)
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        assert!(
            s.len() == 2 && start + len <= s[1],
            "narrow {s:?} [{start}, +{len})"
        );
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[rows, len], data), Op::Narrow { x, start }, rg)
    }

    /// Concatenates matrices along their columns.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let rows = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert!(s.len() == 2 && s[0] == rows, "concat row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(&[rows, total], data), Op::Concat(xs.to_vec()), rg)
    }

    /// Tiles a `[1, ..]` tensor to `[n, ..]`.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[0], 1, "repeat_batch expects a unit batch");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = n;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, data), Op::RepeatBatch(x), rg)
    }

    // ----- spatial -----

    /// 2-D cross-correlation: `x[n, c, h, w]`, `w[o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert!(
            xs.len() == 4 && ws.len() == 4,
            "conv2d expects NCHW input and OCKK weight"
        );
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (k, h, wd) = (ws[2], xs[2], xs[3]);
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "kernel larger than padded input"
        );
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            h,
            w: wd,
            out_c: ws[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (ckk, ohw, ihw) = (geom.ckk(), geom.out_hw(), geom.in_hw());
        let keep_cols = self.rg(w) && !geom.pointwise();
        let mut out = Tensor::zeros(&[geom.batch, geom.out_c, geom.ho, geom.wo]);
        let mut saved = Vec::with_capacity(if keep_cols { geom.batch * ckk * ohw } else { 0 });
        let mut cols = vec![T::zero(); if geom.pointwise() { 0 } else { ckk * ohw }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let od = out.data_mut();
        for b in 0..geom.batch {
            let xb = &xv[b * geom.in_c * ihw..(b + 1) * geom.in_c * ihw];
            let rhs: &[T] = if geom.pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            let ob = &mut od[b * geom.out_c * ohw..(b + 1) * geom.out_c * ohw];
            T::gemm(
                geom.out_c,
                ckk,
                ohw,
                T::one(),
                wv,
                (ckk, 1),
                rhs,
                (ohw, 1),
                T::zero(),
                ob,
                (ohw, 1),
            );
            if keep_cols {
                saved.extend_from_slice(&cols);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                geom,
                cols: saved,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * h * w * 4];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], data), Op::Upsample2(x), rg)
    }

    /// 2x2 average pooling of an NCHW tensor with even spatial size.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even size");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut data = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = p * h * w + 2 * y * w + 2 * xx;
                    data[p * ho * wo + y * wo + xx] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, ho, wo], data), Op::AvgPool2(x), rg)
    }

    /// Batch normalization over every axis but the channel axis.
    ///
    /// With `running = Some((mean, var))` the stored statistics are used and
    /// no batch statistics are returned; otherwise the batch statistics
    /// normalize the input and are returned for the caller's running update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<BatchStats<T>>) {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = n * inner;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let blk = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        mean[ch] += blk.iter().copied().sum::<T>();
                    }
                }
                let cnt = T::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m /= cnt);
                for b in 0..n {
                    for ch in 0..c {
                        let blk = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        var[ch] += blk.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&v| {
                        if count > 1 {
                            v / T::from_usize(count - 1).unwrap()
                        } else {
                            v
                        }
                    })
                    .collect();
                var.iter_mut().for_each(|v| *v /= cnt);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = running.is_none();
        let v = self.push(
            Tensor::new(&s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        (v, stats)
    }

    /// Mean per-position softmax cross-entropy of `logits[n, k, ..]`
    /// against class indices laid out as `[n, ..]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        let (n, k) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        assert_eq!(targets.len(), n * inner, "target count");
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..inner {
                let idx = |j: usize| (b * k + j) * inner + p;
                let mut mx = T::neg_infinity();
                for j in 0..k {
                    mx = mx.max(lv[idx(j)]);
                }
                let mut z = T::zero();
                for j in 0..k {
                    let e = (lv[idx(j)] - mx).exp();
                    probs[idx(j)] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[idx(j)] /= z;
                }
                let t = targets[b * inner + p];
                assert!(t < k, "class index {t} out of range {k}");
                total += -(lv[idx(t)] - mx - z.ln());
            }
        }
        let loss = total / T::from_usize(n * inner).unwrap();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ----- backward -----

    /// Accumulates d`target`/d(leaf) into every leaf that requires grad.
    pub fn backward(&mut self, target: Var) {
        assert_eq!(self.value(target).numel(), 1, "backward needs a scalar target");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !self.rg(target) {
            self.grads = grads;
            return;
        }
        grads[target.0] = Some(Tensor::ones(self.shape(target)));
        for i in (0..=target.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            backprop(&self.nodes, &mut grads, &node.op, &node.value, gy);
        }
        self.grads = grads;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * ohw..((c * k + ki) * k + kj + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * ohw..((c * k + ki) * k + kj + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, created on first use; `None` when `v` needs no gradient.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    Some(g.data_mut())
}

fn acc_map<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    gy: &[T],
    f: impl Fn(usize, T) -> T,
) {
    if let Some(d) = slot(nodes, grads, v) {
        for (i, (d, &g)) in d.iter_mut().zip(gy).enumerate() {
            *d += f(i, g);
        }
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    op: &Op<T>,
    out: &Tensor<T>,
    gy: Tensor<T>,
) {
    let val = |v: Var| nodes[v.0].value.data();
    let gyd = gy.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_map(nodes, grads, *a, gyd, |_, g| g);
            acc_map(nodes, grads, *b, gyd, |_, g| g);
        }
        Op::Sub(a, b) => {
            acc_map(nodes, grads, *a, gyd, |_, g| g);
            acc_map(nodes, grads, *b, gyd, |_, g| -g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, gyd, |i, g| g * bv[i]);
            acc_map(nodes, grads, *b, gyd, |i, g| g * av[i]);
        }
        Op::Scale(a, c) => acc_map(nodes, grads, *a, gyd, |_, g| g * *c),
        Op::AddScalar(a) => acc_map(nodes, grads, *a, gyd, |_, g| g),
        Op::Square(a) => {
            let av = val(*a);
            let two = T::lit(2.0);
            acc_map(nodes, grads, *a, gyd, |i, g| g * two * av[i]);
        }
        Op::Powf(a, p) => {
            let av = val(*a);
            let pm1 = *p - T::one();
            // Fractional powers are not differentiable at 0; take the zero subgradient there.
            acc_map(nodes, grads, *a, gyd, |i, g| {
                if av[i] == T::zero() && *p < T::one() {
                    T::zero()
                } else {
                    g * *p * av[i].powf(pm1)
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc_map(nodes, grads, *a, gyd, |i, g| {
                if av[i] > T::zero() {
                    g
                } else {
                    T::zero()
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let av = val(*a);
            acc_map(nodes, grads, *a, gyd, |i, g| {
                if av[i] > T::zero() {
                    g
                } else {
                    g * *slope
                }
            });
        }
        Op::Tanh(a) => {
            let y = out.data();
            acc_map(nodes, grads, *a, gyd, |i, g| g * (T::one() - y[i] * y[i]));
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            acc_map(nodes, grads, *a, gyd, |i, g| g * y[i] * (T::one() - y[i]));
        }
        Op::Softplus(a) => {
            let av = val(*a);
            acc_map(nodes, grads, *a, gyd, |i, g| g * sigmoid(av[i]));
        }
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dC @ B^T
                T::gemm(m, n, k, T::one(), gyd, (n, 1), bv, (1, n), T::one(), da, (k, 1));
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = A^T @ dC
                T::gemm(k, m, n, T::one(), av, (1, k), gyd, (n, 1), T::one(), db, (n, 1));
            }
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += gyd[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) => acc_map(nodes, grads, *a, gyd, |_, g| g),
        Op::SumAll(a) => {
            let g0 = gyd[0];
            acc_map_const(nodes, grads, *a, g0);
        }
        Op::MeanAll(a) => {
            let n = T::from_usize(nodes[a.0].value.numel()).unwrap();
            acc_map_const(nodes, grads, *a, gyd[0] / n);
        }
        Op::SumLast(a) => {
            let group = nodes[a.0].value.numel() / out.numel();
            if let Some(d) = slot(nodes, grads, *a) {
                for (i, v) in d.iter_mut().enumerate() {
                    *v += gyd[i / group];
                }
            }
        }
        Op::AddChannel(x, b) => {
            acc_map(nodes, grads, *x, gyd, |_, g| g);
            let s = out.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            if let Some(db) = slot(nodes, grads, *b) {
                for (i, chunk) in gyd.chunks(inner).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        Op::AddSuffix(x, b) => {
            acc_map(nodes, grads, *x, gyd, |_, g| g);
            let bs = nodes[b.0].value.numel();
            if let Some(db) = slot(nodes, grads, *b) {
                for chunk in gyd.chunks(bs) {
                    db.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::MulPrefix(x, s) => {
            let sv = val(*s);
            let xv = val(*x);
            let inner = xv.len() / sv.len();
            acc_map(nodes, grads, *x, gyd, |i, g| g * sv[i / inner]);
            if let Some(ds) = slot(nodes, grads, *s) {
                for (j, d) in ds.iter_mut().enumerate() {
                    let r = j * inner..(j + 1) * inner;
                    *d += gyd[r.clone()].iter().zip(&xv[r]).map(|(&g, &x)| g * x).sum::<T>();
                }
            }
        }
        Op::Narrow { x, start } => {
            let s = out.shape();
            let (rows, len) = (s[0], s[1]);
            let cols = nodes[x.0].value.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    for j in 0..len {
                        d[r * cols + start + j] += gyd[r * len + j];
                    }
                }
            }
        }
        Op::Concat(xs) => {
            let rows = out.shape()[0];
            let total = out.shape()[1];
            let mut off = 0;
            for &v in xs {
                let w = nodes[v.0].value.shape()[1];
                if let Some(d) = slot(nodes, grads, v) {
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * w + j] += gyd[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::RepeatBatch(x) => {
            let inner = nodes[x.0].value.numel();
            if let Some(d) = slot(nodes, grads, *x) {
                for chunk in gyd.chunks(inner) {
                    d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => conv_backward(nodes, grads, *x, *w, geom, cols, gyd),
        Op::Upsample2(x) => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            if let Some(d) = slot(nodes, grads, *x) {
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[p * h * w + (y / 2) * w + xx / 2] += gyd[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
            }
        }
        Op::AvgPool2(x) => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            if let Some(d) = slot(nodes, grads, *x) {
                for p in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let g = gyd[p * ho * wo + y * wo + xx] * quarter;
                            let base = p * h * w + 2 * y * w + 2 * xx;
                            d[base] += g;
                            d[base + 1] += g;
                            d[base + w] += g;
                            d[base + w + 1] += g;
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = out.shape();
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let gv = val(*gamma);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        sum_dy[ch] += gyd[i];
                        sum_dy_xhat[ch] += gyd[i] * xhat[i];
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                db.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let m = T::from_usize(n * inner).unwrap();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let k = gv[ch] * inv_std[ch];
                        for i in off..off + inner {
                            dx[i] += if *train {
                                k * (gyd[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                            } else {
                                k * gyd[i]
                            };
                        }
                    }
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            targets,
            probs,
        } => {
            let s = nodes[logits.0].value.shape();
            let (n, k) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let scale = gyd[0] / T::from_usize(n * inner).unwrap();
            if let Some(d) = slot(nodes, grads, *logits) {
                for b in 0..n {
                    for p in 0..inner {
                        let t = targets[b * inner + p];
                        for j in 0..k {
                            let idx = (b * k + j) * inner + p;
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[idx] += scale * (probs[idx] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn acc_map_const<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: T) {
    if let Some(d) = slot(nodes, grads, v) {
        d.iter_mut().for_each(|x| *x += g);
    }
}

fn conv_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    x: Var,
    w: Var,
    g: &ConvGeom,
    cols: &[T],
    gy: &[T],
) {
    let (ckk, ohw, ihw) = (g.ckk(), g.out_hw(), g.in_hw());
    let xv = nodes[x.0].value.data();
    if let Some(dw) = slot(nodes, grads, w) {
        for b in 0..g.batch {
            let gyb = &gy[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
            let colb: &[T] = if g.pointwise() {
                &xv[b * g.in_c * ihw..(b + 1) * g.in_c * ihw]
            } else {
                &cols[b * ckk * ohw..(b + 1) * ckk * ohw]
            };
            // dW[o, ckk] += dY[o, hw] @ cols^T[hw, ckk]
            T::gemm(
                g.out_c,
                ohw,
                ckk,
                T::one(),
                gyb,
                (ohw, 1),
                colb,
                (1, ohw),
                T::one(),
                dw,
                (ckk, 1),
            );
        }
    }
    let wv = nodes[w.0].value.data();
    if let Some(dx) = slot(nodes, grads, x) {
        let mut dcols = vec![T::zero(); if g.pointwise() { 0 } else { ckk * ohw }];
        for b in 0..g.batch {
            let gyb = &gy[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
            let dxb = &mut dx[b * g.in_c * ihw..(b + 1) * g.in_c * ihw];
            if g.pointwise() {
                T::gemm(
                    ckk,
                    g.out_c,
                    ohw,
                    T::one(),
                    wv,
                    (1, ckk),
                    gyb,
                    (ohw, 1),
                    T::one(),
                    dxb,
                    (ohw, 1),
                );
            } else {
                T::gemm(
                    ckk,
                    g.out_c,
                    ohw,
                    T::one(),
                    wv,
                    (1, ckk),
                    gyb,
                    (ohw, 1),
                    T::zero(),
                    &mut dcols,
                    (ohw, 1),
                );
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}
