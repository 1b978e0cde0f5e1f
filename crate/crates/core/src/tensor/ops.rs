use super::conv::{self, ConvSpec};
use super::tape::{accumulate, Node, Tape, Var};
use super::{expect_rank, split_last, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Act(Activation),
    Exp,
    Square,
    /// `sqrt(max(x, 0))`, zero gradient where the argument is clamped.
    SqrtClamped,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        input: Var,
        row: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    AddScalar(Var),
    Unary {
        input: Var,
        kind: Unary,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLast(Var),
    SoftmaxLast(Var),
    ScaleChannels {
        input: Var,
        gate: Var,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Slice {
        input: Var,
        outer: usize,
        in_inner: usize,
        offset: usize,
        inner: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Pearson {
        truth: Var,
        pred: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { input, row } => vec![*input, *row],
            Scale { input, .. }
            | Unary { input, .. }
            | Clamp { input, .. }
            | Slice { input, .. }
            | MaxPool { input, .. }
            | AvgPool { input, .. }
            | Upsample { input, .. } => vec![*input],
            AddScalar(x) | SumAll(x) | MeanAll(x) | SumLast(x) | MeanLast(x) | SoftmaxLast(x)
            | Reshape(x) => vec![*x],
            ScaleChannels { input, gate } => vec![*input, *gate],
            Concat { a, b, .. } => vec![*a, *b],
            Dense {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Conv1d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Pearson { truth, pred } => vec![*truth, *pred],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Pushes the adjoint `g` of this node's output into its inputs.
    pub(crate) fn backward(
        &self,
        out: &Tensor<T>,
        g: &[T],
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: &Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, g));
                accumulate(grads, nodes, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, g));
                accumulate(grads, nodes, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                accumulate(grads, nodes, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { input, row } => {
                accumulate(grads, nodes, *input, |d| add_into(d, g));
                accumulate(grads, nodes, *row, |d| {
                    let w = d.len();
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % w] += gi;
                    }
                });
            }
            Op::Scale { input, factor } => {
                accumulate(grads, nodes, *input, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor)
                });
            }
            Op::AddScalar(x) => accumulate(grads, nodes, *x, |d| add_into(d, g)),
            Op::Unary { input, kind } => {
                let x = val(input).data();
                let y = out.data();
                accumulate(grads, nodes, *input, |d| {
                    let two = T::lit(2.0);
                    for i in 0..d.len() {
                        let local = match kind {
                            Unary::Act(Activation::Relu) => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Act(Activation::Tanh) => T::one() - y[i] * y[i],
                            Unary::Act(Activation::Sigmoid) => y[i] * (T::one() - y[i]),
                            Unary::Exp => y[i],
                            Unary::Square => two * x[i],
                            Unary::SqrtClamped => {
                                if y[i] > T::zero() {
                                    T::one() / (two * y[i])
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        d[i] += g[i] * local;
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(input).data();
                accumulate(grads, nodes, *input, |d| {
                    for i in 0..d.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]))
            }
            Op::MeanAll(x) => accumulate(grads, nodes, *x, |d| {
                let s = g[0] / T::lit(d.len() as f64);
                d.iter_mut().for_each(|d| *d += s)
            }),
            Op::SumLast(x) | Op::MeanLast(x) => {
                let (_, last) = split_last(val(x).shape());
                let scale = if matches!(self, Op::MeanLast(_)) {
                    T::one() / T::lit(last as f64)
                } else {
                    T::one()
                };
                accumulate(grads, nodes, *x, |d| {
                    for (row, &gr) in d.chunks_mut(last).zip(g) {
                        row.iter_mut().for_each(|d| *d += gr * scale);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let (_, last) = split_last(out.shape());
                let y = out.data();
                accumulate(grads, nodes, *x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for i in 0..last {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::ScaleChannels { input, gate } => {
                let shape = val(input).shape();
                let t = shape[2];
                let (x, gv) = (val(input).data(), val(gate).data());
                accumulate(grads, nodes, *input, |d| {
                    for (bc, &s) in gv.iter().enumerate() {
                        for k in bc * t..(bc + 1) * t {
                            d[k] += g[k] * s;
                        }
                    }
                });
                accumulate(grads, nodes, *gate, |d| {
                    for (bc, dg) in d.iter_mut().enumerate() {
                        let r = bc * t..(bc + 1) * t;
                        *dg += x[r.clone()].iter().zip(&g[r]).map(|(&x, &g)| x * g).sum();
                    }
                });
            }
            Op::Reshape(x) => accumulate(grads, nodes, *x, |d| add_into(d, g)),
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let w = a_inner + b_inner;
                accumulate(grads, nodes, *a, |d| {
                    for o in 0..*outer {
                        add_into(
                            &mut d[o * a_inner..(o + 1) * a_inner],
                            &g[o * w..o * w + a_inner],
                        );
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for o in 0..*outer {
                        add_into(
                            &mut d[o * b_inner..(o + 1) * b_inner],
                            &g[o * w + a_inner..(o + 1) * w],
                        );
                    }
                });
            }
            Op::Slice {
                input,
                outer,
                in_inner,
                offset,
                inner,
            } => accumulate(grads, nodes, *input, |d| {
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    let start = o * in_inner + offset;
                    add_into(&mut d[start..start + inner], src);
                }
            }),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(input), val(weight));
                let (n, f) = split_last(x.shape());
                let gdim = w.shape()[0];
                accumulate(grads, nodes, *input, |d| {
                    // dX[n,f] += G[n,g] W[g,f]
                    T::gemm(
                        n,
                        gdim,
                        f,
                        T::one(),
                        g,
                        gdim as isize,
                        1,
                        w.data(),
                        f as isize,
                        1,
                        T::one(),
                        d,
                        f as isize,
                        1,
                    );
                });
                accumulate(grads, nodes, *weight, |d| {
                    // dW[g,f] += G^T[g,n] X[n,f]
                    T::gemm(
                        gdim,
                        n,
                        f,
                        T::one(),
                        g,
                        1,
                        gdim as isize,
                        x.data(),
                        f as isize,
                        1,
                        T::one(),
                        d,
                        f as isize,
                        1,
                    );
                });
                if let Some(b) = bias {
                    accumulate(grads, nodes, *b, |d| {
                        for row in g.chunks(gdim) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                spec,
            } => conv::conv1d_backward(*input, *kernel, *bias, spec, g, nodes, grads),
            Op::MaxPool { input, argmax } => accumulate(grads, nodes, *input, |d| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
            }),
            Op::AvgPool { input, window } => accumulate(grads, nodes, *input, |d| {
                conv::avgpool_backward(val(input).shape(), *window, g, d)
            }),
            Op::Upsample { input, factor } => accumulate(grads, nodes, *input, |d| {
                for (i, di) in d.iter_mut().enumerate() {
                    *di += g[i * factor..(i + 1) * factor].iter().copied().sum();
                }
            }),
            Op::Pearson { truth, pred } => {
                let (tv, pv) = (val(truth), val(pred));
                let (batch, len) = split_last(tv.shape());
                let scale = g[0] / T::lit(batch as f64);
                let mut d_truth = vec![T::zero(); tv.len()];
                let mut d_pred = vec![T::zero(); pv.len()];
                for b in 0..batch {
                    let r = b * len..(b + 1) * len;
                    pearson_window_grad(
                        &tv.data()[r.clone()],
                        &pv.data()[r.clone()],
                        &mut d_truth[r.clone()],
                        &mut d_pred[r],
                    );
                }
                // loss = 1 - mean(r)
                accumulate(grads, nodes, *truth, |d| {
                    d.iter_mut()
                        .zip(&d_truth)
                        .for_each(|(d, &x)| *d -= scale * x)
                });
                accumulate(grads, nodes, *pred, |d| {
                    d.iter_mut()
                        .zip(&d_pred)
                        .for_each(|(d, &x)| *d -= scale * x)
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                accumulate(grads, nodes, *logits, |d| {
                    for (b, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == y { T::one() } else { T::zero() };
                            d[b * k + c] += scale * (probs[b * k + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Floor applied to the centered sums of squares; a constant window then
/// correlates at exactly 0.
pub const PEARSON_EPS: f64 = 1e-8;

pub(crate) struct PearsonParts<T> {
    pub r: T,
    sxx: T,
    syy: T,
    ax: T,
    ay: T,
    mx: T,
    my: T,
}

pub(crate) fn pearson_parts<T: Scalar>(x: &[T], y: &[T]) -> PearsonParts<T> {
    let n = T::lit(x.len() as f64);
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let eps = T::lit(PEARSON_EPS);
    let ax = sxx.max(eps).sqrt();
    let ay = syy.max(eps).sqrt();
    let r = (sxy / (ax * ay)).max(-T::one()).min(T::one());
    PearsonParts {
        r,
        sxx,
        syy,
        ax,
        ay,
        mx,
        my,
    }
}

/// Adds dr/dx and dr/dy of one window into the buffers.
fn pearson_window_grad<T: Scalar>(x: &[T], y: &[T], dx: &mut [T], dy: &mut [T]) {
    let p = pearson_parts(x, y);
    let eps = T::lit(PEARSON_EPS);
    let inv = T::one() / (p.ax * p.ay);
    let cx = if p.sxx > eps {
        p.r / (p.ax * p.ax)
    } else {
        T::zero()
    };
    let cy = if p.syy > eps {
        p.r / (p.ay * p.ay)
    } else {
        T::zero()
    };
    for i in 0..x.len() {
        let (xc, yc) = (x[i] - p.mx, y[i] - p.my);
        dx[i] += yc * inv - cx * xc;
        dy[i] += xc * inv - cy * yc;
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor {
            shape: x.shape().to_vec(),
            data: x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect(),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `input[..., d] + row[d]`.
    pub fn add_row(&self, input: Var, row: Var) -> Result<Var> {
        let (si, sr) = (self.shape(input), self.shape(row));
        let (_, last) = split_last(&si);
        if sr.len() != 1 || sr[0] != last {
            return Err(Error::dim(format!("add_row: {si:?} + {sr:?}")));
        }
        let out = {
            let (x, r) = (self.value(input), self.value(row));
            let data = x
                .data()
                .chunks(last)
                .flat_map(|c| c.iter().zip(r.data()).map(|(&a, &b)| a + b))
                .collect();
            Tensor { shape: si, data }
        };
        self.push(out, Op::AddRow { input, row })
    }

    pub fn scale(&self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|x| x * factor);
        self.push(out, Op::Scale { input, factor })
    }

    pub fn add_scalar(&self, input: Var, c: T) -> Result<Var> {
        let out = self.value(input).map(|x| x + c);
        self.push(out, Op::AddScalar(input))
    }

    fn unary(&self, input: Var, kind: Unary) -> Result<Var> {
        let out = self.value(input).map(|x| match kind {
            Unary::Act(Activation::Relu) => x.max(T::zero()),
            Unary::Act(Activation::Tanh) => x.tanh(),
            Unary::Act(Activation::Sigmoid) => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::SqrtClamped => x.max(T::zero()).sqrt(),
        });
        self.push(out, Op::Unary { input, kind })
    }

    pub fn activation(&self, input: Var, kind: Activation) -> Result<Var> {
        self.unary(input, Unary::Act(kind))
    }

    pub fn relu(&self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn exp(&self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Exp)
    }

    pub fn square(&self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Square)
    }

    /// `sqrt(max(x, 0))`.
    pub fn sqrt_clamped(&self, input: Var) -> Result<Var> {
        self.unary(input, Unary::SqrtClamped)
    }

    pub fn clamp(&self, input: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::param(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(input).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp { input, lo, hi })
    }

    pub fn sum_all(&self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(input))
    }

    pub fn mean_all(&self, input: Var) -> Result<Var> {
        let s = {
            let x = self.value(input);
            if x.is_empty() {
                return Err(Error::dim("mean of an empty tensor"));
            }
            x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64)
        };
        self.push(Tensor::scalar(s), Op::MeanAll(input))
    }

    fn reduce_last(&self, input: Var, mean: bool) -> Result<Var> {
        let out = {
            let x = self.value(input);
            if x.ndim() == 0 {
                return Err(Error::dim("reduce over the last axis of a scalar"));
            }
            let (_, last) = split_last(x.shape());
            if last == 0 {
                return Err(Error::dim("reduce over an empty axis"));
            }
            let norm = if mean { T::lit(last as f64) } else { T::one() };
            let data = x
                .data()
                .chunks(last)
                .map(|c| c.iter().copied().sum::<T>() / norm)
                .collect();
            Tensor {
                shape: x.shape()[..x.ndim() - 1].to_vec(),
                data,
            }
        };
        let op = if mean {
            Op::MeanLast(input)
        } else {
            Op::SumLast(input)
        };
        self.push(out, op)
    }

    /// Sums away the last axis.
    pub fn sum_last(&self, input: Var) -> Result<Var> {
        self.reduce_last(input, false)
    }

    pub fn mean_last(&self, input: Var) -> Result<Var> {
        self.reduce_last(input, true)
    }

    /// Softmax over the last (frame) axis, max-subtracted.
    pub fn softmax_last(&self, input: Var) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let (_, last) = split_last(x.shape());
            if last == 0 {
                return Err(Error::dim("softmax over an empty axis"));
            }
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(last) {
                data.extend(softmax(row));
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        };
        self.push(out, Op::SoftmaxLast(input))
    }

    /// `input[b, c, t] * gate[b, c]`.
    pub fn scale_channels(&self, input: Var, gate: Var) -> Result<Var> {
        let (si, sg) = (self.shape(input), self.shape(gate));
        expect_rank(&si, 3, "scale_channels input")?;
        if sg != si[..2] {
            return Err(Error::dim(format!(
                "scale_channels: gate {sg:?} for {si:?}"
            )));
        }
        let out = {
            let (x, gv) = (self.value(input), self.value(gate));
            let t = si[2];
            let mut data = x.data().to_vec();
            for (bc, &s) in gv.data().iter().enumerate() {
                data[bc * t..(bc + 1) * t].iter_mut().for_each(|v| *v *= s);
            }
            Tensor { shape: si, data }
        };
        self.push(out, Op::ScaleChannels { input, gate })
    }

    pub fn reshape(&self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push(out, Op::Reshape(input))
    }

    /// Joins `a` and `b` along `axis`; all other extents must agree.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::dim(format!("concat axis {axis}: {sa:?} and {sb:?}")));
        }
        for i in 0..sa.len() {
            if i != axis && sa[i] != sb[i] {
                return Err(Error::dim(format!(
                    "concat axis {axis}: extent mismatch on axis {i}: {sa:?} vs {sb:?}"
                )));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let a_inner = sa[axis] * tail;
        let b_inner = sb[axis] * tail;
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            let mut data = Vec::with_capacity(x.len() + y.len());
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * a_inner..(o + 1) * a_inner]);
                data.extend_from_slice(&y.data()[o * b_inner..(o + 1) * b_inner]);
            }
            let mut shape = sa.clone();
            shape[axis] += sb[axis];
            Tensor { shape, data }
        };
        self.push(
            out,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
        )
    }

    /// `len` entries of `input` along `axis`, starting at `start`.
    pub fn slice(&self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let si = self.shape(input);
        if axis >= si.len() || start + len > si[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{} on axis {axis} of {si:?}",
                start + len
            )));
        }
        let outer: usize = si[..axis].iter().product();
        let tail: usize = si[axis + 1..].iter().product();
        let in_inner = si[axis] * tail;
        let inner = len * tail;
        let offset = start * tail;
        let out = {
            let x = self.value(input);
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let s = o * in_inner + offset;
                data.extend_from_slice(&x.data()[s..s + inner]);
            }
            let mut shape = si.clone();
            shape[axis] = len;
            Tensor { shape, data }
        };
        self.push(
            out,
            Op::Slice {
                input,
                outer,
                in_inner,
                offset,
                inner,
            },
        )
    }

    /// `out[..., g] = sum_f weight[g, f] * input[..., f] + bias[g]`.
    pub fn dense(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        expect_rank(&sw, 2, "dense weight")?;
        if si.is_empty() || *si.last().unwrap() != sw[1] {
            return Err(Error::dim(format!(
                "dense: input {si:?} with weight {sw:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim(format!(
                    "dense: bias {:?} for weight {sw:?}",
                    self.shape(b)
                )));
            }
        }
        let out = {
            let (x, w) = (self.value(input), self.value(weight));
            let (n, f) = split_last(&si);
            let g = sw[0];
            let mut data = vec![T::zero(); n * g];
            if let Some(b) = bias {
                let bv = self.value(b);
                for row in data.chunks_mut(g) {
                    row.copy_from_slice(bv.data());
                }
            }
            // out[n,g] += X[n,f] W^T[f,g]
            T::gemm(
                n,
                f,
                g,
                T::one(),
                x.data(),
                f as isize,
                1,
                w.data(),
                1,
                f as isize,
                T::one(),
                &mut data,
                g as isize,
                1,
            );
            let mut shape = si.clone();
            *shape.last_mut().unwrap() = g;
            Tensor { shape, data }
        };
        self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        )
    }

    /// `1 - r`, with `r` the Pearson correlation of each row of `truth` and
    /// `pred` (shape `[B, L]`), averaged over rows.
    pub fn pearson_loss(&self, truth: Var, pred: Var) -> Result<Var> {
        let shape = self.same_shape(truth, pred, "pearson_loss")?;
        expect_rank(&shape, 2, "pearson_loss")?;
        if shape[1] < 2 || shape[0] == 0 {
            return Err(Error::dim(format!(
                "pearson_loss needs at least 2 samples per window, got {shape:?}"
            )));
        }
        let loss = {
            let (t, p) = (self.value(truth), self.value(pred));
            let len = shape[1];
            let mean_r = t
                .data()
                .chunks(len)
                .zip(p.data().chunks(len))
                .map(|(a, b)| pearson_parts(a, b).r)
                .sum::<T>()
                / T::lit(shape[0] as f64);
            T::one() - mean_r
        };
        self.push(Tensor::scalar(loss), Op::Pearson { truth, pred })
    }

    /// Batch-averaged `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        expect_rank(&shape, 2, "cross_entropy logits")?;
        let (b, k) = (shape[0], shape[1]);
        if labels.len() != b || b == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for logits {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::param(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let (loss, probs) = {
            let z = self.value(logits);
            let mut probs = Vec::with_capacity(b * k);
            let mut total = T::zero();
            for (row, &y) in z.data().chunks(k).zip(labels) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                total += lse - row[y];
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
            }
            (total / T::lit(b as f64), probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let w = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.param(t(&[1], &[1.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.dense(x, id, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let zero = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.dense(zero, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let bad = tape.constant(t(&[1, 3], &[0.0; 3]));
        assert!(matches!(tape.dense(bad, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(tape.value(tape.tanh(z).unwrap()).data(), &[0.0]);
        assert_eq!(tape.value(tape.sigmoid(z).unwrap()).data(), &[0.5]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[0.7; 4]));
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let one = tape.constant(t(&[1, 1, 1], &[-3.0]));
        assert_eq!(tape.value(tape.softmax_last(one).unwrap()).data(), &[1.0]);
        let two = tape.constant(t(&[1, 1, 2], &[0.0, 2f64.ln()]));
        let y = tape.value(tape.softmax_last(two).unwrap()).clone();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::new();
        let a = tape.param(t(&[1, 1, 2], &[1.0, 2.0]));
        let b = tape.param(t(&[1, 1, 1], &[3.0]));
        let c = tape.concat(a, b, 2).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let empty = tape.constant(t(&[1, 1, 0], &[]));
        let same = tape.concat(a, empty, 2).unwrap();
        assert_eq!(*tape.value(same), *tape.value(a));
        let wrong = tape.constant(t(&[1, 2, 1], &[0.0, 0.0]));
        assert!(matches!(tape.concat(a, wrong, 2), Err(Error::Dimension(_))));

        // adjoint splits at the seam
        let w = tape.constant(t(&[1, 1, 3], &[10.0, 20.0, 30.0]));
        let prod = tape.mul(c, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn channel_concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let a2 = tape.slice(c, 1, 0, 1).unwrap();
        let b2 = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(*tape.value(a2), *tape.value(a));
        assert_eq!(*tape.value(b2), *tape.value(b));
    }

    #[test]
    fn pearson_examples() {
        let tape = Tape::new();
        let truth = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let pred = tape.constant(t(&[1, 3], &[1.0, 2.0, 4.0]));
        let l = tape.value(tape.pearson_loss(truth, pred).unwrap()).data()[0];
        assert!((l - (1.0 - 9.0 / 84f64.sqrt())).abs() < 1e-12);
        assert!((l - 0.01801).abs() < 1e-5);
        let same = tape.value(tape.pearson_loss(truth, truth).unwrap()).data()[0];
        assert!(same.abs() < 1e-12);
        let neg = tape.scale(truth, -1.0).unwrap();
        let anti = tape.value(tape.pearson_loss(truth, neg).unwrap()).data()[0];
        assert!((anti - 2.0).abs() < 1e-12);
        let flat = tape.constant(t(&[1, 3], &[5.0; 3]));
        let deg = tape.value(tape.pearson_loss(truth, flat).unwrap()).data()[0];
        assert_eq!(deg, 1.0);
        let short = tape.constant(t(&[1, 1], &[1.0]));
        assert!(tape.pearson_loss(short, short).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(t(&[1, 4], &[0.3; 4]));
        let l = tape
            .value(tape.cross_entropy(uniform, &[2]).unwrap())
            .data()[0];
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let half = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let l = tape.value(tape.cross_entropy(half, &[0]).unwrap()).data()[0];
        assert!((l - 0.6931).abs() < 1e-4);
        let sure = tape.constant(t(&[1, 2], &[800.0, 0.0]));
        let l = tape.value(tape.cross_entropy(sure, &[0]).unwrap()).data()[0];
        assert_eq!(l, 0.0);
        assert!(tape.cross_entropy(half, &[2]).is_err());
    }
}
