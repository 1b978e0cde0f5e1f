//! Temporal convolution, pooling and upsampling over `[batch, channel, time]`.

use super::ops::Op;
use super::tape::{accumulate, Node, Tape, Var};
use super::{expect_rank, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding so that the output has `ceil(T / stride)` frames; odd
    /// totals put the extra sample on the right.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvSpec {
    pub fn same() -> Self {
        Self::default()
    }

    pub fn valid() -> Self {
        Self {
            padding: Padding::Valid,
            ..Self::default()
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// `(left, right)` zero padding for an input of `t` frames and `k` taps.
    pub fn pads(&self, t: usize, k: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let eff = self.dilation * (k - 1) + 1;
                let out = t.div_ceil(self.stride);
                let total = ((out.saturating_sub(1)) * self.stride + eff).saturating_sub(t);
                (total / 2, total - total / 2)
            }
        }
    }

    /// Output frame count, or `None` if the kernel does not fit.
    pub fn output_len(&self, t: usize, k: usize) -> Option<usize> {
        let (l, r) = self.pads(t, k);
        let eff = self.dilation * (k - 1) + 1;
        let padded = t + l + r;
        (padded >= eff).then(|| (padded - eff) / self.stride + 1)
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    t: usize,
    cout: usize,
    k: usize,
    tout: usize,
    pad_left: usize,
    stride: usize,
    dilation: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_left == 0 && self.tout == self.t
    }

    /// Unfolds batch item `b` into `cols[(ci * K + k) * tout + t]`.
    fn im2col<T: Scalar>(&self, x: &[T], b: usize, cols: &mut [T]) {
        let base = b * self.cin * self.t;
        for ci in 0..self.cin {
            let src = &x[base + ci * self.t..base + (ci + 1) * self.t];
            for kk in 0..self.k {
                let row =
                    &mut cols[(ci * self.k + kk) * self.tout..(ci * self.k + kk + 1) * self.tout];
                let shift = (kk * self.dilation) as isize - self.pad_left as isize;
                for (to, c) in row.iter_mut().enumerate() {
                    let pos = (to * self.stride) as isize + shift;
                    *c = if pos >= 0 && (pos as usize) < self.t {
                        src[pos as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], b: usize, dx: &mut [T]) {
        let base = b * self.cin * self.t;
        for ci in 0..self.cin {
            let dst = &mut dx[base + ci * self.t..base + (ci + 1) * self.t];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * self.tout..(ci * self.k + kk + 1) * self.tout];
                let shift = (kk * self.dilation) as isize - self.pad_left as isize;
                for (to, &c) in row.iter().enumerate() {
                    let pos = (to * self.stride) as isize + shift;
                    if pos >= 0 && (pos as usize) < self.t {
                        dst[pos as usize] += c;
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    expect_rank(x, 3, "conv1d input")?;
    expect_rank(w, 3, "conv1d kernel")?;
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::param("conv1d stride and dilation must be positive"));
    }
    if x[1] != w[1] {
        return Err(Error::dim(format!(
            "conv1d: input has {} channels, kernel expects {}",
            x[1], w[1]
        )));
    }
    let k = w[2];
    if k == 0 {
        return Err(Error::dim("conv1d: empty kernel"));
    }
    let tout = spec.output_len(x[2], k).ok_or_else(|| {
        Error::dim(format!(
            "conv1d: kernel of {k} taps (dilation {}) longer than padded input of {} frames",
            spec.dilation, x[2]
        ))
    })?;
    Ok(Geometry {
        batch: x[0],
        cin: x[1],
        t: x[2],
        cout: w[0],
        k,
        tout,
        pad_left: spec.pads(x[2], k).0,
        stride: spec.stride,
        dilation: spec.dilation,
    })
}

pub(crate) fn conv1d_backward<T: Scalar>(
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let x = &nodes[input.0].value;
    let w = &nodes[kernel.0].value;
    let geo = geometry(x.shape(), w.shape(), spec).expect("validated in forward");
    let ck = geo.cin * geo.k;
    let out_stride = geo.cout * geo.tout;
    let pointwise = geo.pointwise();

    if nodes[kernel.0].requires_grad {
        let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * geo.tout }];
        accumulate(grads, nodes, kernel, |dw| {
            for b in 0..geo.batch {
                let gb = &g[b * out_stride..(b + 1) * out_stride];
                let src: &[T] = if pointwise {
                    &x.data()[b * ck * geo.t..(b + 1) * ck * geo.t]
                } else {
                    geo.im2col(x.data(), b, &mut cols);
                    &cols
                };
                // dW[co, ck] += G[co, t] cols^T[t, ck]
                T::gemm(
                    geo.cout,
                    geo.tout,
                    ck,
                    T::one(),
                    gb,
                    geo.tout as isize,
                    1,
                    src,
                    1,
                    geo.tout as isize,
                    T::one(),
                    dw,
                    ck as isize,
                    1,
                );
            }
        });
    }
    if nodes[input.0].requires_grad {
        let mut dcols = vec![T::zero(); ck * geo.tout];
        accumulate(grads, nodes, input, |dx| {
            for b in 0..geo.batch {
                let gb = &g[b * out_stride..(b + 1) * out_stride];
                if pointwise {
                    let dst = &mut dx[b * ck * geo.t..(b + 1) * ck * geo.t];
                    T::gemm(
                        ck,
                        geo.cout,
                        geo.tout,
                        T::one(),
                        w.data(),
                        1,
                        ck as isize,
                        gb,
                        geo.tout as isize,
                        1,
                        T::one(),
                        dst,
                        geo.tout as isize,
                        1,
                    );
                } else {
                    // dcols[ck, t] = W^T[ck, co] G[co, t]
                    T::gemm(
                        ck,
                        geo.cout,
                        geo.tout,
                        T::one(),
                        w.data(),
                        1,
                        ck as isize,
                        gb,
                        geo.tout as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        geo.tout as isize,
                        1,
                    );
                    geo.col2im(&dcols, b, dx);
                }
            }
        });
    }
    if let Some(bv) = bias {
        accumulate(grads, nodes, bv, |db| {
            for b in 0..geo.batch {
                for (co, d) in db.iter_mut().enumerate() {
                    let s = b * out_stride + co * geo.tout;
                    *d += g[s..s + geo.tout].iter().copied().sum();
                }
            }
        });
    }
}

pub(crate) fn avgpool_backward<T: Scalar>(shape: &[usize], window: usize, g: &[T], d: &mut [T]) {
    let t = shape[2];
    let tout = t / window;
    let inv = T::one() / T::lit(window as f64);
    for bc in 0..shape[0] * shape[1] {
        for o in 0..tout {
            let gi = g[bc * tout + o] * inv;
            for k in 0..window {
                d[bc * t + o * window + k] += gi;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// 1-D convolution (cross-correlation) of `[B, Cin, T]` with `[Cout, Cin, K]`.
    pub fn conv1d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(input), self.shape(kernel));
        let geo = geometry(&sx, &sw, &spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.cout] {
                return Err(Error::dim(format!(
                    "conv1d: bias {:?} for {} output channels",
                    self.shape(b),
                    geo.cout
                )));
            }
        }
        let out = {
            let (x, w) = (self.value(input), self.value(kernel));
            let ck = geo.cin * geo.k;
            let out_stride = geo.cout * geo.tout;
            let mut data = vec![T::zero(); geo.batch * out_stride];
            if let Some(b) = bias {
                let bv = self.value(b);
                for (i, chunk) in data.chunks_mut(geo.tout).enumerate() {
                    let v = bv.data()[i % geo.cout];
                    chunk.iter_mut().for_each(|c| *c = v);
                }
            }
            let mut cols = vec![T::zero(); if geo.pointwise() { 0 } else { ck * geo.tout }];
            for b in 0..geo.batch {
                let src: &[T] = if geo.pointwise() {
                    &x.data()[b * ck * geo.t..(b + 1) * ck * geo.t]
                } else {
                    geo.im2col(x.data(), b, &mut cols);
                    &cols
                };
                let dst = &mut data[b * out_stride..(b + 1) * out_stride];
                T::gemm(
                    geo.cout,
                    ck,
                    geo.tout,
                    T::one(),
                    w.data(),
                    ck as isize,
                    1,
                    src,
                    geo.tout as isize,
                    1,
                    T::one(),
                    dst,
                    geo.tout as isize,
                    1,
                );
            }
            Tensor {
                shape: vec![geo.batch, geo.cout, geo.tout],
                data,
            }
        };
        self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
                spec,
            },
        )
    }

    /// Non-overlapping max over `window` frames; trailing frames that do not
    /// fill a window are dropped. Ties go to the earliest frame.
    pub fn maxpool1d(&self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input);
        expect_rank(&shape, 3, "maxpool1d")?;
        if window == 0 {
            return Err(Error::param("maxpool1d window must be positive"));
        }
        let t = shape[2];
        if t < window {
            return Err(Error::dim(format!(
                "maxpool1d: {t} frames < window {window}"
            )));
        }
        let tout = t / window;
        let (out, argmax) = {
            let x = self.value(input);
            let rows = shape[0] * shape[1];
            let mut data = Vec::with_capacity(rows * tout);
            let mut argmax = Vec::with_capacity(rows * tout);
            for r in 0..rows {
                for o in 0..tout {
                    let start = r * t + o * window;
                    let mut best = start;
                    for i in start + 1..start + window {
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    data.push(x.data()[best]);
                    argmax.push(best);
                }
            }
            (
                Tensor {
                    shape: vec![shape[0], shape[1], tout],
                    data,
                },
                argmax,
            )
        };
        self.push(out, Op::MaxPool { input, argmax })
    }

    /// Non-overlapping mean over `window` frames.
    pub fn avgpool1d(&self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input);
        expect_rank(&shape, 3, "avgpool1d")?;
        if window == 0 {
            return Err(Error::param("avgpool1d window must be positive"));
        }
        let t = shape[2];
        if t < window {
            return Err(Error::dim(format!(
                "avgpool1d: {t} frames < window {window}"
            )));
        }
        let tout = t / window;
        let out = {
            let x = self.value(input);
            let inv = T::one() / T::lit(window as f64);
            let mut data = Vec::with_capacity(shape[0] * shape[1] * tout);
            for row in x.data().chunks(t) {
                for o in 0..tout {
                    data.push(row[o * window..(o + 1) * window].iter().copied().sum::<T>() * inv);
                }
            }
            Tensor {
                shape: vec![shape[0], shape[1], tout],
                data,
            }
        };
        self.push(out, Op::AvgPool { input, window })
    }

    /// Nearest-neighbour upsampling along time.
    pub fn upsample_nearest(&self, input: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(input);
        expect_rank(&shape, 3, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::param("upsample factor must be positive"));
        }
        let out = {
            let x = self.value(input);
            let data = x
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, factor))
                .collect();
            Tensor {
                shape: vec![shape[0], shape[1], shape[2] * factor],
                data,
            }
        };
        self.push(out, Op::Upsample { input, factor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(shape: [usize; 3], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_valid_example() {
        let tape = Tape::new();
        let x = tape.constant(t3([1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t3([1, 1, 2], &[1.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, k, Some(b), ConvSpec::valid()).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_identity_and_zero_input() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let x = tape.constant(t3([1, 2, 5], &data));
        let id = tape.constant(t3([2, 2, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv1d(x, id, None, ConvSpec::valid()).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let zero = tape.constant(Tensor::zeros(&[2, 2, 6]));
        let k = tape.constant(t3([3, 2, 3], &[0.7; 18]));
        let b = tape.constant(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.conv1d(zero, k, Some(b), ConvSpec::same()).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, 6]);
        for (i, row) in out.data().chunks(6).enumerate() {
            let expect = [1.0, -2.0, 0.5][i % 3];
            assert!(row.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn conv_shape_rules() {
        let spec = ConvSpec::same();
        assert_eq!(spec.pads(10, 4), (1, 2));
        assert_eq!(spec.output_len(10, 4), Some(10));
        assert_eq!(ConvSpec::valid().with_stride(2).output_len(9, 3), Some(4));
        assert_eq!(ConvSpec::valid().output_len(2, 3), None);
        assert_eq!(ConvSpec::same().with_dilation(3).output_len(7, 3), Some(7));

        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 1]));
        assert!(matches!(
            tape.conv1d(x, k, None, spec),
            Err(Error::Dimension(_))
        ));
        let long = tape.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(
            tape.conv1d(x, long, None, ConvSpec::valid()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn strided_dilated_conv_matches_direct_sum() {
        let tape = Tape::new();
        let (b, cin, t, cout, k) = (2, 3, 11, 2, 3);
        let xs: Vec<f64> = (0..b * cin * t)
            .map(|i| ((i * 7 % 13) as f64) - 6.0)
            .collect();
        let ws: Vec<f64> = (0..cout * cin * k)
            .map(|i| ((i * 5 % 7) as f64) * 0.25 - 0.7)
            .collect();
        let x = tape.constant(t3([b, cin, t], &xs));
        let w = tape.constant(t3([cout, cin, k], &ws));
        let spec = ConvSpec::same().with_dilation(2).with_stride(2);
        let y = tape.conv1d(x, w, None, spec).unwrap();
        let (pl, _) = spec.pads(t, k);
        let tout = spec.output_len(t, k).unwrap();
        let out = tape.value(y);
        for bi in 0..b {
            for co in 0..cout {
                for to in 0..tout {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for kk in 0..k {
                            let pos = (to * 2 + kk * 2) as isize - pl as isize;
                            if pos >= 0 && (pos as usize) < t {
                                s += ws[(co * cin + ci) * k + kk]
                                    * xs[(bi * cin + ci) * t + pos as usize];
                            }
                        }
                    }
                    assert!((out.data()[(bi * cout + co) * tout + to] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.param(t3([1, 1, 4], &[1.0, 3.0, 2.0, 5.0]));
        let y = tape.maxpool1d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let id = tape.maxpool1d(x, 1).unwrap();
        assert_eq!(tape.value(id).data(), tape.value(x).data());
        assert!(tape.maxpool1d(x, 5).is_err());

        let c = tape.param(t3([1, 1, 4], &[2.0; 4]));
        let y = tape.maxpool1d(c, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::new();
        let x = tape.param(t3([1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0]);
        let same = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0]);
        let three = tape.upsample_nearest(x, 3).unwrap();
        let loss = tape.sum_all(three).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn avgpool_means_windows() {
        let tape = Tape::new();
        let x = tape.constant(t3([1, 1, 5], &[1.0, 3.0, 2.0, 6.0, 9.0]));
        let y = tape.avgpool1d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    }
}
