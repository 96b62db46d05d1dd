use std::rc::Rc;

use super::Var;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::scan::{scan_backward, scan_chunked, SsmParams, SCAN_CHUNK};
use crate::tensor::Tensor;

fn t_like<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op output shape")
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("tensor with rank >= 1");
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn hwc(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected an H x W x C feature map, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    T::of(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// Bilinear source taps for one axis, half-pixel centers.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    fn elementwise(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let v = self.value().map(f);
        self.unary_op(
            v,
            Box::new(move |g, p, out| {
                let x = &p[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(t_like(x.shape(), data))]
            }),
        )
    }

    pub fn add(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        self.binary_op(
            o,
            a.zip_map(&b, |x, y| x + y),
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        self.binary_op(
            o,
            a.zip_map(&b, |x, y| x - y),
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        self.binary_op(
            o,
            a.zip_map(&b, |x, y| x * y),
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(&p[1], |gv, y| gv * y)),
                    Some(g.zip_map(&p[0], |gv, x| gv * x)),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * s);
        self.unary_op(v, Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + s);
        self.unary_op(v, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Adds a `[C]` vector to every row.
    pub fn add_row(self, r: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), r.value());
        let (_, cols) = rows_cols(a.shape());
        assert_eq!(b.len(), cols, "add_row width mismatch");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let rshape = b.shape().to_vec();
        self.binary_op(
            r,
            out,
            Box::new(move |g, _, _| {
                let mut gr = vec![T::zero(); cols];
                for row in g.data().chunks(cols) {
                    for (acc, &v) in gr.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(t_like(&rshape, gr))]
            }),
        )
    }

    /// Multiplies every row elementwise by a `[C]` vector.
    pub fn mul_row(self, r: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), r.value());
        let (_, cols) = rows_cols(a.shape());
        assert_eq!(b.len(), cols, "mul_row width mismatch");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v *= bv;
            }
        }
        let rshape = b.shape().to_vec();
        self.binary_op(
            r,
            out,
            Box::new(move |g, p, _| {
                let (a, b) = (&p[0], &p[1]);
                let mut ga = g.clone();
                let mut gr = vec![T::zero(); cols];
                for ((grow, arow), garow) in g
                    .data()
                    .chunks(cols)
                    .zip(a.data().chunks(cols))
                    .zip(ga.data_mut().chunks_mut(cols))
                {
                    for c in 0..cols {
                        gr[c] += grow[c] * arow[c];
                        garow[c] = grow[c] * b.data()[c];
                    }
                }
                vec![Some(ga), Some(t_like(&rshape, gr))]
            }),
        )
    }

    /// `[.., K] × [K, N] → [.., N]`.
    pub fn matmul(self, w: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), w.value());
        let (m, k) = rows_cols(a.shape());
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
        let n = b.shape()[1];
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.binary_op(
            w,
            t_like(&shape, out),
            Box::new(move |g, p, _| {
                let (a, b) = (&p[0], &p[1]);
                let gd = g.data();
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &b.data()[kk * n..(kk + 1) * n];
                        ga[i * k + kk] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        if av == T::zero() {
                            continue;
                        }
                        for (acc, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                            *acc += av * gv;
                        }
                    }
                }
                vec![Some(t_like(a.shape(), ga)), Some(t_like(b.shape(), gb))]
            }),
        )
    }

    pub fn transpose(self) -> Var<'g, T> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "transpose needs a matrix");
        let (m, n) = (a.shape()[0], a.shape()[1]);
        self.unary_op(
            t_like(&[n, m], transpose_raw(a.data(), m, n)),
            Box::new(move |g, _, _| vec![Some(t_like(&[m, n], transpose_raw(g.data(), n, m)))]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let a = self.value();
        let original = a.shape().to_vec();
        let out = (*a).clone().reshaped(shape).expect("reshape size");
        self.unary_op(
            out,
            Box::new(move |g, _, _| vec![Some(g.clone().reshaped(&original).expect("reshape"))]),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.elementwise(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'g, T> {
        self.elementwise(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.elementwise(gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.elementwise(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.elementwise(T::exp, |_, y| y)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        self.elementwise(|x| x * x, |x, _| x + x)
    }

    pub fn sum(self) -> Var<'g, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary_op(
            Tensor::scalar(a.sum()),
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Mean over rows, `[R, C] → [C]`.
    pub fn mean_rows(self) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let inv = T::one() / T::of(rows as f64);
        let mut out = vec![T::zero(); cols];
        for row in a.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = a.shape().to_vec();
        self.unary_op(
            t_like(&[cols], out),
            Box::new(move |g, _, _| {
                let data = (0..rows * cols).map(|i| g.data()[i % cols] * inv).collect();
                vec![Some(t_like(&shape, data))]
            }),
        )
    }

    /// Max over rows, `[R, C] → [C]`; the gradient goes to the first argmax.
    pub fn max_rows(self) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let mut arg = vec![0usize; cols];
        let mut out: Vec<T> = a.data()[..cols].to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = a.data()[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let shape = a.shape().to_vec();
        self.unary_op(
            t_like(&[cols], out),
            Box::new(move |g, _, _| {
                let mut data = vec![T::zero(); rows * cols];
                for c in 0..cols {
                    data[arg[c] * cols + c] = g.data()[c];
                }
                vec![Some(t_like(&shape, data))]
            }),
        )
    }

    pub fn softmax_rows(self) -> Var<'g, T> {
        let a = self.value();
        let (_, cols) = rows_cols(a.shape());
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        self.unary_op(
            out,
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for ((grow, yrow), xrow) in g
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(gx.data_mut().chunks_mut(cols))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        xrow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let eps = T::of(eps);
        let nf = T::of(cols as f64);
        let mut out = (*a).clone();
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        self.unary_op(
            out,
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for (r, ((grow, yrow), xrow)) in g
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(gx.data_mut().chunks_mut(cols))
                    .enumerate()
                {
                    let mg = grow.iter().copied().sum::<T>() / nf;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for c in 0..cols {
                        xrow[c] = inv_std[r] * (grow[c] - mg - yrow[c] * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `out[i] = self[idx[i]]` over rows.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        let in_shape = a.shape().to_vec();
        self.unary_op(
            t_like(&[idx.len(), cols], out),
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); rows * cols];
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[i * cols + c] += g.data()[o * cols + c];
                    }
                }
                vec![Some(t_like(&in_shape, gx))]
            }),
        )
    }

    /// Stacks two `[R_i, C]` tensors along rows.
    pub fn concat_rows(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let (ra, ca) = rows_cols(a.shape());
        let (rb, cb) = rows_cols(b.shape());
        assert_eq!(ca, cb, "concat_rows width mismatch");
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary_op(
            o,
            t_like(&[ra + rb, ca], data),
            Box::new(move |g, _, _| {
                let (ga, gb) = g.data().split_at(ra * ca);
                vec![Some(t_like(&sa, ga.to_vec())), Some(t_like(&sb, gb.to_vec()))]
            }),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        assert!(start + len <= rows, "slice_rows out of range");
        let data = a.data()[start * cols..(start + len) * cols].to_vec();
        let shape = a.shape().to_vec();
        self.unary_op(
            t_like(&[len, cols], data),
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); rows * cols];
                gx[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![Some(t_like(&shape, gx))]
            }),
        )
    }

    /// Channel concatenation of `[.., C1]` and `[.., C2]` with equal leading dims.
    pub fn concat_cols(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let (ra, ca) = rows_cols(a.shape());
        let (rb, cb) = rows_cols(b.shape());
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary_op(
            o,
            t_like(&shape, data),
            Box::new(move |g, _, _| {
                let mut ga = Vec::with_capacity(ra * ca);
                let mut gb = Vec::with_capacity(ra * cb);
                for row in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![Some(t_like(&sa, ga)), Some(t_like(&sb, gb))]
            }),
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for row in a.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let in_shape = a.shape().to_vec();
        let mut shape = in_shape.clone();
        *shape.last_mut().unwrap() = len;
        self.unary_op(
            t_like(&shape, data),
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); rows * cols];
                for (r, grow) in g.data().chunks(len).enumerate() {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(grow);
                }
                vec![Some(t_like(&in_shape, gx))]
            }),
        )
    }

    /// Dense 2-D convolution of an `H×W×Cin` map with a `kh×kw×Cin×Cout`
    /// kernel, zero padding.
    pub fn conv2d(self, w: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, k) = (self.value(), w.value());
        let (h, wd, cin) = hwc(x.shape());
        let ks = k.shape().to_vec();
        assert_eq!(ks.len(), 4, "conv kernel must be kh x kw x cin x cout");
        let (kh, kw, kc, cout) = (ks[0], ks[1], ks[2], ks[3]);
        assert_eq!(kc, cin, "conv input channels mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeometry { h, w: wd, cin, kh, kw, cout, stride, pad, ho, wo };
        let out = geo.forward(x.data(), k.data());
        self.binary_op(
            w,
            t_like(&[ho, wo, cout], out),
            Box::new(move |g, p, _| {
                let (gx, gw) = geo.backward(p[0].data(), p[1].data(), g.data());
                vec![Some(t_like(p[0].shape(), gx)), Some(t_like(p[1].shape(), gw))]
            }),
        )
    }

    /// Per-channel stride-1 convolution with a `k×k×C` kernel, `k/2` padding.
    pub fn depthwise_conv2d(self, w: Var<'g, T>) -> Var<'g, T> {
        let (x, k) = (self.value(), w.value());
        let (h, wd, c) = hwc(x.shape());
        let ks = k.shape().to_vec();
        assert!(ks.len() == 3 && ks[2] == c, "depthwise kernel must be k x k x C");
        let (kh, kw) = (ks[0], ks[1]);
        let (ph, pw) = (kh / 2, kw / 2);
        let taps = move |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = (oy + ky).checked_sub(ph)?;
            let ix = (ox + kx).checked_sub(pw)?;
            (iy < h && ix < wd).then_some(iy * wd + ix)
        };
        let mut out = vec![T::zero(); h * wd * c];
        for oy in 0..h {
            for ox in 0..wd {
                let o = (oy * wd + ox) * c;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some(i) = taps(oy, ox, ky, kx) else { continue };
                        let kb = (ky * kw + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data()[i * c + ch] * k.data()[kb + ch];
                        }
                    }
                }
            }
        }
        self.binary_op(
            w,
            t_like(&[h, wd, c], out),
            Box::new(move |g, p, _| {
                let (x, k) = (&p[0], &p[1]);
                let mut gx = vec![T::zero(); h * wd * c];
                let mut gk = vec![T::zero(); kh * kw * c];
                for oy in 0..h {
                    for ox in 0..wd {
                        let o = (oy * wd + ox) * c;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let Some(i) = taps(oy, ox, ky, kx) else { continue };
                                let kb = (ky * kw + kx) * c;
                                for ch in 0..c {
                                    let gv = g.data()[o + ch];
                                    gx[i * c + ch] += gv * k.data()[kb + ch];
                                    gk[kb + ch] += gv * x.data()[i * c + ch];
                                }
                            }
                        }
                    }
                }
                vec![Some(t_like(x.shape(), gx)), Some(t_like(k.shape(), gk))]
            }),
        )
    }

    /// Bilinear upsampling of an `H×W×C` map by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let (h, w, c) = hwc(x.shape());
        let (ho, wo) = (h * factor, w * factor);
        let ty = Rc::new(bilinear_taps(ho, h, factor));
        let tx = Rc::new(bilinear_taps(wo, w, factor));
        let mut out = vec![T::zero(); ho * wo * c];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let wts = [
                    ((T::one() - ly) * (T::one() - lx), y0, x0),
                    ((T::one() - ly) * lx, y0, x1),
                    (ly * (T::one() - lx), y1, x0),
                    (ly * lx, y1, x1),
                ];
                let o = (oy * wo + ox) * c;
                for (wt, iy, ix) in wts {
                    let i = (iy * w + ix) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * x.data()[i + ch];
                    }
                }
            }
        }
        self.unary_op(
            t_like(&[ho, wo, c], out),
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); h * w * c];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::of(ly);
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::of(lx);
                        let wts = [
                            ((T::one() - ly) * (T::one() - lx), y0, x0),
                            ((T::one() - ly) * lx, y0, x1),
                            (ly * (T::one() - lx), y1, x0),
                            (ly * lx, y1, x1),
                        ];
                        let o = (oy * wo + ox) * c;
                        for (wt, iy, ix) in wts {
                            let i = (iy * w + ix) * c;
                            for ch in 0..c {
                                gx[i + ch] += wt * g.data()[o + ch];
                            }
                        }
                    }
                }
                vec![Some(t_like(&[h, w, c], gx))]
            }),
        )
    }

    /// Differentiable selective scan; see [`crate::scan`] for the recurrence.
    /// `self` is the `[L, D]` input sequence.
    pub fn selective_scan(
        self,
        delta: Var<'g, T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
        c: Var<'g, T>,
        d: Var<'g, T>,
    ) -> Var<'g, T> {
        let params = SsmParams {
            delta: (*delta.value()).clone(),
            a: (*a.value()).clone(),
            b: (*b.value()).clone(),
            c: (*c.value()).clone(),
            d: (*d.value()).clone(),
        };
        let x = self.value();
        params.validate(&x).expect("selective scan inputs");
        let (y, states) = scan_chunked(&x, &params, SCAN_CHUNK, true);
        let states = Rc::new(states);
        Var::nary_op(
            &[self, delta, a, b, c, d],
            y,
            Box::new(move |g, p, _| {
                let params = SsmParams {
                    delta: (*p[1]).clone(),
                    a: (*p[2]).clone(),
                    b: (*p[3]).clone(),
                    c: (*p[4]).clone(),
                    d: (*p[5]).clone(),
                };
                let gr = scan_backward(&p[0], &params, &states, g.data());
                vec![
                    Some(t_like(p[0].shape(), gr.x)),
                    Some(t_like(p[1].shape(), gr.delta)),
                    Some(t_like(p[2].shape(), gr.a)),
                    Some(t_like(p[3].shape(), gr.b)),
                    Some(t_like(p[4].shape(), gr.c)),
                    Some(t_like(p[5].shape(), gr.d)),
                ]
            }),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and fixed targets.
    pub fn bce_with_logits_mean(self, target: &[T]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.len(), target.len(), "bce target length mismatch");
        let n = T::of(x.len() as f64);
        let loss: T = x
            .data()
            .iter()
            .zip(target)
            .map(|(&l, &y)| l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        let target: Rc<[T]> = target.into();
        self.unary_op(
            Tensor::scalar(loss),
            Box::new(move |g, p, _| {
                let gs = g.data()[0] / n;
                let data = p[0]
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&l, &y)| gs * (sigmoid(l) - y))
                    .collect();
                vec![Some(t_like(p[0].shape(), data))]
            }),
        )
    }

    /// Mean squared difference to a fixed target.
    pub fn mse_mean(self, target: &Tensor<T>) -> Var<'g, T> {
        let t = self.graph().constant(target.clone());
        self.sub(t).square().mean()
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn tap(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.pad)?;
        (i < len).then_some(i)
    }

    fn forward<T: Scalar>(&self, x: &[T], k: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.ho * self.wo * self.cout];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let orow = &mut out[(oy * self.wo + ox) * self.cout..][..self.cout];
                for ky in 0..self.kh {
                    let Some(iy) = self.tap(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.tap(ox, kx, self.w) else { continue };
                        let xin = &x[(iy * self.w + ix) * self.cin..][..self.cin];
                        let kb = (ky * self.kw + kx) * self.cin;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let krow = &k[(kb + ci) * self.cout..][..self.cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, x: &[T], k: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); k.len()];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let grow = &g[(oy * self.wo + ox) * self.cout..][..self.cout];
                for ky in 0..self.kh {
                    let Some(iy) = self.tap(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.tap(ox, kx, self.w) else { continue };
                        let xb = (iy * self.w + ix) * self.cin;
                        let kb = (ky * self.kw + kx) * self.cin;
                        for ci in 0..self.cin {
                            let kr = (kb + ci) * self.cout;
                            let xv = x[xb + ci];
                            let mut acc = T::zero();
                            for co in 0..self.cout {
                                acc += grow[co] * k[kr + co];
                                gk[kr + co] += grow[co] * xv;
                            }
                            gx[xb + ci] += acc;
                        }
                    }
                }
            }
        }
        (gx, gk)
    }
}
