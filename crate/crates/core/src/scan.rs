//! Diagonal selective state-space recurrence.
//!
//! For every channel `d` and state slot `n`:
//!
//! ```text
//! h_0 = 0
//! h_t = exp(Δ_t[d]·A[d,n])·h_{t-1} + Δ_t[d]·B_t[n]·x_t[d]
//! y_t[d] = Σ_n C_t[n]·h_t[d,n] + D[d]·x_t[d]
//! ```
//!
//! [`selective_scan_sequential`] evaluates it literally. [`selective_scan_1d`]
//! uses a two-level chunked prefix evaluation of the same affine recurrence
//! and must agree with it to rounding.

use crate::error::{validation, RcdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Chunk length used by the blocked evaluation.
pub const SCAN_CHUNK: usize = 16;

/// Per-position discretization inputs of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `[L, D]`, strictly positive.
    pub delta: Tensor<T>,
    /// `[D, N]`, nonpositive for a stable recurrence.
    pub a: Tensor<T>,
    /// `[L, N]`.
    pub b: Tensor<T>,
    /// `[L, N]`.
    pub c: Tensor<T>,
    /// `[D]`.
    pub d: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn seq_len(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn validate(&self, x: &Tensor<T>) -> Result<()> {
        let (l, dch, n) = (self.seq_len(), self.channels(), self.state_dim());
        let want: [(&str, &Tensor<T>, Vec<usize>); 6] = [
            ("x", x, vec![l, dch]),
            ("delta", &self.delta, vec![l, dch]),
            ("a", &self.a, vec![dch, n]),
            ("b", &self.b, vec![l, n]),
            ("c", &self.c, vec![l, n]),
            ("d", &self.d, vec![dch]),
        ];
        if l == 0 {
            return Err(validation("selective scan needs L >= 1"));
        }
        for (name, t, shape) in &want {
            if t.shape() != shape.as_slice() {
                return Err(validation(format!(
                    "scan input `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(RcdError::Numeric(format!("scan input `{name}` is not finite")));
            }
        }
        if self.delta.data().iter().any(|&v| v <= T::zero()) {
            return Err(validation("scan step sizes must be positive"));
        }
        Ok(())
    }
}

/// Literal sequential recurrence.
pub fn selective_scan_sequential<T: Scalar>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    p.validate(x)?;
    let (l, dch, n) = (p.seq_len(), p.channels(), p.state_dim());
    let (xs, dt, a, b, c, dsk) = (
        x.data(),
        p.delta.data(),
        p.a.data(),
        p.b.data(),
        p.c.data(),
        p.d.data(),
    );
    let mut y = vec![T::zero(); l * dch];
    for ch in 0..dch {
        let mut h = vec![T::zero(); n];
        for t in 0..l {
            let step = dt[t * dch + ch];
            let xv = xs[t * dch + ch];
            let mut acc = T::zero();
            for (s, hs) in h.iter_mut().enumerate() {
                *hs = (step * a[ch * n + s]).exp() * *hs + step * b[t * n + s] * xv;
                acc += c[t * n + s] * *hs;
            }
            y[t * dch + ch] = acc + dsk[ch] * xv;
        }
    }
    Tensor::new(&[l, dch], y)
}

/// Blocked evaluation; agrees with [`selective_scan_sequential`].
pub fn selective_scan_1d<T: Scalar>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    p.validate(x)?;
    let (y, _) = scan_chunked(x, p, SCAN_CHUNK, false);
    if !y.all_finite() {
        return Err(RcdError::Numeric("selective scan produced non-finite output".into()));
    }
    Ok(y)
}

/// Returns the output and, when `keep_states`, every hidden state laid out as
/// `[L, D, N]`.
pub(crate) fn scan_chunked<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    chunk: usize,
    keep_states: bool,
) -> (Tensor<T>, Vec<T>) {
    let (l, dch, n) = (p.seq_len(), p.channels(), p.state_dim());
    let chunk = chunk.max(1);
    let (xs, dt, a, b, c, dsk) = (
        x.data(),
        p.delta.data(),
        p.a.data(),
        p.b.data(),
        p.c.data(),
        p.d.data(),
    );
    let mut y = vec![T::zero(); l * dch];
    let mut states = if keep_states {
        vec![T::zero(); l * dch * n]
    } else {
        Vec::new()
    };
    // Per chunk: cumulative decay products and zero-start local states.
    let mut decay = vec![T::zero(); chunk * n];
    let mut local = vec![T::zero(); chunk * n];
    for ch in 0..dch {
        let mut carry = vec![T::zero(); n];
        for start in (0..l).step_by(chunk) {
            let len = chunk.min(l - start);
            for k in 0..len {
                let t = start + k;
                let step = dt[t * dch + ch];
                let xv = xs[t * dch + ch];
                for s in 0..n {
                    let ab = (step * a[ch * n + s]).exp();
                    let u = step * b[t * n + s] * xv;
                    if k == 0 {
                        decay[s] = ab;
                        local[s] = u;
                    } else {
                        decay[k * n + s] = decay[(k - 1) * n + s] * ab;
                        local[k * n + s] = ab * local[(k - 1) * n + s] + u;
                    }
                }
            }
            for k in 0..len {
                let t = start + k;
                let mut acc = T::zero();
                for s in 0..n {
                    let h = local[k * n + s] + decay[k * n + s] * carry[s];
                    acc += c[t * n + s] * h;
                    if keep_states {
                        states[(t * dch + ch) * n + s] = h;
                    }
                }
                y[t * dch + ch] = acc + dsk[ch] * xs[t * dch + ch];
            }
            for s in 0..n {
                carry[s] = local[(len - 1) * n + s] + decay[(len - 1) * n + s] * carry[s];
            }
        }
    }
    (Tensor::new(&[l, dch], y).expect("scan output shape"), states)
}

/// Gradients of a scalar loss with respect to every scan input.
pub(crate) struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-time recurrence for the adjoint of the hidden state.
pub(crate) fn scan_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let (l, dch, n) = (p.seq_len(), p.channels(), p.state_dim());
    let (xs, dt, a, b, c, dsk) = (
        x.data(),
        p.delta.data(),
        p.a.data(),
        p.b.data(),
        p.c.data(),
        p.d.data(),
    );
    let mut g = ScanGrads {
        x: vec![T::zero(); l * dch],
        delta: vec![T::zero(); l * dch],
        a: vec![T::zero(); dch * n],
        b: vec![T::zero(); l * n],
        c: vec![T::zero(); l * n],
        d: vec![T::zero(); dch],
    };
    let mut dh = vec![T::zero(); n];
    for ch in 0..dch {
        dh.iter_mut().for_each(|v| *v = T::zero());
        // `next_decay[s]` holds exp(Δ_{t+1} A) from the previous iteration.
        let mut next_decay = vec![T::zero(); n];
        for t in (0..l).rev() {
            let gyt = gy[t * dch + ch];
            let step = dt[t * dch + ch];
            let xv = xs[t * dch + ch];
            g.d[ch] += gyt * xv;
            let mut gx = gyt * dsk[ch];
            let mut gstep = T::zero();
            for s in 0..n {
                let h = states[(t * dch + ch) * n + s];
                g.c[t * n + s] += gyt * h;
                dh[s] = gyt * c[t * n + s] + next_decay[s] * dh[s];
                let av = a[ch * n + s];
                let ab = (step * av).exp();
                let h_prev = if t > 0 {
                    states[((t - 1) * dch + ch) * n + s]
                } else {
                    T::zero()
                };
                let g_ab = dh[s] * h_prev;
                gstep += g_ab * ab * av + dh[s] * b[t * n + s] * xv;
                g.a[ch * n + s] += g_ab * ab * step;
                g.b[t * n + s] += dh[s] * step * xv;
                gx += dh[s] * step * b[t * n + s];
                next_decay[s] = ab;
            }
            g.x[t * dch + ch] += gx;
            g.delta[t * dch + ch] += gstep;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, l: usize, d: usize, n: usize) -> (Tensor<f64>, SsmParams<f64>) {
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
        };
        let x = t(&[l, d], -1.0, 1.0);
        let p = SsmParams {
            delta: t(&[l, d], 0.01, 0.5),
            a: t(&[d, n], -3.0, -0.05),
            b: t(&[l, n], -1.0, 1.0),
            c: t(&[l, n], -1.0, 1.0),
            d: t(&[d], -1.0, 1.0),
        };
        (x, p)
    }

    #[test]
    fn single_step_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, p) = random_params(&mut rng, 1, 3, 4);
        let y = selective_scan_1d(&x, &p).unwrap();
        for ch in 0..3 {
            let step = p.delta.data()[ch];
            let xv = x.data()[ch];
            let want: f64 = (0..4)
                .map(|s| p.c.data()[s] * step * p.b.data()[s] * xv)
                .sum::<f64>()
                + p.d.data()[ch] * xv;
            assert!((y.data()[ch] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_a_is_weighted_cumsum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, mut p) = random_params(&mut rng, 40, 2, 3);
        p.a = Tensor::zeros(&[2, 3]);
        let y = selective_scan_1d(&x, &p).unwrap();
        for ch in 0..2 {
            let mut h = [0.0; 3];
            for t in 0..40 {
                let mut want = p.d.data()[ch] * x.data()[t * 2 + ch];
                for s in 0..3 {
                    h[s] += p.delta.data()[t * 2 + ch] * p.b.data()[t * 3 + s] * x.data()[t * 2 + ch];
                    want += p.c.data()[t * 3 + s] * h[s];
                }
                assert!((y.data()[t * 2 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_matches_sequential_for_every_chunk_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, p) = random_params(&mut rng, 64, 4, 8);
        let reference = selective_scan_sequential(&x, &p).unwrap();
        for chunk in [1, 3, 16, 64, 100] {
            let (y, _) = scan_chunked(&x, &p, chunk, false);
            assert!(y.max_abs_diff(&reference) < 1e-12, "chunk {chunk}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut x, mut p) = random_params(&mut rng, 4, 2, 2);
        p.delta.data_mut()[0] = 0.0;
        assert!(selective_scan_1d(&x, &p).is_err());
        p.delta.data_mut()[0] = 0.1;
        x.data_mut()[1] = f64::NAN;
        assert!(matches!(selective_scan_1d(&x, &p), Err(RcdError::Numeric(_))));
    }
}
