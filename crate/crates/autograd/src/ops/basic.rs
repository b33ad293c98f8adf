//! Elementwise arithmetic, broadcasting and reductions.

use std::rc::Rc;

use crate::tensor::strides;
use crate::{Float, Tensor, Var};

/// Numpy-style broadcast of two shapes (ranks aligned from the right).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - shape.len()];
    s.extend_from_slice(shape);
    s
}

/// Strides of `small` laid over `big`'s index space; broadcast axes get 0.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let small = left_pad(small, big.len());
    let st = strides(&small);
    small
        .iter()
        .zip(big)
        .zip(st)
        .map(|((&s, &b), st)| if s == 1 && b != 1 { 0 } else { st })
        .collect()
}

/// Walk `big` in row-major order as contiguous runs: `f(out, inp, len, step)`
/// covers `big[out..out + len]` and the broadcast operand at
/// `inp, inp + step, ...` where `step` is 0 (broadcast) or 1.
fn for_each_run(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let n: usize = big.iter().product();
    if n == 0 {
        return;
    }
    let bs = broadcast_strides(small, big);
    // Merge adjacent axes whose strides chain, dropping unit axes.
    let mut dims: Vec<(usize, usize)> = Vec::new();
    for (&len, &st) in big.iter().zip(&bs) {
        if len == 1 {
            continue;
        }
        match dims.last_mut() {
            Some((l, s)) if *s == st * len => {
                *l *= len;
                *s = st;
            }
            _ => dims.push((len, st)),
        }
    }
    let Some(&(inner, inner_stride)) = dims.last() else {
        f(0, 0, 1, 0);
        return;
    };
    if inner_stride > 1 {
        // Inner axis is strided in the operand: fall back to unit runs.
        dims.push((1, 0));
    }
    let (inner, step) = if inner_stride > 1 {
        (1, 0)
    } else {
        (inner, inner_stride)
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let mut lin = 0;
    loop {
        let base: usize = idx.iter().zip(outer).map(|(i, (_, s))| i * s).sum();
        f(lin, base, inner, step);
        lin += inner;
        if lin == n {
            return;
        }
        let mut d = outer.len();
        loop {
            d -= 1;
            idx[d] += 1;
            if idx[d] < outer[d].0 {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_tensor<T: Float>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = x.data();
    for_each_run(x.shape(), shape, |o, i, len, step| {
        let dst = &mut out[o..o + len];
        if step == 0 {
            dst.fill(src[i]);
        } else {
            dst.copy_from_slice(&src[i..i + len]);
        }
    });
    Tensor::new(shape, out)
}

/// Sum `x` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_tensor<T: Float>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = x.data();
    for_each_run(shape, x.shape(), |o, i, len, step| {
        let run = &src[o..o + len];
        if step == 0 {
            out[i] += run.iter().copied().sum::<T>();
        } else {
            for (d, &v) in out[i..i + len].iter_mut().zip(run) {
                *d += v;
            }
        }
    });
    Tensor::new(shape, out)
}

impl<'t, T: Float> Var<'t, T> {
    pub(crate) fn unary<F, D>(&self, f: F, df: D) -> Var<'t, T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.push_rc(y, &[self.id], move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::lit(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// Natural log of `x` clamped to `[lo, hi]`; zero gradient outside.
    pub fn ln_clamped(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(
            move |x| x.max(lo).min(hi).ln(),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one() / x
                }
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqr(&self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn recip(&self) -> Var<'t, T> {
        self.unary(|x| T::one() / x, |_, y| -y * y)
    }

    /// Shared-shape binary op; `da`/`db` give the local partials.
    fn zip_same<F, DA, DB>(&self, other: &Var<'t, T>, f: F, da: DA, db: DB) -> Var<'t, T>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + 'static,
        DB: Fn(T, T) -> T + 'static,
    {
        let a = self.value();
        let b = other.value();
        let y = a.zip_map(&b, f);
        self.tape.push(y, &[self.id, other.id], move |g, need| {
            let ga = need[0].then(|| {
                let d = (0..g.numel())
                    .map(|i| g.data()[i] * da(a.data()[i], b.data()[i]))
                    .collect();
                Tensor::new(g.shape(), d)
            });
            let gb = need[1].then(|| {
                let d = (0..g.numel())
                    .map(|i| g.data()[i] * db(a.data()[i], b.data()[i]))
                    .collect();
                Tensor::new(g.shape(), d)
            });
            vec![ga, gb]
        })
    }

    fn broadcast_pair(&self, other: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return (*self, *other);
        }
        let shape = broadcast_shape(&sa, &sb).unwrap_or_else(|| panic!("shapes {sa:?} and {sb:?} do not broadcast"));
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        a.zip_same(&b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        a.zip_same(&b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        a.zip_same(&b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        a.zip_same(&b, |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    /// Broadcast to a larger shape (numpy rules).
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'t, T> {
        let src_shape = self.shape();
        if src_shape == shape {
            return *self;
        }
        assert_eq!(
            broadcast_shape(&src_shape, shape).as_deref(),
            Some(shape),
            "cannot broadcast {src_shape:?} to {shape:?}"
        );
        let y = broadcast_tensor(&self.value(), shape);
        self.tape.push(y, &[self.id], move |g, _| {
            let padded = left_pad(&src_shape, g.rank());
            let s = sum_to_tensor(g, &padded).reshape(&src_shape);
            vec![Some(s)]
        })
    }

    /// Sum down to `shape` (same rank, dims equal or 1).
    pub fn sum_to(&self, shape: &[usize]) -> Var<'t, T> {
        let src_shape = self.shape();
        if src_shape == shape {
            return *self;
        }
        let y = sum_to_tensor(&self.value(), shape);
        self.tape
            .push(y, &[self.id], move |g, _| vec![Some(broadcast_tensor(g, &src_shape))])
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape
            .push(y, &[self.id], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Var<'t, T> {
        let mut shape = self.shape();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes_keepdim(&self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keepdim(axes).scale(1.0 / count as f64)
    }

    /// Sum over `axes`, dropping them.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<'t, T> {
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        self.sum_axes_keepdim(axes).reshape(&kept)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let src_shape = self.shape();
        if src_shape == shape {
            return *self;
        }
        let y = (*self.value()).clone().reshape(shape);
        self.tape
            .push(y, &[self.id], move |g, _| vec![Some(g.clone().reshape(&src_shape))])
    }

    /// Euclidean norm of all elements, with zero subgradient at the origin.
    pub fn l2_norm(&self) -> Var<'t, T> {
        let x = self.value();
        let n = x.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.tape.push(Tensor::scalar(n), &[self.id], move |g, _| {
            let scale = if n > T::zero() { g.item() / n } else { T::zero() };
            vec![Some(x.map(|v| v * scale))]
        })
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
