//! Softmax, concatenation and index ops.

use crate::{Float, Tensor, Var};

impl<'t, T: Float> Var<'t, T> {
    /// Softmax over the last axis. With `lengths`, row group `b` (leading
    /// axis) only attends to the first `lengths[b]` positions; the rest get
    /// probability zero.
    pub fn softmax_last(&self, lengths: Option<&[usize]>) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let k = *shape.last().expect("softmax on scalar");
        let rows = x.numel() / k.max(1);
        let per_lead = rows / shape[0].max(1);
        let limit = |r: usize| -> usize {
            match lengths {
                Some(l) => l[r / per_lead].min(k),
                None => k,
            }
        };
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let len = limit(r);
            assert!(len > 0, "softmax row with no valid entries");
            let src = &x.data()[r * k..r * k + len];
            let dst = &mut out[r * k..r * k + len];
            let m = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let y = Tensor::new(&shape, out);
        let yv = y.clone();
        self.tape.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); yv.numel()];
            for r in 0..rows {
                let ys = &yv.data()[r * k..(r + 1) * k];
                let gs = &g.data()[r * k..(r + 1) * k];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..k {
                    d[r * k + j] = ys[j] * (gs[j] - dot);
                }
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let k = *shape.last().expect("log_softmax on scalar");
        let rows = x.numel() / k.max(1);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let src = &x.data()[r * k..(r + 1) * k];
            let m = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + src.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..k {
                out[r * k + j] = src[j] - lse;
            }
        }
        let y = Tensor::new(&shape, out);
        let yv = y.clone();
        self.tape.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); yv.numel()];
            for r in 0..rows {
                let gs = &g.data()[r * k..(r + 1) * k];
                let gsum: T = gs.iter().copied().sum();
                for j in 0..k {
                    d[r * k + j] = gs[j] - yv.data()[r * k + j].exp() * gsum;
                }
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// `out[r] = self[r, idx[r]]` for a 2-D input.
    pub fn pick_last(&self, idx: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[0], idx.len());
        let k = shape[1];
        let idx = idx.to_vec();
        let y = Tensor::new(
            &[idx.len()],
            idx.iter().enumerate().map(|(r, &i)| x.data()[r * k + i]).collect(),
        );
        self.tape.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); shape[0] * k];
            for (r, &i) in idx.iter().enumerate() {
                d[r * k + i] = g.data()[r];
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// Row lookup: `self: [V, E]`, result `[ids.len(), E]`.
    pub fn embedding(&self, ids: &[usize]) -> Var<'t, T> {
        let table = self.value();
        let shape = table.shape().to_vec();
        assert_eq!(shape.len(), 2);
        let e = shape[1];
        let ids = ids.to_vec();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in &ids {
            assert!(i < shape[0], "embedding index {i} out of range {}", shape[0]);
            out.extend_from_slice(&table.data()[i * e..(i + 1) * e]);
        }
        let y = Tensor::new(&[ids.len(), e], out);
        self.tape.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); shape[0] * e];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..e {
                    d[i * e + j] += g.data()[r * e + j];
                }
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        assert!(axis < base.len());
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(
                    d == axis || s[d] == base[d],
                    "concat shape mismatch {:?} vs {:?}",
                    s,
                    base
                );
            }
            widths.push(s[axis] * tail);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); outer * total];
        for o in 0..outer {
            let mut off = o * total;
            for (v, &w) in values.iter().zip(&widths) {
                out[off..off + w].copy_from_slice(&v.data()[o * w..(o + 1) * w]);
                off += w;
            }
        }
        let mut shape = base.clone();
        shape[axis] = total / tail.max(1);
        let y = Tensor::new(&shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(y, &ids, move |g, need| {
            let mut start = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                if need[i] {
                    let mut d = vec![T::zero(); outer * w];
                    for o in 0..outer {
                        d[o * w..(o + 1) * w].copy_from_slice(&g.data()[o * total + start..o * total + start + w]);
                    }
                    res.push(Some(Tensor::new(&shapes[i], d)));
                } else {
                    res.push(None);
                }
                start += w;
            }
            res
        })
    }
}

/// Gate `f: [B, C, ...]` by `mask: [B, 1, ...]` into `(m·f, (1−m)·f)`.
///
/// Whichever half is at least `f/2` in magnitude is rounded and the other
/// is taken as the exact difference, so `plus + minus == f` holds bit for
/// bit.
pub fn mask_split<'t, T: Float>(f: &Var<'t, T>, mask: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
    let fv = f.value();
    let mv = mask.value();
    let shape = fv.shape().to_vec();
    assert!(shape.len() >= 2, "mask_split needs a channel axis");
    let mut mshape = shape.clone();
    mshape[1] = 1;
    assert_eq!(mv.shape(), &mshape[..], "mask shape must be {mshape:?}");
    let (b, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let half = T::lit(0.5);
    let mut plus = vec![T::zero(); fv.numel()];
    let mut minus = vec![T::zero(); fv.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for k in 0..inner {
                let i = (bi * c + ci) * inner + k;
                let m = mv.data()[bi * inner + k];
                let x = fv.data()[i];
                if m >= half {
                    plus[i] = m * x;
                    minus[i] = x - plus[i];
                } else {
                    minus[i] = (T::one() - m) * x;
                    plus[i] = x - minus[i];
                }
            }
        }
    }
    let tape = f.tape;
    let ids = [f.id, mask.id];
    let backward = |sign: T, offset: T| {
        let (fv, mv, shape, mshape) = (fv.clone(), mv.clone(), shape.clone(), mshape.clone());
        move |g: &Tensor<T>, need: &[bool]| {
            // d/df = offset + sign·m, d/dm = sign·f
            let gf = need[0].then(|| {
                let mut d = vec![T::zero(); g.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for k in 0..inner {
                            let i = (bi * c + ci) * inner + k;
                            d[i] = g.data()[i] * (offset + sign * mv.data()[bi * inner + k]);
                        }
                    }
                }
                Tensor::new(&shape, d)
            });
            let gm = need[1].then(|| {
                let mut d = vec![T::zero(); b * inner];
                for bi in 0..b {
                    for ci in 0..c {
                        for k in 0..inner {
                            let i = (bi * c + ci) * inner + k;
                            d[bi * inner + k] += g.data()[i] * sign * fv.data()[i];
                        }
                    }
                }
                Tensor::new(&mshape, d)
            });
            vec![gf, gm]
        }
    };
    let p = tape.push(Tensor::new(&shape, plus), &ids, backward(T::one(), T::zero()));
    let n = tape.push(Tensor::new(&shape, minus), &ids, backward(-T::one(), T::one()));
    (p, n)
}
