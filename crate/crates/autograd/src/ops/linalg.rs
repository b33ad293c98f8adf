//! Matrix products.

use crate::tensor::gemm;
use crate::{Float, Tensor, Var};

fn mat_dims(shape: &[usize], trans: bool) -> (usize, usize) {
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

impl<'t, T: Float> Var<'t, T> {
    /// `op(self) · op(other)` for 2-D operands, `op` optionally transposing.
    pub fn matmul_t(&self, other: &Var<'t, T>, trans_a: bool, trans_b: bool) -> Var<'t, T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul needs 2-D operands, got {sa:?} {sb:?}"
        );
        let a3 = self.reshape(&[1, sa[0], sa[1]]);
        let b3 = other.reshape(&[1, sb[0], sb[1]]);
        let y = a3.bmm_t(&b3, trans_a, trans_b);
        let out = y.shape();
        y.reshape(&out[1..])
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_t(other, false, false)
    }

    /// Batched `op(self) · op(other)` over a leading batch axis. A batch
    /// size of 1 on either side broadcasts.
    pub fn bmm_t(&self, other: &Var<'t, T>, trans_a: bool, trans_b: bool) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3,
            "bmm needs 3-D operands, got {sa:?} {sb:?}"
        );
        let (m, k) = mat_dims(&sa, trans_a);
        let (k2, n) = mat_dims(&sb, trans_b);
        assert_eq!(k, k2, "bmm inner dims differ: {sa:?}{trans_a} x {sb:?}{trans_b}");
        let (ba, bb) = (sa[0], sb[0]);
        assert!(ba == bb || ba == 1 || bb == 1, "bmm batch mismatch {ba} vs {bb}");
        let batch = ba.max(bb);
        let (a_step, b_step) = (m * k, k * n);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ai = if ba == 1 { 0 } else { i };
            let bi = if bb == 1 { 0 } else { i };
            gemm(
                m,
                k,
                n,
                &a.data()[ai * a_step..],
                trans_a,
                &b.data()[bi * b_step..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        let y = Tensor::new(&[batch, m, n], out);
        self.tape.push(y, &[self.id, other.id], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut d = vec![T::zero(); a.numel()];
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    let gi = &gd[i * m * n..];
                    let bs = &b.data()[bi * b_step..];
                    let da = &mut d[ai * a_step..];
                    if !trans_a {
                        // dA[m,k] = g[m,n] · op(B)ᵀ
                        gemm(m, n, k, gi, false, bs, !trans_b, da, true);
                    } else {
                        // dA[k,m] = op(B)[k,n] · gᵀ
                        gemm(k, n, m, bs, trans_b, gi, true, da, true);
                    }
                }
                Tensor::new(a.shape(), d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![T::zero(); b.numel()];
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    let gi = &gd[i * m * n..];
                    let as_ = &a.data()[ai * a_step..];
                    let db = &mut d[bi * b_step..];
                    if !trans_b {
                        // dB[k,n] = op(A)ᵀ · g
                        gemm(k, m, n, as_, !trans_a, gi, false, db, true);
                    } else {
                        // dB[n,k] = gᵀ · op(A)
                        gemm(n, m, k, gi, true, as_, trans_a, db, true);
                    }
                }
                Tensor::new(b.shape(), d)
            });
            vec![ga, gb]
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2);
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let y = Tensor::new(&out_shape, transpose_blocks(x.data(), batch, rows, cols));
        self.tape.push(y, &[self.id], move |g, _| {
            vec![Some(Tensor::new(&shape, transpose_blocks(g.data(), batch, cols, rows)))]
        })
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Var<'t, T> {
        let y = self.matmul_t(w, false, true);
        match b {
            Some(b) => y.add(b),
            None => y,
        }
    }
}

fn transpose_blocks<T: Float>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = x[off + i * cols + j];
            }
        }
    }
    out
}
