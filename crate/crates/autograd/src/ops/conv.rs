//! 2-D convolution (im2col + GEMM) and nearest-neighbour upsampling, NCHW.

use crate::tensor::gemm;
use crate::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.width + self.pad)
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .min(self.out_w);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Float>(x: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let plane = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..];
                        let dst_row = &mut dst[b * plane + oy * g.out_w..];
                        let (lo, hi) = g.valid_cols(kx);
                        for ox in lo..hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let plane = g.out_h * g.out_w;
    let mut x = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * g.width;
                        let src_row = &src[b * plane + oy * g.out_w..];
                        let (lo, hi) = g.valid_cols(kx);
                        for ox in lo..hi {
                            x[dst_row + ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, B·P] -> [B, C, P]`
fn channel_major_to_nchw<T: Float>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[c * batch * plane + b * plane..][..plane];
            out[(b * channels + c) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// `[B, C, P] -> [C, B·P]`
fn nchw_to_channel_major<T: Float>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * plane..][..plane];
            out[c * batch * plane + b * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// Stride-1 "same" convolution on zero-padded planes. Output rows are
/// computed in a wide layout of row pitch `wp = W + 2·pad`, so every kernel
/// tap is a single contiguous axpy (forward, input gradient) or dot product
/// (weight gradient); the `2·pad` junk columns per row are dropped on exit.
#[derive(Clone, Copy, Debug)]
struct Same {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Same {
    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn padded(&self) -> usize {
        (self.h + 2 * self.pad) * self.wp()
    }

    /// Length of the wide output span: up to the last valid pixel.
    fn span(&self) -> usize {
        (self.h - 1) * self.wp() + self.w
    }

    fn pad_planes<T: Float>(&self, x: &[T], channels: usize) -> Vec<T> {
        let (wp, p) = (self.wp(), self.pad);
        let mut out = vec![T::zero(); self.batch * channels * self.padded()];
        for (plane, src) in x.chunks(self.h * self.w).enumerate() {
            let dst = &mut out[plane * self.padded()..];
            for y in 0..self.h {
                dst[(y + p) * wp + p..][..self.w].copy_from_slice(&src[y * self.w..][..self.w]);
            }
        }
        out
    }

    /// Wide planes (pitch `wp`, length `span`) → dense `[.., H, W]`.
    fn crop<T: Float>(&self, wide: &[T], planes: usize, pitch_offset: usize) -> Vec<T> {
        let wp = self.wp();
        let stride = wide.len() / planes;
        let mut out = vec![T::zero(); planes * self.h * self.w];
        for pl in 0..planes {
            for y in 0..self.h {
                let src = &wide[pl * stride + pitch_offset + y * wp..][..self.w];
                out[(pl * self.h + y) * self.w..][..self.w].copy_from_slice(src);
            }
        }
        out
    }

    /// Dense `[.., H, W]` → wide planes with zero junk columns.
    fn widen<T: Float>(&self, g: &[T], planes: usize) -> Vec<T> {
        let (wp, span) = (self.wp(), self.span());
        let mut out = vec![T::zero(); planes * span];
        for pl in 0..planes {
            for y in 0..self.h {
                out[pl * span + y * wp..][..self.w].copy_from_slice(&g[(pl * self.h + y) * self.w..][..self.w]);
            }
        }
        out
    }

    fn forward<T: Float>(&self, xpad: &[T], w: &[T]) -> Vec<T> {
        let (wp, span, k, padded) = (self.wp(), self.span(), self.k, self.padded());
        let mut wide = vec![T::zero(); self.batch * self.cout * span];
        for b in 0..self.batch {
            for c in 0..self.cin {
                let src = &xpad[(b * self.cin + c) * padded..][..padded];
                for o in 0..self.cout {
                    let dst = &mut wide[(b * self.cout + o) * span..][..span];
                    let taps = &w[(o * self.cin + c) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            axpy(dst, taps[ky * k + kx], &src[ky * wp + kx..][..span]);
                        }
                    }
                }
            }
        }
        wide
    }

    /// Gradient w.r.t. the padded input, from wide output gradients.
    fn backward_input<T: Float>(&self, gwide: &[T], w: &[T]) -> Vec<T> {
        let (wp, span, k, padded) = (self.wp(), self.span(), self.k, self.padded());
        let mut gpad = vec![T::zero(); self.batch * self.cin * padded];
        for b in 0..self.batch {
            for c in 0..self.cin {
                let dst = &mut gpad[(b * self.cin + c) * padded..][..padded];
                for o in 0..self.cout {
                    let g = &gwide[(b * self.cout + o) * span..][..span];
                    let taps = &w[(o * self.cin + c) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            axpy(&mut dst[ky * wp + kx..][..span], taps[ky * k + kx], g);
                        }
                    }
                }
            }
        }
        gpad
    }

    fn backward_weight<T: Float>(&self, gwide: &[T], xpad: &[T]) -> Vec<T> {
        let (wp, span, k, padded) = (self.wp(), self.span(), self.k, self.padded());
        let mut gw = vec![T::zero(); self.cout * self.cin * k * k];
        for b in 0..self.batch {
            for o in 0..self.cout {
                let g = &gwide[(b * self.cout + o) * span..][..span];
                for c in 0..self.cin {
                    let src = &xpad[(b * self.cin + c) * padded..][..padded];
                    let taps = &mut gw[(o * self.cin + c) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            taps[ky * k + kx] += dot(g, &src[ky * wp + kx..][..span]);
                        }
                    }
                }
            }
        }
        gw
    }
}

#[inline]
fn axpy<T: Float>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Eight-lane dot product; the fixed lane split keeps results deterministic
/// while letting the compiler vectorize.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    acc.iter().copied().sum::<T>() + tail
}

impl<'t, T: Float> Var<'t, T> {
    /// Cross-correlation of `self: [B, C, H, W]` with `w: [O, C, kh, kw]`,
    /// plus an optional per-channel `bias: [O]`.
    pub fn conv2d(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let (xs, ws) = (x.shape(), wv.shape());
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d shapes {xs:?} {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert!(stride >= 1);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(
            xs[2] + 2 * pad >= kh && xs[3] + 2 * pad >= kw,
            "kernel larger than padded input"
        );
        let geo = Geometry {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh,
            kw,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - kh) / stride + 1,
            out_w: (xs[3] + 2 * pad - kw) / stride + 1,
        };
        let out_c = ws[0];
        if stride == 1 && kh == kw && 2 * pad + 1 == kh {
            return self.conv2d_same(
                w,
                bias,
                Same {
                    batch: xs[0],
                    cin: xs[1],
                    cout: out_c,
                    h: xs[2],
                    w: xs[3],
                    k: kh,
                    pad,
                },
            );
        }
        let (k, n) = (geo.rows(), geo.cols());
        let plane = geo.out_h * geo.out_w;
        let cols = im2col(x.data(), &geo);
        let mut cm = vec![T::zero(); out_c * n];
        gemm(out_c, k, n, wv.data(), false, &cols, false, &mut cm, false);
        let mut out = channel_major_to_nchw(&cm, geo.batch, out_c, plane);
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[out_c], "conv2d bias shape");
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bc = bv.data()[i % out_c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
            parents.push(b.id);
        }
        let y = Tensor::new(&[geo.batch, out_c, geo.out_h, geo.out_w], out);
        let x_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.tape.push(y, &parents, move |g, need| {
            let gcm = nchw_to_channel_major(g.data(), geo.batch, out_c, plane);
            let gx = need[0].then(|| {
                let mut dcols = vec![T::zero(); k * n];
                gemm(k, out_c, n, wv.data(), true, &gcm, false, &mut dcols, false);
                Tensor::new(&x_shape, col2im(&dcols, &geo))
            });
            let gw = need[1].then(|| {
                let mut dw = vec![T::zero(); out_c * k];
                gemm(out_c, n, k, &gcm, false, &cols, true, &mut dw, false);
                Tensor::new(&w_shape, dw)
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let db = gcm.chunks(n).map(|row| row.iter().copied().sum()).collect();
                    Tensor::new(&[out_c], db)
                }));
            }
            res
        })
    }

    fn conv2d_same(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>, geo: Same) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let xpad = geo.pad_planes(x.data(), geo.cin);
        let wide = geo.forward(&xpad, wv.data());
        let mut out = geo.crop(&wide, geo.batch * geo.cout, 0);
        let plane = geo.h * geo.w;
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[geo.cout], "conv2d bias shape");
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bc = bv.data()[i % geo.cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
            parents.push(b.id);
        }
        let y = Tensor::new(&[geo.batch, geo.cout, geo.h, geo.w], out);
        let x_shape = x.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        self.tape.push(y, &parents, move |g, need| {
            let gwide = geo.widen(g.data(), geo.batch * geo.cout);
            let gx = need[0].then(|| {
                let gpad = geo.backward_input(&gwide, wv.data());
                let off = geo.pad * geo.wp() + geo.pad;
                Tensor::new(&x_shape, geo.crop(&gpad, geo.batch * geo.cin, off))
            });
            let gw = need[1].then(|| Tensor::new(&w_shape, geo.backward_weight(&gwide, &xpad)));
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let mut db = vec![T::zero(); geo.cout];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % geo.cout] += chunk.iter().copied().sum::<T>();
                    }
                    Tensor::new(&[geo.cout], db)
                }));
            }
            res
        })
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2x needs NCHW");
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..];
            let dst = &mut out[p * 4 * h * w..];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let y = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out);
        self.tape.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g.data()[p * 4 * h * w..];
                let dst = &mut d[p * h * w..];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&s, d))]
        })
    }
}
