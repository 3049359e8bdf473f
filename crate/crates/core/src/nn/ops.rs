//! Forward and backward kernels behind the graph nodes.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [B, C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, H*W]` columns for a
/// stride-1 same-padded convolution.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    let d = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    d[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    d[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    d[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut x[base + s0..base + s0 + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (bn, ci, h, wd) = dims4(x.shape());
    let (co, wci, kh, kw) = dims4(w.shape());
    assert_eq!(ci, wci, "conv2d input channels");
    let hw = h * wd;
    let ck = ci * kh * kw;
    let mut out = Tensor::zeros(&[bn, co, h, wd]);
    let mut cols = vec![T::zero(); ck * hw];
    for n in 0..bn {
        im2col(x.item(n), ci, h, wd, kh, kw, &mut cols);
        let dst = out.item_mut(n);
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(co, ck, hw, T::one(), w.data(), false, &cols, false, beta, dst);
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (bn, ci, h, wd) = dims4(x.shape());
    let (co, _, kh, kw) = dims4(w.shape());
    let hw = h * wd;
    let ck = ci * kh * kw;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); ck * hw];
    let mut dcols = vec![T::zero(); ck * hw];
    for n in 0..bn {
        let gn = g.item(n);
        for (o, d) in db.data_mut().iter_mut().enumerate() {
            *d += gn[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(x.item(n), ci, h, wd, kh, kw, &mut cols);
        T::gemm(co, hw, ck, T::one(), gn, false, &cols, true, T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            T::gemm(ck, co, hw, T::one(), w.data(), true, gn, false, T::zero(), &mut dcols);
            col2im_add(&dcols, ci, h, wd, kh, kw, dx.item_mut(n));
        }
    }
    (dx, dw, db)
}

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let bn = x.batch();
    let i = x.per_item();
    let (o, wi) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, wi, "linear input width");
    let mut out = Tensor::zeros(&[bn, o]);
    if let Some(b) = b {
        for r in 0..bn {
            out.item_mut(r).copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(bn, i, o, T::one(), x.data(), false, w.data(), true, beta, out.data_mut());
    out
}

#[allow(clippy::type_complexity)]
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let bn = x.batch();
    let i = x.per_item();
    let o = w.shape()[0];
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(o, bn, i, T::one(), g.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[o]);
    for r in 0..bn {
        for (d, &v) in db.data_mut().iter_mut().zip(g.item(r)) {
            *d += v;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(bn, o, i, T::one(), g.data(), false, w.data(), false, T::zero(), dx.data_mut());
        dx
    });
    (dx, dw, db)
}

fn spatial_of(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

pub fn mul_channel<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    let (bn, c) = (x.shape()[0], x.shape()[1]);
    assert_eq!(gate.shape(), &[bn, c], "gate must be [B, C]");
    let s = spatial_of(x.shape());
    let mut out = x.clone();
    for (k, chunk) in out.data_mut().chunks_mut(s).enumerate() {
        let gv = gate.data()[k];
        chunk.iter_mut().for_each(|v| *v *= gv);
    }
    out
}

pub fn mul_channel_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = spatial_of(x.shape());
    let mut dx = g.clone();
    let mut dgate = Tensor::zeros(gate.shape());
    for (k, (dchunk, xchunk)) in dx.data_mut().chunks_mut(s).zip(x.data().chunks(s)).enumerate() {
        let gv = gate.data()[k];
        let mut acc = T::zero();
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            acc += *d * xv;
            *d *= gv;
        }
        dgate.data_mut()[k] = acc;
    }
    (dx, dgate)
}

pub fn add_channel<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (bn, c) = (x.shape()[0], x.shape()[1]);
    assert_eq!(bias.shape(), &[bn, c], "channel bias must be [B, C]");
    let s = spatial_of(x.shape());
    let mut out = x.clone();
    for (k, chunk) in out.data_mut().chunks_mut(s).enumerate() {
        let bv = bias.data()[k];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    out
}

pub fn channel_sums<T: Scalar>(g: &Tensor<T>, bias_shape: &[usize]) -> Tensor<T> {
    let s = spatial_of(g.shape());
    let data = g.data().chunks(s).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_vec(bias_shape, data).expect("one sum per (batch, channel)")
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (bn, ca, h, w) = dims4(a.shape());
    let (bb, cb, hb, wb) = dims4(b.shape());
    assert_eq!((bn, h, w), (bb, hb, wb), "concat spatial/batch mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..bn {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(&[bn, ca + cb, h, w], data).expect("concat size")
}

pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (bn, c, h, w) = dims4(g.shape());
    let cut = ca * h * w;
    let mut da = Vec::with_capacity(bn * cut);
    let mut db = Vec::with_capacity(g.len() - bn * cut);
    for n in 0..bn {
        let item = g.item(n);
        da.extend_from_slice(&item[..cut]);
        db.extend_from_slice(&item[cut..]);
    }
    (
        Tensor::from_vec(&[bn, ca, h, w], da).expect("split size"),
        Tensor::from_vec(&[bn, c - ca, h, w], db).expect("split size"),
    )
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (bn, c, h, w) = dims4(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bn, c, oh, ow]);
    let q = T::lit(0.25);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = q * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = dims4(in_shape);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape);
    let q = T::lit(0.25);
    for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                let v = q * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    dx
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (bn, c, h, w) = dims4(x.shape());
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[bn, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = dims4(in_shape);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// Sum of squares of the first `2 * active` reals of a row.
fn prefix_power<T: Scalar>(row: &[T], active: usize) -> T {
    row[..2 * active].iter().map(|&v| v * v).sum()
}

pub fn power_normalize_forward<T: Scalar>(x: &Tensor<T>, active: usize) -> Tensor<T> {
    let width = x.per_item();
    assert!(2 * active <= width, "active prefix exceeds latent width");
    let k = T::from_usize(active).expect("usize fits");
    let mut out = Tensor::zeros(x.shape());
    for b in 0..x.batch() {
        let row = x.item(b);
        let s = prefix_power(row, active);
        // an all-zero code stays zero rather than producing NaNs
        let c = if s > T::zero() { (k / s).sqrt() } else { T::zero() };
        for (d, &v) in out.item_mut(b)[..2 * active].iter_mut().zip(row) {
            *d = c * v;
        }
    }
    out
}

pub fn power_normalize_backward<T: Scalar>(x: &Tensor<T>, active: usize, g: &Tensor<T>) -> Tensor<T> {
    let k = T::from_usize(active).expect("usize fits");
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..x.batch() {
        let row = &x.item(b)[..2 * active];
        let grow = &g.item(b)[..2 * active];
        let s = prefix_power(x.item(b), active);
        if s <= T::zero() {
            continue;
        }
        let c = (k / s).sqrt();
        let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for ((d, &xv), &gv) in dx.item_mut(b).iter_mut().zip(row).zip(grow) {
            *d = c * gv - c / s * xv * dot;
        }
    }
    dx
}
