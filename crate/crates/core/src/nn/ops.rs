//! Forward and backward kernels for the closed layer set.
//!
//! Kernels are free functions over [`Tensor5`]; the graph executor in
//! `graph.rs` owns caching. All loops run in a fixed order so results are
//! bit-reproducible.

use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

/// Taps per 3x3x3 kernel.
pub const TAPS: usize = 27;

/// A channel copied into a buffer with a one-voxel zero border on every side.
///
/// In padded layout a kernel tap is a constant flat offset, so every tap of a
/// 3x3x3 convolution becomes one long contiguous run: border voxels supply
/// the zero padding and outputs landing on the border are dropped.
struct Padded {
    dims: [usize; 3],
    pd: [usize; 3],
}

impl Padded {
    fn new([d, h, w]: [usize; 3]) -> Self {
        Padded {
            dims: [d, h, w],
            pd: [d + 2, h + 2, w + 2],
        }
    }

    fn len(&self) -> usize {
        self.pd.iter().product()
    }

    #[inline]
    fn at(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.pd[1] + y) * self.pd[2] + x
    }

    /// Flat range covering every interior voxel.
    fn interior(&self) -> std::ops::Range<usize> {
        let [d, h, w] = self.dims;
        self.at(1, 1, 1)..self.at(d, h, w) + 1
    }

    fn tap_offset(&self, tap: usize) -> isize {
        let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
        let plane = (self.pd[1] * self.pd[2]) as isize;
        (dz as isize - 1) * plane + (dy as isize - 1) * self.pd[2] as isize + dx as isize - 1
    }

    fn pad_into<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * w;
                let t = self.at(z + 1, y + 1, 1);
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }

    fn unpad_into<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let s = self.at(z + 1, y + 1, 1);
                let t = (z * h + y) * w;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }

    /// Every channel of batch item `b`, padded, back to back.
    fn pad_all<T: Real>(&self, x: &Tensor5<T>, b: usize) -> Vec<T> {
        let plen = self.len();
        let mut out = vec![T::zero(); plen * x.channels()];
        for c in 0..x.channels() {
            self.pad_into(x.channel(b, c), &mut out[c * plen..(c + 1) * plen]);
        }
        out
    }
}

#[inline]
fn shifted(range: &std::ops::Range<usize>, offset: isize) -> std::ops::Range<usize> {
    let s = (range.start as isize + offset) as usize;
    s..s + range.len()
}

/// `Σ a[i] b[i]` with eight fixed partial sums, summed in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], alpha: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// 3x3x3 convolution, stride 1, zero same-padding.
///
/// `weight` is laid out `(out, in, kd, kh, kw)`, `bias` has one entry per
/// output channel.
pub fn conv3d_forward<T: Real>(x: &Tensor5<T>, weight: &[T], bias: &[T], out_channels: usize) -> Result<Tensor5<T>> {
    let [n, c_in, d, h, w] = x.shape();
    if weight.len() != out_channels * c_in * TAPS || bias.len() != out_channels {
        return Err(Error::Shape(format!(
            "conv3d expects {c_in} input channels: weight has {} values for {out_channels} outputs",
            weight.len()
        )));
    }
    let pad = Padded::new([d, h, w]);
    let plen = pad.len();
    let run = pad.interior();
    let mut out = Tensor5::zeros([n, out_channels, d, h, w]);
    let mut acc = vec![T::zero(); plen];
    for b in 0..n {
        let xp = pad.pad_all(x, b);
        for o in 0..out_channels {
            acc.fill(bias[o]);
            for c in 0..c_in {
                let inp = &xp[c * plen..(c + 1) * plen];
                let kernel = &weight[(o * c_in + c) * TAPS..][..TAPS];
                for (tap, &wv) in kernel.iter().enumerate() {
                    axpy(&mut acc[run.clone()], wv, &inp[shifted(&run, pad.tap_offset(tap))]);
                }
            }
            pad.unpad_into(&acc, out.channel_mut(b, o));
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] given the forward input and upstream gradient.
/// Returns `(input grad, weight grad, bias grad)`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor5<T>,
    weight: &[T],
    upstream: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<T>, Vec<T>)> {
    let [n, c_in, d, h, w] = x.shape();
    let out_channels = upstream.channels();
    if upstream.shape() != [n, out_channels, d, h, w] || weight.len() != out_channels * c_in * TAPS {
        return Err(Error::Shape(format!(
            "conv3d backward: input {:?}, upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let pad = Padded::new([d, h, w]);
    let plen = pad.len();
    let run = pad.interior();
    let mut dx = Tensor5::zeros(x.shape());
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); out_channels];
    let mut dxp = vec![T::zero(); plen * c_in];
    for b in 0..n {
        let xp = pad.pad_all(x, b);
        let gp = pad.pad_all(upstream, b);
        dxp.fill(T::zero());
        for o in 0..out_channels {
            let g = &gp[o * plen..(o + 1) * plen];
            db[o] += upstream.channel(b, o).iter().copied().sum::<T>();
            for c in 0..c_in {
                let base = (o * c_in + c) * TAPS;
                let inp = &xp[c * plen..(c + 1) * plen];
                let dxc = &mut dxp[c * plen..(c + 1) * plen];
                for tap in 0..TAPS {
                    let src = shifted(&run, pad.tap_offset(tap));
                    // border entries of `g` are zero, so they add nothing
                    dw[base + tap] += dot(&g[run.clone()], &inp[src.clone()]);
                    axpy(&mut dxc[src], weight[base + tap], &g[run.clone()]);
                }
            }
        }
        for c in 0..c_in {
            pad.unpad_into(&dxp[c * plen..(c + 1) * plen], dx.channel_mut(b, c));
        }
    }
    Ok((dx, dw, db))
}

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor5::from_vec(x.shape(), data).unwrap()
}

/// Uses the forward output: the gradient passes where the output is positive.
pub fn relu_backward<T: Real>(y: &Tensor5<T>, upstream: &Tensor5<T>) -> Tensor5<T> {
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor5::from_vec(y.shape(), data).unwrap()
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let data = x.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor5::from_vec(x.shape(), data).unwrap()
}

/// Uses the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Real>(y: &Tensor5<T>, upstream: &Tensor5<T>) -> Tensor5<T> {
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor5::from_vec(y.shape(), data).unwrap()
}

fn check_even(x: &[usize; 3], what: &str) -> Result<()> {
    if x.iter().any(|&v| v % 2 != 0 || v == 0) {
        return Err(Error::Shape(format!("{what} needs even spatial dims, got {x:?}")));
    }
    Ok(())
}

/// 2x2x2 max pooling with stride 2. Also returns, per output voxel, the
/// flat in-channel index of the winning input (first maximum in scan order).
pub fn maxpool_forward<T: Real>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<u32>)> {
    let [n, c, d, h, w] = x.shape();
    check_even(&[d, h, w], "maxpool")?;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    for b in 0..n {
        for ch in 0..c {
            let inp = x.channel(b, ch);
            let o = out.channel_mut(b, ch);
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (z * 2 * h + y * 2) * w + xx * 2;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((z * 2 + dz) * h + y * 2 + dy) * w + xx * 2 + dx;
                                    if inp[i] > inp[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        o[(z * oh + y) * ow + xx] = inp[best];
                        argmax.push(best as u32);
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(input_shape: [usize; 5], argmax: &[u32], upstream: &Tensor5<T>) -> Tensor5<T> {
    let mut dx = Tensor5::zeros(input_shape);
    let [n, c, ..] = input_shape;
    let per = upstream.voxels();
    for b in 0..n {
        for ch in 0..c {
            let g = upstream.channel(b, ch);
            let idx = &argmax[(b * c + ch) * per..][..per];
            let d = dx.channel_mut(b, ch);
            for (&i, &gv) in idx.iter().zip(g) {
                d[i as usize] += gv;
            }
        }
    }
    dx
}

/// Nearest-neighbor upsampling by 2 along every spatial axis.
pub fn upsample_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, d, h, w] = x.shape();
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let inp = x.channel(b, ch);
            let o = out.channel_mut(b, ch);
            for z in 0..od {
                for y in 0..oh {
                    let src = ((z / 2) * h + y / 2) * w;
                    let dst = (z * oh + y) * ow;
                    for xx in 0..ow {
                        o[dst + xx] = inp[src + xx / 2];
                    }
                }
            }
        }
    }
    out
}

/// Sums the upstream gradient over each 2x2x2 replication set.
pub fn upsample_backward<T: Real>(upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
    let [n, c, od, oh, ow] = upstream.shape();
    check_even(&[od, oh, ow], "upsample backward")?;
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut dx = Tensor5::zeros([n, c, d, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = upstream.channel(b, ch);
            let o = dx.channel_mut(b, ch);
            for z in 0..od {
                for y in 0..oh {
                    let dst = ((z / 2) * h + y / 2) * w;
                    let src = (z * oh + y) * ow;
                    for xx in 0..ow {
                        o[dst + xx / 2] += g[src + xx];
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over non-overlapping `factor`^3 blocks.
pub fn avgpool_forward<T: Real>(x: &Tensor5<T>, factor: usize) -> Result<Tensor5<T>> {
    let [n, c, d, h, w] = x.shape();
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "average pool by {factor} needs divisible dims, got {:?}",
            x.spatial()
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let scale = T::one() / T::lit((factor * factor * factor) as f64);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let inp = x.channel(b, ch);
            let o = out.channel_mut(b, ch);
            for z in 0..d {
                for y in 0..h {
                    let src = (z * h + y) * w;
                    let dst = ((z / factor) * oh + y / factor) * ow;
                    for xx in 0..w {
                        o[dst + xx / factor] += inp[src + xx];
                    }
                }
            }
            for v in o.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<T: Real>(upstream: &Tensor5<T>, factor: usize) -> Tensor5<T> {
    if factor == 1 {
        return upstream.clone();
    }
    let [n, c, od, oh, ow] = upstream.shape();
    let (d, h, w) = (od * factor, oh * factor, ow * factor);
    let scale = T::one() / T::lit((factor * factor * factor) as f64);
    let mut dx = Tensor5::zeros([n, c, d, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = upstream.channel(b, ch);
            let o = dx.channel_mut(b, ch);
            for z in 0..d {
                for y in 0..h {
                    let src = ((z / factor) * oh + y / factor) * ow;
                    let dst = (z * h + y) * w;
                    for xx in 0..w {
                        o[dst + xx] = g[src + xx / factor] * scale;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_forward<T: Real>(parts: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let [n, _, d, h, w] = first.shape();
    for p in parts {
        let [pn, _, pd, ph, pw] = p.shape();
        if (pn, pd, ph, pw) != (n, d, h, w) {
            return Err(Error::Shape(format!(
                "concat of {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor5::zeros([n, total, d, h, w]);
    for b in 0..n {
        let mut oc = 0;
        for p in parts {
            for c in 0..p.channels() {
                out.channel_mut(b, oc).copy_from_slice(p.channel(b, c));
                oc += 1;
            }
        }
    }
    Ok(out)
}

/// Splits an upstream gradient back into per-part channel groups.
pub fn concat_backward<T: Real>(upstream: &Tensor5<T>, part_channels: &[usize]) -> Vec<Tensor5<T>> {
    let [n, _, d, h, w] = upstream.shape();
    let mut offset = 0;
    part_channels
        .iter()
        .map(|&pc| {
            let mut t = Tensor5::zeros([n, pc, d, h, w]);
            for b in 0..n {
                for c in 0..pc {
                    t.channel_mut(b, c).copy_from_slice(upstream.channel(b, offset + c));
                }
            }
            offset += pc;
            t
        })
        .collect()
}

/// Spatial mean per channel, shape `(N, C, 1, 1, 1)`.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, ..] = x.shape();
    let inv = T::one() / T::lit(x.voxels() as f64);
    let mut out = Tensor5::zeros([n, c, 1, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            out.data_mut()[b * c + ch] = x.channel(b, ch).iter().copied().sum::<T>() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(input_shape: [usize; 5], upstream: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, d, h, w] = input_shape;
    let inv = T::one() / T::lit((d * h * w) as f64);
    let mut dx = Tensor5::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = upstream.data()[b * c + ch] * inv;
            dx.channel_mut(b, ch).fill(g);
        }
    }
    dx
}

/// Fully connected layer on `(N, in, 1, 1, 1)`; `weight` is `(out, in)`.
pub fn dense_forward<T: Real>(x: &Tensor5<T>, weight: &[T], bias: Option<&[T]>, outputs: usize) -> Result<Tensor5<T>> {
    let [n, inputs, d, h, w] = x.shape();
    if (d, h, w) != (1, 1, 1) || weight.len() != inputs * outputs {
        return Err(Error::Shape(format!(
            "dense {inputs}->{outputs} applied to {:?}",
            x.shape()
        )));
    }
    let mut out = Tensor5::zeros([n, outputs, 1, 1, 1]);
    for b in 0..n {
        let xin = &x.data()[b * inputs..][..inputs];
        for o in 0..outputs {
            let row = &weight[o * inputs..][..inputs];
            let mut acc = bias.map_or(T::zero(), |bb| bb[o]);
            for (&wv, &v) in row.iter().zip(xin) {
                acc += wv * v;
            }
            out.data_mut()[b * outputs + o] = acc;
        }
    }
    Ok(out)
}

/// Returns `(input grad, weight grad, bias grad)`.
pub fn dense_backward<T: Real>(x: &Tensor5<T>, weight: &[T], upstream: &Tensor5<T>) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let [n, inputs, ..] = x.shape();
    let outputs = upstream.channels();
    let mut dx = Tensor5::zeros(x.shape());
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); outputs];
    for b in 0..n {
        let xin = &x.data()[b * inputs..][..inputs];
        for o in 0..outputs {
            let g = upstream.data()[b * outputs + o];
            db[o] += g;
            for i in 0..inputs {
                dw[o * inputs + i] += g * xin[i];
                dx.data_mut()[b * inputs + i] += g * weight[o * inputs + i];
            }
        }
    }
    (dx, dw, db)
}

/// Intermediates of a squeeze-and-excitation forward pass.
#[derive(Clone, Debug)]
pub struct SeCache<T> {
    pub squeezed: Tensor5<T>,
    pub hidden: Tensor5<T>,
    pub activated: Tensor5<T>,
    pub gate: Tensor5<T>,
}

/// Squeeze-and-excitation: `s = mean(x)`, `z = sigmoid(W2 relu(W1 s))`,
/// `out[n, c] = x[n, c] * z[n, c]`.
pub fn se_forward<T: Real>(
    x: &Tensor5<T>,
    w1: &[T],
    w2: &[T],
    reduction: usize,
) -> Result<(Tensor5<T>, SeCache<T>)> {
    let channels = x.channels();
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Shape(format!(
            "SE block: {channels} channels not divisible by reduction {reduction}"
        )));
    }
    let hidden_width = channels / reduction;
    let squeezed = global_avg_pool_forward(x);
    let hidden = dense_forward(&squeezed, w1, None, hidden_width)?;
    let activated = relu_forward(&hidden);
    let logits = dense_forward(&activated, w2, None, channels)?;
    let gate = sigmoid_forward(&logits);
    let mut out = x.clone();
    for b in 0..x.batch() {
        for c in 0..channels {
            let z = gate.data()[b * channels + c];
            for v in out.channel_mut(b, c) {
                *v *= z;
            }
        }
    }
    Ok((
        out,
        SeCache {
            squeezed,
            hidden,
            activated,
            gate,
        },
    ))
}

/// Returns `(input grad, W1 grad, W2 grad)`.
pub fn se_backward<T: Real>(
    x: &Tensor5<T>,
    cache: &SeCache<T>,
    w1: &[T],
    w2: &[T],
    upstream: &Tensor5<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let [n, channels, ..] = x.shape();
    let mut dx = upstream.clone();
    let mut dgate = Tensor5::zeros([n, channels, 1, 1, 1]);
    for b in 0..n {
        for c in 0..channels {
            let z = cache.gate.data()[b * channels + c];
            let g = upstream.channel(b, c);
            dgate.data_mut()[b * channels + c] = g.iter().zip(x.channel(b, c)).map(|(&gv, &xv)| gv * xv).sum();
            for v in dx.channel_mut(b, c) {
                *v *= z;
            }
        }
    }
    let dlogits = sigmoid_backward(&cache.gate, &dgate);
    let (dact, dw2, _) = dense_backward(&cache.activated, w2, &dlogits);
    let dhidden = relu_backward(&cache.activated, &dact);
    let (dsq, dw1, _) = dense_backward(&cache.squeezed, w1, &dhidden);
    dx.add_assign(&global_avg_pool_backward(x.shape(), &dsq));
    (dx, dw1, dw2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn rand_tensor(shape: [usize; 5], rng: &mut SplitMix64) -> Tensor5<f64> {
        let len = shape.iter().product();
        Tensor5::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_vec(len: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Straight six-loop convolution with explicit bounds checks.
    fn naive_conv(x: &Tensor5<f64>, w: &[f64], b: &[f64], out_c: usize) -> Tensor5<f64> {
        let [n, c_in, d, h, wd] = x.shape();
        let mut out = Tensor5::zeros([n, out_c, d, h, wd]);
        for bn in 0..n {
            for o in 0..out_c {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = b[o];
                            for c in 0..c_in {
                                for kd in 0..3 {
                                    for kh in 0..3 {
                                        for kw in 0..3 {
                                            let zi = z as i64 + kd as i64 - 1;
                                            let yi = y as i64 + kh as i64 - 1;
                                            let xi = xx as i64 + kw as i64 - 1;
                                            if zi < 0 || yi < 0 || xi < 0 || zi >= d as i64 || yi >= h as i64 || xi >= wd as i64 {
                                                continue;
                                            }
                                            acc += w[(o * c_in + c) * 27 + kd * 9 + kh * 3 + kw]
                                                * x.data()[x.index(bn, c, zi as usize, yi as usize, xi as usize)];
                                        }
                                    }
                                }
                            }
                            let i = out.index(bn, o, z, y, xx);
                            out.data_mut()[i] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Norm-wise relative error between two gradient vectors.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    /// Central differences of `f` around `x`, h = 1e-3.
    fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-3;
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn dot(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let x = rand_tensor([1, 1, 3, 4, 5], &mut rng);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let y = conv3d_forward(&x, &w, &[0.0], 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_single_voxel_sees_only_center_tap() {
        let x = Tensor5::filled([1, 1, 1, 1, 1], 1.0f64);
        let y = conv3d_forward(&x, &[1.0; 27], &[0.0], 1).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = SplitMix64::seed_from_u64(2);
        for _ in 0..5 {
            let x = rand_tensor([1, 2, 4, 4, 4], &mut rng);
            let w = rand_vec(3 * 2 * 27, &mut rng);
            let b = rand_vec(3, &mut rng);
            let fast = conv3d_forward(&x, &w, &b, 3).unwrap();
            let slow = naive_conv(&x, &w, &b, 3);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor5::<f64>::zeros([1, 2, 2, 2, 2]);
        assert!(conv3d_forward(&x, &[0.0; 27], &[0.0], 1).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let x = rand_tensor([1, 2, 3, 3, 3], &mut rng);
        let w = rand_vec(2 * 2 * 27, &mut rng);
        let (dx, dw, db) = conv3d_backward(&x, &w, &Tensor5::zeros([1, 2, 3, 3, 3])).unwrap();
        assert!(dx.data().iter().chain(&dw).chain(&db).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_grad_of_single_voxel_is_input_patch() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let x = rand_tensor([1, 1, 3, 3, 3], &mut rng);
        let mut g = Tensor5::zeros([1, 1, 3, 3, 3]);
        let center = g.index(0, 0, 1, 1, 1);
        g.data_mut()[center] = 1.0;
        let (_, dw, db) = conv3d_backward(&x, &[0.0; 27], &g).unwrap();
        // under the center voxel the 3x3x3 window is the whole input
        assert_eq!(dw, x.data().to_vec());
        assert_eq!(db, vec![1.0]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = SplitMix64::seed_from_u64(100 + seed);
            let x = rand_tensor([1, 2, 3, 4, 2], &mut rng);
            let w = rand_vec(3 * 2 * 27, &mut rng);
            let b = rand_vec(3, &mut rng);
            let r = rand_tensor([1, 3, 3, 4, 2], &mut rng);
            let (dx, dw, db) = conv3d_backward(&x, &w, &r).unwrap();
            let fx = numeric_grad(x.data(), |v| {
                dot(&conv3d_forward(&Tensor5::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b, 3).unwrap(), &r)
            });
            let fw = numeric_grad(&w, |v| dot(&conv3d_forward(&x, v, &b, 3).unwrap(), &r));
            let fb = numeric_grad(&b, |v| dot(&conv3d_forward(&x, &w, v, 3).unwrap(), &r));
            assert!(rel_err(dx.data(), &fx) < 1e-4);
            assert!(rel_err(&dw, &fw) < 1e-4);
            assert!(rel_err(&db, &fb) < 1e-4);
        }
    }

    #[test]
    fn relu_values() {
        let x = Tensor5::from_vec([1, 1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_then_maxpool_roundtrips() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let x = rand_tensor([2, 3, 2, 3, 1], &mut rng);
        let (back, _) = maxpool_forward(&upsample_forward(&x)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool_forward(&Tensor5::<f64>::zeros([1, 1, 2, 3, 2])).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor5::filled([1, 1, 2, 2, 2], 1.0f64);
        let (_, arg) = maxpool_forward(&x).unwrap();
        assert_eq!(arg, vec![0]);
        let dx = maxpool_backward(x.shape(), &arg, &Tensor5::filled([1, 1, 1, 1, 1], 1.0));
        assert_eq!(dx.data()[0], 1.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn elementwise_and_resampling_backward_match_finite_differences() {
        for seed in 0..8 {
            let mut rng = SplitMix64::seed_from_u64(200 + seed);
            // keep inputs away from relu kinks and maxpool ties
            let mut x = rand_tensor([1, 2, 4, 2, 4], &mut rng);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            let shape = x.shape();
            let with = |v: &[f64]| Tensor5::from_vec(shape, v.to_vec()).unwrap();

            let r = rand_tensor(shape, &mut rng);
            let y = relu_forward(&x);
            let g = relu_backward(&y, &r);
            let n = numeric_grad(x.data(), |v| dot(&relu_forward(&with(v)), &r));
            assert!(rel_err(g.data(), &n) < 1e-4, "relu");

            let y = sigmoid_forward(&x);
            let g = sigmoid_backward(&y, &r);
            let n = numeric_grad(x.data(), |v| dot(&sigmoid_forward(&with(v)), &r));
            assert!(rel_err(g.data(), &n) < 1e-4, "sigmoid");

            let (y, arg) = maxpool_forward(&x).unwrap();
            let r2 = rand_tensor(y.shape(), &mut rng);
            let g = maxpool_backward(shape, &arg, &r2);
            let n = numeric_grad(x.data(), |v| dot(&maxpool_forward(&with(v)).unwrap().0, &r2));
            assert!(rel_err(g.data(), &n) < 1e-4, "maxpool");

            let y = upsample_forward(&x);
            let r3 = rand_tensor(y.shape(), &mut rng);
            let g = upsample_backward(&r3).unwrap();
            let n = numeric_grad(x.data(), |v| dot(&upsample_forward(&with(v)), &r3));
            assert!(rel_err(g.data(), &n) < 1e-4, "upsample");

            let y = avgpool_forward(&x, 2).unwrap();
            let r4 = rand_tensor(y.shape(), &mut rng);
            let g = avgpool_backward(&r4, 2);
            let n = numeric_grad(x.data(), |v| dot(&avgpool_forward(&with(v), 2).unwrap(), &r4));
            assert!(rel_err(g.data(), &n) < 1e-4, "avgpool");

            let y = global_avg_pool_forward(&x);
            let r5 = rand_tensor(y.shape(), &mut rng);
            let g = global_avg_pool_backward(shape, &r5);
            let n = numeric_grad(x.data(), |v| dot(&global_avg_pool_forward(&with(v)), &r5));
            assert!(rel_err(g.data(), &n) < 1e-4, "gap");
        }
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut rng = SplitMix64::seed_from_u64(6);
        let a = rand_tensor([2, 1, 2, 2, 2], &mut rng);
        let b = rand_tensor([2, 3, 2, 2, 2], &mut rng);
        let cat = concat_forward(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 4);
        let parts = concat_backward(&cat, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = SplitMix64::seed_from_u64(7);
        let x = rand_tensor([2, 4, 1, 1, 1], &mut rng);
        let w = rand_vec(12, &mut rng);
        let b = rand_vec(3, &mut rng);
        let r = rand_tensor([2, 3, 1, 1, 1], &mut rng);
        let (dx, dw, db) = dense_backward(&x, &w, &r);
        let fx = numeric_grad(x.data(), |v| {
            dot(&dense_forward(&Tensor5::from_vec(x.shape(), v.to_vec()).unwrap(), &w, Some(&b), 3).unwrap(), &r)
        });
        let fw = numeric_grad(&w, |v| dot(&dense_forward(&x, v, Some(&b), 3).unwrap(), &r));
        let fb = numeric_grad(&b, |v| dot(&dense_forward(&x, &w, Some(v), 3).unwrap(), &r));
        assert!(rel_err(dx.data(), &fx) < 1e-4);
        assert!(rel_err(&dw, &fw) < 1e-4);
        assert!(rel_err(&db, &fb) < 1e-4);
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let mut rng = SplitMix64::seed_from_u64(8);
        let x = rand_tensor([1, 4, 2, 2, 2], &mut rng);
        let (y, cache) = se_forward(&x, &[0.0; 8], &[0.0; 8], 2).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(cache.gate.data().iter().all(|&z| z == 0.5));
    }

    #[test]
    fn se_squeeze_of_constant_channel_is_the_constant() {
        let x = Tensor5::filled([1, 2, 3, 2, 2], 0.75f64);
        let (_, cache) = se_forward(&x, &[0.1, 0.2], &[0.3, 0.4], 2).unwrap();
        assert_eq!(cache.squeezed.data(), &[0.75, 0.75]);
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let x = Tensor5::<f64>::zeros([1, 3, 2, 2, 2]);
        assert!(se_forward(&x, &[0.0; 3], &[0.0; 3], 2).is_err());
    }

    /// Scalar reference: one channel at a time with plain loops.
    fn se_reference(x: &Tensor5<f64>, w1: &[f64], w2: &[f64], r: usize) -> Vec<f64> {
        let [n, c, ..] = x.shape();
        let hw = c / r;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let s: Vec<f64> = (0..c).map(|ch| x.channel(b, ch).iter().sum::<f64>() / x.voxels() as f64).collect();
            let a: Vec<f64> = (0..hw).map(|j| (0..c).map(|i| w1[j * c + i] * s[i]).sum::<f64>().max(0.0)).collect();
            for ch in 0..c {
                let logit: f64 = (0..hw).map(|j| w2[ch * hw + j] * a[j]).sum();
                let z = 1.0 / (1.0 + (-logit).exp());
                for (k, &v) in x.channel(b, ch).iter().enumerate() {
                    out[(b * c + ch) * x.voxels() + k] = v * z;
                }
            }
        }
        out
    }

    #[test]
    fn se_matches_reference_and_finite_differences() {
        for seed in 0..6 {
            let mut rng = SplitMix64::seed_from_u64(300 + seed);
            let x = rand_tensor([2, 4, 2, 3, 2], &mut rng);
            let w1 = rand_vec(8, &mut rng);
            let w2 = rand_vec(8, &mut rng);
            let (y, cache) = se_forward(&x, &w1, &w2, 2).unwrap();
            for (a, e) in y.data().iter().zip(se_reference(&x, &w1, &w2, 2)) {
                assert!((a - e).abs() < 1e-5);
            }
            if cache.hidden.data().iter().any(|h| h.abs() < 1e-2) {
                continue; // too close to the relu kink for h = 1e-3
            }
            let r = rand_tensor(x.shape(), &mut rng);
            let (dx, dw1, dw2) = se_backward(&x, &cache, &w1, &w2, &r);
            let fx = numeric_grad(x.data(), |v| {
                dot(&se_forward(&Tensor5::from_vec(x.shape(), v.to_vec()).unwrap(), &w1, &w2, 2).unwrap().0, &r)
            });
            let f1 = numeric_grad(&w1, |v| dot(&se_forward(&x, v, &w2, 2).unwrap().0, &r));
            let f2 = numeric_grad(&w2, |v| dot(&se_forward(&x, &w1, v, 2).unwrap().0, &r));
            assert!(rel_err(dx.data(), &fx) < 1e-4);
            assert!(rel_err(&dw1, &f1) < 1e-4);
            assert!(rel_err(&dw2, &f2) < 1e-4);
        }
    }
}
