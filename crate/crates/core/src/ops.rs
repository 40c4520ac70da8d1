//! Forward and backward kernels for the layers used by the encoder/decoder.
//!
//! Convolutions are direct (no im2col). The forward pass is parallel over
//! output channels, the input gradient over input channels and the weight
//! gradient over output channels, so each output element is accumulated by a
//! single thread in a fixed order.

use crate::grid::FeatureGrid;
use crate::par;

/// Cubic convolution geometry. Weights are `[out][in][k][k][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Stride 1 with `pad = kernel / 2` and a kernel wider than one voxel.
    fn is_padded_same(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && self.kernel % 2 == 1 && self.pad == self.kernel / 2
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [self.out_dim(dims[0]), self.out_dim(dims[1]), self.out_dim(dims[2])]
    }
}

/// Output indices `o` with `o * stride + tap - pad` inside `[0, n_in)`.
#[inline]
fn valid_range(tap: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi_excl = if n_in + pad > tap {
        ((n_in + pad - tap - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub fn conv3d_forward(input: &FeatureGrid, weight: &[f64], bias: &[f64], g: ConvGeom) -> FeatureGrid {
    assert_eq!(input.channels(), g.in_channels, "conv input channels");
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    assert_eq!(bias.len(), g.out_channels, "conv bias length");
    if g.is_padded_same() {
        return same::forward(input, weight, bias, g);
    }
    let [il, iw, id] = input.dims();
    let out_dims = g.out_dims(input.dims());
    let [ol, ow, od] = out_dims;
    let k = g.kernel;
    let k3 = k * k * k;
    let in_n = il * iw * id;
    let out_n = ol * ow * od;
    let mut out = FeatureGrid::zeros(g.out_channels, out_dims);
    let src = input.data();

    par::for_each_chunk_mut(out.data_mut(), out_n, |o, dst| {
        dst.fill(bias[o]);
        for i in 0..g.in_channels {
            let inp = &src[i * in_n..(i + 1) * in_n];
            let wbase = (o * g.in_channels + i) * k3;
            for kl in 0..k {
                let (l0, l1) = valid_range(kl, g.stride, g.pad, il, ol);
                for kw in 0..k {
                    let (w0, w1) = valid_range(kw, g.stride, g.pad, iw, ow);
                    let taps = &weight[wbase + (kl * k + kw) * k..][..k];
                    for a in l0..l1 {
                        let sl = a * g.stride + kl - g.pad;
                        for b in w0..w1 {
                            let sw = b * g.stride + kw - g.pad;
                            let in_row = &inp[(sl * iw + sw) * id..][..id];
                            let out_row = &mut dst[(a * ow + b) * od..][..od];
                            for (kd, &wv) in taps.iter().enumerate() {
                                let (d0, d1) = valid_range(kd, g.stride, g.pad, id, od);
                                if g.stride == 1 {
                                    let off = kd as isize - g.pad as isize;
                                    let s0 = (d0 as isize + off) as usize;
                                    let src_row = &in_row[s0..s0 + (d1 - d0)];
                                    for (y, x) in out_row[d0..d1].iter_mut().zip(src_row) {
                                        *y += wv * x;
                                    }
                                } else {
                                    for c in d0..d1 {
                                        out_row[c] += wv * in_row[c * g.stride + kd - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn conv3d_backward(
    input: &FeatureGrid,
    weight: &[f64],
    grad_out: &FeatureGrid,
    g: ConvGeom,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> FeatureGrid {
    debug_assert_eq!(g.out_dims(input.dims()), grad_out.dims());
    if g.is_padded_same() {
        return same::backward(input, weight, grad_out, g, grad_weight, grad_bias);
    }
    let [il, iw, id] = input.dims();
    let [ol, ow, od] = grad_out.dims();
    let k = g.kernel;
    let k3 = k * k * k;
    let in_n = il * iw * id;
    let out_n = ol * ow * od;
    let src = input.data();
    let gout = grad_out.data();

    // Parameter gradients: one chunk of `in_channels * k3` weights per output channel.
    let wchunk = g.in_channels * k3;
    let mut gw_local = vec![0.0; g.weight_len()];
    par::for_each_chunk_mut(&mut gw_local, wchunk, |o, gw| {
        let go = &gout[o * out_n..(o + 1) * out_n];
        // Per-tap lane accumulators keep the inner loop elementwise, and the
        // final lane sum runs in a fixed order.
        let mut lanes = vec![0.0; k * od];
        for i in 0..g.in_channels {
            let inp = &src[i * in_n..(i + 1) * in_n];
            for kl in 0..k {
                let (l0, l1) = valid_range(kl, g.stride, g.pad, il, ol);
                for kw in 0..k {
                    let (w0, w1) = valid_range(kw, g.stride, g.pad, iw, ow);
                    lanes.fill(0.0);
                    for a in l0..l1 {
                        let sl = a * g.stride + kl - g.pad;
                        for b in w0..w1 {
                            let sw = b * g.stride + kw - g.pad;
                            let in_row = &inp[(sl * iw + sw) * id..][..id];
                            let go_row = &go[(a * ow + b) * od..][..od];
                            for kd in 0..k {
                                let (d0, d1) = valid_range(kd, g.stride, g.pad, id, od);
                                let lane = &mut lanes[kd * od..(kd + 1) * od];
                                if g.stride == 1 {
                                    let s0 = d0 + kd - g.pad;
                                    let src_row = &in_row[s0..s0 + (d1 - d0)];
                                    for ((acc, y), x) in lane[d0..d1].iter_mut().zip(&go_row[d0..d1]).zip(src_row) {
                                        *acc += y * x;
                                    }
                                } else {
                                    for c in d0..d1 {
                                        lane[c] += go_row[c] * in_row[c * g.stride + kd - g.pad];
                                    }
                                }
                            }
                        }
                    }
                    let acc = &mut gw[i * k3 + (kl * k + kw) * k..][..k];
                    for (kd, slot) in acc.iter_mut().enumerate() {
                        *slot += lanes[kd * od..(kd + 1) * od].iter().sum::<f64>();
                    }
                }
            }
        }
    });
    for (dst, v) in grad_weight.iter_mut().zip(&gw_local) {
        *dst += v;
    }
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += gout[o * out_n..(o + 1) * out_n].iter().sum::<f64>();
    }

    let mut grad_in = FeatureGrid::zeros(g.in_channels, input.dims());
    par::for_each_chunk_mut(grad_in.data_mut(), in_n, |i, gin| {
        for o in 0..g.out_channels {
            let go = &gout[o * out_n..(o + 1) * out_n];
            let wbase = (o * g.in_channels + i) * k3;
            for kl in 0..k {
                let (l0, l1) = valid_range(kl, g.stride, g.pad, il, ol);
                for kw in 0..k {
                    let (w0, w1) = valid_range(kw, g.stride, g.pad, iw, ow);
                    let taps = &weight[wbase + (kl * k + kw) * k..][..k];
                    for a in l0..l1 {
                        let sl = a * g.stride + kl - g.pad;
                        for b in w0..w1 {
                            let sw = b * g.stride + kw - g.pad;
                            let gin_row = &mut gin[(sl * iw + sw) * id..][..id];
                            let go_row = &go[(a * ow + b) * od..][..od];
                            for (kd, &wv) in taps.iter().enumerate() {
                                let (d0, d1) = valid_range(kd, g.stride, g.pad, id, od);
                                if g.stride == 1 {
                                    let off = kd as isize - g.pad as isize;
                                    let s0 = (d0 as isize + off) as usize;
                                    let dst = &mut gin_row[s0..s0 + (d1 - d0)];
                                    for (x, y) in dst.iter_mut().zip(&go_row[d0..d1]) {
                                        *x += wv * y;
                                    }
                                } else {
                                    for c in d0..d1 {
                                        gin_row[c * g.stride + kd - g.pad] += wv * go_row[c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Stride-1 "same" convolutions on zero-padded copies of the inputs.
///
/// With every channel padded by `p` on each side, the tap `(kl, kw, kd)` maps
/// one output plane onto a single contiguous run of a padded input plane, so
/// each tap is one long elementwise pass. Output rows are computed in the
/// padded row pitch and the `2p` surplus columns per row are dropped.
mod same {
    use super::{par, ConvGeom, FeatureGrid};

    struct Layout {
        dims: [usize; 3],
        p: usize,
        /// Padded row pitch `D + 2p`.
        pitch: usize,
        /// Padded plane size `(W + 2p) * pitch`.
        plane: usize,
        /// Length of one output plane in padded pitch.
        run: usize,
    }

    impl Layout {
        fn new(dims: [usize; 3], k: usize) -> Self {
            let p = k / 2;
            let pitch = dims[2] + 2 * p;
            let plane = (dims[1] + 2 * p) * pitch;
            Self {
                dims,
                p,
                pitch,
                plane,
                run: (dims[1] - 1) * pitch + dims[2],
            }
        }

        fn padded_len(&self) -> usize {
            (self.dims[0] + 2 * self.p) * self.plane
        }

        fn pad(&self, src: &[f64]) -> Vec<f64> {
            let [l, w, d] = self.dims;
            let mut out = vec![0.0; self.padded_len()];
            for a in 0..l {
                for b in 0..w {
                    let at = (a + self.p) * self.plane + (b + self.p) * self.pitch + self.p;
                    out[at..at + d].copy_from_slice(&src[(a * w + b) * d..][..d]);
                }
            }
            out
        }

        /// Output-pitch copy: `[L][W][pitch]`, surplus columns zero.
        fn pitched(&self, src: &[f64]) -> Vec<f64> {
            let [l, w, d] = self.dims;
            let mut out = vec![0.0; l * self.plane];
            for a in 0..l {
                for b in 0..w {
                    let at = a * self.plane + b * self.pitch;
                    out[at..at + d].copy_from_slice(&src[(a * w + b) * d..][..d]);
                }
            }
            out
        }

        fn tap_offset(&self, kl: usize, kw: usize, kd: usize) -> usize {
            kl * self.plane + kw * self.pitch + kd
        }
    }

    #[inline]
    fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        for (y, x) in y.iter_mut().zip(x) {
            *y += a * x;
        }
    }

    #[inline]
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0; 4];
        let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
        let (ar, br) = (ac.remainder(), bc.remainder());
        for (x, y) in ac.zip(bc) {
            for t in 0..4 {
                acc[t] += x[t] * y[t];
            }
        }
        let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    pub(super) fn forward(input: &FeatureGrid, weight: &[f64], bias: &[f64], g: ConvGeom) -> FeatureGrid {
        let dims = input.dims();
        let [l, w, d] = dims;
        let k = g.kernel;
        let k3 = k * k * k;
        let lay = Layout::new(dims, k);
        let padded: Vec<Vec<f64>> = par::map_range(g.in_channels, |i| lay.pad(input.channel(i)));
        let mut out = FeatureGrid::zeros(g.out_channels, dims);
        par::for_each_chunk_mut(out.data_mut(), l * w * d, |o, dst| {
            let mut row = vec![0.0; lay.run];
            for a in 0..l {
                row.fill(bias[o]);
                for (i, inp) in padded.iter().enumerate() {
                    let taps = &weight[(o * g.in_channels + i) * k3..][..k3];
                    let base = a * lay.plane;
                    for kl in 0..k {
                        for kw in 0..k {
                            for kd in 0..k {
                                let at = base + lay.tap_offset(kl, kw, kd);
                                axpy(&mut row, taps[(kl * k + kw) * k + kd], &inp[at..at + lay.run]);
                            }
                        }
                    }
                }
                for b in 0..w {
                    dst[(a * w + b) * d..][..d].copy_from_slice(&row[b * lay.pitch..][..d]);
                }
            }
        });
        out
    }

    pub(super) fn backward(
        input: &FeatureGrid,
        weight: &[f64],
        grad_out: &FeatureGrid,
        g: ConvGeom,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> FeatureGrid {
        let dims = input.dims();
        let [l, w, d] = dims;
        let n = l * w * d;
        let k = g.kernel;
        let k3 = k * k * k;
        let lay = Layout::new(dims, k);
        let padded: Vec<Vec<f64>> = par::map_range(g.in_channels, |i| lay.pad(input.channel(i)));
        let go: Vec<Vec<f64>> = par::map_range(g.out_channels, |o| lay.pitched(grad_out.channel(o)));

        let mut gw_local = vec![0.0; g.weight_len()];
        par::for_each_chunk_mut(&mut gw_local, g.in_channels * k3, |o, gw| {
            let gop = &go[o];
            for (i, inp) in padded.iter().enumerate() {
                let acc = &mut gw[i * k3..(i + 1) * k3];
                for kl in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let off = lay.tap_offset(kl, kw, kd);
                            let mut s = 0.0;
                            for a in 0..l {
                                let at = a * lay.plane;
                                s += dot(&gop[at..at + lay.run], &inp[at + off..at + off + lay.run]);
                            }
                            acc[(kl * k + kw) * k + kd] += s;
                        }
                    }
                }
            }
        });
        for (dst, v) in grad_weight.iter_mut().zip(&gw_local) {
            *dst += v;
        }
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.channel(o).iter().sum::<f64>();
        }

        let mut grad_in = FeatureGrid::zeros(g.in_channels, dims);
        par::for_each_chunk_mut(grad_in.data_mut(), n, |i, gin| {
            let mut acc = vec![0.0; lay.padded_len()];
            for (o, gop) in go.iter().enumerate() {
                let taps = &weight[(o * g.in_channels + i) * k3..][..k3];
                for a in 0..l {
                    let src = &gop[a * lay.plane..][..lay.run];
                    for kl in 0..k {
                        for kw in 0..k {
                            for kd in 0..k {
                                let at = a * lay.plane + lay.tap_offset(kl, kw, kd);
                                axpy(&mut acc[at..at + lay.run], taps[(kl * k + kw) * k + kd], src);
                            }
                        }
                    }
                }
            }
            for a in 0..l {
                for b in 0..w {
                    let at = (a + lay.p) * lay.plane + (b + lay.p) * lay.pitch + lay.p;
                    gin[(a * w + b) * d..][..d].copy_from_slice(&acc[at..at + d]);
                }
            }
        });
        grad_in
    }
}

/// Nearest-neighbour upsampling by 2 along every spatial axis.
pub fn upsample2(input: &FeatureGrid) -> FeatureGrid {
    let [l, w, d] = input.dims();
    let dims = [2 * l, 2 * w, 2 * d];
    let mut out = FeatureGrid::zeros(input.channels(), dims);
    let out_n = 8 * l * w * d;
    let src = input.data();
    let in_n = l * w * d;
    par::for_each_chunk_mut(out.data_mut(), out_n, |c, dst| {
        let s = &src[c * in_n..(c + 1) * in_n];
        for a in 0..2 * l {
            for b in 0..2 * w {
                let row = &s[((a / 2) * w + b / 2) * d..][..d];
                let out_row = &mut dst[(a * 2 * w + b) * 2 * d..][..2 * d];
                for (z, v) in row.iter().enumerate() {
                    out_row[2 * z] = *v;
                    out_row[2 * z + 1] = *v;
                }
            }
        }
    });
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 block.
pub fn upsample2_backward(grad_out: &FeatureGrid) -> FeatureGrid {
    let [l2, w2, d2] = grad_out.dims();
    let (l, w, d) = (l2 / 2, w2 / 2, d2 / 2);
    let mut out = FeatureGrid::zeros(grad_out.channels(), [l, w, d]);
    let in_n = l * w * d;
    let src = grad_out.data();
    let src_n = l2 * w2 * d2;
    par::for_each_chunk_mut(out.data_mut(), in_n, |c, dst| {
        let s = &src[c * src_n..(c + 1) * src_n];
        for a in 0..l2 {
            for b in 0..w2 {
                let row = &s[(a * w2 + b) * d2..][..d2];
                let out_row = &mut dst[((a / 2) * w + b / 2) * d..][..d];
                for (z, v) in row.iter().enumerate() {
                    out_row[z / 2] += *v;
                }
            }
        }
    });
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(input: &FeatureGrid) -> FeatureGrid {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|x| *x *= sigmoid(*x));
    out
}

pub fn silu_backward(input: &FeatureGrid, grad_out: &FeatureGrid) -> FeatureGrid {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        let s = sigmoid(x);
        *gv *= s * (1.0 + x * (1.0 - s));
    }
    g
}
