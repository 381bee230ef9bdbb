//! Direct 2-D cross-correlation with zero padding.
//!
//! Weights use the `[C_in, C_out / groups, K, K]` layout: entry
//! `[ci, j, kh, kw]` connects input channel `ci` to output channel
//! `group(ci) * (C_out / groups) + j`. With `groups == 1` this is exactly
//! `W[c_in, c_out, k_h, k_w]`, the index order the merge formulas are written in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument("stride and groups must be positive".into()));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {}->{} not divisible by groups {}",
                self.c_in, self.c_out, self.groups
            )));
        }
        Ok(())
    }

    pub fn out_size(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "input side {size} too small for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.groups == self.c_out
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_in, self.c_out / self.groups, self.kernel, self.kernel]
    }

    /// Multiply-accumulate count for one sample at the given output size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.c_in * self.c_out * self.kernel * self.kernel * out_h * out_w / self.groups) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> ConvWeights<T> {
    /// He (fan-in) initialised weights, zero bias, "same" padding.
    pub fn he_init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let geo = ConvGeometry {
            c_in,
            c_out,
            kernel,
            stride,
            padding: (kernel.max(1) - 1) / 2,
            groups,
        };
        geo.validate()?;
        let fan_in = (c_in / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(ConvWeights {
            weight: Tensor::randn(&geo.weight_shape(), std, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: geo.padding,
            groups,
        })
    }

    pub fn from_parts(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let w = ConvWeights {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        let geo = w.geometry()?;
        geo.validate()?;
        if w.bias.shape() != [geo.c_out] {
            return Err(Error::dim("bias channels", geo.c_out, w.bias.numel()));
        }
        Ok(w)
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        let (c_in, cog, kh, kw) = self.weight.dims4()?;
        if kh != kw {
            return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
        }
        Ok(ConvGeometry {
            c_in,
            c_out: cog * self.groups,
            kernel: kh,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.bias.numel()
    }

    pub fn cast<U: Element>(&self) -> ConvWeights<U> {
        ConvWeights {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

struct Plan {
    geo: ConvGeometry,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn plan<T: Element>(x: &Tensor<T>, w: &ConvWeights<T>, padding: usize) -> Result<Plan> {
    let (n, c, h, wd) = x.dims4()?;
    let mut geo = w.geometry()?;
    geo.padding = padding;
    geo.validate()?;
    if c != geo.c_in {
        return Err(Error::dim("conv2d input channels (axis 1)", geo.c_in, c));
    }
    if w.bias.numel() != geo.c_out {
        return Err(Error::dim("conv2d bias channels", geo.c_out, w.bias.numel()));
    }
    Ok(Plan {
        geo,
        n,
        h,
        w: wd,
        oh: geo.out_size(h)?,
        ow: geo.out_size(wd)?,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_size + pad > k {
        ((in_size - 1 + pad - k) / stride + 1).min(out_size)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Forward convolution. Summation runs per input channel and kernel tap in a
/// fixed order, so results are deterministic.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv2d_padded(x, w, w.padding)
}

/// [`conv2d`] with an explicit zero-padding width overriding `w.padding`.
pub fn conv2d_padded<T: Element>(x: &Tensor<T>, w: &ConvWeights<T>, padding: usize) -> Result<Tensor<T>> {
    let p = plan(x, w, padding)?;
    let ConvGeometry {
        c_in,
        c_out,
        kernel: k,
        stride: s,
        padding: pad,
        groups,
    } = p.geo;
    let (cig, cog) = (c_in / groups, c_out / groups);
    let (ih_sz, iw_sz, oh_sz, ow_sz) = (p.h, p.w, p.oh, p.ow);
    let in_plane = ih_sz * iw_sz;
    let out_plane = oh_sz * ow_sz;
    let mut out = vec![T::zero(); p.n * c_out * out_plane];
    let xs = x.data();
    let ws = w.weight.data();
    let bs = w.bias.data();
    let pointwise = k == 1 && s == 1 && pad == 0;
    for n in 0..p.n {
        let out_n = &mut out[n * c_out * out_plane..(n + 1) * c_out * out_plane];
        for (co, plane) in out_n.chunks_exact_mut(out_plane).enumerate() {
            plane.fill(bs[co]);
        }
        for ci in 0..c_in {
            let g = ci / cig;
            let xc = &xs[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
            for j in 0..cog {
                let co = g * cog + j;
                let oc = &mut out_n[co * out_plane..(co + 1) * out_plane];
                let wbase = (ci * cog + j) * k * k;
                if pointwise {
                    let wv = ws[wbase];
                    for (o, &xv) in oc.iter_mut().zip(xc) {
                        *o += wv * xv;
                    }
                    continue;
                }
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, s, ih_sz, oh_sz);
                    for kw in 0..k {
                        let wv = ws[wbase + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_range(kw, pad, s, iw_sz, ow_sz);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - pad;
                            let xrow = &xc[ih * iw_sz..(ih + 1) * iw_sz];
                            let orow = &mut oc[oh * ow_sz..(oh + 1) * ow_sz];
                            if s == 1 {
                                let off = ow_lo + kw - pad;
                                for (o, &xv) in orow[ow_lo..ow_hi]
                                    .iter_mut()
                                    .zip(&xrow[off..off + (ow_hi - ow_lo)])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wv * xrow[ow * s + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[p.n, c_out, oh_sz, ow_sz], out)
}

/// Textbook per-output-pixel loop. Kept as the reference the fast path is
/// tested against.
pub fn conv2d_reference<T: Element>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let p = plan(x, w, w.padding)?;
    let g = p.geo;
    let (cig, cog, k) = (g.c_in / g.groups, g.c_out / g.groups, g.kernel);
    let xs = x.data();
    let ws = w.weight.data();
    let out = Tensor::from_fn(&[p.n, g.c_out, p.oh, p.ow], |idx| {
        let ow = idx % p.ow;
        let oh = (idx / p.ow) % p.oh;
        let co = (idx / (p.ow * p.oh)) % g.c_out;
        let n = idx / (p.ow * p.oh * g.c_out);
        let grp = co / cog;
        let j = co % cog;
        let mut acc = w.bias.data()[co];
        for ci in grp * cig..(grp + 1) * cig {
            for kh in 0..k {
                for kw in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                    if ih < 0 || iw < 0 || ih >= p.h as isize || iw >= p.w as isize {
                        continue;
                    }
                    let xv = xs[((n * g.c_in + ci) * p.h + ih as usize) * p.w + iw as usize];
                    acc += ws[((ci * cog + j) * k + kh) * k + kw] * xv;
                }
            }
        }
        acc
    });
    Ok(out)
}

/// Backward pass. Accumulates into the weight and bias gradient slots of `w`
/// and returns the gradient with respect to `x`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &mut ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let pad = w.padding;
    conv2d_backward_padded(x, w, grad_out, pad)
}

pub fn conv2d_backward_padded<T: Element>(
    x: &Tensor<T>,
    w: &mut ConvWeights<T>,
    grad_out: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let p = plan(x, w, padding)?;
    let ConvGeometry {
        c_in,
        c_out,
        kernel: k,
        stride: s,
        padding: pad,
        groups,
    } = p.geo;
    if grad_out.shape() != [p.n, c_out, p.oh, p.ow] {
        return Err(Error::Shape(format!(
            "conv2d grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [p.n, c_out, p.oh, p.ow]
        )));
    }
    let (cig, cog) = (c_in / groups, c_out / groups);
    let (ih_sz, iw_sz, oh_sz, ow_sz) = (p.h, p.w, p.oh, p.ow);
    let in_plane = ih_sz * iw_sz;
    let out_plane = oh_sz * ow_sz;
    let xs = x.data();
    let gos = grad_out.data();
    let mut gx = vec![T::zero(); xs.len()];
    let pointwise = k == 1 && s == 1 && pad == 0;

    {
        let gb = w.bias.grad_mut();
        for n in 0..p.n {
            for co in 0..c_out {
                let base = (n * c_out + co) * out_plane;
                gb[co] += gos[base..base + out_plane].iter().copied().sum::<T>();
            }
        }
    }

    let (ws, gw) = w.weight.data_and_grad_mut();
    for n in 0..p.n {
        for ci in 0..c_in {
            let grp = ci / cig;
            let xbase = (n * c_in + ci) * in_plane;
            let xc = &xs[xbase..xbase + in_plane];
            let gxc = &mut gx[xbase..xbase + in_plane];
            for j in 0..cog {
                let co = grp * cog + j;
                let obase = (n * c_out + co) * out_plane;
                let goc = &gos[obase..obase + out_plane];
                let wbase = (ci * cog + j) * k * k;
                if pointwise {
                    let wv = ws[wbase];
                    let mut acc = T::zero();
                    for ((gxv, &xv), &gv) in gxc.iter_mut().zip(xc).zip(goc) {
                        *gxv += wv * gv;
                        acc += xv * gv;
                    }
                    gw[wbase] += acc;
                    continue;
                }
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, s, ih_sz, oh_sz);
                    for kw in 0..k {
                        let wi = wbase + kh * k + kw;
                        let wv = ws[wi];
                        let (ow_lo, ow_hi) = valid_range(kw, pad, s, iw_sz, ow_sz);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - pad;
                            let grow = &goc[oh * ow_sz..(oh + 1) * ow_sz];
                            let xrow = &xc[ih * iw_sz..(ih + 1) * iw_sz];
                            let gxrow = &mut gxc[ih * iw_sz..(ih + 1) * iw_sz];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + kw - pad;
                                let gv = grow[ow];
                                gxrow[iw] += wv * gv;
                                acc += xrow[iw] * gv;
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(shape: &[usize]) -> Tensor<f32> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn pointwise_scalar_identity() {
        let w = ConvWeights::from_parts(
            Tensor::full(&[1, 1, 1, 1], 2.0),
            Tensor::zeros(&[1]),
            1,
            0,
            1,
        )
        .unwrap();
        let y = conv2d(&ones(&[1, 1, 3, 3]), &w).unwrap();
        assert_eq!(y.data(), &[2.0; 9]);
    }

    #[test]
    fn counts_overlapping_taps() {
        let w = ConvWeights::from_parts(ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 1, 1)
            .unwrap();
        let y = conv2d(&ones(&[1, 1, 3, 3]), &w).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ConvWeights::<f32>::he_init(3, 4, 3, 1, 1, &mut rng).unwrap();
        let err = conv2d(&Tensor::zeros(&[1, 2, 5, 5]), &w).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn output_size_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, k, s) in [(8, 3, 2), (7, 5, 2), (9, 7, 1), (5, 1, 2), (4, 3, 2)] {
            let w = ConvWeights::<f32>::he_init(2, 3, k, s, 1, &mut rng).unwrap();
            let y = conv2d(&Tensor::zeros(&[1, 2, h, h]), &w).unwrap();
            let pad = (k - 1) / 2;
            assert_eq!(y.shape()[2], (h + 2 * pad - k) / s + 1);
        }
    }

    #[test]
    fn fast_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, k, s, g, h) in &[
            (3, 5, 3, 1, 1, 7),
            (4, 4, 5, 2, 4, 9),
            (6, 6, 7, 1, 6, 8),
            (4, 6, 1, 1, 2, 5),
            (2, 3, 3, 2, 1, 6),
            (3, 2, 1, 2, 1, 5),
        ] {
            let w = ConvWeights::<f32>::he_init(cin, cout, k, s, g, &mut rng).unwrap();
            let x = Tensor::randn(&[2, cin, h, h], 1.0, &mut rng);
            let a = conv2d(&x, &w).unwrap();
            let b = conv2d_reference(&x, &w).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "{:?}", (cin, cout, k, s, g));
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let w = ConvWeights::<f64>::he_init(c, c, 3, 2, c, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, c, 7, 7], 1.0, &mut rng);
        let y = conv2d(&x, &w).unwrap();
        for ch in 0..c {
            let wk = &w.weight.data()[ch * 9..(ch + 1) * 9];
            let single = ConvWeights::from_parts(
                Tensor::new(&[1, 1, 3, 3], wk.to_vec()).unwrap(),
                Tensor::new(&[1], vec![w.bias.data()[ch]]).unwrap(),
                2,
                1,
                1,
            )
            .unwrap();
            for n in 0..2 {
                let plane = 49;
                let xc = Tensor::new(
                    &[1, 1, 7, 7],
                    x.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane].to_vec(),
                )
                .unwrap();
                let yc = conv2d(&xc, &single).unwrap();
                let out_plane = 16;
                let got = &y.data()[(n * c + ch) * out_plane..(n * c + ch + 1) * out_plane];
                assert_eq!(got, yc.data());
            }
        }
    }

    #[test]
    fn rejects_even_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ConvWeights::<f32>::he_init(2, 2, 4, 1, 1, &mut rng).is_err());
    }
}
