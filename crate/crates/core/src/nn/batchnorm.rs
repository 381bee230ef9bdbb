use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// How a batch-norm layer treats the incoming batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and fold them into the running stats.
    Train,
    /// Normalise with the running statistics.
    Infer,
    /// Normalise with batch statistics and overwrite the running stats with
    /// the exact (biased) batch statistics. Feeding a whole calibration set
    /// as one batch yields exact per-layer dataset statistics in one pass.
    Calibrate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    border: usize,
}

/// Whether `(row, col)` of an `h x w` plane lies inside a border of width `b`.
#[inline]
fn interior(i: usize, w: usize, h: usize, b: usize) -> bool {
    let (r, c) = (i / w, i % w);
    r >= b && r < h - b && c >= b && c < w - b
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Replaces affine parameters and running statistics with random
    /// values (gamma in [0.5, 1.5], |beta| and |mean| below 0.5, var in
    /// [0.5, 2]). Used to probe folding away from the identity initialisation.
    pub fn randomize<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.channels();
        self.gamma = Tensor::from_fn(&[c], |_| T::of(rng.gen_range(0.5..1.5)));
        self.beta = Tensor::from_fn(&[c], |_| T::of(rng.gen_range(-0.5..0.5)));
        self.running_mean = Tensor::from_fn(&[c], |_| T::of(rng.gen_range(-0.5..0.5)));
        self.running_var = Tensor::from_fn(&[c], |_| T::of(rng.gen_range(0.5..2.0)));
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Per-channel `(scale, shift)` such that infer-mode output is
    /// `scale * x + shift`. Computed in f64.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma.data()[c].f64()
                / (self.running_var.data()[c].f64() + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[c].f64() - self.running_mean.data()[c].f64() * s);
        }
        (scale, shift)
    }

    pub fn cast<U: Element>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        self.forward_bordered(x, mode, 0)
    }

    /// Like [`BatchNormState::forward`], but batch statistics are taken over
    /// the interior only, excluding a frame of width `border`. The whole
    /// plane is normalised.
    pub fn forward_bordered(
        &mut self,
        x: &Tensor<T>,
        mode: BnMode,
        border: usize,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::dim("batch_norm channels (axis 1)", self.channels(), c));
        }
        if 2 * border >= h || 2 * border >= w {
            return Err(Error::Shape(format!("border {border} too wide for {h}x{w} plane")));
        }
        let plane = h * w;
        let count = n * (h - 2 * border) * (w - 2 * border);
        let mask: Vec<bool> = (0..plane).map(|i| interior(i, w, h, border)).collect();
        let xs = x.data();
        let batch_stats = mode != BnMode::Infer;
        if mode == BnMode::Train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        if batch_stats {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    s += xs[base..base + plane]
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| v.f64())
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    ss += xs[base..base + plane]
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| (v.f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean.data()[ch].f64();
                var[ch] = self.running_var.data()[ch].f64();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let mut x_hat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (m, is) = (T::of(mean[ch]), inv_std[ch]);
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for i in base..base + plane {
                    let xh = (xs[i] - m) * is;
                    x_hat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        match mode {
            BnMode::Train => {
                let mom = self.momentum;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::of((1.0 - mom) * rm.f64() + mom * mean[ch]);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::of((1.0 - mom) * rv.f64() + mom * var[ch] * unbias);
                }
            }
            BnMode::Calibrate => {
                for ch in 0..c {
                    self.running_mean.data_mut()[ch] = T::of(mean[ch]);
                    self.running_var.data_mut()[ch] = T::of(var[ch]);
                }
            }
            BnMode::Infer => {}
        }
        Ok((
            Tensor::new(x.shape(), out)?,
            BnCache {
                x_hat,
                inv_std,
                batch_stats,
                border,
            },
        ))
    }

    /// Backward for both batch-statistics and running-statistics forwards.
    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = grad_out.dims4()?;
        if c != self.channels() || cache.x_hat.len() != grad_out.numel() {
            return Err(Error::dim("batch_norm grad channels", self.channels(), c));
        }
        let plane = h * w;
        let b = cache.border;
        let count = T::of((n * (h - 2 * b) * (w - 2 * b)) as f64);
        let mask: Vec<bool> = (0..plane).map(|i| interior(i, w, h, b)).collect();
        let gos = grad_out.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    sum_dy[ch] += gos[i];
                    sum_dy_xh[ch] += gos[i] * cache.x_hat[i];
                }
            }
        }
        self.gamma.accumulate_grad(&sum_dy_xh);
        self.beta.accumulate_grad(&sum_dy);
        let mut gx = vec![T::zero(); gos.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let k = self.gamma.data()[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let (sd, sdx) = (sum_dy[ch] / count, sum_dy_xh[ch] / count);
                    for (i, &inside) in (base..base + plane).zip(&mask) {
                        gx[i] = if inside {
                            k * (gos[i] - sd - cache.x_hat[i] * sdx)
                        } else {
                            k * gos[i]
                        };
                    }
                } else {
                    for i in base..base + plane {
                        gx[i] = k * gos[i];
                    }
                }
            }
        }
        Tensor::new(grad_out.shape(), gx)
    }
}
