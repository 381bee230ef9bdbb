use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Affine map `y = x W + b` with `W: [D, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn he_init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[d_in, d_out], (2.0 / d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Element>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fully_connected(x, &self.weight, &self.bias)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw, gb) = fully_connected_backward(x, &self.weight, grad_out)?;
        self.weight.accumulate_grad(gw.data());
        self.bias.accumulate_grad(gb.data());
        Ok(gx)
    }
}

fn check<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = x.dims2()?;
    let (dw, m) = w.dims2()?;
    if d != dw {
        return Err(Error::dim("fully_connected input features (axis 1)", dw, d));
    }
    Ok((n, d, m))
}

pub fn fully_connected<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = check(x, w)?;
    if b.numel() != m {
        return Err(Error::dim("fully_connected bias", m, b.numel()));
    }
    let (xs, ws) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        out.extend_from_slice(b.data());
        let orow = &mut out[r * m..(r + 1) * m];
        for k in 0..d {
            let xv = xs[r * d + k];
            for (o, &wv) in orow.iter_mut().zip(&ws[k * m..(k + 1) * m]) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn fully_connected_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d, m) = check(x, w)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::Shape(format!(
            "fully_connected grad_out {:?}, expected [{n}, {m}]",
            grad_out.shape()
        )));
    }
    let (xs, ws, gs) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * d];
    let mut gw = vec![T::zero(); d * m];
    let mut gb = vec![T::zero(); m];
    for r in 0..n {
        let grow = &gs[r * m..(r + 1) * m];
        for (a, &g) in gb.iter_mut().zip(grow) {
            *a += g;
        }
        for k in 0..d {
            let wrow = &ws[k * m..(k + 1) * m];
            gx[r * d + k] = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            let xv = xs[r * d + k];
            for (a, &g) in gw[k * m..(k + 1) * m].iter_mut().zip(grow) {
                *a += xv * g;
            }
        }
    }
    Ok((
        Tensor::new(&[n, d], gx)?,
        Tensor::new(&[d, m], gw)?,
        Tensor::new(&[m], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_is_passthrough() {
        let x = Tensor::new(&[2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = fully_connected(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn two_layers_collapse_into_one() {
        // (x W1 + b1) W2 + b2 == x (W1 W2) + (b1 W2 + b2)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, h, m) = (5, 7, 4);
        let x = Tensor::<f32>::randn(&[8, d], 1.0, &mut rng);
        let w1 = Tensor::<f32>::randn(&[d, h], 0.5, &mut rng);
        let b1 = Tensor::<f32>::randn(&[h], 0.5, &mut rng);
        let w2 = Tensor::<f32>::randn(&[h, m], 0.5, &mut rng);
        let b2 = Tensor::<f32>::randn(&[m], 0.5, &mut rng);
        let two = fully_connected(&fully_connected(&x, &w1, &b1).unwrap(), &w2, &b2).unwrap();
        let w_star = fully_connected(&w1, &w2, &Tensor::zeros(&[m])).unwrap();
        let b_star = fully_connected(&b1.clone().reshape(&[1, h]).unwrap(), &w2, &b2)
            .unwrap()
            .reshape(&[m])
            .unwrap();
        let one = fully_connected(&x, &w_star, &b_star).unwrap();
        assert!(two.max_abs_diff(&one) <= 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let w = Tensor::<f32>::zeros(&[4, 2]);
        assert!(fully_connected(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}
