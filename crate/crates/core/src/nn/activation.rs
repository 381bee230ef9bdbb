use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[inline]
fn relu6_scalar<T: Element>(v: T) -> T {
    v.max(T::zero()).min(T::of(6.0))
}

/// Subgradient of ReLU6: 1 strictly inside (0, 6), 0 elsewhere.
#[inline]
fn relu6_slope<T: Element>(v: T) -> T {
    if v > T::zero() && v < T::of(6.0) {
        T::one()
    } else {
        T::zero()
    }
}

pub fn relu6<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu6_scalar)
}

pub fn relu6_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv *= relu6_slope(xv);
    }
    g
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grafting coefficient must lie in [0, 1], got {eps}"
        )));
    }
    Ok(())
}

/// `relu6(x) + eps * (x - relu6(x))`; exactly `x` when `eps == 1`.
pub fn grafted<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_eps(eps)?;
    if eps == 1.0 {
        return Ok(x.clone());
    }
    let e = T::of(eps);
    Ok(x.map(|v| {
        let a = relu6_scalar(v);
        a + e * (v - a)
    }))
}

pub fn grafted_backward<T: Element>(
    x: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_eps(eps)?;
    if eps == 1.0 {
        return Ok(grad_out.clone());
    }
    let e = T::of(eps);
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv *= (T::one() - e) * relu6_slope(xv) + e;
    }
    Ok(g)
}
