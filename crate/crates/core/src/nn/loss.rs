//! Pooling head and the two training losses.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::of(1.0 / plane as f64);
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::of(1.0 / plane as f64);
    let mut g = Vec::with_capacity(grad_out.numel() * plane);
    for &v in grad_out.data() {
        g.extend(std::iter::repeat(v * inv).take(plane));
    }
    Tensor::new(input_shape, g)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Row-wise softmax of a `[N, K]` tensor, computed in f64.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|r| {
            let row: Vec<f64> = r.iter().map(|v| v.f64()).collect();
            log_softmax_row(&row).into_iter().map(f64::exp).collect()
        })
        .collect())
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (r, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let row: Vec<f64> = r.iter().map(|v| v.f64()).collect();
        let lp = log_softmax_row(&row);
        loss -= lp[y];
        for (j, l) in lp.iter().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad.push(T::of((l.exp() - onehot) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}

/// `KL(teacher || student)` averaged over the batch, with the gradient with
/// respect to the student logits only. The teacher is treated as a constant.
pub fn kl_divergence<T: Element>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = student.dims2()?;
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (s, t) in student.data().chunks_exact(k).zip(teacher.data().chunks_exact(k)) {
        let ls = log_softmax_row(&s.iter().map(|v| v.f64()).collect::<Vec<_>>());
        let lt = log_softmax_row(&t.iter().map(|v| v.f64()).collect::<Vec<_>>());
        for (a, b) in ls.iter().zip(&lt) {
            let pt = b.exp();
            if pt > 0.0 {
                loss += pt * (b - a);
            }
            grad.push(T::of((a.exp() - pt) / n as f64));
        }
    }
    Ok(((loss / n as f64).max(0.0), Tensor::new(&[n, k], grad)?))
}

pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|r| {
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_logits_have_zero_kl() {
        let l = Tensor::new(&[2, 3], vec![0.3f64, -1.0, 2.0, 5.0, 5.0, -3.0]).unwrap();
        let (loss, grad) = kl_divergence(&l, &l).unwrap();
        assert!(loss.abs() <= 1e-9);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn confident_correct_logits_have_vanishing_ce() {
        let l = Tensor::new(&[1, 3], vec![60.0f64, -60.0, -60.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn uniform_two_class_is_ln2() {
        let l = Tensor::new(&[1, 2], vec![0.0f32, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let l = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn pool_averages_planes() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5, 5.5]);
    }
}
