//! Loss functions and their gradients with respect to model outputs.
//!
//! Batch losses are means over samples; per-sample squared errors are sums
//! over all tensor elements.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::InvalidLabel { label, classes })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidStage(format!("kd_alpha must lie in [0, 1], got {alpha}")))
    }
}

/// `log(sum(exp(z / tau)))`, computed stably.
fn log_sum_exp<T: Scalar>(logits: &[T], tau: T) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|&v| (v / tau - max).exp()).sum::<T>().ln()
}

/// Temperature-softened softmax.
pub fn softened_distribution<T: Scalar>(logits: &[T], tau: f64) -> Result<Vec<T>> {
    check_tau(tau)?;
    let t = T::from_f64_lossy(tau);
    let lse = log_sum_exp(logits, t);
    Ok(logits.iter().map(|&v| (v / t - lse).exp()).collect())
}

/// Cross entropy `-log softmax(logits)[label]`.
pub fn ce_loss<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits, T::one()) - logits[label])
}

/// `KL(q || p) = sum q log(q / p)` with the convention `0 log 0 = 0`.
pub fn kl_divergence<T: Scalar>(q: &[T], p: &[T]) -> T {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > T::zero())
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.ln()))
        .sum()
}

/// `alpha * CE(student) + (1 - alpha) * tau^2 * KL(q_teacher || p_student)`.
pub fn kd_loss<T: Scalar>(student: &[T], teacher: &[T], label: usize, alpha: f64, tau: f64) -> Result<T> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("student has {} logits, teacher {}", student.len(), teacher.len())));
    }
    let ce = ce_loss(student, label)?;
    let q = softened_distribution(teacher, tau)?;
    let p = softened_distribution(student, tau)?;
    let a = T::from_f64_lossy(alpha);
    let soft = T::from_f64_lossy((1.0 - alpha) * tau * tau) * kl_divergence(&q, &p);
    Ok(a * ce + soft)
}

fn rows<'a, T: Scalar>(logits: &'a Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::Shape(format!("logits {:?} do not match {} labels", logits.shape(), labels.len())));
    }
    Ok((logits.batch(), logits.shape()[1]))
}

/// Mean cross entropy over a batch and its gradient w.r.t. the logits.
pub fn ce_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = rows(logits, labels)?;
    let inv_n = T::one() / T::from_usize(n).expect("batch");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let z = logits.sample(i);
        total += ce_loss(z, label)?;
        let p = softened_distribution(z, 1.0)?;
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, (gj, pj)) in g.iter_mut().zip(p).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *gj = (pj - target) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean distillation loss over a batch and its gradient w.r.t. the student logits.
pub fn kd_batch<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<(T, Tensor<T>)> {
    let (n, c) = rows(student, labels)?;
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!("teacher logits {:?} vs student {:?}", teacher.shape(), student.shape())));
    }
    let inv_n = T::one() / T::from_usize(n).expect("batch");
    let a = T::from_f64_lossy(alpha);
    let soft_scale = T::from_f64_lossy((1.0 - alpha) * tau);
    let mut grad = Tensor::zeros(student.shape());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let (zs, zt) = (student.sample(i), teacher.sample(i));
        total += kd_loss(zs, zt, label, alpha, tau)?;
        let p1 = softened_distribution(zs, 1.0)?;
        let ps = softened_distribution(zs, tau)?;
        let qt = softened_distribution(zt, tau)?;
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            let onehot = if j == label { T::one() } else { T::zero() };
            g[j] = (a * (p1[j] - onehot) + soft_scale * (ps[j] - qt[j])) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Per-sample sum of squared differences, averaged over the batch, with the
/// gradient w.r.t. `prediction` scaled by `lambda`.
pub fn squared_error_batch<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>, lambda: f64) -> Result<(T, Tensor<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", prediction.shape(), target.shape())));
    }
    let inv_n = T::one() / T::from_usize(prediction.batch()).expect("batch");
    let lam = T::from_f64_lossy(lambda);
    let two = T::from_f64_lossy(2.0);
    let mut sum = T::zero();
    let mut grad = Tensor::zeros(prediction.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(prediction.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = two * lam * d * inv_n;
    }
    Ok((lam * sum * inv_n, grad))
}

/// One term of a hint-based distillation loss: a weighted student/teacher output pair.
#[derive(Debug, Clone)]
pub struct HookTerm<'a, T> {
    pub lambda: f64,
    pub teacher: &'a Tensor<T>,
    pub student: &'a Tensor<T>,
}

/// `sum_j lambda_j * ||t_j - s_j||^2`, averaged over the batch.
pub fn ghnd_value<T: Scalar>(terms: &[HookTerm<'_, T>]) -> Result<T> {
    let mut total = T::zero();
    for term in terms {
        if term.lambda < 0.0 {
            return Err(Error::InvalidStage(format!("hook weights must be non-negative, got {}", term.lambda)));
        }
        total += squared_error_batch(term.student, term.teacher, term.lambda)?.0;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let uniform = [0.3f64; 10];
        assert!((ce_loss(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&[1.0f64, 2.0], 1).unwrap() - 0.313262).abs() < 1e-6);
        assert!(ce_loss(&[0.0f64, 1e4], 1).unwrap() < 1e-12);
        assert!(matches!(ce_loss(&[0.0f64; 3], 3), Err(Error::InvalidLabel { label: 3, classes: 3 })));
    }

    #[test]
    fn softened_examples() {
        let p = softened_distribution(&[0.0f64, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let flat = softened_distribution(&[1.0f64, -4.0, 9.0, 0.5], 1e6).unwrap();
        assert!(flat.iter().all(|v| (v - 0.25).abs() < 1e-3));
        assert!(matches!(softened_distribution(&[0.0f64], 0.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn kd_examples() {
        let t = [0.0f64, 3f64.ln()];
        let v = kd_loss(&[0.0f64, 0.0], &t, 1, 0.5, 1.0).unwrap();
        assert!((v - 0.411980).abs() < 1e-6, "{v}");
        let z = [0.4f64, -1.0, 2.0];
        assert_eq!(kd_loss(&z, &[9.0, 1.0, 0.0], 2, 1.0, 3.0).unwrap(), ce_loss(&z, 2).unwrap());
        assert!((kd_loss(&z, &z, 0, 0.3, 2.0).unwrap() - 0.3 * ce_loss(&z, 0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ghnd_hand_example() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let s = Tensor::zeros(&[1, 2]);
        let v = ghnd_value(&[HookTerm { lambda: 1.0, teacher: &t, student: &s }]).unwrap();
        assert_eq!(v, 5.0);
        let zero = ghnd_value(&[HookTerm { lambda: 0.0, teacher: &t, student: &s }]).unwrap();
        assert_eq!(zero, 0.0);
    }
}
