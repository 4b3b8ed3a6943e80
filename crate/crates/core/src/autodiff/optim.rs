use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_pair<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::shape(format!(
            "gradient dims {:?} do not match parameter dims {:?}",
            g.dims(),
            p.dims()
        )));
    }
    Ok(())
}

/// `p <- p - lr * (g + weight_decay * p)` for every tensor pair.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        check_pair(p, g)?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (d + weight_decay * *w);
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::zero(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("parameter and gradient lists differ in length"));
        }
        for (p, g) in params.iter().zip(grads) {
            check_pair(p, g)?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (T::one() - self.beta1) * d;
                *v = self.beta2 * *v + (T::one() - self.beta2) * d * d;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_step() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.1, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![2], vec![0.3f64, -7.0]).unwrap()];
        let before = p.clone();
        sgd_step(&mut p, &[Tensor::zeros(&[2]).unwrap()], 0.5, 0.0).unwrap();
        assert!(p[0].bit_eq(&before[0]));
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = vec![Tensor::scalar(2.0f64)];
        sgd_step(&mut p, &[Tensor::scalar(0.0)], 0.1, 0.5).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2]).unwrap()], 0.1, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &[Tensor::scalar(5.0)]).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
    }
}
