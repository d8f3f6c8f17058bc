use super::{Result, Tensor, TensorError};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Moments are allocated to match `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                (
                    Tensor::zeros(p.rows(), p.cols()),
                    Tensor::zeros(p.rows(), p.cols()),
                )
            })
            .unzip();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// Apply one update. Parameters whose gradient is `None` are left
    /// untouched, moments included. If any gradient is non-finite the whole
    /// step is rejected and nothing changes.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() || g.shape() != self.m[i].shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape(),
                        right: g.shape(),
                    });
                }
                if !g.is_finite() {
                    return Err(TensorError::NonFinite {
                        what: format!("gradient of parameter {i}"),
                    });
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written independently of the tensor implementation.
    fn scalar_adam(mut w: f64, grad: impl Fn(f64) -> f64, steps: u32) -> f64 {
        let (lr, b1, b2, eps) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = grad(w);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn first_step_from_zero() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut adam = AdamState::new([&p], 0.001);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-15);
        assert!((p.item().unwrap() + 0.0009999999).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::row(vec![0.5, -2.0]);
        let g = Tensor::zeros(1, 2);
        let mut adam = AdamState::new([&p], 0.001);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -2.0]);
    }

    #[test]
    fn three_steps_on_square_match_oracle() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new([&p], 0.001);
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * p.item().unwrap());
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        let oracle = scalar_adam(1.0, |w| 2.0 * w, 3);
        assert!((p.item().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = Tensor::row(vec![1.0, 2.0]);
        let mut q = Tensor::scalar(3.0);
        let good = Tensor::scalar(1.0);
        let bad = Tensor::row(vec![f64::NAN, 0.0]);
        let mut adam = AdamState::new([&p, &q], 0.001);
        let err = adam.step(&mut [&mut p, &mut q], &[Some(&bad), Some(&good)]);
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
        assert_eq!(adam.t, 0);
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(q.item().unwrap(), 3.0);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut q = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut adam = AdamState::new([&p, &q], 0.001);
        adam.step(&mut [&mut p, &mut q], &[None, Some(&g)]).unwrap();
        assert_eq!(p.item().unwrap(), 1.0);
        assert!(q.item().unwrap() < 1.0);
    }
}
