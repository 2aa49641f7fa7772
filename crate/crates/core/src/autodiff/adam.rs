use super::tensor::Tensor;

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Moments are allocated lazily on the first
    /// call and must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "parameter {i} shape");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[Tensor::zeros(1, 2)]);
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    /// Hand-computed Adam trajectory for a constant gradient.
    fn oracle(lr: f64, g: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn constant_gradient_steps() {
        let lr = 0.01;
        let expected = oracle(lr, 0.37, 2);
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(lr);
        adam.step(&mut [&mut p], &[Tensor::scalar(0.37)]);
        // First bias-corrected step has magnitude lr·|g|/(|g|+eps) ≈ lr.
        assert!((p.item() + lr).abs() < 1e-9);
        assert!((p.item() - expected[0]).abs() < 1e-15);
        adam.step(&mut [&mut p], &[Tensor::scalar(0.37)]);
        assert!((p.item() - expected[1]).abs() < 1e-15);
        let second = expected[1] - expected[0];
        assert!((second.abs() - lr).abs() < 1e-8);
    }
}
