use super::{Param, Real};

/// Adam with optional L2 weight decay folded into the gradient (torch `Adam(weight_decay=..)`).
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Apply one update to every trainable parameter, in the order given. The order must be
    /// stable across calls.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        let trainable: Vec<&mut &mut Param<F>> = params.iter_mut().filter(|p| p.trainable).collect();
        if self.first.is_empty() {
            self.first = trainable.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), trainable.len(), "adam: parameter set changed");
        self.step += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let bc1 = F::lit(1.0 - self.beta1.powi(self.step));
        let bc2 = F::lit(1.0 - self.beta2.powi(self.step));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        let wd = F::lit(self.weight_decay);
        for ((p, m), v) in trainable.into_iter().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let mut g = p.grad[i];
                if self.weight_decay != 0.0 {
                    g += wd * p.value[i];
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step has magnitude lr * g/|g| (up to eps).
        let mut p = Param::<f64>::new("w", vec![2], vec![1.0, -1.0], true);
        p.grad = vec![0.3, -5.0];
        let mut opt = Adam::new(0.01, 0.0);
        opt.step(&mut [&mut p]);
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::<f64>::new("w", vec![1], vec![3.0], true);
        let mut opt = Adam::new(0.05, 0.0);
        for _ in 0..2000 {
            p.grad = vec![2.0 * (p.value[0] - 1.0)];
            opt.step(&mut [&mut p]);
        }
        assert!((p.value[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut buf = Param::<f32>::new("running_mean", vec![1], vec![0.5], false);
        let mut w = Param::<f32>::new("w", vec![1], vec![1.0], true);
        w.grad = vec![1.0];
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut buf, &mut w]);
        assert_eq!(buf.value, vec![0.5]);
        assert!(w.value[0] < 1.0);
    }
}
