use super::{NnError, ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers follow the parameter set's
/// name order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    /// Applies one update to every tensor in `params`, then clears their
    /// gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<(), NnError> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(NnError::MissingGrad(name.clone()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, (_, t))| m.len() != t.numel()) {
            return Err(NnError::InvalidArgument { op: "adam_step", message: "parameter set changed between steps".into() });
        }
        self.step_count += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(self.step_count as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.step_count as i32));
        let (lr, eps) = (F::of(c.lr), F::of(c.epsilon));
        let one = F::one();
        for ((_, t), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (vals, grad) = t.values_and_grad();
            let grad = grad.expect("checked above");
            for i in 0..vals.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tape, Tensor};

    fn single(theta: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(theta));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.37);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            p.get_mut("theta").unwrap().accumulate_grad(&[0.0]).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().data(), &[0.37]);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        p.get_mut("theta").unwrap().accumulate_grad(&[0.5]).unwrap();
        opt.step(&mut p).unwrap();
        let delta = p.get("theta").unwrap().data()[0] - 1.0;
        assert!((delta + 0.001).abs() < 1e-7, "{delta}");
        assert!(p.get("theta").unwrap().grad().is_none());
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut p = single(1.0);
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        assert_eq!(opt.step(&mut p).unwrap_err(), NnError::MissingGrad("theta".into()));
    }

    #[test]
    fn descends_quadratic() {
        // Adam moves at most ~lr per step, so 200 steps need lr well above 1e-3.
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        for _ in 0..200 {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let th = b.get("theta").unwrap();
            let f = tape.mul(th, th).unwrap();
            let g = tape.backward(f).unwrap();
            p.accumulate(&g, &b).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!(p.get("theta").unwrap().data()[0].abs() < 0.5);
        assert!(opt.second_moments()[0].iter().all(|&v| v >= 0.0));
    }
}
