//! First/second-moment adaptive gradient descent.

pub(crate) struct Adam {
    lr: f64,
    /// Multiplier on the base rate, for schedules.
    pub lr_scale: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let u = self.update(grads);
        for (p, du) in params.iter_mut().zip(u.iter()) {
            *p -= du;
        }
    }

    /// The raw update vector (to subtract), for parameters that live on a
    /// manifold rather than in a flat array.
    pub fn update(&mut self, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = vec![0.0; grads.len()];
        for i in 0..grads.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            out[i] = self.lr * self.lr_scale * m_hat / (v_hat.sqrt() + self.eps);
        }
        out
    }
}
