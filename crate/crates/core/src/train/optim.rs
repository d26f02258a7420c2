use crate::linalg::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Starts a new step; call before the per-parameter updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates parameter `i` by `lr · m̂ / (√v̂ + ε)`. Parameters must keep their
    /// indices across steps.
    pub fn update(&mut self, i: usize, p: &mut Matrix, g: &Matrix, lr: f64) {
        assert!(self.t > 0, "tick before update");
        assert_eq!(p.shape(), g.shape());
        while self.m.len() <= i {
            self.m.push(Matrix::zeros(0, 0));
            self.v.push(Matrix::zeros(0, 0));
        }
        if self.m[i].shape() != p.shape() {
            assert!(self.m[i].is_empty(), "parameter {i} changed shape between steps");
            self.m[i] = Matrix::zeros(p.rows(), p.cols());
            self.v[i] = Matrix::zeros(p.rows(), p.cols());
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let m = self.m[i].as_mut_slice();
        let v = self.v[i].as_mut_slice();
        for (k, (w, &g)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
        }
    }

    /// One step over a whole parameter list.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lr.len());
        self.tick();
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, grads[i], lr[i]);
        }
    }
}
