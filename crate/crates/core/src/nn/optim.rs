//! Adam-family optimizers over flat parameter buffers.

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Adamax: Adam with an infinity-norm second moment.
///
/// `u ← max(β₂·u, |g|)`, `x ← x − lr/(1−β₁ᵗ) · m/(u + eps)`.
#[derive(Debug, Clone)]
pub struct Adamax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<f64>,
    u: Vec<f64>,
}

impl Adamax {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, len: usize) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            u: vec![0.0; len],
        }
    }

    /// Returns the update `Δ` such that the new iterate is `x − Δ`.
    pub fn update(&mut self, g: &[f64]) -> Vec<f64> {
        self.step += 1;
        let corr = self.lr / (1.0 - self.beta1.powi(self.step as i32));
        let mut out = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.u[i] = (self.beta2 * self.u[i]).max(g[i].abs());
            out.push(corr * self.m[i] / (self.u[i] + self.eps));
        }
        out
    }
}
