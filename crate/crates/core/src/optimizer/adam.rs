use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdamError {
    #[error("beta1 and beta2 must lie in [0, 1), got {0} and {1}")]
    Beta(f32, f32),
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f32),
    #[error("learning rate must be finite, got {0}")]
    LearningRate(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), AdamError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AdamError::Beta(self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(AdamError::Epsilon(self.eps));
        }
        if !self.lr.is_finite() {
            return Err(AdamError::LearningRate(self.lr));
        }
        Ok(())
    }
}

/// `(1 - beta1^t, 1 - beta2^t)` with the powers accumulated in f64.
pub fn bias_corrections(cfg: &AdamConfig, step: u64) -> (f32, f32) {
    let (mut p1, mut p2) = (1.0f64, 1.0f64);
    for _ in 0..step {
        p1 *= cfg.beta1 as f64;
        p2 *= cfg.beta2 as f64;
    }
    ((1.0 - p1) as f32, (1.0 - p2) as f32)
}

/// In-place Adam step `step` (1-based) over equal-length slices.
pub fn adam_update(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], cfg: &AdamConfig, step: u64) {
    assert!(step >= 1, "Adam steps are 1-based");
    assert!(p.len() == m.len() && m.len() == v.len() && v.len() == g.len(), "length mismatch");
    let (bc1, bc2) = bias_corrections(cfg, step);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1, 1.0 - b2);
    for i in 0..p.len() {
        let gi = g[i];
        let mi = b1 * m[i] + c1 * gi;
        let vi = b2 * v[i] + c2 * (gi * gi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        m[i] = mi;
        v[i] = vi;
    }
}
