//! Bias-corrected Adam over flat f64 parameter blocks.

use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            hyper: AdamHyper::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; `block` names the parameter block in diagnostics.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, block: &str) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "param/state shape mismatch");
        assert_eq!(grads.len(), self.m.len(), "grad/state shape mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                block: block.to_string(),
            });
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        Ok(())
    }

    /// Same update over a Vec3 block viewed as 3N scalars.
    pub fn step_vec3(
        &mut self,
        params: &mut [Vec3],
        grads: &[Vec3],
        lr: f64,
        block: &str,
    ) -> Result<()> {
        assert_eq!(params.len() * 3, self.m.len(), "param/state shape mismatch");
        let mut flat_p: Vec<f64> = Vec::with_capacity(params.len() * 3);
        let mut flat_g: Vec<f64> = Vec::with_capacity(params.len() * 3);
        for (p, g) in params.iter().zip(grads) {
            flat_p.extend_from_slice(&[p.x, p.y, p.z]);
            flat_g.extend_from_slice(&[g.x, g.y, g.z]);
        }
        self.step(&mut flat_p, &flat_g, lr, block)?;
        for (i, p) in params.iter_mut().enumerate() {
            *p = Vec3::new(flat_p[3 * i], flat_p[3 * i + 1], flat_p[3 * i + 2]);
        }
        Ok(())
    }
}

/// Linear decay from `initial` at iteration 0 to `final_value` at the last
/// iteration of the stage.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_value: f64,
    pub iterations: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, final_value: f64, iterations: usize) -> Self {
        LrSchedule {
            initial,
            final_value,
            iterations,
        }
    }

    pub fn at(&self, iter: usize) -> f64 {
        if self.iterations <= 1 {
            return self.initial;
        }
        let f = iter as f64 / (self.iterations - 1) as f64;
        self.initial + (self.final_value - self.initial) * f
    }
}
