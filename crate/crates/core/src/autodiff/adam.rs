use super::tape::AutodiffError;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled L2 coefficient, applied as `p -= lr * wd * p` before the
    /// moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers for a fixed list of parameters.
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before `apply`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place. `name` is used only for diagnostics.
    pub fn apply(
        &mut self,
        index: usize,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
    ) -> Result<(), AutodiffError> {
        if !grad.all_finite() {
            return Err(AutodiffError::NonFiniteGradient {
                name: name.to_string(),
            });
        }
        debug_assert_eq!(param.shape(), grad.shape());
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let m = &mut self.first[index];
        let v = &mut self.second[index];
        for (((p, g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *p -= c.learning_rate * c.weight_decay * *p;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

/// One Adam step over parallel parameter/gradient slices.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Tensor],
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() {
        return Err(AutodiffError::GradientCountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.apply(i, &format!("param[{i}]"), p, g)?;
    }
    Ok(())
}
