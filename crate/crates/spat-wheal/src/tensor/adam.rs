//! Adam optimizer state and update step.

use super::{Element, Tensor, TensorError};

/// Per-parameter first/second moment estimates plus hyperparameters.
/// Moments start at zero; the step counter increases by one per
/// [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> AdamState<E> {
    /// State for parameters with the given sizes, using the standard
    /// defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: E, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            step: 0,
            m: param_sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
        }
    }

    pub fn for_params(lr: E, params: &[&Tensor<E>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(lr, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Each parameter tensor is replaced by a
/// fresh leaf holding the updated values (tensors stay immutable after
/// creation); the moment estimates mutate in place.
pub fn adam_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[&[E]],
    state: &mut AdamState<E>,
) -> Result<(), TensorError> {
    if params.len() != state.m.len() || params.len() != grads.len() {
        return Err(TensorError::Optimizer(format!(
            "expected {} parameters, got {} with {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != state.m[i].len() {
            return Err(TensorError::Optimizer(format!(
                "parameter {i} has {} values but state holds {}",
                p.len(),
                state.m[i].len()
            )));
        }
        if grads[i].len() != p.len() {
            return Err(TensorError::Optimizer(format!(
                "gradient {i} has {} values but parameter has {}",
                grads[i].len(),
                p.len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = E::one() - state.beta1.powi(t);
    let bc2 = E::one() - state.beta2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let mut data = p.data().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let g = grads[i][j];
            m[j] = state.beta1 * m[j] + (E::one() - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (E::one() - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        **p = Tensor::param(p.shape(), data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // at t=1 the bias corrections cancel: delta = -lr * g / (|g| + eps')
        let mut p = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = vec![0.7, -0.3, 2.0];
        let mut state = AdamState::new(0.01, &[3]);
        let before = p.data().to_vec();
        {
            let mut refs = [&mut p];
            adam_step(&mut refs, &[&g], &mut state).unwrap();
        }
        for i in 0..3 {
            let delta = p.data()[i] - before[i];
            let expected = -0.01 * g[i].signum();
            assert!(
                (delta - expected).abs() < 1e-6,
                "delta {delta} vs {expected}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f64>::param(&[2], vec![3.0, -4.0]).unwrap();
        let g = vec![0.0, 0.0];
        let mut state = AdamState::new(0.1, &[2]);
        for _ in 0..5 {
            let mut refs = [&mut p];
            adam_step(&mut refs, &[&g], &mut state).unwrap();
        }
        assert_eq!(p.data(), &[3.0, -4.0]);
    }

    #[test]
    fn matches_scalar_reference_trace_on_quadratic() {
        // minimize f(x) = x^2 from x = 1 with lr = 0.1 for 10 steps,
        // against an independently coded scalar Adam
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            trace.push(x_ref);
        }

        let mut p = Tensor::<f64>::param(&[1], vec![1.0]).unwrap();
        let mut state = AdamState::new(lr, &[1]);
        for step in 0..10 {
            let g = vec![2.0 * p.data()[0]];
            let mut refs = [&mut p];
            adam_step(&mut refs, &[&g], &mut state).unwrap();
            assert!(
                (p.data()[0] - trace[step]).abs() <= 1e-10,
                "step {step}: {} vs {}",
                p.data()[0],
                trace[step]
            );
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::param(&[2], vec![0.0, 0.0]).unwrap();
        let g = vec![1.0, 2.0, 3.0];
        let mut state = AdamState::new(0.1, &[2]);
        let mut refs = [&mut p];
        assert!(adam_step(&mut refs, &[&g], &mut state).is_err());
    }
}
