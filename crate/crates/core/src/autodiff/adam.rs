use super::{AutodiffError, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let zeros: Vec<Vec<F>> = params
            .into_iter()
            .map(|p| vec![F::zero(); p.numel()])
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
///
/// Fails without touching anything if any parameter lacks a gradient.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    state: &mut AdamState<F>,
) -> Result<(), AutodiffError> {
    if params.len() != state.first_moment.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} parameters for state of {}",
                params.len(),
                state.first_moment.len()
            ),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(AutodiffError::MissingGradient(i));
        }
        if p.numel() != state.first_moment[i].len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {i} has {} values", p.numel()),
            });
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    let correction1 = F::lit(1.0 - c.beta1.powi(t));
    let correction2 = F::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (F::lit(c.lr), F::lit(c.eps));

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let grad = p.grad.as_mut().expect("checked above");
        for (((w, g), mi), vi) in p.values.iter_mut().zip(grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * *g;
            *vi = b2 * *vi + one_b2 * *g * *g;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            *g = F::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap().param();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        p.grad = Some(vec![0.0; 3]);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.values, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap().param();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..50 {
            p.grad = Some(vec![0.3, -2.0]);
            adam_step(&mut [&mut p], &mut state).unwrap();
        }
        assert!(p.values[0] < 0.0);
        assert!(p.values[1] > 0.0);
        assert_eq!(p.grad, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = Tensor::scalar(0.0f64).param();
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(config, [&p]);
        for _ in 0..500 {
            let g = 2.0 * (p.values[0] - 3.0);
            p.grad = Some(vec![g]);
            adam_step(&mut [&mut p], &mut state).unwrap();
        }
        assert!((p.values[0] - 3.0).abs() < 1e-3, "{}", p.values[0]);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut a = Tensor::scalar(1.0f64).param();
        let mut b = Tensor::scalar(1.0f64).param();
        let mut state = AdamState::new(AdamConfig::default(), [&a, &b]);
        a.grad = Some(vec![1.0]);
        assert_eq!(
            adam_step(&mut [&mut a, &mut b], &mut state),
            Err(AutodiffError::MissingGradient(1))
        );
        assert_eq!(a.values, vec![1.0]);
        assert_eq!(state.step, 0);
    }
}
