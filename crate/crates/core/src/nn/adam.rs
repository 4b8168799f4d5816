use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Gradients, LayerParams, MlpModel, NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecayMode {
    /// `p <- p - lr * wd * p`, applied before the Adam delta.
    #[default]
    Decoupled,
    /// `g <- g + wd * p`, folded into the moments.
    Coupled,
}

/// First/second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<LayerParams<T>>,
    pub second_moment: Vec<LayerParams<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &MlpModel<T>, config: AdamConfig) -> Self {
        let zeros: Vec<_> =
            model.layers().iter().map(|l| LayerParams::zeros(l.out_dim(), l.in_dim())).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step_count: 0, config }
    }
}

/// One bias-corrected Adam update of every parameter in `model`.
pub fn adam_step<T: Scalar>(
    model: &mut MlpModel<T>,
    state: &mut AdamState<T>,
    grads: &Gradients<T>,
    learning_rate: f64,
    weight_decay: f64,
    decay_mode: WeightDecayMode,
) -> Result<(), NnError> {
    grads.matches(model)?;
    if state.first_moment.len() != grads.layers.len() {
        return Err(NnError::ShapeMismatch(0));
    }

    state.step_count += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one_minus_b1 = T::from_f64(1.0 - beta1);
    let one_minus_b2 = T::from_f64(1.0 - beta2);
    // lr * mhat / (sqrt(vhat) + eps) == step * m / (sqrt(v) / sqrt(bc2) + eps)
    let step = T::from_f64(learning_rate / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(epsilon);
    let (shrink, coupled_wd) = match decay_mode {
        WeightDecayMode::Decoupled => (T::from_f64(1.0 - learning_rate * weight_decay), T::zero()),
        WeightDecayMode::Coupled => (T::one(), T::from_f64(weight_decay)),
    };

    let update = |p: &mut T, g: &T, m: &mut T, v: &mut T| {
        let g = *g + coupled_wd * *p;
        *m = b1 * *m + one_minus_b1 * g;
        *v = b2 * *v + one_minus_b2 * g * g;
        *p = *p * shrink - step * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
    };

    for (((param, grad), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut param.weights)
            .and(&grad.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut param.biases)
            .and(&grad.biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .for_each(update);
    }
    model.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn quad_model(w: [f64; 2]) -> MlpModel<f64> {
        MlpModel::from_layers(vec![LayerParams { weights: array![[w[0], w[1]]], biases: array![0.0] }])
            .unwrap()
    }

    /// Gradient of ||w||^2 for the single-row weight matrix.
    fn quad_grad(m: &MlpModel<f64>) -> Gradients<f64> {
        let l = &m.layers()[0];
        Gradients {
            layers: vec![LayerParams { weights: l.weights.mapv(|w| 2.0 * w), biases: array![0.0] }],
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut m = quad_model([0.7, -0.2]);
        let mut s = AdamState::new(&m, AdamConfig::default());
        let g = Gradients {
            layers: vec![LayerParams { weights: array![[3.0, -0.01]], biases: array![0.5] }],
        };
        let lr = 1e-3;
        adam_step(&mut m, &mut s, &g, lr, 0.0, WeightDecayMode::Decoupled).unwrap();
        let w = &m.layers()[0].weights;
        assert!((w[[0, 0]] - (0.7 - lr)).abs() < 1e-9);
        assert!((w[[0, 1]] - (-0.2 + lr)).abs() < 1e-9);
        assert!((m.layers()[0].biases[0] + lr).abs() < 1e-9);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = quad_model([0.3, 0.4]);
        let before = m.clone();
        let mut s = AdamState::new(&m, AdamConfig::default());
        let g = Gradients::zeros_like(&m);
        for _ in 0..5 {
            adam_step(&mut m, &mut s, &g, 0.1, 0.0, WeightDecayMode::Decoupled).unwrap();
        }
        assert_eq!(m.layers(), before.layers());
        assert_eq!(s.step_count, 5);
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let mut m = quad_model([2.0, -4.0]);
        let mut s = AdamState::new(&m, AdamConfig::default());
        let g = Gradients::zeros_like(&m);
        adam_step(&mut m, &mut s, &g, 0.1, 0.5, WeightDecayMode::Decoupled).unwrap();
        assert_eq!(m.layers()[0].weights, array![[2.0 * 0.95, -4.0 * 0.95]]);
    }

    #[test]
    fn coupled_decay_enters_gradient() {
        let mut m = quad_model([2.0, -4.0]);
        let mut s = AdamState::new(&m, AdamConfig::default());
        let g = Gradients::zeros_like(&m);
        adam_step(&mut m, &mut s, &g, 0.01, 0.5, WeightDecayMode::Coupled).unwrap();
        // The decay gradient has sign of w, so the first step is -lr*sign(w).
        let w = &m.layers()[0].weights;
        assert!((w[[0, 0]] - 1.99).abs() < 1e-9);
        assert!((w[[0, 1]] + 3.99).abs() < 1e-9);
    }

    /// Scalar Adam recurrence written out independently of `adam_step`.
    fn scripted_adam(mut w: [f64; 2], lr: f64, steps: usize) -> [f64; 2] {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..=steps {
            for k in 0..2 {
                let g = 2.0 * w[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] / (1.0 - b1.powi(t as i32));
                let vhat = v[k] / (1.0 - b2.powi(t as i32));
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        w
    }

    #[test]
    fn minimizes_squared_norm() {
        let mut m = quad_model([1.0, 1.0]);
        let mut s = AdamState::new(&m, AdamConfig::default());
        for _ in 0..200 {
            let g = quad_grad(&m);
            adam_step(&mut m, &mut s, &g, 0.1, 0.0, WeightDecayMode::Decoupled).unwrap();
        }
        let w = &m.layers()[0].weights;
        let norm = (w[[0, 0]].powi(2) + w[[0, 1]].powi(2)).sqrt();
        assert!(norm < 1e-2, "norm {norm}");

        let expected = scripted_adam([1.0, 1.0], 0.1, 200);
        assert!((w[[0, 0]] - expected[0]).abs() < 1e-9);
        assert!((w[[0, 1]] - expected[1]).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut m = quad_model([1.0, 1.0]);
        let mut s = AdamState::new(&m, AdamConfig::default());
        let g = Gradients {
            layers: vec![LayerParams { weights: array![[1.0, 1.0, 1.0]], biases: array![0.0] }],
        };
        assert!(adam_step(&mut m, &mut s, &g, 0.1, 0.0, WeightDecayMode::Decoupled).is_err());
    }
}
