use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError};
use crate::model::ModelParams;
use crate::real::Real;

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. The update arithmetic runs in `f64`.
/// Parameters and state are left untouched when the gradient is rejected.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::GradientShape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            tensor: params.tensor_of(i).unwrap_or("?").to_string(),
        });
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grads[i].to_f64_lossy();
        let m = b1 * state.m[i].to_f64_lossy() + (1.0 - b1) * g;
        let v = b2 * state.v[i].to_f64_lossy() + (1.0 - b2) * g * g;
        state.m[i] = T::of(m);
        state.v[i] = T::of(v);
        let mhat = m / c1;
        let vhat = v / c2;
        // Limit as eps -> 0 of a zero moment, so eps = 0 stays well defined.
        let step = if mhat == 0.0 {
            0.0
        } else {
            cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps)
        };
        values[i] = T::of(values[i].to_f64_lossy() - step);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};

    fn arch() -> ArchConfig {
        ArchConfig {
            base_width: 2,
            depth: 1,
            tile: 8,
            embed_dim: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = init_params::<f64>(&arch(), 1).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(p.len());
        let g = vec![0.0; p.len()];
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert!(s.m.iter().chain(&s.v).all(|&x| x == 0.0));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ModelParams::<f64>::zeros(arch()).unwrap();
        let mut g = vec![0.0; p.len()];
        g[0] = 1.0;
        let mut s = AdamState::new(p.len());
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        let want = -3e-5 / (1.0 + 1e-8);
        assert!((p.values()[0] - want).abs() < 1e-12);
        assert!((p.values()[0] - -2.99999997e-5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = init_params::<f32>(&arch(), 1).unwrap();
        let off = p.entry("bottleneck.conv1.weight").unwrap().offset;
        let mut g = vec![0.0f32; p.len()];
        g[off + 3] = f32::NAN;
        let before = p.clone();
        let mut s = AdamState::new(p.len());
        let e = adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap_err();
        assert!(e.to_string().contains("bottleneck.conv1.weight"));
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }
}
