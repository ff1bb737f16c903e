use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for every optimized tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape of existing tensor");
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam slot {i}: param {:?}, grad {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.first[i].shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![0.5, -1.0]);
        let before = p.clone();
        let mut st = OptimizerState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::row(vec![0.0, 0.0])], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = Tensor::row(vec![0.0, 0.0]);
        let mut st = OptimizerState::new(AdamConfig::default(), &[&p]);
        for _ in 0..100 {
            adam_step(&mut [&mut p], &[Tensor::row(vec![2.0, -0.5])], &mut st).unwrap();
        }
        assert!(p.data()[0] < 0.0);
        assert!(p.data()[1] > 0.0);
    }

    #[test]
    fn single_step_closed_form() {
        // step 1 from zero moments: m = 0.1 g, v = 0.001 g^2,
        // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(cfg, &[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(0.25)], &mut st).unwrap();
        let expected = 1.0 - 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-15);
        assert!((st.first[0].item().unwrap() - 0.025).abs() < 1e-15);
        assert!((st.second[0].item().unwrap() - 0.0000625).abs() < 1e-18);

        // second step with hand-evaluated moments
        adam_step(&mut [&mut p], &[Tensor::scalar(-0.5)], &mut st).unwrap();
        let m = 0.9 * 0.025 + 0.1 * -0.5;
        let v = 0.999 * 0.0000625 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let expected2 = expected - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.item().unwrap() - expected2).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Tensor::row(vec![0.0, 0.0]);
        let mut st = OptimizerState::new(AdamConfig::default(), &[&p]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[Tensor::row(vec![0.0])], &mut st),
            Err(Error::Shape(_))
        ));
    }
}
