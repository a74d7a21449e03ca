//! Adam with bias correction, keyed by parameter name.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters; defaults follow the usual Adam constants.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per trainable parameter plus the step
/// counter; moment shapes always match their parameter shapes.
pub struct OptimizerState<T: Scalar> {
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, p) in store.iter() {
            if p.trainable {
                m.insert(name.clone(), Tensor::zeros(p.value.shape().to_vec()));
                v.insert(name.clone(), Tensor::zeros(p.value.shape().to_vec()));
            }
        }
        OptimizerState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter, in place.
/// `grads` maps parameter names to gradients of the same shape; parameters
/// without an entry are treated as having zero gradient (their moments
/// still decay).
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    opt: &AdamParams,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::from_f64(opt.beta1);
    let b2 = T::from_f64(opt.beta2);
    let one_minus_b1 = T::ONE - b1;
    let one_minus_b2 = T::ONE - b2;
    let corr1 = T::from_f64(1.0 - opt.beta1.powf(t));
    let corr2 = T::from_f64(1.0 - opt.beta2.powf(t));
    let lr = T::from_f64(opt.lr);
    let eps = T::from_f64(opt.eps);

    for (name, param) in store.iter_mut() {
        if !param.trainable {
            continue;
        }
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("optimizer has no state for '{name}'")))?;
        let v = state.v.get_mut(name).expect("m and v share keys");
        let zero;
        let grad = match grads.get(name) {
            Some(g) => {
                if g.shape() != param.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for '{name}' has shape {:?}, parameter is {:?}",
                        g.shape(),
                        param.value.shape()
                    )));
                }
                g
            }
            None => {
                zero = Tensor::zeros(param.value.shape().to_vec());
                &zero
            }
        };
        let pd = param.value.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = b1 * md[i] + one_minus_b1 * g;
            vd[i] = b2 * vd[i] + one_minus_b2 * g * g;
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
