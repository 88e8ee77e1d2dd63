//! Adam with decoupled weight decay, updating each parameter in one host pass.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    params: AdamParams,
}

impl Adam {
    pub fn new(vars: Vec<Var>, params: AdamParams) -> Result<Self> {
        for var in &vars {
            if !matches!(var.dtype(), DType::F32 | DType::F64) {
                return Err(Error::invalid(format!("Adam supports f32 and f64 parameters, got {:?}", var.dtype())));
            }
        }
        let m = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        let v = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            params,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    /// Variables absent from `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step);
        let bc2 = 1.0 - p.beta2.powi(self.step);
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            if let Some(g) = grads.get(var) {
                match var.dtype() {
                    DType::F32 => update::<f32>(var, g, m, v, &p, bc1, bc2)?,
                    _ => update::<f64>(var, g, m, v, &p, bc1, bc2)?,
                }
            }
        }
        Ok(())
    }
}

fn update<T: WithDType>(
    var: &Var,
    grad: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    p: &AdamParams,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    let g = grad.flatten_all()?.to_vec1::<T>()?;
    let mut theta = var.flatten_all()?.to_vec1::<T>()?;
    let decay = 1.0 - p.lr * p.weight_decay;
    for (((t, g), m), v) in theta.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.to_f64();
        *m = p.beta1 * *m + (1.0 - p.beta1) * g;
        *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
        let step = p.lr * (*m / bc1) / ((*v / bc2).sqrt() + p.eps);
        *t = T::from_f64(t.to_f64() * decay - step);
    }
    var.set(&Tensor::from_vec(theta, var.shape(), var.device())?)?;
    Ok(())
}
