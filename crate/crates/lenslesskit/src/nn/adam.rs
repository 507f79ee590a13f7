//! Adaptive-moment optimizer.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Ctx, NetModule};
use crate::autodiff::Grads;
use crate::scalar::Scalar;

struct Moments<T: Scalar> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: HashMap<u64, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that was bound in `ctx` and received a
    /// gradient. Parameters outside the graph are untouched.
    pub fn step(&mut self, net: &mut dyn NetModule<T>, ctx: &Ctx<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::cast(self.beta1);
        let b2 = T::cast(self.beta2);
        let lr = T::cast(self.lr);
        let eps = T::cast(self.eps);
        let bc1 = T::one() - T::cast(self.beta1.powi(t));
        let bc2 = T::one() - T::cast(self.beta2.powi(t));
        net.visit_params_mut(&mut |p| {
            let Some(leaf) = ctx.leaf_of(p.id()) else {
                return;
            };
            let Some(g) = grads.wrt(leaf) else {
                return;
            };
            let g = g.value();
            let state = self.state.entry(p.id()).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
            ndarray::Zip::from(&mut state.m)
                .and(g)
                .for_each(|m, &gv| *m = b1 * *m + (T::one() - b1) * gv);
            ndarray::Zip::from(&mut state.v)
                .and(g)
                .for_each(|v, &gv| *v = b2 * *v + (T::one() - b2) * gv * gv);
            ndarray::Zip::from(&mut p.value)
                .and(&state.m)
                .and(&state.v)
                .for_each(|pv, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }

    /// Moment tensors aligned with the network's parameter visit order, for
    /// checkpointing.
    pub fn export_state(&self, net: &dyn NetModule<T>) -> (u64, Vec<(String, ArrayD<T>)>) {
        let mut out = Vec::new();
        net.visit_params(&mut |p| {
            if let Some(s) = self.state.get(&p.id()) {
                out.push((format!("m.{}", p.name), s.m.clone()));
                out.push((format!("v.{}", p.name), s.v.clone()));
            }
        });
        (self.step, out)
    }

    pub fn import_state(
        &mut self,
        net: &dyn NetModule<T>,
        step: u64,
        tensors: Vec<(String, ArrayD<T>)>,
    ) -> crate::Result<()> {
        self.step = step;
        self.state.clear();
        let mut by_name: HashMap<String, ArrayD<T>> = tensors.into_iter().collect();
        let mut err = None;
        net.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            let m = by_name.remove(&format!("m.{}", p.name));
            let v = by_name.remove(&format!("v.{}", p.name));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                        err = Some(format!("optimizer state shape mismatch for `{}`", p.name));
                    } else {
                        self.state.insert(p.id(), Moments { m, v });
                    }
                }
                (None, None) => {}
                _ => err = Some(format!("optimizer state for `{}` is incomplete", p.name)),
            }
        });
        match err {
            Some(e) => Err(crate::Error::Checkpoint(e)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ops, Var};
    use crate::nn::Param;
    use ndarray::IxDyn;

    struct One {
        p: Param<f64>,
    }

    impl NetModule<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.p);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut net = One {
            p: Param::new("x", ArrayD::from_elem(IxDyn(&[2]), 5.0)),
        };
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..300 {
            let mut ctx = Ctx::train();
            let x = ctx.bind(&net.p);
            let loss = ops::sum_all(&ops::square(&x));
            let grads = loss.backward();
            opt.step(&mut net, &ctx, &grads);
        }
        for &v in net.p.value.iter() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }
}
