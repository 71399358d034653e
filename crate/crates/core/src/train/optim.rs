//! AdamW with decoupled weight decay over a named subset of parameters.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    /// State for the parameters of `store` whose names satisfy `select`.
    pub fn new(store: &ParamStore, select: impl Fn(&str) -> bool, lr: f64, weight_decay: f64) -> Self {
        let (mut names, mut m) = (Vec::new(), Vec::new());
        for (name, p) in store.iter().filter(|(n, _)| select(n)) {
            names.push(name.to_string());
            m.push(Tensor::zeros(p.value.shape()));
        }
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            v: m.clone(),
            names,
            m,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One update. `grads` pairs with [`AdamW::names`]; `None` leaves a
    /// parameter and its moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::usage(format!(
                "{} gradients for {} optimized parameters",
                grads.len(),
                self.names.len()
            )));
        }
        for (name, g) in self.names.iter().zip(grads) {
            if let Some(g) = g {
                if store.value(name)?.shape() != g.shape() {
                    return Err(Error::usage(format!("gradient for {name} has shape {:?}", g.shape())));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let name = &self.names[i];
            let lr = self.lr * store.lr_scale(name).expect("name checked above");
            let mut x = store.value(name)?.clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, xv) in x.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *xv -= lr * self.weight_decay * *xv;
                *xv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set_value(name, x)?;
        }
        Ok(())
    }
}

/// Gradients for the optimizer's parameters pulled out of a name-keyed
/// lookup.
pub fn aligned_grads(opt: &AdamW, lookup: impl Fn(&str) -> Option<Tensor>) -> Vec<Option<Tensor>> {
    opt.names().iter().map(|n| lookup(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store, |_| true, 0.1, 0.0);
        opt.update(&mut store, &[Some(Tensor::new(vec![1], vec![2.0]).unwrap())]).unwrap();
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.value("x").unwrap().item() - want).abs() < 1e-15);
        assert!((opt.m[0].item() - 0.2).abs() < 1e-15);
        assert!((opt.v[0].item() - 0.004).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = scalar_store(0.7);
        let mut opt = AdamW::new(&store, |_| true, 0.1, 0.0);
        opt.update(&mut store, &[Some(Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(store.value("x").unwrap().item(), 0.7);
    }

    #[test]
    fn lr_scale_is_isolated_per_parameter() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[1])).unwrap();
        store.insert_scaled("b", Tensor::ones(&[1]), 0.1).unwrap();
        let mut opt = AdamW::new(&store, |_| true, 0.1, 0.0);
        let g = Some(Tensor::ones(&[1]));
        opt.update(&mut store, &[g.clone(), g]).unwrap();
        let da = 1.0 - store.value("a").unwrap().item();
        let db = 1.0 - store.value("b").unwrap().item();
        assert!((da - 0.1).abs() < 1e-6);
        assert!((db - 0.01).abs() < 1e-7);
    }

    #[test]
    fn misaligned_gradients_are_rejected() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store, |_| true, 0.1, 0.0);
        assert!(matches!(opt.update(&mut store, &[]), Err(Error::Usage(_))));
        assert!(matches!(
            opt.update(&mut store, &[Some(Tensor::zeros(&[2]))]),
            Err(Error::Usage(_))
        ));
    }
}
