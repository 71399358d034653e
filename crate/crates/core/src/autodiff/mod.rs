//! Reverse-mode automatic differentiation.
//!
//! [`Tape`] records primitive ops; [`Ctx`] couples a tape with a
//! [`ParamStore`] so model code can ask for parameters by name.

pub mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{CustomBackward, Gradients, Tape, Var, ATAN2_GRAD_EPS, GATHER_ZERO};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

/// A tape plus lazily bound parameters.
///
/// The first request for a parameter records it as a leaf; later requests
/// reuse that leaf. Parameters can also be pre-bound to existing vars, which
/// is how gradient checks perturb them.
pub struct Ctx<'t, 's> {
    tape: &'t mut Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore) -> Self {
        Ctx {
            tape,
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Uses `v` for parameter `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let have = self.store.value(name)?;
        if have.shape() != self.tape.shape(v) {
            return Err(Error::dim(format!(
                "binding {name}: shape {:?} vs stored {:?}",
                self.tape.shape(v),
                have.shape()
            )));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    /// The var for parameter `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.value(name)?.clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Per-parameter gradients in store order. `None` marks parameters the
    /// forward pass never touched or that do not reach the loss.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.store
            .names()
            .map(|n| self.bound.get(n).and_then(|&v| grads.get(v)))
            .collect()
    }
}

impl Deref for Ctx<'_, '_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Ctx<'_, '_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let xv = tape.leaf(x.clone());
        let sq = tape.square(xv);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(xv).unwrap(), x.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let other = Tape::new();
        assert!(matches!(other.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_value_accumulates_from_all_consumers() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2], 3.0));
        let a = tape.mul(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let l = tape.sum(b);
        let g = tape.backward(l).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[7.0, 7.0]);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.leaf(Tensor::ones(&[2]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.get(y).is_none());
    }

    #[test]
    fn ctx_reports_untouched_params_as_absent() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[2])).unwrap();
        store.insert("b", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let a = ctx.p("a").unwrap();
        let l = ctx.sum(a);
        let g = ctx.backward(l).unwrap();
        let pg = ctx.param_grads(&g);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[1.0, 1.0]);
        assert!(pg[1].is_none());
    }

    #[test]
    fn bmm_transpose_flags_match_explicit_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[2, 3, 4], &mut rng);
        let b = Tensor::randn(&[2, 3, 5], &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.bmm(av, bv, true, false).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 5]);
        let want = Tensor::from_fn(&[2, 4, 5], |i| {
            (0..3).map(|p| a.at(&[i[0], p, i[1]]) * b.at(&[i[0], p, i[2]])).sum()
        });
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }
}
