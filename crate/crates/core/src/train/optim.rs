//! Adam with decoupled weight decay and one hyperparameter pair per
//! parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for GroupHyper {
    fn default() -> Self {
        Self { lr: 0.005, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupHypers {
    pub embedding: GroupHyper,
    pub advection: GroupHyper,
    pub diffusion: GroupHyper,
    pub reaction: GroupHyper,
}

impl GroupHypers {
    pub fn uniform(lr: f64, weight_decay: f64) -> Self {
        let g = GroupHyper { lr, weight_decay };
        Self { embedding: g, advection: g, diffusion: g, reaction: g }
    }

    pub fn get(&self, group: ParamGroup) -> GroupHyper {
        match group {
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Advection => self.advection,
            ParamGroup::Diffusion => self.diffusion,
            ParamGroup::Reaction => self.reaction,
        }
    }

    pub fn get_mut(&mut self, group: ParamGroup) -> &mut GroupHyper {
        match group {
            ParamGroup::Embedding => &mut self.embedding,
            ParamGroup::Advection => &mut self.advection,
            ParamGroup::Diffusion => &mut self.diffusion,
            ParamGroup::Reaction => &mut self.reaction,
        }
    }
}

/// Moment estimates are kept per parameter in store order; buffers are
/// skipped.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hypers: GroupHypers,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, hypers: GroupHypers) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { hypers, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `store`:
    /// `p ← p (1 − lr λ)`, then `p ← p − lr m̂ / (sqrt(v̂) + ε)`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let h = self.hypers.get(p.group);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let decay = 1.0 - h.lr * h.weight_decay;
            let g = p.grad.as_slice();
            let w = p.value.as_mut_slice();
            for (j, (mj, vj)) in m.as_mut_slice().iter_mut().zip(v.as_mut_slice()).enumerate() {
                *mj = BETA1 * *mj + (1.0 - BETA1) * g[j];
                *vj = BETA2 * *vj + (1.0 - BETA2) * g[j] * g[j];
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                w[j] = w[j] * decay - h.lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, group: ParamGroup) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", group, Matrix::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = scalar_store(0.7, ParamGroup::Reaction);
        let mut opt = AdamW::new(&s, GroupHypers::uniform(0.1, 0.0));
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(s.id("w").unwrap()).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0, ParamGroup::Advection);
        let id = s.id("w").unwrap();
        s.add_grad(id, &Matrix::scalar(1.0));
        let mut opt = AdamW::new(&s, GroupHypers::uniform(0.1, 0.0));
        opt.step(&mut s).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε).
        assert!((s.value(id).item() + 0.1 / (1.0 + EPSILON)).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let mut s = scalar_store(2.0, ParamGroup::Diffusion);
        let id = s.id("w").unwrap();
        let mut opt = AdamW::new(&s, GroupHypers::uniform(0.01, 0.1));
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        assert!((s.value(id).item() - 2.0 * (1.0 - 0.001f64).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Embedding, Matrix::scalar(0.0));
        let b = s.add("b", ParamGroup::Reaction, Matrix::scalar(0.0));
        let buf = s.add_buffer("buf", Matrix::scalar(3.0));
        for id in [a, b, buf] {
            s.add_grad(id, &Matrix::scalar(1.0));
        }
        let mut h = GroupHypers::uniform(0.1, 0.0);
        h.reaction.lr = 0.01;
        let mut opt = AdamW::new(&s, h);
        opt.step(&mut s).unwrap();
        assert!((s.value(a).item() + 0.1).abs() < 1e-7);
        assert!((s.value(b).item() + 0.01).abs() < 1e-8);
        assert_eq!(s.value(buf).item(), 3.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_store(0.0, ParamGroup::Embedding);
        let id = s.id("w").unwrap();
        s.add_grad(id, &Matrix::scalar(f64::NAN));
        let err = AdamW::new(&s, GroupHypers::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert!(err.is_numeric());
    }
}
