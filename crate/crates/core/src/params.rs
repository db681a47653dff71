//! Named trainable parameters with gradient accumulators, grouped by the
//! term they belong to (each group gets its own learning rate and decay).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embedding,
    Advection,
    Diffusion,
    Reaction,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Embedding, ParamGroup::Advection, ParamGroup::Diffusion, ParamGroup::Reaction];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Advection => "advection",
            ParamGroup::Diffusion => "diffusion",
            ParamGroup::Reaction => "reaction",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub grad: Matrix,
    /// Buffers (batch-norm running statistics) are saved and restored with
    /// the parameters but never updated by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; names are fixed by the model layout.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        self.insert(name.into(), group, value, true)
    }

    /// Non-trainable state stored alongside the parameters.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.insert(name.into(), ParamGroup::Reaction, value, false)
    }

    fn insert(&mut self, name: String, group: ParamGroup, value: Matrix, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, group, value, grad, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Matrix) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Copies all values (for best-checkpoint snapshots).
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Matrix]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Matrix> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from a name → matrix map; every parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, values: &BTreeMap<String, Matrix>) -> Result<()> {
        for p in &mut self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {}", p.name)))?;
            if !v.same_shape(&p.value) {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter {} has shape {:?}, model expects {:?}", p.name, v.shape(), p.value.shape()),
                ));
            }
            p.value = v.clone();
        }
        if values.len() != self.params.len() {
            let extra: Vec<_> = values.keys().filter(|k| !self.by_name.contains_key(*k)).collect();
            return Err(Error::format("checkpoint", format!("unknown parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Uniform Glorot initialization in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut DetRng) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| uniform(rng, -s, s)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Fully connected map `x W + b` on row-major node features.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut DetRng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, glorot(fan_in, fan_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    /// Output layer with weights uniform in `±1/(2 sqrt(fan_in))` and a zero
    /// bias, so fresh classifiers start near uniform predictions.
    pub fn output(store: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, rng: &mut DetRng) -> Self {
        let s = 0.5 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| uniform(rng, -s, s)).collect();
        let weight = store.add(format!("{name}.weight"), group, Matrix::from_vec(fan_in, fan_out, data).expect("sized above"));
        let bias = Some(store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn n_params(&self, store: &ParamStore) -> usize {
        store.value(self.weight).len() + self.bias.map_or(0, |b| store.value(b).len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn glorot_bound() {
        let mut rng = rng_from_seed(0);
        let w = glorot(10, 6, &mut rng);
        let s = (6.0f64 / 16.0).sqrt();
        assert!(w.max_abs() <= s);
    }

    #[test]
    fn load_named_validates_shapes() {
        let mut rng = rng_from_seed(0);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", ParamGroup::Embedding, 3, 2, true, &mut rng);
        let mut named = store.to_named();
        store.load_named(&named).unwrap();
        named.insert("fc.bias".into(), Matrix::zeros(1, 5));
        assert!(store.load_named(&named).is_err());
        named.remove("fc.bias");
        assert!(store.load_named(&named).is_err());
    }
}
