//! Named, ordered parameter storage shared by models and the optimizer.

use ndarray::Array2;

use crate::autodiff::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    /// Frozen parameters still receive gradients but the optimizer skips them.
    pub trainable: bool,
    /// Values are clamped to at most this bound after every update.
    pub upper_bound: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true, upper_bound: None });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].trainable = false;
        id
    }

    pub fn add_bounded(&mut self, name: impl Into<String>, value: Array2<T>, upper: f64) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].upper_bound = Some(upper);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Apply every parameter's upper bound in place.
    pub fn enforce_bounds(&mut self) {
        for p in &mut self.params {
            if let Some(ub) = p.upper_bound {
                let ub = T::of(ub);
                p.value.mapv_inplace(|v| if v > ub { ub } else { v });
            }
        }
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| U::of(v.f64())),
                    trainable: p.trainable,
                    upper_bound: p.upper_bound,
                })
                .collect(),
        }
    }
}
