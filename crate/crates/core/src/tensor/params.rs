use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every parameter of a model. Ids are dense indices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Add `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// Gradients for the parameters touched by one backward pass, sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub(crate) fn from_sorted(entries: Vec<(ParamId, Tensor)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        Self { entries }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(i, t)| (*i, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Elementwise `self += other`, merging parameter sets.
    pub fn add_assign(&mut self, other: &Gradients) {
        let mut merged = Vec::with_capacity(self.entries.len().max(other.entries.len()));
        let mut a = std::mem::take(&mut self.entries).into_iter().peekable();
        let mut b = other.entries.iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (Some((ia, _)), Some((ib, _))) if ia == ib => {
                    let (id, mut t) = a.next().unwrap();
                    let (_, o) = b.next().unwrap();
                    for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                        *x += y;
                    }
                    merged.push((id, t));
                }
                (Some((ia, _)), Some((ib, _))) if ia < ib => merged.push(a.next().unwrap()),
                (Some(_), Some(_)) | (None, Some(_)) => {
                    let (id, t) = b.next().unwrap();
                    merged.push((*id, t.clone()));
                }
                (Some(_), None) => merged.push(a.next().unwrap()),
                (None, None) => break,
            }
        }
        self.entries = merged;
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_merge_disjoint_and_shared() {
        let mut a = Gradients::from_sorted(vec![
            (ParamId(0), Tensor::scalar(1.0)),
            (ParamId(2), Tensor::scalar(2.0)),
        ]);
        let b = Gradients::from_sorted(vec![
            (ParamId(1), Tensor::scalar(5.0)),
            (ParamId(2), Tensor::scalar(3.0)),
        ]);
        a.add_assign(&b);
        let ids: Vec<_> = a.iter().map(|(i, t)| (i.0, t.data()[0])).collect();
        assert_eq!(ids, vec![(0, 1.0), (1, 5.0), (2, 5.0)]);
    }

    #[test]
    fn store_accumulates_and_resets() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        let g = Gradients::from_sorted(vec![(id, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        s.accumulate(&g);
        s.accumulate(&g);
        assert_eq!(s.get(id).grad.data(), &[2.0, 4.0]);
        s.zero_grad();
        assert_eq!(s.get(id).grad.data(), &[0.0, 0.0]);
    }
}
