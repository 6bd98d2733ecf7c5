//! Named, ordered parameter storage over one flat coordinate vector.

use std::ops::Range;
use std::sync::Arc;

use grokwatch_tensor::{Scalar, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// What a parameter tensor is for. Decides weight decay and the
/// attention/MLP grouping used by spectral analyses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Embedding,
    Attention,
    Mlp,
    Head,
    Norm,
    Bias,
}

impl ParamRole {
    /// Weight matrices and embeddings decay; norm gains/offsets and biases do not.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Embedding | ParamRole::Attention | ParamRole::Mlp | ParamRole::Head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: ParamRole,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Stable index map from parameter names to slices of the flat vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamView {
    entries: IndexMap<String, ParamEntry>,
    total: usize,
}

impl ParamView {
    pub fn builder() -> ParamViewBuilder {
        ParamViewBuilder { view: ParamView::default() }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }
}

pub struct ParamViewBuilder {
    view: ParamView,
}

impl ParamViewBuilder {
    pub fn add(mut self, name: impl Into<String>, shape: &[usize], role: ParamRole) -> Self {
        let name = name.into();
        let entry = ParamEntry { name: name.clone(), shape: shape.to_vec(), offset: self.view.total, role };
        self.view.total += entry.len();
        let prev = self.view.entries.insert(name, entry);
        assert!(prev.is_none(), "duplicate parameter name");
        self
    }

    pub fn build(self) -> ParamView {
        self.view
    }
}

/// Parameter values (or gradients) laid out by a shared [`ParamView`].
#[derive(Clone, Debug, PartialEq)]
pub struct NamedParams<T = f32> {
    view: Arc<ParamView>,
    flat: Vec<T>,
}

impl<T: Scalar> NamedParams<T> {
    pub fn zeros(view: Arc<ParamView>) -> Self {
        let flat = vec![T::zero(); view.total_len()];
        NamedParams { view, flat }
    }

    pub fn from_flat(view: Arc<ParamView>, flat: Vec<T>) -> Self {
        assert_eq!(view.total_len(), flat.len(), "flat vector length");
        NamedParams { view, flat }
    }

    pub fn view(&self) -> &Arc<ParamView> {
        &self.view
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<T> {
        self.flat
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.view.entry(name).map(|e| &self.flat[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.view.entry(name)?.range();
        Some(&mut self.flat[r])
    }

    /// Owned tensor copy of one parameter.
    pub fn tensor(&self, name: &str) -> Option<Tensor<T>> {
        let e = self.view.entry(name)?;
        Some(Tensor::new(e.shape.clone(), self.flat[e.range()].to_vec()).expect("entry shape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamEntry, &[T])> {
        self.view.entries().map(move |e| (e, &self.flat[e.range()]))
    }

    pub fn cast<U: Scalar>(&self) -> NamedParams<U> {
        NamedParams { view: self.view.clone(), flat: self.flat.iter().map(|v| U::cast_from(v.as_f64())).collect() }
    }

    /// Euclidean norm of the whole flat vector, accumulated in f64.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.flat)
    }
}

pub fn l2_norm<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}
