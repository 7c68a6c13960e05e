//! Named parameter arrays.
//!
//! A [`ParamSet`] is the owning store for a model's weights: the optimizer
//! mutates it, checkpoints serialize it, and each forward pass copies the
//! arrays into graph leaves. Order is registration order and is part of
//! every downstream contract (checkpoint layout, gradient vectors, optimizer
//! state), so it must be deterministic.

use crate::error::{CoreError, Result};
use crate::graph::{Real, Shape};
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Shape, data: Vec<T>) {
        debug_assert_eq!(shape.numel(), data.len());
        self.entries.push(Param {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.entries[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.entries[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Total count over entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.data.len())
            .sum()
    }

    /// Cast every array (f32 <-> f64 boundary for checkpoints).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    data: p
                        .data
                        .iter()
                        .map(|&v| U::from(v).expect("finite value casts"))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Verify that another set has identical names and shapes, for
    /// checkpoint/model compatibility checks.
    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(CoreError::Config(alloc::format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(other.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(CoreError::Config(alloc::format!(
                    "parameter mismatch: {} {} vs {} {}",
                    a.name,
                    a.shape,
                    b.name,
                    b.shape
                )));
            }
        }
        Ok(())
    }
}
