use std::collections::HashMap;

use crate::{Error, Result};

/// Dense id-keyed table of equal-length real vectors.
///
/// Used for embeddings, mapped cold-product vectors and raw features alike,
/// so that ranking and evaluation code never cares where a vector came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Vectors {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl Vectors {
    pub fn new(dim: usize) -> Self {
        Vectors {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector for `{id}` has length {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Precondition(format!("duplicate vector id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }
}
