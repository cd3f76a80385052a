use std::collections::HashSet;

use crate::error::{check_dim, Error, Result};
use crate::numerics::Matrix;

/// Row-aligned identifiers and vectors (queries or documents).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    vectors: Matrix<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, vectors: Matrix<f32>) -> Result<Self> {
        check_dim(vectors.rows(), ids.len())?;
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(Self { ids, vectors })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            vectors: Matrix::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix<f32> {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter_rows())
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            ids.push(self.ids[i].clone());
            data.extend_from_slice(self.row(i));
        }
        Self {
            ids,
            vectors: Matrix::from_vec(indices.len(), self.dim(), data).expect("row lengths"),
        }
    }

    pub fn into_parts(self) -> (Vec<String>, Matrix<f32>) {
        (self.ids, self.vectors)
    }
}
