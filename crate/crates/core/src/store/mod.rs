//! Embedding matrices, vectors and their JSON manifests on disk.

pub mod manifest;
pub mod npy;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, save_manifest, validate_pairing, Manifest, Role};

/// Dense row-major matrix of embeddings, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Wraps `data`, rejecting zero-width matrices and non-finite entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if let Some((idx, v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {v} at {idx:?}")));
        }
        Ok(Self { data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((0, dim)))
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("row {i} has length {}, expected {dim}", r.len())));
            }
            flat.extend_from_slice(r);
        }
        let data = Array2::from_shape_vec((rows.len(), dim), flat).expect("checked lengths");
        Self::new(data)
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self { data: self.data.select(Axis(0), rows) }
    }

    /// Copy with every row scaled to unit l2 norm. Only used to reproduce
    /// normalized-embedding diagnostics; zero rows stay zero.
    pub fn l2_normalized(&self) -> Self {
        let mut data = self.data.clone();
        for mut row in data.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        Self { data }
    }
}

/// Loads a 2-D NPY array (`<f4` or `<f8`, C order).
pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let raw = npy::read_file(path)?;
    if raw.header.fortran_order {
        return Err(Error::Shape(format!("{}: Fortran-order arrays are not supported", path.display())));
    }
    let &[rows, cols] = raw.header.shape.as_slice() else {
        return Err(Error::Shape(format!(
            "{}: expected a 2-D array, found shape {:?}",
            path.display(),
            raw.header.shape
        )));
    };
    let data = Array2::from_shape_vec((rows, cols), raw.data).expect("decoder checked payload size");
    EmbeddingMatrix::new(data).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        Error::Shape(msg) => Error::Shape(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = m.data.iter().copied().collect();
    npy::write_file(path.as_ref(), &[m.count(), m.dim()], &data)
}

/// Loads a 1-D NPY array.
pub fn load_vector(path: impl AsRef<Path>) -> Result<Array1<f64>> {
    let path = path.as_ref();
    let raw = npy::read_file(path)?;
    if raw.header.shape.len() != 1 {
        return Err(Error::Shape(format!(
            "{}: expected a 1-D array, found shape {:?}",
            path.display(),
            raw.header.shape
        )));
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite entries", path.display())));
    }
    Ok(Array1::from_vec(raw.data))
}

pub fn save_vector(v: &Array1<f64>, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = v.iter().copied().collect();
    npy::write_file(path.as_ref(), &[v.len()], &data)
}

/// Loads a 2-D array without the embedding invariants (used for head weights).
pub fn load_array2(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    load_matrix(path).map(EmbeddingMatrix::into_inner)
}

pub fn save_array2(a: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = a.iter().copied().collect();
    npy::write_file(path.as_ref(), &[a.nrows(), a.ncols()], &data)
}
