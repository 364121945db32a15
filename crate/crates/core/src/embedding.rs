//! Dense embedding storage, phrase composition, and sparse gradient
//! accumulation.
//!
//! Parameters live in `f32`. Rows are addressed by vocabulary id; a phrase is
//! represented by the mean of its constituent rows. The non-negativity
//! projection reflects coordinates through zero (absolute value) instead of
//! clamping, so a step that overshoots the boundary keeps its magnitude.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major `rows x dim` matrix of `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    /// Fresh table with entries drawn uniformly from `[0, scale)`. Rows are
    /// filled in index order from a single RNG stream, so two tables drawn
    /// from identically seeded RNGs agree on any shared prefix of rows.
    pub fn init<R: Rng>(rows: usize, dim: usize, scale: f32, rng: &mut R) -> Self {
        let data = (0..rows * dim).map(|_| rng.gen::<f32>() * scale).collect();
        EmbeddingTable { dim, data }
    }

    pub fn from_data(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                left: data.len(),
                right: dim,
            });
        }
        Ok(EmbeddingTable { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, row: u32) -> &[f32] {
        let start = row as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, row: u32) -> &mut [f32] {
        let start = row as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mean of the constituent rows. Duplicated ids count once per
    /// occurrence. Fails on an empty phrase.
    pub fn lookup_phrase(&self, ids: &[u32]) -> Result<Vec<f32>> {
        if ids.is_empty() {
            return Err(Error::EmptyPhrase);
        }
        let mut out = vec![0.0f32; self.dim];
        for &id in ids {
            for (o, &v) in out.iter_mut().zip(self.row(id)) {
                *o += v;
            }
        }
        let inv = 1.0 / ids.len() as f32;
        for o in &mut out {
            *o *= inv;
        }
        Ok(out)
    }

    /// Maps the listed rows through `|x|` coordinatewise. Idempotent.
    pub fn project_nonneg(&mut self, rows: impl IntoIterator<Item = u32>) {
        for row in rows {
            for v in self.row_mut(row) {
                *v = v.abs();
            }
        }
    }

    pub fn project_nonneg_all(&mut self) {
        for v in &mut self.data {
            *v = v.abs();
        }
    }

    /// Smallest coordinate anywhere in the table.
    pub fn min_coefficient(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Sparse accumulator mapping row id to a dense gradient, ordered by row id
/// so downstream passes apply updates in a reproducible order.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    dim: usize,
    rows: BTreeMap<u32, Vec<f32>>,
}

impl GradientMap {
    pub fn new(dim: usize) -> Self {
        GradientMap {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, row: u32) -> Option<&[f32]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn add(&mut self, row: u32, grad: &[f32]) {
        self.add_scaled(row, grad, 1.0);
    }

    /// Accumulates `scale * grad` into `row`.
    pub fn add_scaled(&mut self, row: u32, grad: &[f32], scale: f32) {
        debug_assert_eq!(grad.len(), self.dim);
        let slot = self
            .rows
            .entry(row)
            .or_insert_with(|| vec![0.0f32; self.dim]);
        for (s, &g) in slot.iter_mut().zip(grad) {
            *s += scale * g;
        }
    }

    /// Distributes a phrase-level gradient to the constituent rows: each of
    /// the `n` occurrences receives `scale * grad / n`, so duplicated ids
    /// accumulate one share per occurrence.
    pub fn add_phrase(&mut self, ids: &[u32], grad: &[f32], scale: f32) {
        debug_assert!(!ids.is_empty());
        let share = scale / ids.len() as f32;
        for &id in ids {
            self.add_scaled(id, grad, share);
        }
    }

    /// Adds `scale * other` into `self`.
    pub fn merge_scaled(&mut self, other: &GradientMap, scale: f32) {
        debug_assert_eq!(other.dim, self.dim);
        for (&row, grad) in &other.rows {
            self.add_scaled(row, grad, scale);
        }
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Rows in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }

    pub fn touched_rows(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    /// Fails with the offending row if any accumulated value is NaN or
    /// infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (&row, grad) in &self.rows {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { row });
            }
        }
        Ok(())
    }
}
