//! Sparse Adam: moments, bias correction, and step counts are kept per row
//! and only rows present in a gradient map are touched. A plain SGD mode
//! exists for debugging.
//!
//! Bias correction uses per-row powers of beta maintained incrementally, so
//! a rarely-updated row is corrected by its own age rather than the global
//! step count.

use crate::embedding::{EmbeddingTable, GradientMap};
use crate::error::Result;
use crate::objectives::BilinearParams;

/// Anything exposing mutable rows of `f32` parameters.
pub trait ParamRows {
    fn num_rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn row_mut(&mut self, row: u32) -> &mut [f32];
}

impl ParamRows for EmbeddingTable {
    fn num_rows(&self) -> usize {
        EmbeddingTable::num_rows(self)
    }

    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }

    fn row_mut(&mut self, row: u32) -> &mut [f32] {
        EmbeddingTable::row_mut(self, row)
    }
}

impl ParamRows for BilinearParams {
    fn num_rows(&self) -> usize {
        self.dim()
    }

    fn dim(&self) -> usize {
        BilinearParams::dim(self)
    }

    fn row_mut(&mut self, row: u32) -> &mut [f32] {
        BilinearParams::row_mut(self, row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Borrowed accumulator slices `(m, v, beta1_pow, beta2_pow, steps)`.
pub type AdamRawParts<'a> = (&'a [f32], &'a [f32], &'a [f32], &'a [f32], &'a [u32]);

/// Per-row Adam accumulators for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    dim: usize,
    m: Vec<f32>,
    v: Vec<f32>,
    /// Running beta1^t and beta2^t per row; 1.0 while a row is untouched.
    beta1_pow: Vec<f32>,
    beta2_pow: Vec<f32>,
    steps: Vec<u32>,
}

/// One Adam update of a single row, shared by the deterministic and racy
/// training paths.
pub(crate) fn adam_update_row(
    cfg: &AdamConfig,
    m: &mut [f32],
    v: &mut [f32],
    beta1_pow: &mut f32,
    beta2_pow: &mut f32,
    params: &mut [f32],
    grad: &[f32],
) {
    *beta1_pow *= cfg.beta1;
    *beta2_pow *= cfg.beta2;
    let corr1 = 1.0 - *beta1_pow;
    let corr2 = 1.0 - *beta2_pow;
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

impl AdamState {
    pub fn new(rows: usize, dim: usize, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            dim,
            m: vec![0.0; rows * dim],
            v: vec![0.0; rows * dim],
            beta1_pow: vec![1.0; rows],
            beta2_pow: vec![1.0; rows],
            steps: vec![0; rows],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.steps.len()
    }

    pub fn step_count(&self, row: u32) -> u32 {
        self.steps[row as usize]
    }

    /// Applies one update for every row in `grads`, in ascending row order.
    /// Rows absent from the map are untouched, bit for bit.
    pub fn step(&mut self, params: &mut impl ParamRows, grads: &GradientMap) -> Result<()> {
        grads.check_finite()?;
        debug_assert_eq!(params.dim(), self.dim);
        for (row, grad) in grads.iter() {
            let r = row as usize;
            let span = r * self.dim..(r + 1) * self.dim;
            adam_update_row(
                &self.cfg,
                &mut self.m[span.clone()],
                &mut self.v[span],
                &mut self.beta1_pow[r],
                &mut self.beta2_pow[r],
                params.row_mut(row),
                grad,
            );
            self.steps[r] += 1;
        }
        Ok(())
    }

    pub(crate) fn split_row_state(
        &mut self,
        row: usize,
    ) -> (&mut [f32], &mut [f32], &mut f32, &mut f32) {
        let span = row * self.dim..(row + 1) * self.dim;
        (
            &mut self.m[span.clone()],
            &mut self.v[span],
            &mut self.beta1_pow[row],
            &mut self.beta2_pow[row],
        )
    }

    pub(crate) fn bump_step(&mut self, row: usize) {
        self.steps[row] += 1;
    }

    /// Raw accumulators `(m, v, beta1_pow, beta2_pow, steps)` for
    /// checkpointing.
    pub fn raw_parts(&self) -> AdamRawParts<'_> {
        (
            &self.m,
            &self.v,
            &self.beta1_pow,
            &self.beta2_pow,
            &self.steps,
        )
    }

    pub fn from_raw_parts(
        cfg: AdamConfig,
        dim: usize,
        m: Vec<f32>,
        v: Vec<f32>,
        beta1_pow: Vec<f32>,
        beta2_pow: Vec<f32>,
        steps: Vec<u32>,
    ) -> Result<Self> {
        let rows = steps.len();
        if m.len() != rows * dim
            || v.len() != rows * dim
            || beta1_pow.len() != rows
            || beta2_pow.len() != rows
        {
            return Err(crate::error::Error::DimensionMismatch {
                left: m.len(),
                right: rows * dim,
            });
        }
        Ok(AdamState {
            cfg,
            dim,
            m,
            v,
            beta1_pow,
            beta2_pow,
            steps,
        })
    }
}

/// Plain SGD, kept only as a debugging reference.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
}

impl SgdState {
    pub fn step(&self, params: &mut impl ParamRows, grads: &GradientMap) -> Result<()> {
        grads.check_finite()?;
        for (row, grad) in grads.iter() {
            for (p, &g) in params.row_mut(row).iter_mut().zip(grad) {
                *p -= self.learning_rate * g;
            }
        }
        Ok(())
    }
}

/// The optimizer actually driven by the trainer.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(SgdState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut impl ParamRows, grads: &GradientMap) -> Result<()> {
        match self {
            Optimizer::Adam(state) => state.step(params, grads),
            Optimizer::Sgd(state) => state.step(params, grads),
        }
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        match self {
            Optimizer::Adam(state) => Some(state),
            Optimizer::Sgd(_) => None,
        }
    }
}
