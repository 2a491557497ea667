//! Flat parameter storage with a named tensor layout.
//!
//! Every learnable model keeps its parameters in one contiguous `Vec<f64>`;
//! a [`Layout`] maps tensor names to `(offset, rows, cols)` views. Gradients,
//! optimizer state and checkpoints share the same layout.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorId {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Row `r` of this tensor inside a flat buffer.
    #[inline]
    pub fn row<'a>(&self, buf: &'a [f64], r: usize) -> &'a [f64] {
        let start = self.offset + r * self.cols;
        &buf[start..start + self.cols]
    }

    #[inline]
    pub fn row_mut<'a>(&self, buf: &'a mut [f64], r: usize) -> &'a mut [f64] {
        let start = self.offset + r * self.cols;
        &mut buf[start..start + self.cols]
    }

    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.range()]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.range()]
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance `2 / (fan_in + fan_out)`.
    Xavier,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub id: TensorId,
    pub init: Init,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> TensorId {
        let id = TensorId { offset: self.total, rows, cols };
        self.total += rows * cols;
        self.specs.push(TensorSpec { name: name.into(), id, init });
        id
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Draws a fresh parameter vector according to each tensor's [`Init`].
    /// Values are rounded to `f32` so that checkpoints round-trip exactly.
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut data = alloc::vec![0.0; self.total];
        for spec in &self.specs {
            let out = spec.id.of_mut(&mut data);
            match spec.init {
                Init::Constant(c) => out.fill(c),
                Init::Normal(std) => fill_normal(out, std, rng),
                Init::Xavier => {
                    let var = 2.0 / (spec.id.rows + spec.id.cols) as f64;
                    fill_normal(out, libm::sqrt(var), rng);
                }
            }
        }
        round_to_f32(&mut data);
        data
    }
}

fn fill_normal<R: Rng + ?Sized>(out: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        out.fill(0.0);
        return;
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in out {
        *v = dist.sample(rng);
    }
}

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}
