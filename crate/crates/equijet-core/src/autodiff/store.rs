//! Flat parameter storage with named segment views.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// A contiguous window into the parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamView {
    pub offset: usize,
    pub len: usize,
}

impl ParamView {
    /// A zero-length view, used for representations a layer does not carry.
    pub const EMPTY: ParamView = ParamView { offset: 0, len: 0 };

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// A named parameter segment, for reporting and debugging.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub view: ParamView,
}

/// All learnable parameters of a model: one flat value array with a congruent
/// gradient array, addressed through [`ParamView`] windows registered at
/// build time.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    segments: Vec<Segment>,
}

/// Registers named segments and produces the zero-initialized store.
#[derive(Debug, Default)]
pub struct ParamStoreBuilder {
    len: usize,
    segments: Vec<Segment>,
}

impl ParamStoreBuilder {
    /// Reserves `len` parameters under `name` and returns their view.
    pub fn register(&mut self, name: &str, len: usize) -> ParamView {
        let view = ParamView { offset: self.len, len };
        self.len += len;
        self.segments.push(Segment { name: String::from(name), view });
        view
    }

    pub fn build(self) -> ParamStore {
        ParamStore {
            values: vec![0.0; self.len],
            grads: vec![0.0; self.len],
            segments: self.segments,
        }
    }
}

impl ParamStore {
    pub fn builder() -> ParamStoreBuilder {
        ParamStoreBuilder::default()
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn slice(&self, v: ParamView) -> &[f64] {
        &self.values[v.offset..v.offset + v.len]
    }

    pub fn slice_mut(&mut self, v: ParamView) -> &mut [f64] {
        &mut self.values[v.offset..v.offset + v.len]
    }

    pub fn grad_slice(&self, v: ParamView) -> &[f64] {
        &self.grads[v.offset..v.offset + v.len]
    }

    pub fn grad_slice_mut(&mut self, v: ParamView) -> &mut [f64] {
        &mut self.grads[v.offset..v.offset + v.len]
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
}
