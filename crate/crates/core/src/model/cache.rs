use std::collections::VecDeque;

use css_tensor::Tensor;

use super::{ConformerConfig, History};
use crate::error::{CssError, Result};
use crate::Float;

/// Per-stream key/value history of each layer, oldest chunk first.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    capacity_chunks: usize,
    capacity_frames: usize,
    layers: Vec<VecDeque<History<T>>>,
}

impl<T: Float> AttentionCache<T> {
    pub fn new(config: &ConformerConfig) -> Self {
        Self {
            capacity_chunks: config.cache_chunks,
            capacity_frames: config.cache_capacity(),
            layers: vec![VecDeque::new(); config.num_layers],
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.capacity_chunks > 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Chunks currently held for a layer.
    pub fn cached_chunks(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn cached_frames(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|h| h.keys.rows()).sum()
    }

    /// Cached keys and values of a layer concatenated along time, or
    /// `None` when nothing is cached.
    pub fn history(&self, layer: usize) -> Option<History<T>> {
        let chunks = self.layers.get(layer)?;
        if chunks.is_empty() {
            return None;
        }
        let cat = |f: fn(&History<T>) -> &Tensor<T>| {
            let cols = f(&chunks[0]).cols();
            let data: Vec<T> = chunks.iter().flat_map(|h| f(h).data().iter().copied()).collect();
            let rows = data.len() / cols.max(1);
            Tensor::new(vec![rows, cols], data).expect("consistent widths")
        };
        Some(History {
            keys: cat(|h| &h.keys),
            values: cat(|h| &h.values),
        })
    }

    /// Appends one chunk per layer, evicting the oldest when full.
    /// A disabled cache ignores the call.
    pub fn push(&mut self, chunk: Vec<History<T>>) -> Result<()> {
        if !self.is_enabled() {
            return Ok(());
        }
        if chunk.len() != self.layers.len() {
            return Err(CssError::Cache(format!(
                "got keys/values for {} layers, cache has {}",
                chunk.len(),
                self.layers.len()
            )));
        }
        for (q, h) in self.layers.iter_mut().zip(chunk) {
            q.push_back(h);
            while q.len() > self.capacity_chunks {
                q.pop_front();
            }
            let frames: usize = q.iter().map(|h| h.keys.rows()).sum();
            if frames > self.capacity_frames {
                return Err(CssError::Cache(format!(
                    "{frames} cached frames exceed the capacity of {}",
                    self.capacity_frames
                )));
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(VecDeque::clear);
    }
}
