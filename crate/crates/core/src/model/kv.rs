use crate::error::{Error, Result};

/// Per-layer key/value storage over absolute positions.
///
/// Layers are numbered `1..=num_layers`. Each layer holds a contiguous prefix
/// of positions; entries are appended in position order and removed only by
/// [`KvCache::truncate`].
#[derive(Debug, Clone)]
pub struct KvCache {
    dim: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            dim,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of filled positions at `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer - 1].len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.iter().all(Vec::is_empty)
    }

    /// Shortest filled prefix across layers.
    pub fn min_len(&self) -> usize {
        (1..=self.num_layers()).map(|l| self.len(l)).min().unwrap_or(0)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.num_layers() {
            Err(Error::LayerOutOfRange { layer, max: self.num_layers() })
        } else {
            Ok(())
        }
    }

    /// Errors unless positions `0..position` are present at `layer` and
    /// `position` itself is still free.
    pub fn check_writable(&self, layer: usize, position: usize) -> Result<()> {
        self.check_layer(layer)?;
        let len = self.len(layer);
        if len < position {
            Err(Error::CacheGap { layer, position: len })
        } else if len > position {
            Err(Error::CacheOverwrite { layer, position })
        } else {
            Ok(())
        }
    }

    pub fn push(&mut self, layer: usize, position: usize, key: &[f64], value: &[f64]) -> Result<()> {
        self.check_writable(layer, position)?;
        if key.len() != self.dim || value.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: key.len() });
        }
        self.keys[layer - 1].extend_from_slice(key);
        self.values[layer - 1].extend_from_slice(value);
        Ok(())
    }

    /// Keys for positions `0..len` at `layer`, flattened row-major.
    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer - 1]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer - 1]
    }

    pub fn key(&self, layer: usize, position: usize) -> &[f64] {
        &self.keys[layer - 1][position * self.dim..(position + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, position: usize) -> &[f64] {
        &self.values[layer - 1][position * self.dim..(position + 1) * self.dim]
    }

    /// Drops every entry at positions `>= n` on every layer.
    pub fn truncate(&mut self, n: usize) {
        let keep = n * self.dim;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            if buf.len() > keep {
                if cfg!(debug_assertions) {
                    buf[keep..].fill(f64::NAN);
                }
                buf.truncate(keep);
            }
        }
    }
}
