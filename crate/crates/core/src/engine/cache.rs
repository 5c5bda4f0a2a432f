use crate::error::{Error, Result};

/// Fixed-size table of in-flight hidden states for one draft window.
///
/// Slot `i` holds the position `base + i`. For each slot the states for layers
/// `0..=high_water` are present with no gaps; layer 0 is the token embedding.
/// The table is allocated once per session (`(L + 1) x capacity` vectors) and
/// reset at the start of every round.
#[derive(Debug, Clone)]
pub struct HiddenStateCache {
    num_layers: usize,
    dim: usize,
    capacity: usize,
    states: Vec<f64>,
    high_water: Vec<Option<usize>>,
    base: usize,
    used: usize,
}

impl HiddenStateCache {
    pub fn new(num_layers: usize, dim: usize, capacity: usize) -> Self {
        Self {
            num_layers,
            dim,
            capacity,
            states: vec![0.0; capacity * (num_layers + 1) * dim],
            high_water: vec![None; capacity],
            base: 0,
            used: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of occupied slots.
    pub fn len(&self) -> usize {
        self.used
    }

    pub fn is_empty(&self) -> bool {
        self.used == 0
    }

    pub fn base_position(&self) -> usize {
        self.base
    }

    pub fn position(&self, slot: usize) -> usize {
        self.base + slot
    }

    /// Slot of an absolute position, if it is in flight.
    pub fn slot_of(&self, position: usize) -> Option<usize> {
        position.checked_sub(self.base).filter(|&s| s < self.used)
    }

    /// Empties the table for a window starting at `base`. Debug builds fill
    /// the old contents with NaN so stale reads surface immediately.
    pub fn reset(&mut self, base: usize) {
        if cfg!(debug_assertions) {
            self.states.fill(f64::NAN);
        }
        self.high_water.fill(None);
        self.base = base;
        self.used = 0;
    }

    /// Claims the next slot with its layer-0 state.
    pub fn open_slot(&mut self, embedding: &[f64]) -> Result<usize> {
        if self.used == self.capacity {
            return Err(Error::CacheFault(format!("all {} slots in use", self.capacity)));
        }
        let slot = self.used;
        self.used += 1;
        self.high_water[slot] = None;
        self.write(slot, 0, embedding)?;
        Ok(slot)
    }

    pub fn high_water(&self, slot: usize) -> usize {
        self.high_water[slot].expect("open slot has a layer-0 state")
    }

    fn offset(&self, slot: usize, layer: usize) -> usize {
        (slot * (self.num_layers + 1) + layer) * self.dim
    }

    /// Stores the state of `slot` at `layer`; layers must be written in order.
    pub fn write(&mut self, slot: usize, layer: usize, state: &[f64]) -> Result<()> {
        if slot >= self.used {
            return Err(Error::CacheFault(format!("slot {slot} is not open")));
        }
        let next = self.high_water[slot].map_or(0, |h| h + 1);
        if layer != next || layer > self.num_layers {
            return Err(Error::CacheFault(format!("slot {slot}: write to layer {layer}, expected {next}")));
        }
        if state.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: state.len() });
        }
        let at = self.offset(slot, layer);
        self.states[at..at + self.dim].copy_from_slice(state);
        self.high_water[slot] = Some(layer);
        Ok(())
    }

    pub fn get(&self, slot: usize, layer: usize) -> Result<&[f64]> {
        match self.high_water.get(slot).copied().flatten() {
            Some(h) if slot < self.used && layer <= h => {
                let at = self.offset(slot, layer);
                Ok(&self.states[at..at + self.dim])
            }
            _ => Err(Error::CacheFault(format!("slot {slot} has no state at layer {layer}"))),
        }
    }
}
