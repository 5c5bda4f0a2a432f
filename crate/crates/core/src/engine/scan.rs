use serde::Serialize;

use crate::error::{Error, Result};
use crate::exit::{should_exit, ActConfig};
use crate::model::ToyModel;
use crate::sampling::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanCell {
    pub layer: usize,
    /// Position whose hidden states the row reads; the prediction is for the next one.
    pub position: usize,
    pub token_id: u32,
    pub confidence: f64,
    /// A shallower intermediate layer already exited with the final token.
    pub exited_before: bool,
}

/// Per-layer predictions over a greedy continuation, `cells[layer - 1][column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScan {
    pub num_layers: usize,
    pub cells: Vec<Vec<ScanCell>>,
}

impl LayerScan {
    pub fn num_positions(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    /// Greedy tokens read off the final layer.
    pub fn final_tokens(&self) -> Vec<u32> {
        self.cells.last().map(|row| row.iter().map(|c| c.token_id).collect()).unwrap_or_default()
    }

    /// Writes `layer,position,token_id,confidence,exited_before` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.cells {
            for cell in row {
                w.serialize(cell)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Greedily continues `context` for `n_positions` tokens at full depth and
/// records every layer's exit-head prediction and confidence for each step.
/// End-of-sequence tokens do not stop the scan.
pub fn layer_scan(model: &ToyModel, context: &[u32], n_positions: usize, act: &ActConfig) -> Result<LayerScan> {
    if context.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    act.validate()?;
    let l = model.num_layers();
    let needed = context.len() + n_positions;
    if needed > model.max_context() + 1 {
        return Err(Error::ContextOverflow { needed: needed - 1, max: model.max_context() });
    }
    let mut cells = vec![Vec::with_capacity(n_positions); l];
    let mut kv = model.new_kv_cache();
    let mut seq = context.to_vec();
    let mut pos = 0;
    while cells[0].len() < n_positions {
        let mut h = model.embed(seq[pos])?;
        let mut column = Vec::with_capacity(l);
        for layer in 1..=l {
            h = model.forward_layer(layer, pos, &h, &mut kv)?;
            if pos + 1 >= context.len() {
                let logits = model.exit_logits(layer, &h)?;
                let d = should_exit(&logits, layer, act)?;
                column.push((d.token_id, d.confidence, d.exited && layer < l));
            }
        }
        pos += 1;
        if column.is_empty() {
            continue;
        }
        let final_token = argmax(&model.final_logits(&h)?) as u32;
        let mut seen = false;
        for (i, &(token_id, confidence, exited)) in column.iter().enumerate() {
            cells[i].push(ScanCell { layer: i + 1, position: pos - 1, token_id, confidence, exited_before: seen });
            seen |= exited && token_id == final_token;
        }
        if pos == seq.len() {
            seq.push(final_token);
        }
    }
    Ok(LayerScan { num_layers: l, cells })
}
