//! Per-round traces and their JSONL encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_SCHEMA: &str = "specbound-trace/1";

/// A token proposed by an early exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftToken {
    /// Absolute index the token would occupy in the output sequence.
    pub position: usize,
    pub token_id: u32,
    pub exit_layer: Option<usize>,
    pub confidence: f64,
    /// Draft distribution the token was sampled from; sampling modes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_distribution: Option<Vec<f64>>,
}

/// Why a round stopped drafting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// An attempt ran to `d_max` without exiting.
    DepthBound,
    /// `w_max` drafts were accumulated.
    WidthBound,
    /// The token budget ran out or an end-of-sequence token was drafted.
    LengthLimit,
}

/// One draft/verify cycle.
///
/// Layer units count one layer computed for one position. Units spent
/// lazily extending earlier positions while drafting are reported in
/// `layer_units_reuse`; they run alongside the attempting position's own
/// layer and are kept apart from `layer_units_draft`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub drafts: Vec<DraftToken>,
    pub trigger: Trigger,
    pub align_target_layer: usize,
    pub accepted_count: usize,
    /// Token committed from the verification logits after the last accepted
    /// draft: the bonus when every draft was accepted, otherwise the
    /// correction.
    pub bonus_token: Option<u32>,
    pub committed: Vec<u32>,
    /// Drafting attempts, including a final one that hit the depth bound.
    pub attempts: usize,
    pub layer_units_draft: usize,
    pub layer_units_reuse: usize,
    pub layer_units_align: usize,
    pub layer_units_verify: usize,
    /// Sequential depth of the alignment phase.
    pub align_layers: usize,
    /// Sequential depth of the verification pass, `L - align_target_layer`.
    pub verify_layers: usize,
}

impl RoundTrace {
    pub fn committed_count(&self) -> usize {
        self.committed.len()
    }

    /// Whether every draft in the round was accepted.
    pub fn all_accepted(&self) -> bool {
        self.accepted_count == self.drafts.len()
    }

    /// Checks the structural invariants a round must satisfy.
    pub fn check(&self, d_max: usize, w_max: usize) -> std::result::Result<(), String> {
        let n = self.drafts.len();
        if n > w_max {
            return Err(format!("{n} drafts exceed w_max {w_max}"));
        }
        if self.accepted_count > n {
            return Err(format!("accepted {} of {n} drafts", self.accepted_count));
        }
        if let Some(d) = self.drafts.iter().find(|d| d.exit_layer.is_none_or(|l| l == 0 || l > d_max)) {
            return Err(format!("draft at {} exited at {:?}", d.position, d.exit_layer));
        }
        match self.trigger {
            Trigger::DepthBound if self.attempts != n + 1 => {
                return Err("depth-bound round must end in an unexited attempt".into());
            }
            Trigger::WidthBound if n != w_max => return Err(format!("width-bound round with {n} drafts")),
            Trigger::WidthBound | Trigger::LengthLimit if self.attempts != n => {
                return Err("every attempt must produce a draft".into());
            }
            _ => {}
        }
        let expected = self.accepted_count + usize::from(self.bonus_token.is_some());
        if self.committed.is_empty() || self.committed.len() != expected {
            return Err(format!("committed {} tokens, expected {expected}", self.committed.len()));
        }
        if self.layer_units_draft > w_max * d_max {
            return Err(format!("{} draft units exceed w_max * d_max", self.layer_units_draft));
        }
        Ok(())
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema: String,
    pub prompt_index: usize,
    pub round_index: usize,
    pub wall_time_us: u64,
    #[serde(flatten)]
    pub round: RoundTrace,
}

impl TraceRecord {
    pub fn new(prompt_index: usize, round_index: usize, wall_time_us: u64, round: RoundTrace) -> Self {
        Self { schema: TRACE_SCHEMA.to_string(), prompt_index, round_index, wall_time_us, round }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Trace(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a trace file, rejecting unknown schema versions. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Trace(format!("line {}: {e}", i + 1)))?;
        if rec.schema != TRACE_SCHEMA {
            return Err(Error::Trace(format!("line {}: unsupported schema {:?}", i + 1, rec.schema)));
        }
        records.push(rec);
    }
    Ok(records)
}
