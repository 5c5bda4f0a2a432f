use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::HiddenStateCache;
use super::trace::{DraftToken, RoundTrace, Trigger};
use super::{DepthAlign, EngineConfig};
use crate::error::{Error, Result};
use crate::exit::should_exit;
use crate::model::{KvCache, ToyModel, EOS_TOKEN};
use crate::sampling::{argmax, sample_index};

/// Result of one drafting attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum DraftOutcome {
    Exited(DraftToken),
    DepthBoundHit,
}

#[derive(Debug, Clone, Default)]
struct RoundState {
    open: bool,
    drafts: Vec<DraftToken>,
    attempts: usize,
    draft_units: usize,
    reuse_units: usize,
}

/// Decoding state for one prompt.
///
/// Between rounds the KV cache covers every committed token except the last,
/// which is the input of the next round's first in-flight position. A
/// session created by [`Session::prefill`] instead holds the full prompt and
/// a pending anchor; [`Session::commit_anchor`] turns it into the former
/// shape by committing one token from the anchor logits.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m ToyModel,
    cfg: EngineConfig,
    tokens: Vec<u32>,
    prompt_len: usize,
    kv: KvCache,
    cache: HiddenStateCache,
    anchor: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    round: RoundState,
    exit_script: Option<VecDeque<Option<usize>>>,
    recorded: Option<Vec<Vec<Vec<f64>>>>,
    finished: bool,
    truncated: bool,
    hit_eos: bool,
}

impl<'m> Session<'m> {
    fn init(model: &'m ToyModel, prompt: &[u32], cfg: &EngineConfig, full: bool, record: bool) -> Result<Self> {
        cfg.validate(model.num_layers())?;
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if prompt.len() > model.max_context() {
            return Err(Error::ContextOverflow { needed: prompt.len(), max: model.max_context() });
        }
        let mut s = Session {
            model,
            cfg: cfg.clone(),
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            kv: model.new_kv_cache(),
            cache: HiddenStateCache::new(model.num_layers(), model.hidden_dim(), cfg.w_max),
            anchor: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            round: RoundState::default(),
            exit_script: None,
            recorded: record.then(Vec::new),
            finished: false,
            truncated: false,
            hit_eos: false,
        };
        let upto = if full { prompt.len() } else { prompt.len() - 1 };
        for (pos, &tok) in prompt[..upto].iter().enumerate() {
            let mut states = Vec::new();
            let mut h = model.embed(tok)?;
            for layer in 1..=model.num_layers() {
                if record {
                    states.push(h.clone());
                }
                h = model.forward_layer(layer, pos, &h, &mut s.kv)?;
            }
            s.anchor = Some(model.final_logits(&h)?);
            if let Some(rec) = &mut s.recorded {
                states.push(h);
                rec.push(states);
            }
        }
        for &tok in &prompt[upto..] {
            model.embed(tok)?;
        }
        s.update_finished();
        Ok(s)
    }

    /// Full-depth pass over the whole prompt. The final logits of the last
    /// prompt position become the anchor; no token is pending.
    pub fn prefill(model: &'m ToyModel, prompt: &[u32], cfg: &EngineConfig) -> Result<Self> {
        Self::init(model, prompt, cfg, true, false)
    }

    /// Session ready for rounds: the prompt minus its last token is prefilled
    /// and the last prompt token is the first in-flight input.
    pub fn start(model: &'m ToyModel, prompt: &[u32], cfg: &EngineConfig) -> Result<Self> {
        Self::init(model, prompt, cfg, false, false)
    }

    /// Like [`Session::start`], additionally keeping every committed
    /// position's states at layers `0..=L` for coherence checks.
    pub fn start_recorded(model: &'m ToyModel, prompt: &[u32], cfg: &EngineConfig) -> Result<Self> {
        Self::init(model, prompt, cfg, false, true)
    }

    pub fn model(&self) -> &'m ToyModel {
        self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Prompt followed by every committed token.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn hidden_states(&self) -> &HiddenStateCache {
        &self.cache
    }

    /// Final logits of the last fully processed committed position.
    pub fn anchor(&self) -> Option<&[f64]> {
        self.anchor.as_deref()
    }

    /// Recorded states for each position whose KV is committed.
    pub fn recorded_states(&self) -> Option<&[Vec<Vec<f64>>]> {
        self.recorded.as_deref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Whether decoding stopped at the context limit before the token budget.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn hit_eos(&self) -> bool {
        self.hit_eos
    }

    /// Switches to another configuration before the first round, keeping the
    /// prefilled prompt.
    pub fn reconfigure(&mut self, cfg: &EngineConfig) -> Result<()> {
        if self.round.open || self.tokens.len() != self.prompt_len {
            return Err(Error::InvalidConfig("a session can only be reconfigured before it decodes".into()));
        }
        cfg.validate(self.model.num_layers())?;
        self.cfg = cfg.clone();
        self.cache = HiddenStateCache::new(self.model.num_layers(), self.model.hidden_dim(), cfg.w_max);
        self.rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        self.exit_script = None;
        self.finished = false;
        self.truncated = false;
        self.update_finished();
        Ok(())
    }

    /// Restarts the session's random stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Overrides exit decisions for upcoming drafting attempts: each entry is
    /// the layer at which that attempt exits, or `None` to run to `d_max`.
    /// Once the script is exhausted the confidence rule applies again.
    #[doc(hidden)]
    pub fn script_exits(&mut self, exits: impl IntoIterator<Item = Option<usize>>) {
        self.exit_script = Some(exits.into_iter().collect());
    }

    fn pending(&self) -> bool {
        self.kv.min_len() + 1 == self.tokens.len()
    }

    fn budget(&self) -> usize {
        let generated = self.tokens.len() - self.prompt_len;
        let by_count = self.cfg.max_new_tokens.saturating_sub(generated);
        let by_context = self.model.max_context().saturating_sub(self.tokens.len());
        by_count.min(by_context)
    }

    fn update_finished(&mut self) {
        if self.hit_eos {
            self.finished = true;
            return;
        }
        let generated = self.tokens.len() - self.prompt_len;
        if generated >= self.cfg.max_new_tokens {
            self.finished = true;
        } else if self.tokens.len() >= self.model.max_context() {
            self.finished = true;
            self.truncated = true;
        }
    }

    fn push_committed(&mut self, tok: u32) {
        self.tokens.push(tok);
        if tok == EOS_TOKEN {
            self.hit_eos = true;
        }
    }

    /// Commits one token chosen from the anchor logits of a prefilled session.
    pub fn commit_anchor(&mut self) -> Result<u32> {
        if self.pending() || self.round.open {
            return Err(Error::InvalidConfig("no anchor awaiting commitment".into()));
        }
        if self.finished {
            return Err(Error::InvalidConfig("session is finished".into()));
        }
        let anchor = self.anchor.as_ref().ok_or(Error::EmptyPrompt)?;
        let tok = self.cfg.strategy.select(anchor, &mut self.rng)?;
        self.push_committed(tok);
        self.update_finished();
        Ok(tok)
    }

    fn begin_round(&mut self) -> Result<()> {
        if self.round.open {
            return Ok(());
        }
        if self.finished {
            return Err(Error::InvalidConfig("session is finished".into()));
        }
        if !self.pending() {
            return Err(Error::InvalidConfig("commit the anchor before drafting".into()));
        }
        self.cache.reset(self.tokens.len() - 1);
        self.round = RoundState { open: true, ..RoundState::default() };
        Ok(())
    }

    fn compute(&mut self, slot: usize, layer: usize) -> Result<()> {
        let pos = self.cache.position(slot);
        let h = self.model.forward_layer(layer, pos, self.cache.get(slot, layer - 1)?, &mut self.kv)?;
        self.cache.write(slot, layer, &h)
    }

    /// Runs the missing layers of `slot` up to `target`, first bringing every
    /// earlier slot to each layer it needs. Returns the layer units computed
    /// for earlier slots and for `slot` itself.
    fn extend_slot(&mut self, slot: usize, target: usize) -> Result<(usize, usize)> {
        let mut others = 0;
        let mut own = 0;
        for layer in self.cache.high_water(slot) + 1..=target {
            for earlier in 0..slot {
                if self.cache.high_water(earlier) < layer {
                    let (o, e) = self.extend_slot(earlier, layer)?;
                    others += o + e;
                }
            }
            self.compute(slot, layer)?;
            own += 1;
        }
        Ok((others, own))
    }

    /// Brings the in-flight position `position` to `target_layer`, computing
    /// any lagging earlier positions on the way. Returns layer units computed.
    pub fn extend_to_layer(&mut self, position: usize, target_layer: usize) -> Result<usize> {
        let l = self.model.num_layers();
        if target_layer > l {
            return Err(Error::LayerOutOfRange { layer: target_layer, max: l });
        }
        let slot = self
            .cache
            .slot_of(position)
            .filter(|_| self.round.open)
            .ok_or_else(|| Error::CacheFault(format!("position {position} is not in flight")))?;
        let (o, e) = self.extend_slot(slot, target_layer)?;
        self.round.reuse_units += o + e;
        Ok(o + e)
    }

    fn scripted_exit(&mut self) -> Option<Option<usize>> {
        self.exit_script.as_mut().and_then(VecDeque::pop_front)
    }

    /// One drafting attempt at the next in-flight position.
    pub fn draft_next(&mut self) -> Result<DraftOutcome> {
        self.begin_round()?;
        let slot = self.cache.len();
        if slot >= self.cfg.w_max || self.round.drafts.len() != slot {
            return Err(Error::CacheFault(format!("no drafting slot left after {slot} attempts")));
        }
        let input = match slot {
            0 => *self.tokens.last().expect("non-empty"),
            _ => self.round.drafts[slot - 1].token_id,
        };
        let pos = self.cache.position(slot);
        if pos >= self.model.max_context() {
            return Err(Error::ContextOverflow { needed: pos + 1, max: self.model.max_context() });
        }
        self.cache.open_slot(&self.model.embed(input)?)?;
        self.round.attempts += 1;
        let script = self.scripted_exit();
        for layer in 1..=self.cfg.d_max {
            for earlier in 0..slot {
                if self.cache.high_water(earlier) < layer {
                    let (o, e) = self.extend_slot(earlier, layer)?;
                    self.round.reuse_units += o + e;
                }
            }
            self.compute(slot, layer)?;
            self.round.draft_units += 1;
            let logits = self.model.exit_logits(layer, self.cache.get(slot, layer)?)?;
            let decision = should_exit(&logits, layer, &self.cfg.act)?;
            let exits = match script {
                Some(forced) => forced == Some(layer),
                None => decision.exited,
            };
            if !exits {
                continue;
            }
            let (token_id, draft_distribution) = if self.cfg.strategy.is_greedy() {
                (decision.token_id, None)
            } else {
                let q = self.cfg.strategy.distribution(&logits)?;
                (sample_index(&q, &mut self.rng) as u32, Some(q))
            };
            let draft = DraftToken {
                position: pos + 1,
                token_id,
                exit_layer: Some(layer),
                confidence: decision.confidence,
                draft_distribution,
            };
            self.round.drafts.push(draft.clone());
            return Ok(DraftOutcome::Exited(draft));
        }
        Ok(DraftOutcome::DepthBoundHit)
    }

    /// Brings every in-flight position to a common layer, layer by layer with
    /// positions in ascending order. Returns the target and the units spent.
    pub fn align_block(&mut self, trigger: Trigger) -> Result<(usize, usize, usize)> {
        let slots = self.cache.len();
        if slots == 0 {
            return Err(Error::CacheFault("nothing in flight to align".into()));
        }
        let deepest_exit = self.round.drafts.iter().filter_map(|d| d.exit_layer).max();
        let target = match (trigger, self.cfg.depth_align) {
            (Trigger::DepthBound, DepthAlign::DepthBound) => self.cfg.d_max,
            _ => deepest_exit.unwrap_or(self.cfg.d_max),
        };
        let shallowest = (0..slots).map(|s| self.cache.high_water(s)).min().unwrap_or(target);
        let mut units = 0;
        for layer in shallowest + 1..=target {
            for slot in 0..slots {
                if self.cache.high_water(slot) == layer - 1 {
                    self.compute(slot, layer)?;
                    units += 1;
                }
            }
        }
        Ok((target, units, target.saturating_sub(shallowest)))
    }

    /// Runs layers `target + 1..=L` for every in-flight position and applies
    /// the acceptance rule, committing accepted drafts plus the token read off
    /// the last verified position. Rejected positions are rolled back.
    pub fn verify_block(&mut self, target: usize) -> Result<(usize, Option<u32>, Vec<u32>, usize)> {
        let l = self.model.num_layers();
        let slots = self.cache.len();
        let mut units = 0;
        for layer in target + 1..=l {
            for slot in 0..slots {
                if self.cache.high_water(slot) == layer - 1 {
                    self.compute(slot, layer)?;
                    units += 1;
                }
            }
        }
        if (0..slots).any(|s| self.cache.high_water(s) != l) {
            return Err(Error::CacheFault("verification left a position short of the final layer".into()));
        }
        let read_layer = if self.cfg.verifier_fault { l - 1 } else { l };
        let finals = (0..slots)
            .map(|s| self.model.final_logits(self.cache.get(s, read_layer)?))
            .collect::<Result<Vec<_>>>()?;

        let drafts = std::mem::take(&mut self.round.drafts);
        let mut accepted = 0;
        let mut extra = None;
        for (i, d) in drafts.iter().enumerate() {
            let target_logits = &finals[i];
            if self.cfg.strategy.is_greedy() {
                let best = argmax(target_logits) as u32;
                if d.token_id == best {
                    accepted += 1;
                    continue;
                }
                extra = Some(best);
                break;
            }
            let p = self.cfg.strategy.distribution(target_logits)?;
            let q = d.draft_distribution.as_ref().ok_or(Error::MissingDraftDistribution { index: i })?;
            let t = d.token_id as usize;
            let u: f64 = self.rng.gen();
            if u * q[t] < p[t] {
                accepted += 1;
                continue;
            }
            let residual: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
            let mass: f64 = residual.iter().sum();
            let tok = if mass > 0.0 {
                let norm: Vec<f64> = residual.iter().map(|r| r / mass).collect();
                sample_index(&norm, &mut self.rng)
            } else {
                sample_index(&p, &mut self.rng)
            };
            extra = Some(tok as u32);
            break;
        }
        if extra.is_none() && accepted < slots {
            // Every draft accepted and the last position was processed too.
            let z = &finals[accepted];
            extra = Some(self.cfg.strategy.select(z, &mut self.rng)?);
        }

        let mut committed: Vec<u32> = drafts[..accepted].iter().map(|d| d.token_id).collect();
        committed.extend(extra);
        if let Some(eos) = committed.iter().position(|&t| t == EOS_TOKEN) {
            committed.truncate(eos + 1);
        }
        let base = self.cache.base_position();
        let kept = committed.len().min(slots);
        if let Some(rec) = &mut self.recorded {
            for s in 0..kept {
                rec.push((0..=l).map(|layer| self.cache.get(s, layer).map(<[f64]>::to_vec)).collect::<Result<_>>()?);
            }
        }
        self.kv.truncate(base + kept);
        self.anchor = Some(finals[committed.len() - 1].clone());
        for &t in &committed {
            self.push_committed(t);
        }
        self.round.drafts = drafts;
        Ok((accepted, extra, committed, units))
    }

    /// Drafts until a bound triggers, then aligns and verifies.
    pub fn run_round(&mut self) -> Result<RoundTrace> {
        self.begin_round()?;
        let budget = self.budget();
        if budget == 0 {
            return Err(Error::ContextOverflow { needed: self.tokens.len() + 1, max: self.model.max_context() });
        }
        let trigger = loop {
            let n = self.round.drafts.len();
            if n == self.cfg.w_max {
                break Trigger::WidthBound;
            }
            if n == budget || self.round.drafts.last().is_some_and(|d| d.token_id == EOS_TOKEN) {
                break Trigger::LengthLimit;
            }
            if self.draft_next()? == DraftOutcome::DepthBoundHit {
                break Trigger::DepthBound;
            }
        };
        let (target, align_units, align_layers) = self.align_block(trigger)?;
        let (accepted, bonus, committed, verify_units) = self.verify_block(target)?;
        let round = std::mem::take(&mut self.round);
        self.update_finished();
        Ok(RoundTrace {
            drafts: round.drafts,
            trigger,
            align_target_layer: target,
            accepted_count: accepted,
            bonus_token: bonus,
            committed,
            attempts: round.attempts,
            layer_units_draft: round.draft_units,
            layer_units_reuse: round.reuse_units,
            layer_units_align: align_units,
            layer_units_verify: verify_units,
            align_layers,
            verify_layers: self.model.num_layers() - target,
        })
    }
}
