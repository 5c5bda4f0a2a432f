//! Deterministic layered causal transformer with per-layer exit heads.
//!
//! Each layer is pre-normalized single-head causal attention followed by a
//! two-layer feed-forward block (expansion 2, SiLU), both residual. Every
//! intermediate layer `1..L` carries its own linear exit head; layer `L` reads
//! out through the final LM head. All heads see the RMS-normalized hidden
//! state scaled by the final normalization gain.
//!
//! Arithmetic is `f64` with fixed reduction order, so a layer's output for a
//! position depends only on its input and on the cached keys/values of
//! earlier positions at the same layer, never on how those were scheduled.

mod checkpoint;
mod kv;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{argmax, DecodeStrategy};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use kv::KvCache;
pub use train::{
    build_corpus, build_trained_model, head_gradient, head_loss, train_exit_heads, TrainCorpus, TrainOptions,
    TrainReport,
};

/// Reserved end-of-sequence token id.
pub const EOS_TOKEN: u32 = 1;

const NORM_EPS: f64 = 1e-6;
const FFN_EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self { num_layers: 12, hidden_dim: 32, vocab_size: 64, max_context: 256, seed: 7 }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidSpec(format!("num_layers must be >= 2, got {}", self.num_layers)));
        }
        if self.hidden_dim < 2 {
            return Err(Error::InvalidSpec(format!("hidden_dim must be >= 2, got {}", self.hidden_dim)));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidSpec(format!("vocab_size must be >= 4, got {}", self.vocab_size)));
        }
        if self.max_context == 0 {
            return Err(Error::InvalidSpec("max_context must be positive".into()));
        }
        Ok(())
    }
}

/// Which projection the intermediate layers read out through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Per-layer exit heads.
    #[default]
    Trained,
    /// Every layer reads out through the final LM head.
    Oracle,
}

/// Weights of one transformer layer. Matrices are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_gain: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ffn_gain: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    /// `[vocab][hidden]`
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Vec<f64>,
    /// `[vocab][hidden]`
    pub lm_head: Vec<f64>,
    /// Heads for layers `1..L`, each `[vocab][hidden]`.
    pub exit_heads: Vec<Vec<f64>>,
    pub head_mode: HeadMode,
}

fn layer_gain(layer: usize) -> f64 {
    1.0 / (3.0 * layer as f64)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}

/// Builds a model from its spec.
///
/// Weight matrices are drawn from a ChaCha8 stream seeded with `spec.seed`,
/// uniform in `[-s, s]` with `s = hidden_dim^-1/2`, in this order: embedding;
/// then for each layer `wq, wk, wv, wo, w_up, w_down`; the LM head; exit heads
/// for layers `1..L` in ascending order.
///
/// Normalization gains are fixed rather than drawn: both norms of layer `l`
/// use `1 / (3 l)`, so each layer's update shrinks with depth and predictions
/// sharpen gradually, and the readout norm uses `sqrt(hidden_dim)`.
pub fn build_model(spec: ToyModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let v = spec.vocab_size;
    let f = FFN_EXPANSION * d;
    let s = (d as f64).powf(-0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let embedding = uniform(&mut rng, v * d, s);
    let layers = (1..=spec.num_layers)
        .map(|l| LayerParams {
            attn_gain: vec![layer_gain(l); d],
            wq: uniform(&mut rng, d * d, s),
            wk: uniform(&mut rng, d * d, s),
            wv: uniform(&mut rng, d * d, s),
            wo: uniform(&mut rng, d * d, s),
            ffn_gain: vec![layer_gain(l); d],
            w_up: uniform(&mut rng, f * d, s),
            w_down: uniform(&mut rng, d * f, s),
        })
        .collect();
    let lm_head = uniform(&mut rng, v * d, s);
    let exit_heads = (1..spec.num_layers).map(|_| uniform(&mut rng, v * d, s)).collect();

    Ok(ToyModel {
        spec,
        embedding,
        layers,
        final_gain: vec![(d as f64).sqrt(); d],
        lm_head,
        exit_heads,
        head_mode: HeadMode::Trained,
    })
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

/// Four interleaved partial sums, combined pairwise. Every forward path goes
/// through here, so results stay bit-identical between them.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyModel {
    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn max_context(&self) -> usize {
        self.spec.max_context
    }

    pub fn with_head_mode(mut self, mode: HeadMode) -> Self {
        self.head_mode = mode;
        self
    }

    pub fn new_kv_cache(&self) -> KvCache {
        KvCache::new(self.num_layers(), self.hidden_dim())
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { token, vocab: self.vocab_size() })
        }
    }

    /// Layer-0 state of a token.
    pub fn embed(&self, token: u32) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let d = self.hidden_dim();
        let t = token as usize;
        Ok(self.embedding[t * d..(t + 1) * d].to_vec())
    }

    /// Runs `layer` for `position`, appending the position's key/value at that
    /// layer to `kv`. Positions `0..position` must already be cached there.
    pub fn forward_layer(
        &self,
        layer: usize,
        position: usize,
        hidden_in: &[f64],
        kv: &mut KvCache,
    ) -> Result<Vec<f64>> {
        let l = self.num_layers();
        if layer == 0 || layer > l {
            return Err(Error::LayerOutOfRange { layer, max: l });
        }
        let d = self.hidden_dim();
        if hidden_in.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: hidden_in.len() });
        }
        if position >= self.max_context() {
            return Err(Error::ContextOverflow { needed: position + 1, max: self.max_context() });
        }
        kv.check_writable(layer, position)?;
        let p = &self.layers[layer - 1];

        let mut normed = vec![0.0; d];
        rms_norm(hidden_in, &p.attn_gain, &mut normed);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        matvec(&p.wq, &normed, &mut q);
        matvec(&p.wk, &normed, &mut k);
        matvec(&p.wv, &normed, &mut v);
        kv.push(layer, position, &k, &v)?;

        let scale = 1.0 / (d as f64).sqrt();
        let keys = kv.keys(layer);
        let values = kv.values(layer);
        let n = position + 1;
        let mut scores: Vec<f64> = keys.chunks_exact(d).take(n).map(|kj| dot(&q, kj) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            sum += *s;
        }
        let mut ctx = vec![0.0; d];
        for (w, vj) in scores.iter().zip(values.chunks_exact(d)) {
            let w = w / sum;
            for (c, &x) in ctx.iter_mut().zip(vj) {
                *c += w * x;
            }
        }

        let mut h = hidden_in.to_vec();
        let mut attn_out = vec![0.0; d];
        matvec(&p.wo, &ctx, &mut attn_out);
        for (hv, a) in h.iter_mut().zip(&attn_out) {
            *hv += a;
        }

        rms_norm(&h, &p.ffn_gain, &mut normed);
        let mut up = vec![0.0; FFN_EXPANSION * d];
        matvec(&p.w_up, &normed, &mut up);
        for u in &mut up {
            *u = silu(*u);
        }
        let mut down = vec![0.0; d];
        matvec(&p.w_down, &up, &mut down);
        for (hv, x) in h.iter_mut().zip(&down) {
            *hv += x;
        }
        Ok(h)
    }

    /// Normalized features every head projects from.
    pub fn readout_features(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let d = self.hidden_dim();
        if hidden.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: hidden.len() });
        }
        let mut out = vec![0.0; d];
        rms_norm(hidden, &self.final_gain, &mut out);
        Ok(out)
    }

    fn project(&self, head: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
        let f = self.readout_features(hidden)?;
        let mut logits = vec![0.0; self.vocab_size()];
        matvec(head, &f, &mut logits);
        Ok(logits)
    }

    /// Reference logits from a layer-`L` state.
    pub fn final_logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        self.project(&self.lm_head, hidden)
    }

    /// Unscaled early-exit logits at `layer` in `1..=L`.
    pub fn exit_logits(&self, layer: usize, hidden: &[f64]) -> Result<Vec<f64>> {
        let l = self.num_layers();
        if layer == 0 || layer > l {
            return Err(Error::LayerOutOfRange { layer, max: l });
        }
        if layer == l || self.head_mode == HeadMode::Oracle {
            self.final_logits(hidden)
        } else {
            self.project(&self.exit_heads[layer - 1], hidden)
        }
    }

    /// States at every layer `0..=L` for every position of `tokens`, computed
    /// one position at a time through the full stack.
    pub fn full_forward(&self, tokens: &[u32]) -> Result<Vec<Vec<Vec<f64>>>> {
        if tokens.len() > self.max_context() {
            return Err(Error::ContextOverflow { needed: tokens.len(), max: self.max_context() });
        }
        let mut kv = self.new_kv_cache();
        let mut out = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            let mut states = Vec::with_capacity(self.num_layers() + 1);
            states.push(self.embed(tok)?);
            for layer in 1..=self.num_layers() {
                let next = self.forward_layer(layer, pos, &states[layer - 1], &mut kv)?;
                states.push(next);
            }
            out.push(states);
        }
        Ok(out)
    }

    /// Tensors in checkpoint order, excluding exit heads.
    pub fn base_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for p in &self.layers {
            out.extend([
                &p.attn_gain[..],
                &p.wq,
                &p.wk,
                &p.wv,
                &p.wo,
                &p.ffn_gain,
                &p.w_up,
                &p.w_down,
            ]);
        }
        out.push(&self.final_gain);
        out.push(&self.lm_head);
        out
    }

    /// Little-endian bytes of every base (non-exit-head) parameter.
    pub fn base_parameter_bytes(&self) -> Vec<u8> {
        self.base_tensors()
            .into_iter()
            .flat_map(|t| t.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }
}

/// Output of full-depth autoregressive decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub tokens: Vec<u32>,
    /// Layers run per generated token; always `L`.
    pub layers_per_token: Vec<usize>,
    pub hit_eos: bool,
}

/// Full-depth autoregressive decoding. Stops after `n` tokens or once the
/// end-of-sequence token has been emitted.
pub fn baseline_decode(
    model: &ToyModel,
    prompt: &[u32],
    n: usize,
    strategy: DecodeStrategy,
    rng_seed: u64,
) -> Result<BaselineOutput> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    strategy.validate()?;
    let needed = prompt.len() + n;
    if needed > model.max_context() {
        return Err(Error::ContextOverflow { needed, max: model.max_context() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut kv = model.new_kv_cache();
    let mut out = BaselineOutput { tokens: Vec::with_capacity(n), layers_per_token: Vec::new(), hit_eos: false };
    if n == 0 {
        return Ok(out);
    }
    let mut logits = Vec::new();
    let mut pos = 0;
    let feed = |tok: u32, pos: usize, kv: &mut KvCache| -> Result<Vec<f64>> {
        let mut h = model.embed(tok)?;
        for layer in 1..=model.num_layers() {
            h = model.forward_layer(layer, pos, &h, kv)?;
        }
        model.final_logits(&h)
    };
    for &tok in prompt {
        logits = feed(tok, pos, &mut kv)?;
        pos += 1;
    }
    loop {
        let next = strategy.select(&logits, &mut rng)?;
        out.tokens.push(next);
        out.layers_per_token.push(model.num_layers());
        if next == EOS_TOKEN {
            out.hit_eos = true;
            break;
        }
        if out.tokens.len() == n {
            break;
        }
        logits = feed(next, pos, &mut kv)?;
        pos += 1;
    }
    Ok(out)
}

/// Greedy argmax of final logits at every position of a fully computed sequence.
pub fn greedy_labels(model: &ToyModel, states: &[Vec<Vec<f64>>]) -> Result<Vec<u32>> {
    let l = model.num_layers();
    states
        .iter()
        .map(|s| model.final_logits(&s[l]).map(|z| argmax(&z) as u32))
        .collect()
}
