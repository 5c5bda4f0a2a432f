//! Exit-head training on cached features.
//!
//! The corpus stores every intermediate hidden state once, so the frozen base
//! model never runs during optimization. Each head is fit independently by
//! full-batch gradient descent on cross-entropy against the final layer's
//! greedy token at the same position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use super::{build_model, KvCache, ToyModel, ToyModelSpec};
use crate::error::{Error, Result};
use crate::sampling::{argmax, sample_index, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCorpus {
    pub sequences: Vec<Vec<u32>>,
    /// Final-layer greedy token at each position.
    pub labels: Vec<Vec<u32>>,
    /// `[sequence][layer - 1]`, each a row-major `seq_len x hidden_dim` block
    /// of raw hidden states for layers `1..L`.
    pub cached_features: Vec<Vec<Vec<f64>>>,
}

impl TrainCorpus {
    pub fn num_tokens(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Per head (layers `1..L`), the loss after `0..=steps` updates.
    pub loss_curves: Vec<Vec<f64>>,
}

/// Samples sequences from the model itself at temperature 1, each starting
/// from a uniformly random token, and caches features and labels from a single
/// full-depth pass.
pub fn build_corpus(model: &ToyModel, num_sequences: usize, seq_len: usize, rng_seed: u64) -> Result<TrainCorpus> {
    if seq_len > model.max_context() {
        return Err(Error::ContextOverflow { needed: seq_len, max: model.max_context() });
    }
    let l = model.num_layers();
    let d = model.hidden_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut corpus = TrainCorpus { sequences: Vec::new(), labels: Vec::new(), cached_features: Vec::new() };
    for _ in 0..num_sequences {
        let mut kv: KvCache = model.new_kv_cache();
        let mut seq = Vec::with_capacity(seq_len);
        let mut labels = Vec::with_capacity(seq_len);
        let mut feats = vec![Vec::with_capacity(seq_len * d); l - 1];
        if seq_len > 0 {
            seq.push(rng.gen_range(0..model.vocab_size()) as u32);
        }
        for pos in 0..seq_len {
            let mut h = model.embed(seq[pos])?;
            for layer in 1..=l {
                h = model.forward_layer(layer, pos, &h, &mut kv)?;
                if layer < l {
                    feats[layer - 1].extend_from_slice(&h);
                }
            }
            let logits = model.final_logits(&h)?;
            labels.push(argmax(&logits) as u32);
            if pos + 1 < seq_len {
                seq.push(sample_index(&softmax(&logits), &mut rng) as u32);
            }
        }
        corpus.sequences.push(seq);
        corpus.labels.push(labels);
        corpus.cached_features.push(feats);
    }
    Ok(corpus)
}

/// Mean cross-entropy of `head` (`[vocab][dim]`) over row-major `features`.
pub fn head_loss(head: &[f64], features: &[f64], labels: &[u32]) -> f64 {
    head_gradient_impl(head, features, labels, false).0
}

/// Mean cross-entropy and its gradient with respect to `head`.
pub fn head_gradient(head: &[f64], features: &[f64], labels: &[u32]) -> (f64, Vec<f64>) {
    head_gradient_impl(head, features, labels, true)
}

fn head_gradient_impl(head: &[f64], features: &[f64], labels: &[u32], want_grad: bool) -> (f64, Vec<f64>) {
    let n = labels.len();
    let d = features.len() / n.max(1);
    let v = head.len() / d.max(1);
    // logits[n][v] = features[n][d] * head^T
    let mut logits = vec![0.0; n * v];
    unsafe {
        matrixmultiply::dgemm(
            n, d, v, 1.0,
            features.as_ptr(), d as isize, 1,
            head.as_ptr(), 1, d as isize,
            0.0, logits.as_mut_ptr(), v as isize, 1,
        );
    }
    let mut loss = 0.0;
    for (row, &y) in logits.chunks_exact_mut(v).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y as usize];
        if want_grad {
            // Row becomes softmax minus one-hot.
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
            row[y as usize] -= 1.0;
        }
    }
    let inv = 1.0 / n as f64;
    if !want_grad {
        return (loss * inv, Vec::new());
    }
    // grad[v][d] = residual^T * features / n
    let mut grad = vec![0.0; head.len()];
    unsafe {
        matrixmultiply::dgemm(
            v, n, d, inv,
            logits.as_ptr(), 1, v as isize,
            features.as_ptr(), d as isize, 1,
            0.0, grad.as_mut_ptr(), d as isize, 1,
        );
    }
    (loss * inv, grad)
}

/// Normalized features and labels for one intermediate layer, flattened
/// across the corpus.
pub(crate) fn layer_dataset(model: &ToyModel, corpus: &TrainCorpus, layer: usize) -> Result<(Vec<f64>, Vec<u32>)> {
    let d = model.hidden_dim();
    let mut xs = Vec::with_capacity(corpus.num_tokens() * d);
    let mut ys = Vec::with_capacity(corpus.num_tokens());
    for (feats, labels) in corpus.cached_features.iter().zip(&corpus.labels) {
        let block = &feats[layer - 1];
        for h in block.chunks_exact(d) {
            xs.extend(model.readout_features(h)?);
        }
        ys.extend_from_slice(labels);
    }
    Ok((xs, ys))
}

fn check_corpus(model: &ToyModel, corpus: &TrainCorpus) -> Result<()> {
    if corpus.num_tokens() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let d = model.hidden_dim();
    let l = model.num_layers();
    if corpus.cached_features.len() != corpus.labels.len() || corpus.sequences.len() != corpus.labels.len() {
        return Err(Error::DimensionMismatch { expected: corpus.labels.len(), got: corpus.cached_features.len() });
    }
    for (feats, labels) in corpus.cached_features.iter().zip(&corpus.labels) {
        if feats.len() != l - 1 {
            return Err(Error::DimensionMismatch { expected: l - 1, got: feats.len() });
        }
        for block in feats {
            if block.len() != labels.len() * d {
                return Err(Error::DimensionMismatch { expected: labels.len() * d, got: block.len() });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= model.vocab_size()) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: model.vocab_size() });
        }
    }
    Ok(())
}

/// Trains every exit head in place; base parameters are not touched.
pub fn train_exit_heads(model: &mut ToyModel, corpus: &TrainCorpus, steps: usize, step_size: f64) -> Result<TrainReport> {
    check_corpus(model, corpus)?;
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {step_size}")));
    }
    let mut loss_curves = Vec::with_capacity(model.exit_heads.len());
    for layer in 1..model.num_layers() {
        let (xs, ys) = layer_dataset(model, corpus, layer)?;
        let head = &mut model.exit_heads[layer - 1];
        let mut curve = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (loss, grad) = head_gradient(head, &xs, &ys);
            curve.push(loss);
            for (w, g) in head.iter_mut().zip(&grad) {
                *w -= step_size * g;
            }
        }
        curve.push(head_loss(head, &xs, &ys));
        loss_curves.push(curve);
    }
    Ok(TrainReport { loss_curves })
}

/// Corpus and optimizer settings for [`build_trained_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub step_size: f64,
    pub corpus_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { num_sequences: 32, seq_len: 64, steps: 200, step_size: 0.02, corpus_seed: 1 }
    }
}

/// Builds a model and trains its exit heads on a corpus sampled from it.
pub fn build_trained_model(spec: ToyModelSpec, opts: &TrainOptions) -> Result<(ToyModel, TrainReport)> {
    let mut model = build_model(spec)?;
    let corpus = build_corpus(&model, opts.num_sequences, opts.seq_len.min(spec.max_context), opts.corpus_seed)?;
    let report = train_exit_heads(&mut model, &corpus, opts.steps, opts.step_size)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::greedy_labels;
    use rand::Rng;

    fn small() -> ToyModel {
        build_model(ToyModelSpec { num_layers: 4, hidden_dim: 8, vocab_size: 16, max_context: 64, seed: 21 }).unwrap()
    }

    #[test]
    fn corpus_shape() {
        let m = small();
        let c = build_corpus(&m, 1, 8, 0).unwrap();
        assert_eq!(c.labels[0].len(), 8);
        assert_eq!(c.sequences[0].len(), 8);
        assert_eq!(c.cached_features[0].len(), 3);
        assert!(c.cached_features[0].iter().all(|b| b.len() == 8 * 8));
    }

    #[test]
    fn corpus_is_seeded() {
        let m = small();
        assert_eq!(build_corpus(&m, 3, 10, 4).unwrap(), build_corpus(&m, 3, 10, 4).unwrap());
        assert!(build_corpus(&m, 1, 65, 4).is_err());
    }

    #[test]
    fn labels_match_independent_relabel() {
        let m = small();
        let c = build_corpus(&m, 4, 12, 8).unwrap();
        for (i, (seq, labels)) in c.sequences.iter().zip(&c.labels).enumerate() {
            let states = m.full_forward(seq).unwrap();
            assert_eq!(&greedy_labels(&m, &states).unwrap(), labels);
            for layer in 1..4 {
                let flat: Vec<f64> = states.iter().flat_map(|s| s[layer].clone()).collect();
                assert_eq!(flat, c.cached_features[i][layer - 1]);
            }
        }
    }

    #[test]
    fn zero_steps_leaves_heads_alone() {
        let mut m = small();
        let before = m.clone();
        let c = build_corpus(&m, 2, 8, 1).unwrap();
        let report = train_exit_heads(&mut m, &c, 0, 0.1).unwrap();
        assert_eq!(m, before);
        assert!(report.loss_curves.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn training_touches_only_heads() {
        let mut m = small();
        let base = m.base_parameter_bytes();
        let c = build_corpus(&m, 4, 16, 2).unwrap();
        train_exit_heads(&mut m, &c, 20, 0.5).unwrap();
        assert_eq!(m.base_parameter_bytes(), base);
        assert_ne!(m.exit_heads, small().exit_heads);
    }

    #[test]
    fn early_losses_fall() {
        let mut m = build_model(ToyModelSpec::default()).unwrap();
        let c = build_corpus(&m, 32, 64, 5).unwrap();
        assert_eq!(c.num_tokens(), 2048);
        let report = train_exit_heads(&mut m, &c, 10, 1e-2).unwrap();
        for curve in &report.loss_curves {
            assert!(curve.iter().all(|x| x.is_finite()));
            assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
        }
    }

    #[test]
    fn bad_corpora_rejected() {
        let mut m = small();
        let empty = TrainCorpus { sequences: vec![], labels: vec![], cached_features: vec![] };
        assert!(matches!(train_exit_heads(&mut m, &empty, 1, 0.1), Err(Error::EmptyCorpus)));
        let mut c = build_corpus(&m, 1, 4, 0).unwrap();
        c.cached_features[0][1].pop();
        assert!(matches!(train_exit_heads(&mut m, &c, 1, 0.1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = small();
        let c = build_corpus(&m, 2, 8, 3).unwrap();
        let (xs, ys) = layer_dataset(&m, &c, 2).unwrap();
        let head = m.exit_heads[1].clone();
        let (_, grad) = head_gradient(&head, &xs, &ys);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..head.len());
            let mut plus = head.clone();
            plus[i] += eps;
            let mut minus = head.clone();
            minus[i] -= eps;
            let numeric = (head_loss(&plus, &xs, &ys) - head_loss(&minus, &xs, &ys)) / (2.0 * eps);
            let rel = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "probe {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }
}
