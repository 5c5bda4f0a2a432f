//! Prompt sources: token-id text files and a seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::EOS_TOKEN;

/// Parses one prompt per line, each a whitespace-separated list of token ids.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_prompts(text: &str, vocab_size: usize) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::InvalidConfig(format!("prompt line {}: {msg}", i + 1));
        let prompt = line
            .split_whitespace()
            .map(|tok| {
                let id: u32 = tok.parse().map_err(|_| bad(format!("{tok:?} is not a token id")))?;
                if id as usize >= vocab_size {
                    return Err(bad(format!("token {id} outside vocabulary of {vocab_size}")));
                }
                Ok(id)
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(prompt);
    }
    Ok(out)
}

pub fn format_prompt(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// `n` prompts with lengths uniform in `min_len..=max_len` and tokens drawn
/// uniformly from the vocabulary minus ids 0 and the end-of-sequence id.
pub fn random_prompts(n: usize, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidConfig(format!("bad prompt length range {min_len}..={max_len}")));
    }
    if vocab_size <= EOS_TOKEN as usize + 1 {
        return Err(Error::InvalidConfig("vocabulary too small for random prompts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            (0..len).map(|_| rng.gen_range(EOS_TOKEN + 1..vocab_size as u32)).collect()
        })
        .collect())
}
