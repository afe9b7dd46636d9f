use super::arch::ArchSpec;
use super::checkpoint::ModelCheckpoint;
use super::ops::argmax;
use super::{forward, Batch, NnError};

/// Greedy continuation of `prefix` by exactly `n_tokens` tokens.
pub fn greedy_decode(model: &ModelCheckpoint, prefix: &[u32], n_tokens: usize) -> Result<Vec<u32>, NnError> {
    let mut out = greedy_decode_batch(model, &[prefix.to_vec()], n_tokens)?;
    Ok(out.pop().unwrap_or_default())
}

/// Greedy decoding of several equal-length prefixes in lockstep. Ties in the
/// argmax go to the lowest token id.
pub fn greedy_decode_batch(model: &ModelCheckpoint, prefixes: &[Vec<u32>], n_tokens: usize) -> Result<Vec<Vec<u32>>, NnError> {
    let ArchSpec::Lm(arch) = &model.arch else {
        return Err(NnError::Shape("greedy decoding needs a language model".into()));
    };
    let Some(first) = prefixes.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if prefixes.iter().any(|p| p.len() != len) {
        return Err(NnError::Shape("prefixes in a decode batch must have equal length".into()));
    }
    if len + n_tokens > arch.context {
        return Err(NnError::ContextOverflow { needed: len + n_tokens, context: arch.context });
    }
    if n_tokens == 0 {
        return Ok(vec![Vec::new(); prefixes.len()]);
    }
    if len == 0 {
        return Err(NnError::Shape("cannot decode from an empty prefix".into()));
    }
    let mut seqs: Vec<Vec<u32>> = prefixes.to_vec();
    for _ in 0..n_tokens {
        let fwd = forward(model, Batch::Tokens(&seqs))?;
        let cur = seqs[0].len();
        for (b, seq) in seqs.iter_mut().enumerate() {
            let next = argmax(fwd.logits.row(b * cur + cur - 1));
            seq.push(next as u32);
        }
    }
    Ok(seqs.into_iter().map(|s| s[len..].to_vec()).collect())
}
