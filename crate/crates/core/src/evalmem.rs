//! Memorization, coherence and classifier metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::MemPair;
use crate::linalg::Matrix;
use crate::nn::ops::{argmax, top_k};
use crate::nn::{self, greedy_decode_batch, ArchSpec, Batch, ModelCheckpoint, NnError};
use crate::rng::Rng;

/// Normalized-similarity threshold for loose accuracy.
pub const LOOSE_TAU: f64 = 0.75;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Unit-cost edit distance between token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Length of the longest common prefix.
pub fn exact_match_len<T: PartialEq>(generated: &[T], target: &[T]) -> usize {
    generated.iter().zip(target).take_while(|(a, b)| a == b).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: usize,
    pub distance: usize,
    pub len: usize,
    pub strict: bool,
    pub loose: bool,
    pub exact_match_len: usize,
}

impl PairResult {
    pub fn score(pair_id: usize, generated: &[u32], suffix: &[u32]) -> Self {
        let d = levenshtein(generated, suffix);
        let len = suffix.len();
        Self {
            pair_id,
            distance: d,
            len,
            strict: d == 0,
            loose: 1.0 - d as f64 / len as f64 >= LOOSE_TAU,
            exact_match_len: exact_match_len(generated, suffix),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemMetrics {
    pub strict: f64,
    pub loose: f64,
    /// Mean d/L; higher means less memorization.
    pub avg_norm_lev: f64,
    pub mean_exact_match_len: f64,
    pub n_pairs: usize,
    /// Ids of pairs that did not fit in the context window.
    pub skipped: Vec<usize>,
}

impl MemMetrics {
    pub fn from_results(results: &[PairResult], skipped: Vec<usize>) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&PairResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        Self {
            strict: mean(&|r| f64::from(u8::from(r.strict))),
            loose: mean(&|r| f64::from(u8::from(r.loose))),
            avg_norm_lev: mean(&|r| r.distance as f64 / r.len as f64),
            mean_exact_match_len: mean(&|r| r.exact_match_len as f64),
            n_pairs: results.len(),
            skipped,
        }
    }
}

/// Greedy generations for each pair, batched by prefix length. Pairs that
/// overflow the context come back as `None`.
pub fn generate_suffixes(model: &ModelCheckpoint, prefixes: &[Vec<u32>], n_tokens: &[usize]) -> Result<Vec<Option<Vec<u32>>>, EvalError> {
    let ArchSpec::Lm(arch) = &model.arch else {
        return Err(EvalError::Input("memorization metrics need a language model".into()));
    };
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut out = vec![None; prefixes.len()];
    for (i, (p, &n)) in prefixes.iter().zip(n_tokens).enumerate() {
        if p.is_empty() {
            return Err(EvalError::Input(format!("pair {i} has an empty prefix")));
        }
        if p.len() + n <= arch.context {
            groups.entry((p.len(), n)).or_default().push(i);
        }
    }
    const CHUNK: usize = 32;
    for ((_, n), idx) in groups {
        for chunk in idx.chunks(CHUNK) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| prefixes[i].clone()).collect();
            let gens = greedy_decode_batch(model, &batch, n)?;
            for (&i, g) in chunk.iter().zip(gens) {
                out[i] = Some(g);
            }
        }
    }
    Ok(out)
}

/// Strict / loose / distance metrics from greedy decoding of each suffix.
pub fn memorization_eval(model: &ModelCheckpoint, pairs: &[MemPair]) -> Result<(MemMetrics, Vec<PairResult>), EvalError> {
    let prefixes: Vec<Vec<u32>> = pairs.iter().map(|p| p.prefix.clone()).collect();
    let lens: Vec<usize> = pairs.iter().map(|p| p.suffix.len()).collect();
    if lens.contains(&0) {
        return Err(EvalError::Input("empty suffix".into()));
    }
    let gens = generate_suffixes(model, &prefixes, &lens)?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (pair, g) in pairs.iter().zip(gens) {
        match g {
            Some(g) => results.push(PairResult::score(pair.id, &g, &pair.suffix)),
            None => skipped.push(pair.id),
        }
    }
    Ok((MemMetrics::from_results(&results, skipped), results))
}

/// Per-pair CSV: `pair_id,d,L,strict,loose,exact_match_len`.
pub fn pair_results_csv(results: &[PairResult]) -> String {
    let mut s = String::from("pair_id,d,L,strict,loose,exact_match_len\n");
    for r in results {
        writeln!(s, "{},{},{},{},{},{}", r.pair_id, r.distance, r.len, u8::from(r.strict), u8::from(r.loose), r.exact_match_len)
            .expect("writing to a String");
    }
    s
}

/// `exp` of the mean teacher-forced next-token cross-entropy.
pub fn perplexity(model: &ModelCheckpoint, corpus: &[Vec<u32>], batch_size: usize) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::Input("empty corpus".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in chunk_equal_len(corpus, batch_size.max(1)) {
        let (loss, n) = nn::batch_loss(model, Batch::Tokens(&chunk))?;
        total += loss;
        count += n;
    }
    if count == 0 {
        return Err(EvalError::Input("corpus has no next-token targets".into()));
    }
    Ok((total / count as f64).exp())
}

fn chunk_equal_len(corpus: &[Vec<u32>], batch: usize) -> Vec<Vec<Vec<u32>>> {
    let mut by_len: BTreeMap<usize, Vec<Vec<u32>>> = BTreeMap::new();
    for s in corpus {
        by_len.entry(s.len()).or_default().push(s.clone());
    }
    by_len.into_values().flat_map(|v| v.chunks(batch).map(<[_]>::to_vec).collect::<Vec<_>>()).collect()
}

/// Ideal DCG for graded relevance `K − r + 1`.
pub fn idcg(k: usize) -> f64 {
    (1..=k).map(|r| (k - r + 1) as f64 / ((r + 1) as f64).log2()).sum()
}

/// nDCG of one position: the edited ranking is scored against the baseline
/// top-K set, with relevance `K − r + 1` for a hit at edited rank `r`.
pub fn ndcg_position(baseline_top: &[usize], edited_top: &[usize]) -> f64 {
    let k = baseline_top.len();
    let dcg: f64 = edited_top
        .iter()
        .enumerate()
        .filter(|(_, t)| baseline_top.contains(t))
        .map(|(i, _)| (k - i) as f64 / ((i + 2) as f64).log2())
        .sum();
    dcg / idcg(k)
}

/// Mean nDCG@K of logits matrices with one row per position.
pub fn ndcg_from_logits(baseline: &Matrix, edited: &Matrix, k: usize) -> Result<f64, EvalError> {
    if baseline.shape() != edited.shape() {
        return Err(EvalError::Input("logit shapes differ".into()));
    }
    if k == 0 || k > baseline.cols() {
        return Err(EvalError::Input(format!("K = {k} outside 1..={}", baseline.cols())));
    }
    let total: f64 = (0..baseline.rows()).map(|r| ndcg_position(&top_k(baseline.row(r), k), &top_k(edited.row(r), k))).sum();
    Ok(total / baseline.rows() as f64)
}

/// Mean nDCG@K over every position of `corpus`.
pub fn ndcg_at_k(baseline: &ModelCheckpoint, edited: &ModelCheckpoint, corpus: &[Vec<u32>], k: usize) -> Result<f64, EvalError> {
    if baseline.arch != edited.arch {
        return Err(EvalError::Input("models have different architectures".into()));
    }
    if corpus.is_empty() {
        return Err(EvalError::Input("empty corpus".into()));
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for chunk in chunk_equal_len(corpus, 32) {
        let b = nn::forward(baseline, Batch::Tokens(&chunk))?.logits;
        let e = nn::forward(edited, Batch::Tokens(&chunk))?.logits;
        total += ndcg_from_logits(&b, &e, k)? * b.rows() as f64;
        positions += b.rows();
    }
    Ok(total / positions as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTriple {
    /// Accuracy against the noised labels on the noised subset.
    pub memorized_train_acc: f64,
    /// Accuracy against the true labels on the same subset.
    pub gt_recovery: f64,
    pub val_acc: f64,
}

pub fn predict(model: &ModelCheckpoint, x: &Matrix) -> Result<Vec<usize>, EvalError> {
    let fwd = nn::forward(model, Batch::Features { x, labels: &[] })?;
    Ok((0..fwd.logits.rows()).map(|r| argmax(fwd.logits.row(r))).collect())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Metrics on the noised subset (`x`, noised and true labels) plus clean validation.
pub fn classifier_mem_eval(
    model: &ModelCheckpoint,
    noised_x: &Matrix,
    noised_labels: &[usize],
    true_labels: &[usize],
    val_x: &Matrix,
    val_labels: &[usize],
) -> Result<ClassifierTriple, EvalError> {
    if noised_labels.len() != noised_x.rows() || true_labels.len() != noised_x.rows() {
        return Err(EvalError::Input("noised label arrays do not match the feature rows".into()));
    }
    if val_labels.len() != val_x.rows() {
        return Err(EvalError::Input("validation labels do not match the feature rows".into()));
    }
    if noised_x.rows() == 0 || val_x.rows() == 0 {
        return Err(EvalError::Input("empty evaluation set".into()));
    }
    let p = predict(model, noised_x)?;
    let v = predict(model, val_x)?;
    Ok(ClassifierTriple {
        memorized_train_acc: accuracy(&p, noised_labels),
        gt_recovery: accuracy(&p, true_labels),
        val_acc: accuracy(&v, val_labels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub max_shift: usize,
    /// Independent filler draws per pair in the perturbed condition.
    pub draws: usize,
    pub original: MeanStd,
    pub perturbed: MeanStd,
}

/// Exact-match length with and without `1..=max_shift` random filler tokens
/// prepended to each prefix. The perturbed condition pools `draws`
/// independent fillers per pair; `max_shift = 0` leaves the prefixes
/// untouched.
pub fn positional_stress_test(
    model: &ModelCheckpoint,
    pairs: &[MemPair],
    max_shift: usize,
    draws: usize,
    rng: &mut Rng,
) -> Result<StressReport, EvalError> {
    let ArchSpec::Lm(arch) = &model.arch else {
        return Err(EvalError::Input("stress test needs a language model".into()));
    };
    if pairs.is_empty() || draws == 0 {
        return Err(EvalError::Input("no pairs or no draws".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.prefix.len() + p.suffix.len() + max_shift > arch.context) {
        return Err(EvalError::Nn(NnError::ContextOverflow {
            needed: p.prefix.len() + p.suffix.len() + max_shift,
            context: arch.context,
        }));
    }
    let score = |prefixes: &[Vec<u32>], targets: &[&MemPair]| -> Result<MeanStd, EvalError> {
        let lens: Vec<usize> = targets.iter().map(|p| p.suffix.len()).collect();
        let gens = generate_suffixes(model, prefixes, &lens)?;
        let m: Vec<f64> = gens
            .iter()
            .zip(targets)
            .map(|(g, p)| exact_match_len(g.as_deref().unwrap_or_default(), &p.suffix) as f64)
            .collect();
        Ok(MeanStd::of(&m))
    };
    let original: Vec<Vec<u32>> = pairs.iter().map(|p| p.prefix.clone()).collect();
    let all: Vec<&MemPair> = pairs.iter().collect();
    let mut perturbed = Vec::with_capacity(pairs.len() * draws);
    let mut repeated = Vec::with_capacity(pairs.len() * draws);
    for _ in 0..draws {
        for p in pairs {
            let shift = if max_shift == 0 { 0 } else { rng.random_range(1..=max_shift) };
            let mut v: Vec<u32> = (0..shift).map(|_| rng.random_range(0..arch.vocab as u32)).collect();
            v.extend(&p.prefix);
            perturbed.push(v);
            repeated.push(p);
        }
    }
    Ok(StressReport { max_shift, draws, original: score(&original, &all)?, perturbed: score(&perturbed, &repeated)? })
}

/// Everything measured for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MemEvalReport {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memorization: Option<MemMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierTriple>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LmArch, ModelCheckpoint};

    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    pub(crate) fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for c in 0..3u8 {
                    let mut t: Vec<u8> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<u32>(&[], &[4, 5]), 2);
        assert_eq!(levenshtein(&[1, 2, 3], &[2, 3, 4]), 2);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn levenshtein_matches_recursion_on_short_strings() {
        // Lengths ≤ 3 here (exhaustive up to 6 runs in the acceptance suite).
        let strings = all_strings(3);
        for a in &strings {
            for b in &strings {
                assert_eq!(levenshtein(a, b), brute(a, b), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn hand_constructed_pair_scores() {
        let s: Vec<u32> = (0..16).collect();
        let mut cases: Vec<(Vec<u32>, usize, usize)> = Vec::new();
        cases.push((s.clone(), 0, 16));
        let mut one_sub = s.clone();
        one_sub[5] = 99;
        cases.push((one_sub, 1, 5));
        let mut four_sub = s.clone();
        for i in [0, 3, 7, 9] {
            four_sub[i] = 99;
        }
        cases.push((four_sub, 4, 0));
        let mut five_sub = s.clone();
        for i in [10, 11, 12, 13, 14] {
            five_sub[i] = 99;
        }
        cases.push((five_sub, 5, 10));
        let mut shifted = vec![99];
        shifted.extend(&s[..15]);
        cases.push((shifted, 2, 0));
        let results: Vec<PairResult> = cases
            .iter()
            .enumerate()
            .map(|(i, (g, d, em))| {
                let r = PairResult::score(i, g, &s);
                assert_eq!((r.distance, r.exact_match_len), (*d, *em), "case {i}");
                r
            })
            .collect();
        let m = MemMetrics::from_results(&results, vec![]);
        assert_eq!(m.strict, 1.0 / 5.0);
        // 1 − d/16 ≥ 0.75 ⇔ d ≤ 4
        assert_eq!(m.loose, 4.0 / 5.0);
        assert!((m.avg_norm_lev - 12.0 / 80.0).abs() < 1e-15);
        assert!((m.mean_exact_match_len - 31.0 / 5.0).abs() < 1e-15);
        let csv = pair_results_csv(&results);
        assert!(csv.starts_with("pair_id,d,L,strict,loose,exact_match_len\n0,0,16,1,1,16\n"));
    }

    fn zero_lm(vocab: usize, context: usize) -> ModelCheckpoint {
        let arch = ArchSpec::Lm(LmArch { vocab, context, n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 8 });
        ModelCheckpoint::zeros(arch).unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab() {
        let m = zero_lm(11, 12);
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![7, 7, 7, 0, 1], vec![3, 4, 5]];
        let ppl = perplexity(&m, &corpus, 2).unwrap();
        assert!((ppl - 11.0).abs() < 1e-9, "{ppl}");
        assert!(perplexity(&m, &[], 2).is_err());
    }

    #[test]
    fn ndcg_extremes() {
        assert_eq!(ndcg_position(&[3, 1, 2], &[3, 1, 2]), 1.0);
        // same set in another order still scores 1 under rank-of-edited relevance
        assert!((ndcg_position(&[3, 1, 2], &[2, 3, 1]) - 1.0).abs() < 1e-15);
        assert_eq!(ndcg_position(&[0, 1, 2], &[3, 4, 5]), 0.0);
        let partial = ndcg_position(&[0, 1], &[0, 9]);
        assert!((partial - (2.0 / idcg(2))).abs() < 1e-15);
        let m = zero_lm(16, 8);
        let corpus = vec![vec![1, 2, 3, 4]];
        assert_eq!(ndcg_at_k(&m, &m, &corpus, 10).unwrap(), 1.0);
        assert!(ndcg_at_k(&m, &m, &corpus, 17).is_err());
    }

    #[test]
    fn classifier_triple_for_perfect_true_label_predictor() {
        // zero model predicts class 0 everywhere
        let arch = ArchSpec::Classifier(crate::nn::ClassifierArch { input_dim: 2, d_model: 4, n_blocks: 1, d_mlp: 4, n_classes: 3 });
        let m = ModelCheckpoint::zeros(arch).unwrap();
        let x = Matrix::zeros(4, 2);
        let t = classifier_mem_eval(&m, &x, &[1, 2, 1, 2], &[0, 0, 0, 0], &x, &[0, 1, 0, 1]).unwrap();
        assert_eq!(t, ClassifierTriple { memorized_train_acc: 0.0, gt_recovery: 1.0, val_acc: 0.5 });
        assert!(classifier_mem_eval(&m, &x, &[1], &[0, 0, 0, 0], &x, &[0, 1, 0, 1]).is_err());
    }

    #[test]
    fn overflowing_pairs_are_skipped_and_reported() {
        let m = zero_lm(8, 10);
        let pairs = vec![
            MemPair { id: 0, prefix: vec![1, 2, 3], suffix: vec![0, 0] },
            MemPair { id: 7, prefix: vec![1; 8], suffix: vec![0, 0, 0] },
        ];
        let (metrics, results) = memorization_eval(&m, &pairs).unwrap();
        assert_eq!(metrics.skipped, vec![7]);
        assert_eq!(results.len(), 1);
        // uniform logits → argmax picks token 0
        assert_eq!(metrics.strict, 1.0);
    }

    #[test]
    fn zero_shift_stress_is_a_no_op() {
        let m = zero_lm(8, 12);
        let pairs = vec![MemPair { id: 0, prefix: vec![1, 2], suffix: vec![0, 0, 1] }];
        let r = positional_stress_test(&m, &pairs, 0, 3, &mut crate::rng::rng_from_seed(1)).unwrap();
        assert_eq!(r.original, r.perturbed);
        assert_eq!(r.original.mean, 2.0);
        assert!(positional_stress_test(&m, &pairs, 8, 3, &mut crate::rng::rng_from_seed(1)).is_err());
    }
}
