//! Synthetic corpora with planted, labeled memorization.
//!
//! The LM corpus mixes text from a small probabilistic grammar (bracketed
//! modular arithmetic and topic-coherent word phrases) with random "secret"
//! token strings repeated many times. The grammar rewards generalization;
//! the secrets can only be learned verbatim. The classifier set is a
//! Gaussian-cluster problem in which a fixed fraction of training labels is
//! replaced by a random wrong class.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Separator token ending every grammar statement.
pub const SEP: u32 = 0;
const DIGIT0: u32 = 1;
const PLUS: u32 = 11;
const MINUS: u32 = 12;
const EQUALS: u32 = 13;
const OPEN: [u32; 3] = [14, 16, 18];
const WORD0: u32 = 20;
const N_TOPICS: u32 = 4;
/// Smallest vocabulary that holds every grammar token class.
pub const MIN_GRAMMAR_VOCAB: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmCorpusSpec {
    pub seed: u64,
    pub vocab: usize,
    /// Length of every training / evaluation sequence.
    pub seq_len: usize,
    pub n_clean_sequences: usize,
    pub n_eval_sequences: usize,
    pub n_secrets: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    /// Training sequences carrying each secret.
    pub repetitions: usize,
    /// Secrets are embedded at a uniformly random offset in `0..=max_offset`.
    pub max_offset: usize,
}

impl Default for LmCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: 64,
            seq_len: 64,
            n_clean_sequences: 6000,
            n_eval_sequences: 256,
            n_secrets: 32,
            prefix_len: 32,
            suffix_len: 16,
            repetitions: 64,
            max_offset: 16,
        }
    }
}

impl LmCorpusSpec {
    pub fn secret_len(&self) -> usize {
        self.prefix_len + self.suffix_len
    }

    /// Fraction of training sequences that carry a secret.
    pub fn mixing_ratio(&self) -> f64 {
        let secret = (self.n_secrets * self.repetitions) as f64;
        let total = secret + self.n_clean_sequences as f64;
        if total == 0.0 {
            0.0
        } else {
            secret / total
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Spec(m));
        if self.vocab < MIN_GRAMMAR_VOCAB {
            return bad(format!("vocab must be at least {MIN_GRAMMAR_VOCAB}"));
        }
        if self.prefix_len == 0 || self.suffix_len == 0 {
            return bad("prefix and suffix must be non-empty".into());
        }
        if self.secret_len() + self.max_offset > self.seq_len {
            return bad(format!(
                "secret of {} tokens at offset up to {} does not fit in sequences of {}",
                self.secret_len(),
                self.max_offset,
                self.seq_len
            ));
        }
        // birthday bound: expected number of colliding prefixes must be ≪ 1
        let log_space = self.prefix_len as f64 * (self.vocab as f64).ln();
        if self.n_secrets > 1 && 2.0 * (self.n_secrets as f64).ln() + 20f64.ln() > log_space {
            return bad(format!(
                "{} secrets with {}-token prefixes over {} symbols risk collisions",
                self.n_secrets, self.prefix_len, self.vocab
            ));
        }
        if self.n_clean_sequences + self.n_secrets * self.repetitions == 0 {
            return bad("corpus would be empty".into());
        }
        Ok(())
    }
}

/// Prefix / suffix split of one memorized string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemPair {
    pub id: usize,
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmCorpus {
    pub train: Vec<Vec<u32>>,
    /// Memorization targets; empty when `repetitions == 0`.
    pub pairs: Vec<MemPair>,
    /// Held-out grammar text, disjoint from `train`.
    pub clean_eval: Vec<Vec<u32>>,
}

/// Appends one grammar statement to `out`.
fn push_statement(r: &mut Rng, vocab: usize, out: &mut Vec<u32>) {
    if r.random_bool(0.5) {
        // [ ( a ± b ) ± c ] = r ;   or   ( a ± b ) = r ;
        let digit = |r: &mut Rng| r.random_range(0..10i32);
        let op = |r: &mut Rng| if r.random_bool(0.5) { 1 } else { -1 };
        let (a, b, s1) = (digit(r), digit(r), op(r));
        let outer = OPEN[r.random_range(0..3)];
        let nested = r.random_bool(0.4);
        let inner = OPEN[r.random_range(0..3)];
        let mut value = a + s1 * b;
        let tok_op = |s: i32| if s > 0 { PLUS } else { MINUS };
        out.push(outer);
        if nested {
            out.push(inner);
        }
        out.extend([DIGIT0 + a as u32, tok_op(s1), DIGIT0 + b as u32]);
        if nested {
            out.push(inner + 1);
            let (c, s2) = (digit(r), op(r));
            value += s2 * c;
            out.extend([tok_op(s2), DIGIT0 + c as u32]);
        }
        out.extend([outer + 1, EQUALS, DIGIT0 + value.rem_euclid(10) as u32, SEP]);
    } else {
        // topic phrase: first word w, walk of +1/+2 steps within the topic, closing with w again
        let words = (vocab as u32 - WORD0) / N_TOPICS;
        let topic = r.random_range(0..N_TOPICS);
        let base = WORD0 + topic * words;
        let start = r.random_range(0..words);
        let len = r.random_range(2..6);
        out.push(base + start);
        let mut cur = start;
        for _ in 0..len {
            cur = (cur + r.random_range(1..3)) % words;
            out.push(base + cur);
        }
        out.extend([base + start, SEP]);
    }
}

/// Grammar text of exactly `len` tokens (statements cut at the boundary).
fn grammar_text(r: &mut Rng, vocab: usize, len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        push_statement(r, vocab, &mut out);
    }
    out.truncate(len);
    out
}

/// `n` independent grammar sequences of `len` tokens from the given stream.
pub fn grammar_sequences(seed: u64, label: &str, vocab: usize, n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut r = rng::stream(seed, label);
    (0..n).map(|_| grammar_text(&mut r, vocab, len)).collect()
}

pub fn gen_lm_corpus(spec: &LmCorpusSpec) -> Result<LmCorpus, DatagenError> {
    spec.validate()?;
    let mut clean = grammar_sequences(spec.seed, "clean-train", spec.vocab, spec.n_clean_sequences, spec.seq_len);

    let mut pairs = Vec::new();
    let mut train = Vec::with_capacity(spec.n_clean_sequences + spec.n_secrets * spec.repetitions);
    if spec.repetitions > 0 {
        let mut r = rng::stream(spec.seed, "secrets");
        let mut seen = HashSet::new();
        while pairs.len() < spec.n_secrets {
            let secret: Vec<u32> = (0..spec.secret_len()).map(|_| r.random_range(0..spec.vocab as u32)).collect();
            let (p, s) = secret.split_at(spec.prefix_len);
            if seen.insert(p.to_vec()) {
                pairs.push(MemPair { id: pairs.len(), prefix: p.to_vec(), suffix: s.to_vec() });
            }
        }
        let mut ctx = rng::stream(spec.seed, "secret-context");
        for pair in &pairs {
            for _ in 0..spec.repetitions {
                let offset = ctx.random_range(0..=spec.max_offset);
                let mut seq = grammar_text(&mut ctx, spec.vocab, offset);
                seq.extend(&pair.prefix);
                seq.extend(&pair.suffix);
                let tail = grammar_text(&mut ctx, spec.vocab, spec.seq_len - seq.len());
                seq.extend(tail);
                train.push(seq);
            }
        }
    }
    train.append(&mut clean);
    train.shuffle(&mut rng::stream(spec.seed, "mix"));

    let train_set: HashSet<&Vec<u32>> = train.iter().collect();
    let mut eval_rng = rng::stream(spec.seed, "clean-eval");
    let mut clean_eval = Vec::with_capacity(spec.n_eval_sequences);
    while clean_eval.len() < spec.n_eval_sequences {
        let s = grammar_text(&mut eval_rng, spec.vocab, spec.seq_len);
        if !train_set.contains(&s) {
            clean_eval.push(s);
        }
    }
    Ok(LmCorpus { train, pairs, clean_eval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSetSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub input_dim: usize,
    pub clusters_per_class: usize,
    /// Norm scale of cluster centers relative to the per-coordinate noise.
    pub center_scale: f64,
    pub cluster_std: f64,
    pub noise_fraction: f64,
}

impl Default for ClassifierSetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 10,
            n_train: 2000,
            n_val: 1000,
            input_dim: 64,
            clusters_per_class: 2,
            center_scale: 1.0,
            cluster_std: 1.0,
            noise_fraction: 0.10,
        }
    }
}

impl ClassifierSetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_classes < 2 {
            return Err(DatagenError::Spec("need at least 2 classes".into()));
        }
        if !(0.0..0.5).contains(&self.noise_fraction) {
            return Err(DatagenError::Spec("noise fraction must lie in [0, 0.5)".into()));
        }
        if self.n_train == 0 || self.input_dim == 0 || self.clusters_per_class == 0 {
            return Err(DatagenError::Spec("sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_noised(&self) -> usize {
        (self.noise_fraction * self.n_train as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierData {
    pub train_x: Matrix,
    /// Labels the model is trained on (noised where `noised[i]`).
    pub train_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub noised: Vec<bool>,
    pub val_x: Matrix,
    pub val_labels: Vec<usize>,
    /// `n_classes · clusters_per_class` centers; row `k` belongs to class `k / clusters_per_class`.
    pub centers: Matrix,
}

impl ClassifierData {
    pub fn noised_indices(&self) -> Vec<usize> {
        (0..self.noised.len()).filter(|&i| self.noised[i]).collect()
    }
}

pub fn gen_classifier_set(spec: &ClassifierSetSpec) -> Result<ClassifierData, DatagenError> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "clusters");
    let k = spec.n_classes * spec.clusters_per_class;
    let unit = spec.center_scale * (spec.input_dim as f64).sqrt() / (spec.input_dim as f64).sqrt();
    let centers = Matrix::from_fn(k, spec.input_dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        z * unit
    });

    let sample = |n: usize, r: &mut Rng| {
        let mut labels = Vec::with_capacity(n);
        let mut x = Matrix::zeros(n, spec.input_dim);
        for i in 0..n {
            let cluster = r.random_range(0..k);
            labels.push(cluster / spec.clusters_per_class);
            for (c, v) in x.row_mut(i).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(r);
                *v = centers[(cluster, c)] + spec.cluster_std * z;
            }
        }
        (x, labels)
    };
    let (train_x, true_labels) = sample(spec.n_train, &mut rng::stream(spec.seed, "train"));
    let (val_x, val_labels) = sample(spec.n_val, &mut rng::stream(spec.seed, "val"));

    let mut nr = rng::stream(spec.seed, "noise");
    let mut idx: Vec<usize> = (0..spec.n_train).collect();
    idx.shuffle(&mut nr);
    let mut noised = vec![false; spec.n_train];
    let mut train_labels = true_labels.clone();
    for &i in &idx[..spec.n_noised()] {
        noised[i] = true;
        let shift = nr.random_range(1..spec.n_classes);
        train_labels[i] = (true_labels[i] + shift) % spec.n_classes;
    }
    Ok(ClassifierData { train_x, train_labels, true_labels, noised, val_x, val_labels, centers })
}

/// Add-one smoothed bigram model fit on `fit`, scored as mean per-token
/// negative log-likelihood on `eval`.
pub fn bigram_log_loss(fit: &[Vec<u32>], eval: &[Vec<u32>], vocab: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab * vocab];
    let mut totals = vec![vocab as f64; vocab];
    for s in fit {
        for w in s.windows(2) {
            counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
            totals[w[0] as usize] += 1.0;
        }
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in eval {
        for w in s.windows(2) {
            nll -= (counts[w[0] as usize * vocab + w[1] as usize] / totals[w[0] as usize]).ln();
            n += 1;
        }
    }
    nll / n.max(1) as f64
}

/// One sequence per line, space-separated decimal token ids.
pub fn write_sequences(path: &Path, seqs: &[Vec<u32>]) -> Result<(), DatagenError> {
    let mut text = String::new();
    for s in seqs {
        for (i, t) in s.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            write!(text, "{t}").expect("writing to a String");
        }
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<Vec<u32>>, DatagenError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|e| DatagenError::Parse(format!("line {}: {e}", n + 1))))
                .collect()
        })
        .collect()
}

/// JSON list of `{prefix, suffix, id}`.
pub fn write_pairs(path: &Path, pairs: &[MemPair]) -> Result<(), DatagenError> {
    crate::io::write_json_atomic(path, &pairs)?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<MemPair>, DatagenError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DatagenError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmem::levenshtein;

    fn small_spec() -> LmCorpusSpec {
        LmCorpusSpec { n_clean_sequences: 50, n_eval_sequences: 10, n_secrets: 4, repetitions: 3, ..LmCorpusSpec::default() }
    }

    #[test]
    fn zero_repetitions_means_no_pairs() {
        let spec = LmCorpusSpec { repetitions: 0, ..small_spec() };
        let c = gen_lm_corpus(&spec).unwrap();
        assert!(c.pairs.is_empty());
        assert_eq!(c.train.len(), 50);
        assert_eq!(spec.mixing_ratio(), 0.0);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_lm_corpus(&small_spec()).unwrap();
        let b = gen_lm_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_lm_corpus(&LmCorpusSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn secrets_are_embedded_and_eval_is_disjoint() {
        let spec = small_spec();
        let c = gen_lm_corpus(&spec).unwrap();
        assert_eq!(c.train.len(), 50 + 4 * 3);
        assert!(c.train.iter().all(|s| s.len() == spec.seq_len));
        for p in &c.pairs {
            let full: Vec<u32> = p.prefix.iter().chain(&p.suffix).copied().collect();
            let hits = c.train.iter().filter(|s| s.windows(full.len()).any(|w| w == full.as_slice())).count();
            assert!(hits >= 3);
        }
        for e in &c.clean_eval {
            assert!(!c.train.contains(e));
        }
    }

    #[test]
    fn secret_pairs_are_far_apart() {
        // For uniform draws over 64 symbols the expected distance of two
        // 48-token strings is far above L/2; screen 64 secrets pairwise.
        let spec = LmCorpusSpec { n_secrets: 64, repetitions: 1, n_clean_sequences: 0, ..LmCorpusSpec::default() };
        let c = gen_lm_corpus(&spec).unwrap();
        let l = spec.secret_len();
        let full: Vec<Vec<u32>> = c.pairs.iter().map(|p| [p.prefix.clone(), p.suffix.clone()].concat()).collect();
        let mut dists = Vec::new();
        for i in 0..full.len() {
            for j in (i + 1)..full.len() {
                dists.push(levenshtein(&full[i], &full[j]) as f64);
            }
        }
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let sd = (dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / dists.len() as f64).sqrt();
        assert!(mean - 3.0 * sd >= l as f64 / 2.0, "mean {mean} sd {sd}");
        assert!(dists.iter().all(|&d| d >= l as f64 / 2.0));
    }

    #[test]
    fn grammar_statements_are_consistent() {
        let seqs = grammar_sequences(3, "check", 64, 20, 200);
        for s in seqs {
            // every complete arithmetic statement evaluates correctly mod 10
            for stmt in s.split(|&t| t == SEP).filter(|st| st.contains(&EQUALS)) {
                let Some(eq) = stmt.iter().position(|&t| t == EQUALS) else { continue };
                if eq + 1 >= stmt.len() {
                    continue;
                }
                let mut val = 0i32;
                let mut sign = 1i32;
                for &t in &stmt[..eq] {
                    match t {
                        PLUS => sign = 1,
                        MINUS => sign = -1,
                        d if (DIGIT0..DIGIT0 + 10).contains(&d) => val += sign * (d - DIGIT0) as i32,
                        _ => {}
                    }
                }
                if stmt[0] >= OPEN[0] && stmt[0] <= OPEN[2] + 1 {
                    assert_eq!(stmt[eq + 1], DIGIT0 + val.rem_euclid(10) as u32);
                }
            }
        }
    }

    #[test]
    fn secrets_are_incompressible_for_a_grammar_bigram() {
        let spec = LmCorpusSpec { n_clean_sequences: 500, ..LmCorpusSpec::default() };
        let c = gen_lm_corpus(&spec).unwrap();
        let fit = grammar_sequences(spec.seed, "bigram-fit", spec.vocab, 500, spec.seq_len);
        let secrets: Vec<Vec<u32>> = c.pairs.iter().map(|p| [p.prefix.clone(), p.suffix.clone()].concat()).collect();
        let grammar = bigram_log_loss(&fit, &c.clean_eval, spec.vocab);
        let secret = bigram_log_loss(&fit, &secrets, spec.vocab);
        assert!(secret >= grammar + 1.0, "secret {secret} grammar {grammar}");
    }

    #[test]
    fn spec_validation() {
        assert!(LmCorpusSpec { vocab: 10, ..small_spec() }.validate().is_err());
        assert!(LmCorpusSpec { seq_len: 40, ..small_spec() }.validate().is_err());
        let crowded = LmCorpusSpec { vocab: 28, prefix_len: 2, n_secrets: 500, ..small_spec() };
        assert!(matches!(crowded.validate(), Err(DatagenError::Spec(_))));
    }

    #[test]
    fn noise_counts_are_exact() {
        let spec = ClassifierSetSpec { n_train: 5000, n_val: 10, ..ClassifierSetSpec::default() };
        let d = gen_classifier_set(&spec).unwrap();
        assert_eq!(d.noised.iter().filter(|&&n| n).count(), 500);
        for i in 0..spec.n_train {
            assert_eq!(d.noised[i], d.train_labels[i] != d.true_labels[i]);
        }
        let clean = ClassifierSetSpec { noise_fraction: 0.0, ..spec.clone() };
        let d0 = gen_classifier_set(&clean).unwrap();
        assert_eq!(d0.train_labels, d0.true_labels);
        assert!(gen_classifier_set(&ClassifierSetSpec { n_classes: 1, ..spec.clone() }).is_err());
        assert!(gen_classifier_set(&ClassifierSetSpec { noise_fraction: 0.5, ..spec }).is_err());
    }

    #[test]
    fn generative_oracle_scores_clean_fraction_on_noised_labels() {
        let spec = ClassifierSetSpec { n_train: 4000, center_scale: 3.0, ..ClassifierSetSpec::default() };
        let d = gen_classifier_set(&spec).unwrap();
        // nearest-center classifier built from the known generative clusters
        let predict = |row: &[f64]| {
            (0..d.centers.rows())
                .map(|k| (k, d.centers.row(k).iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k / spec.clusters_per_class)
                .unwrap()
        };
        let preds: Vec<usize> = (0..spec.n_train).map(|i| predict(d.train_x.row(i))).collect();
        let clean_acc = preds.iter().zip(&d.true_labels).filter(|(a, b)| a == b).count() as f64 / spec.n_train as f64;
        let noised_acc = preds.iter().zip(&d.train_labels).filter(|(a, b)| a == b).count() as f64 / spec.n_train as f64;
        assert!(clean_acc > 0.99);
        let expected = (1.0 - spec.noise_fraction) * clean_acc;
        assert!((noised_acc - expected).abs() < 0.01, "{noised_acc} vs {expected}");
    }

    #[test]
    fn sequence_and_pair_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("curvedit-datagen-{}", std::process::id()));
        let c = gen_lm_corpus(&small_spec()).unwrap();
        write_sequences(&dir.join("train.txt"), &c.train).unwrap();
        write_pairs(&dir.join("pairs.json"), &c.pairs).unwrap();
        assert_eq!(read_sequences(&dir.join("train.txt")).unwrap(), c.train);
        assert_eq!(read_pairs(&dir.join("pairs.json")).unwrap(), c.pairs);
        let text = std::fs::read_to_string(dir.join("pairs.json")).unwrap();
        assert!(text.contains("\"prefix\""));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
