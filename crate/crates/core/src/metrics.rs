//! Corpus metrics: BLEU, n-gram LM perplexity, unigram KL, entropy, length
//! and Dist-n.
//!
//! Every metric aggregates counts (or sorted per-token terms), so results do
//! not depend on the order of sentences in a corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::Sentence;
use crate::{Error, Result};

fn ngrams(s: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    s.windows(n)
}

fn ngram_counts(s: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(s, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU with one reference per candidate, modified precisions up to
/// `max_order`, +1 smoothing of numerator and denominator for orders ≥ 2,
/// and the brevity penalty.
pub fn bleu_n(candidates: &[Sentence], references: &[Sentence], max_order: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::arg("bleu: empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::arg(format!(
            "bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::arg("bleu: max order must be at least 1"));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_order {
        let (m, t) = if n == 0 {
            (matches[n] as f64, totals[n] as f64)
        } else {
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        };
        log_p += (m / t).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((bp * (log_p / max_order as f64).exp()).clamp(0.0, 1.0))
}

/// BLEU-4.
pub fn bleu(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    bleu_n(candidates, references, 4)
}

pub const LM_BOS: &str = "<s>";
pub const LM_EOS: &str = "</s>";
pub const LM_UNK: &str = "<unk>";

/// Add-k smoothed n-gram model over words, with `</s>` predicted at the end
/// of every sentence and `<unk>` standing in for unseen words.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramLM {
    order: usize,
    k: f64,
    vocab: BTreeSet<String>,
    /// context → (next word → count)
    counts: HashMap<Vec<String>, HashMap<String, usize>>,
    context_totals: HashMap<Vec<String>, usize>,
}

impl NgramLM {
    pub fn train(corpus: &[Sentence], order: usize, k: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::arg("n-gram LM: empty corpus"));
        }
        Self::build(corpus, corpus.iter().flatten().cloned(), order, k)
    }

    /// Add-1 model with no observations: every word gets `1 / V`.
    pub fn uniform(words: impl IntoIterator<Item = String>) -> Result<Self> {
        Self::build(&[], words, 1, 1.0)
    }

    fn build(
        corpus: &[Sentence],
        words: impl IntoIterator<Item = String>,
        order: usize,
        k: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::arg("n-gram LM: order must be at least 1"));
        }
        if !(k >= 0.0) {
            return Err(Error::arg(format!("n-gram LM: smoothing must be >= 0, got {k}")));
        }
        let mut vocab: BTreeSet<String> = words.into_iter().collect();
        vocab.insert(LM_EOS.to_string());
        vocab.insert(LM_UNK.to_string());
        vocab.remove(LM_BOS);
        let mut lm = Self {
            order,
            k,
            vocab,
            counts: HashMap::new(),
            context_totals: HashMap::new(),
        };
        for s in corpus {
            let padded = lm.pad(s);
            for i in order - 1..padded.len() {
                let ctx = padded[i + 1 - order..i].to_vec();
                *lm.counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(padded[i].clone())
                    .or_insert(0) += 1;
                *lm.context_totals.entry(ctx).or_insert(0) += 1;
            }
        }
        Ok(lm)
    }

    fn pad(&self, s: &[String]) -> Vec<String> {
        let mut p = vec![LM_BOS.to_string(); self.order - 1];
        p.extend(s.iter().map(|w| self.map_word(w)));
        p.push(LM_EOS.to_string());
        p
    }

    fn map_word(&self, w: &str) -> String {
        if self.vocab.contains(w) {
            w.to_string()
        } else {
            LM_UNK.to_string()
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable words, including `</s>` and `<unk>`.
    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// `p(word | context)` as `(numerator, denominator)`. Contexts never
    /// seen with `k = 0` fall back to uniform.
    pub fn prob_ratio(&self, context: &[String], word: &str) -> (f64, f64) {
        let v = self.vocab.len() as f64;
        let ctx = &context[context.len().saturating_sub(self.order - 1)..];
        let word = self.map_word(word);
        let c = self
            .counts
            .get(ctx)
            .and_then(|m| m.get(&word))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.context_totals.get(ctx).copied().unwrap_or(0) as f64;
        let den = total + self.k * v;
        if den == 0.0 {
            (1.0, v)
        } else {
            (c + self.k, den)
        }
    }

    pub fn prob(&self, context: &[String], word: &str) -> f64 {
        let (n, d) = self.prob_ratio(context, word);
        n / d
    }

    /// Inverse probability of each predicted token (words then `</s>`).
    fn inverse_probs(&self, s: &[String]) -> Vec<f64> {
        let padded = self.pad(s);
        (self.order - 1..padded.len())
            .map(|i| {
                let (n, d) = self.prob_ratio(&padded[i + 1 - self.order..i], &padded[i]);
                d / n
            })
            .collect()
    }
}

/// `exp` of the mean per-token negative log-likelihood, `</s>` included.
pub fn perplexity(lm: &NgramLM, sentences: &[Sentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::arg("perplexity: no sentences"));
    }
    let mut inv: Vec<f64> = sentences.iter().flat_map(|s| lm.inverse_probs(s)).collect();
    if inv.iter().all(|&x| x == inv[0]) {
        // geometric mean of identical factors
        return Ok(inv[0]);
    }
    let n = inv.len() as f64;
    let mut logs: Vec<f64> = inv.drain(..).map(f64::ln).collect();
    logs.sort_by(f64::total_cmp);
    Ok((logs.iter().sum::<f64>() / n).exp())
}

/// Token → probability over a corpus (`BTreeMap` for a fixed order).
#[derive(Clone, Debug, PartialEq)]
pub struct WordDistribution(pub BTreeMap<String, f64>);

impl WordDistribution {
    pub fn from_corpus(sentences: &[Sentence]) -> Result<Self> {
        let counts = unigram_counts(sentences);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::arg("word distribution: no tokens"));
        }
        Ok(Self(
            counts
                .into_iter()
                .map(|(w, c)| (w, c as f64 / total as f64))
                .collect(),
        ))
    }
}

fn unigram_counts(sentences: &[Sentence]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for w in sentences.iter().flatten() {
        *m.entry(w.clone()).or_insert(0) += 1;
    }
    m
}

/// `KL(P_gen ‖ P_ref)` over the union vocabulary, both add-k smoothed.
pub fn unigram_kl(generated: &[Sentence], reference: &[Sentence], k: f64) -> Result<f64> {
    let (g, r) = (unigram_counts(generated), unigram_counts(reference));
    let (ng, nr): (usize, usize) = (g.values().sum(), r.values().sum());
    if ng == 0 || nr == 0 {
        return Err(Error::arg("unigram KL: both corpora need tokens"));
    }
    let union: BTreeSet<&String> = g.keys().chain(r.keys()).collect();
    let v = union.len() as f64;
    let mut kl = 0.0;
    for w in union {
        let p = (g.get(w).copied().unwrap_or(0) as f64 + k) / (ng as f64 + k * v);
        let q = (r.get(w).copied().unwrap_or(0) as f64 + k) / (nr as f64 + k * v);
        if p > 0.0 {
            kl += p * (p / q).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Shannon entropy of the unigram distribution in the given log base.
pub fn word_entropy(sentences: &[Sentence], base: f64) -> Result<f64> {
    let dist = WordDistribution::from_corpus(sentences)?;
    let h: f64 = dist
        .0
        .values()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    Ok(h / base.ln())
}

/// Mean number of words per sentence.
pub fn avg_len(sentences: &[Sentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::arg("average length: no sentences"));
    }
    let total: usize = sentences.iter().map(Vec::len).sum();
    Ok(total as f64 / sentences.len() as f64)
}

/// Unique n-grams over total n-grams across all sentences.
pub fn distinct_n(sentences: &[Sentence], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::arg("distinct-n: n must be at least 1"));
    }
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for s in sentences {
        for g in ngrams(s, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::arg(format!(
            "distinct-{n}: no sentence has {n} tokens"
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(lines: &[&str]) -> Vec<Sentence> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn bleu_cases() {
        let x = c(&["a b c", "d e f g h", "i"]);
        assert_eq!(bleu(&x, &x).unwrap(), 1.0);
        assert_eq!(bleu(&c(&["x y z"]), &c(&["a b c"])).unwrap(), 0.0);
        let b = bleu(&c(&["a b c d"]), &c(&["a b c d e"])).unwrap();
        assert!((b - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn bleu_clips_repeats() {
        // "the the the" vs "the cat": clipped unigram matches 1 of 3
        let b = bleu_n(&c(&["the the the"]), &c(&["the cat"]), 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bigram_lm_hand_count() {
        let lm = NgramLM::train(&c(&["a b", "a c"]), 2, 0.5).unwrap();
        // vocab {a, b, c, </s>, <unk>}
        assert_eq!(lm.vocab_size(), 5);
        let ctx = vec!["a".to_string()];
        let expect = (1.0 + 0.5) / (2.0 + 0.5 * 5.0);
        assert!((lm.prob(&ctx, "b") - expect).abs() < 1e-15);
        assert!((lm.prob(&ctx, "c") - expect).abs() < 1e-15);
    }

    #[test]
    fn lm_normalizes() {
        let corpus = c(&["a b c", "b c a", "c c"]);
        let lm = NgramLM::train(&corpus, 3, 0.1).unwrap();
        for ctx in [c(&["<s> <s>"]), c(&["a b"]), c(&["zz c"]), c(&["never seen"])] {
            let s: f64 = lm.vocab().map(|w| lm.prob(&ctx[0], w)).sum();
            assert!((s - 1.0).abs() < 1e-12, "{ctx:?}: {s}");
        }
    }

    #[test]
    fn perplexity_cases() {
        let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let uni = NgramLM::uniform(words).unwrap();
        let v = uni.vocab_size() as f64;
        assert_eq!(perplexity(&uni, &c(&["a b", "c a b q"])).unwrap(), v);

        let one = c(&["the cat sat"]);
        let lm = NgramLM::train(&one, 3, 0.0).unwrap();
        assert_eq!(perplexity(&lm, &one).unwrap(), 1.0);
        let small_k = NgramLM::train(&one, 3, 1e-6).unwrap();
        assert!(perplexity(&small_k, &one).unwrap() < 1.0001);
    }

    #[test]
    fn unigram_kl_cases() {
        let x = c(&["a b", "b c d"]);
        assert!(unigram_kl(&x, &x, 0.01).unwrap() < 1e-12);
        let gen = vec![vec!["a".to_string(); 100]];
        let mut r = vec!["a".to_string(); 50];
        r.extend(vec!["b".to_string(); 50]);
        let kl = unigram_kl(&gen, &[r], 1e-9).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(word_entropy(&c(&["a b c d"]), 2.0).unwrap(), 2.0);
        assert_eq!(word_entropy(&c(&["a a", "a"]), 2.0).unwrap(), 0.0);
        assert!((word_entropy(&c(&["a a b c"]), 2.0).unwrap() - 1.5).abs() < 1e-15);
        let nats = word_entropy(&c(&["a b"]), std::f64::consts::E).unwrap();
        assert!((nats - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn avg_len_cases() {
        assert_eq!(avg_len(&c(&["a b", "a b c d"])).unwrap(), 3.0);
        assert_eq!(avg_len(&c(&["x y z"])).unwrap(), 3.0);
        assert!(avg_len(&[]).is_err());
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct_n(&c(&["a b c"]), 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&c(&["a a a"]), 1).unwrap(), 1.0 / 3.0);
        assert_eq!(distinct_n(&c(&["a b", "a b"]), 2).unwrap(), 0.5);
        assert!(distinct_n(&c(&["a", "b"]), 2).is_err());
    }
}
