//! Statistical text primitives: the frozen tokenizer, an add-k smoothed
//! n-gram language model, unigram entropy and a plug-in mutual information
//! estimator.
//!
//! All information quantities are in bits.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

/// Default n-gram order.
pub const DEFAULT_ORDER: usize = 3;
/// Default add-k smoothing constant.
pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// Splits text into lowercase tokens.
///
/// A token is a maximal run of alphanumeric characters; every other
/// character (whitespace, punctuation, symbols) is a separator. This rule is
/// frozen: token counts for context budgets depend on it.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Number of tokens `tokenize` would produce, without allocating them.
pub fn token_count(text: &str) -> usize {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .count()
}

/// Add-k smoothed n-gram model over one continuous token stream.
///
/// Positions near the start of the stream are counted with a truncated
/// context, so the first token is modelled by the empty context.
#[derive(Debug, Clone)]
pub struct NGramLm {
    order: usize,
    k: f64,
    declared_vocab: usize,
    vocab: BTreeSet<String>,
    counts: HashMap<Vec<String>, HashMap<String, u64>>,
    totals: HashMap<Vec<String>, u64>,
    tail: Vec<String>,
}

impl NGramLm {
    /// Untrained model. `order` is clamped to at least 1 and negative `k`
    /// to 0.
    pub fn new(order: usize, k: f64) -> Self {
        Self {
            order: order.max(1),
            k: k.max(0.0),
            declared_vocab: 0,
            vocab: BTreeSet::new(),
            counts: HashMap::new(),
            totals: HashMap::new(),
            tail: Vec::new(),
        }
    }

    /// Declares a vocabulary size. The effective size is the larger of this
    /// and the number of distinct tokens observed.
    pub fn with_vocab_size(mut self, size: usize) -> Self {
        self.declared_vocab = size;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.declared_vocab.max(self.vocab.len())
    }

    /// The last `order - 1` tokens of the training stream.
    pub fn tail(&self) -> &[String] {
        &self.tail
    }

    /// Appends tokens to the training stream, continuing from the current
    /// tail.
    pub fn observe<S: AsRef<str>>(&mut self, tokens: &[S]) {
        let ctx_len = self.order - 1;
        for tok in tokens {
            let tok = tok.as_ref().to_string();
            let ctx = self.tail.clone();
            *self
                .counts
                .entry(ctx.clone())
                .or_default()
                .entry(tok.clone())
                .or_insert(0) += 1;
            *self.totals.entry(ctx).or_insert(0) += 1;
            self.vocab.insert(tok.clone());
            if ctx_len > 0 {
                self.tail.push(tok);
                if self.tail.len() > ctx_len {
                    self.tail.remove(0);
                }
            }
        }
    }

    /// `P(token | context)` with add-k smoothing. Only the last `order - 1`
    /// tokens of `context` are used. A context with no mass at all
    /// (unseen with `k = 0`) yields the uniform distribution.
    pub fn prob<S: AsRef<str>>(&self, context: &[S], token: &str) -> f64 {
        let ctx_len = self.order - 1;
        let start = context.len().saturating_sub(ctx_len);
        let ctx: Vec<String> = context[start..]
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect();
        let v = self.vocab_size().max(1) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        let denom = total + self.k * v;
        if denom <= 0.0 {
            return 1.0 / v;
        }
        let count = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(token))
            .copied()
            .unwrap_or(0) as f64;
        (count + self.k) / denom
    }

    /// Mean negative log2-probability per token of `segment`, conditioned
    /// on the model's own stream tail.
    pub fn novelty<S: AsRef<str>>(&self, segment: &[S]) -> f64 {
        let tail = self.tail.clone();
        self.novelty_after(&tail, segment)
    }

    /// As [`novelty`](Self::novelty) but starting from an explicit context.
    ///
    /// Returns `f64::INFINITY` when some token has zero probability (only
    /// possible with `k = 0`). Empty segments score 0.
    pub fn novelty_after<C: AsRef<str>, S: AsRef<str>>(&self, context: &[C], segment: &[S]) -> f64 {
        if segment.is_empty() {
            return 0.0;
        }
        let mut ctx: Vec<String> = context.iter().map(|s| s.as_ref().to_string()).collect();
        let mut bits = 0.0;
        for tok in segment {
            let p = self.prob(&ctx, tok.as_ref());
            if p <= 0.0 {
                return f64::INFINITY;
            }
            bits -= p.log2();
            ctx.push(tok.as_ref().to_string());
        }
        (bits / segment.len() as f64).max(0.0)
    }
}

/// Trains a model on the concatenation of `history`.
pub fn train_ngram<S: AsRef<str>>(history: &[Vec<S>], order: usize, k: f64) -> NGramLm {
    let mut lm = NGramLm::new(order, k);
    for seq in history {
        lm.observe(seq);
    }
    lm
}

/// Mean per-token surprise of `segment` given the model.
pub fn novelty<S: AsRef<str>>(lm: &NGramLm, segment: &[S]) -> f64 {
    lm.novelty(segment)
}

/// Empirical token distribution of a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<(String, f64)>,
}

impl TokenDistribution {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
        let n = tokens.len() as f64;
        let mut probs: Vec<(String, f64)> = counts
            .into_iter()
            .map(|(t, c)| (t.to_string(), c as f64 / n))
            .collect();
        probs.sort_by(|a, b| a.0.cmp(&b.0));
        Self { probs }
    }

    pub fn probs(&self) -> &[(String, f64)] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(self.probs.iter().map(|(_, p)| *p))
    }
}

fn entropy_of(probs: impl Iterator<Item = f64>) -> f64 {
    let h: f64 = probs.filter(|p| *p > 0.0).map(|p| -p * p.log2()).sum();
    h.max(0.0)
}

/// Shannon entropy of the segment's unigram distribution; 0 when empty.
pub fn token_entropy<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    TokenDistribution::from_tokens(tokens).entropy()
}

/// Plug-in mutual information of the empirical joint distribution of
/// `pairs`. Returns 0 for an empty sample.
pub fn plugin_mi<X: Hash + Eq, Y: Hash + Eq>(pairs: &[(X, Y)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    // Cells are summed in first-seen order so the result does not depend on
    // hash iteration order.
    let mut slot: HashMap<(&X, &Y), usize> = HashMap::new();
    let mut cells: Vec<(&X, &Y, usize)> = Vec::new();
    let mut px: HashMap<&X, usize> = HashMap::new();
    let mut py: HashMap<&Y, usize> = HashMap::new();
    for (x, y) in pairs {
        let i = *slot.entry((x, y)).or_insert_with(|| {
            cells.push((x, y, 0));
            cells.len() - 1
        });
        cells[i].2 += 1;
        *px.entry(x).or_insert(0) += 1;
        *py.entry(y).or_insert(0) += 1;
    }
    let mi: f64 = cells
        .iter()
        .map(|&(x, y, c)| {
            let pxy = c as f64 / n;
            let pxm = px[x] as f64 / n;
            let pym = py[y] as f64 / n;
            pxy * (pxy / (pxm * pym)).log2()
        })
        .sum();
    mi.max(0.0)
}

/// Mutual information of a joint probability table (rows: x, columns: y).
/// The table is normalised first; zero cells contribute nothing.
pub fn mi_from_joint(table: &[Vec<f64>]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let row_m: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let col_m: Vec<f64> = (0..cols)
        .map(|j| table.iter().map(|r| r.get(j).copied().unwrap_or(0.0)).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let p = v / total;
            if p > 0.0 {
                mi += p * (p / (row_m[i] * col_m[j])).log2();
            }
        }
    }
    mi.max(0.0)
}
