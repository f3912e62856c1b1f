//! Temporal-context and video-level embeddings.

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingVector;

/// Window and weights for contextual embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextWindowConfig {
    /// Neighbours considered on each side.
    pub window: usize,
    /// Weight of a neighbour at distance `d` is `neighbor_decay^d`.
    pub neighbor_decay: f64,
    pub global_weight: f64,
}

impl Default for ContextWindowConfig {
    fn default() -> Self {
        Self { window: 2, neighbor_decay: 0.5, global_weight: 0.25 }
    }
}

impl ContextWindowConfig {
    /// A config under which contextual embeddings equal base embeddings.
    pub fn identity() -> Self {
        Self { window: 0, neighbor_decay: 1.0, global_weight: 0.0 }
    }
}

/// Contextual embedding of position `k` in a temporally ordered sequence of
/// same-level embeddings:
/// `normalize(e_k + Σ_{0<|j-k|<=w} decay^|j-k| e_j + global_weight * g)`.
///
/// # Panics
/// If `k` is out of bounds.
pub fn contextual_embedding(
    sequence: &[EmbeddingVector],
    k: usize,
    cfg: &ContextWindowConfig,
    global: Option<&EmbeddingVector>,
) -> EmbeddingVector {
    let base = &sequence[k];
    let mut acc: Vec<f64> = base.as_slice().iter().map(|v| f64::from(*v)).collect();
    let lo = k.saturating_sub(cfg.window);
    let hi = (k + cfg.window).min(sequence.len() - 1);
    for (j, e) in sequence.iter().enumerate().take(hi + 1).skip(lo) {
        if j == k {
            continue;
        }
        let w = cfg.neighbor_decay.powi(j.abs_diff(k) as i32);
        add_scaled(&mut acc, e, w);
    }
    if let Some(g) = global {
        if cfg.global_weight != 0.0 {
            add_scaled(&mut acc, g, cfg.global_weight);
        }
    }
    EmbeddingVector::from_f64(&acc)
}

/// Contextual embeddings for a whole sequence.
pub fn contextual_embeddings(
    sequence: &[EmbeddingVector],
    cfg: &ContextWindowConfig,
    global: Option<&EmbeddingVector>,
) -> Vec<EmbeddingVector> {
    (0..sequence.len())
        .map(|k| contextual_embedding(sequence, k, cfg, global))
        .collect()
}

/// Normalised mean of the given (macro-level) embeddings.
pub fn global_embedding<'a, I>(embeddings: I) -> Option<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for e in embeddings {
        let a = acc.get_or_insert_with(|| vec![0.0; e.dim()]);
        add_scaled(a, e, 1.0);
        n += 1;
    }
    let acc = acc?;
    let mean: Vec<f64> = acc.iter().map(|v| v / n as f64).collect();
    Some(EmbeddingVector::from_f64(&mean))
}

pub(crate) fn add_scaled(acc: &mut [f64], e: &EmbeddingVector, w: f64) {
    for (a, v) in acc.iter_mut().zip(e.as_slice()) {
        *a += w * f64::from(*v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> EmbeddingVector {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        EmbeddingVector::normalized(v)
    }

    #[test]
    fn zero_context_is_identity() {
        let seq = vec![basis(4, 0), basis(4, 1), basis(4, 2)];
        for k in 0..3 {
            let e = contextual_embedding(&seq, k, &ContextWindowConfig::identity(), Some(&basis(4, 3)));
            assert_eq!(e, seq[k]);
        }
    }

    #[test]
    fn window_one_closed_form() {
        let seq = vec![basis(3, 0), basis(3, 1), basis(3, 2)];
        let cfg = ContextWindowConfig { window: 1, neighbor_decay: 0.5, global_weight: 0.0 };
        let e = contextual_embedding(&seq, 1, &cfg, None);
        let n = 1.5f64.sqrt();
        let expected = [0.5 / n, 1.0 / n, 0.5 / n];
        for (a, b) in e.as_slice().iter().zip(expected) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn defaults() {
        let c = ContextWindowConfig::default();
        assert_eq!((c.window, c.neighbor_decay, c.global_weight), (2, 0.5, 0.25));
    }

    #[test]
    fn global_embedding_cases() {
        let a = basis(3, 0);
        assert_eq!(global_embedding([&a]).unwrap(), a);
        let b = basis(3, 1);
        let g = global_embedding([&a, &b]).unwrap();
        assert!((g.cosine(&a) - 0.5f64.sqrt()).abs() < 1e-6);
        assert!((g.cosine(&b) - 0.5f64.sqrt()).abs() < 1e-6);
        let g2 = global_embedding([&b, &a]).unwrap();
        assert_eq!(g, g2);
        assert!(global_embedding(std::iter::empty()).is_none());
    }
}
