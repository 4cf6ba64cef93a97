//! InfoNCE over (description, name) pairs with negatives drawn from other eras.

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-anchor candidate sets: `anchors` is `(B, D)`, `candidates` is
/// `(B, N, D)` with the positive at `positive_index[b]`.
#[derive(Debug, Clone)]
pub struct SimilarityBatch {
    anchors: Tensor,
    candidates: Tensor,
    positive_index: Vec<usize>,
}

impl SimilarityBatch {
    /// Asserts that every negative's era differs from its anchor's.
    pub fn new(
        anchors: Tensor,
        candidates: Tensor,
        positive_index: Vec<usize>,
        anchor_periods: &[String],
        candidate_periods: &[Vec<String>],
    ) -> Result<Self> {
        let (b, d) = anchors.dims2()?;
        let (cb, n, cd) = candidates.dims3()?;
        if cb != b || cd != d || positive_index.len() != b || anchor_periods.len() != b || candidate_periods.len() != b
        {
            return Err(Error::ShapeMismatch(format!(
                "anchors {:?}, candidates {:?}, {} positives, {} anchor eras, {} candidate era lists",
                anchors.dims(),
                candidates.dims(),
                positive_index.len(),
                anchor_periods.len(),
                candidate_periods.len()
            )));
        }
        if n == 0 {
            return Err(Error::NoCandidates(0));
        }
        for (i, (&pos, periods)) in positive_index.iter().zip(candidate_periods).enumerate() {
            if pos >= n || periods.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "anchor {i}: positive {pos} among {n} candidates with {} eras",
                    periods.len()
                )));
            }
            for (j, p) in periods.iter().enumerate() {
                if j != pos && *p == anchor_periods[i] {
                    return Err(Error::SameEraNegative(format!(
                        "anchor {i} candidate {j} shares era {p:?}"
                    )));
                }
            }
        }
        Ok(Self {
            anchors,
            candidates,
            positive_index,
        })
    }

    pub fn positive_index(&self) -> &[usize] {
        &self.positive_index
    }

    /// Cosine similarities `(B, N)` of unit-normalized embeddings.
    pub fn similarities(&self) -> Result<Tensor> {
        let a = l2_normalize(&self.anchors)?.unsqueeze(1)?;
        let c = l2_normalize(&self.candidates)?;
        Ok(c.broadcast_mul(&a)?.sum(D::Minus1)?)
    }
}

/// Divides by the L2 norm along the last dimension (with a tiny floor).
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean over rows of −log softmax(sims/τ)[positive].
pub fn info_nce_from_similarities(similarities: &Tensor, positive_index: &[usize], temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let (b, n) = similarities.dims2()?;
    if n == 0 {
        return Err(Error::NoCandidates(0));
    }
    if positive_index.len() != b || positive_index.iter().any(|&p| p >= n) {
        return Err(Error::ShapeMismatch(format!(
            "{} positive indices for {b}x{n} similarities",
            positive_index.len()
        )));
    }
    let logits = (similarities / temperature)?;
    let max = logits.max_keepdim(1)?.detach();
    let mut mask = vec![0f64; b * n];
    for (i, &p) in positive_index.iter().enumerate() {
        mask[i * n + p] = 1.0;
    }
    let mask = Tensor::from_vec(mask, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let shifted = logits.broadcast_sub(&max)?;
    let log_norm = shifted.exp()?.sum_keepdim(1)?.log()?;
    let positive = (&shifted * &mask)?.sum_keepdim(1)?;
    Ok((log_norm - positive)?.mean_all()?)
}

pub fn info_nce_loss(batch: &SimilarityBatch, temperature: f64) -> Result<Tensor> {
    info_nce_from_similarities(&batch.similarities()?, &batch.positive_index, temperature)
}

/// A name in the negative pool with its normalized era.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub name: String,
    pub period_key: String,
}

/// Uniform sample without replacement from pool entries of a different era.
pub fn sample_negatives(anchor_period: &str, pool: &[PoolEntry], count: usize, seed: u64) -> Result<Vec<PoolEntry>> {
    let eligible: Vec<&PoolEntry> = pool.iter().filter(|e| e.period_key != anchor_period).collect();
    if eligible.len() < count {
        return Err(Error::InsufficientNegatives {
            available: eligible.len(),
            needed: count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect())
}

/// Scalar value of a 0-dim tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
