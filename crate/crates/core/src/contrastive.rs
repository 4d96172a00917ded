//! Memory bank, positive/negative sampling and the view-invariant losses.
//!
//! Every view-invariant loss has the form
//!
//! ```text
//! log(1 + sum_i exp(sim(q, k_i) / tau) / exp(sim(a, b) / tau))
//! ```
//!
//! evaluated as `logsumexp([s_ab, s_q1, .., s_qK] / tau) - s_ab / tau`.
//! The query `q` is the synthesized view for the three joint losses and the
//! original view for the generation-free variant.

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::error::{Error, Result};
use crate::nets::layers::{l2_normalize, log_sum_exp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub negatives: usize,
    /// Weight of the old memory row in the moving average.
    pub memory_momentum: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.04,
            negatives: 128,
            memory_momentum: 0.2,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self, n_instances: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.negatives == 0 || self.negatives >= n_instances {
            return Err(Error::Config(format!(
                "need 1 <= negatives < {n_instances}, got {}",
                self.negatives
            )));
        }
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return Err(Error::Config("memory_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `log(1 + sum exp(sim(query, k) / tau) / exp(sim(a, b) / tau))`.
pub fn softmax_log_loss(a: &[f64], b: &[f64], query: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let pos = cosine_sim(a, b)? / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(pos);
    for k in negatives {
        logits.push(cosine_sim(query, k)? / tau);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == pos {
        let tail: f64 = logits[1..].iter().map(|l| (l - pos).exp()).sum();
        return Ok(tail.ln_1p());
    }
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(sum.ln() + max - pos)
}

/// Original view against the memory positive; negatives push the synthesized view.
pub fn loss_vi(f: &[f64], f_pos: &[f64], f_new: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    softmax_log_loss(f, f_pos, f_new, negatives, tau)
}

/// Synthesized view against the original view.
pub fn loss_vi_prime(f: &[f64], f_new: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    softmax_log_loss(f_new, f, f_new, negatives, tau)
}

/// Synthesized view against the memory positive.
pub fn loss_vi_prime2(f_pos: &[f64], f_new: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    softmax_log_loss(f_new, f_pos, f_new, negatives, tau)
}

/// Contrast without generation: negatives push the original view.
pub fn loss_vi_wogan(f: &[f64], f_pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    softmax_log_loss(f, f_pos, f, negatives, tau)
}

/// Batched, differentiable form of [`softmax_log_loss`], averaged over rows.
///
/// `a`, `b`, `query` are (B, D); `negatives` is (B, K, D). `mask`, when
/// given, is (B, K) with 0 for active negatives and a large negative value
/// for padding.
pub fn softmax_log_loss_batch(
    a: &Tensor,
    b: &Tensor,
    query: &Tensor,
    negatives: &Tensor,
    mask: Option<&Tensor>,
    tau: f64,
) -> Result<Tensor> {
    let (a, b, q) = (l2_normalize(a)?, l2_normalize(b)?, l2_normalize(query)?);
    let pos = ((a * b)?.sum_keepdim(1)? / tau)?;
    let k = negatives.dim(1)?;
    let logits = if k == 0 {
        pos.clone()
    } else {
        let negs = l2_normalize(negatives)?;
        let sims = negs.broadcast_mul(&q.unsqueeze(1)?)?.sum(2)?;
        let mut neg_logits = (sims / tau)?;
        if let Some(m) = mask {
            neg_logits = (neg_logits + m)?;
        }
        Tensor::cat(&[&pos, &neg_logits], 1)?
    };
    let loss = (log_sum_exp(&logits, 1)? - pos.squeeze(1)?)?;
    Ok(loss.mean_all()?)
}

/// Batched [`loss_vi`].
pub fn loss_vi_batch(f: &Tensor, f_pos: &Tensor, f_new: &Tensor, negatives: &Tensor, mask: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    softmax_log_loss_batch(f, f_pos, f_new, negatives, mask, tau)
}

/// Batched [`loss_vi_prime`].
pub fn loss_vi_prime_batch(f: &Tensor, f_new: &Tensor, negatives: &Tensor, mask: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    softmax_log_loss_batch(f_new, f, f_new, negatives, mask, tau)
}

/// Batched [`loss_vi_prime2`].
pub fn loss_vi_prime2_batch(f_pos: &Tensor, f_new: &Tensor, negatives: &Tensor, mask: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    softmax_log_loss_batch(f_new, f_pos, f_new, negatives, mask, tau)
}

/// Batched [`loss_vi_wogan`].
pub fn loss_vi_wogan_batch(f: &Tensor, f_pos: &Tensor, negatives: &Tensor, mask: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    softmax_log_loss_batch(f, f_pos, f, negatives, mask, tau)
}

/// One feature vector per training instance, updated by moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    rows: Vec<f64>,
    dim: usize,
    pub momentum: f64,
    /// Re-normalize rows after each update.
    pub normalize: bool,
    pub epoch: usize,
}

impl MemoryBank {
    pub fn from_rows(rows: Vec<Vec<f64>>, momentum: f64) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("memory rows must be non-empty and equally long"));
        }
        Ok(MemoryBank {
            rows: rows.concat(),
            dim,
            momentum,
            normalize: true,
            epoch: 0,
        })
    }

    pub fn from_flat(rows: Vec<f64>, dim: usize, momentum: f64) -> Result<Self> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(Error::invalid("flat memory length must be a multiple of dim"));
        }
        Ok(MemoryBank {
            rows,
            dim,
            momentum,
            normalize: true,
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn flat(&self) -> &[f64] {
        &self.rows
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// `row <- momentum * row + (1 - momentum) * f`, then re-normalized when
    /// enabled. Returns the row before normalization.
    pub fn update(&mut self, index: usize, f: &[f64]) -> Result<Vec<f64>> {
        if index >= self.len() {
            return Err(Error::invalid(format!(
                "memory index {index} out of range for {} rows",
                self.len()
            )));
        }
        if f.len() != self.dim {
            return Err(Error::invalid(format!("feature has {} dims, memory has {}", f.len(), self.dim)));
        }
        let alpha = self.momentum;
        let dim = self.dim;
        let row = &mut self.rows[index * dim..(index + 1) * dim];
        for (m, &v) in row.iter_mut().zip(f) {
            *m = alpha * *m + (1.0 - alpha) * v;
        }
        let raw = row.to_vec();
        if self.normalize {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|m| *m /= n);
            }
        }
        Ok(raw)
    }

    /// Rows as a (N, D) tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: candle_core::DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.rows.clone(), (self.len(), self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Memory indices chosen for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Memory rows behind [`ContrastIndices`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastBatchSample {
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl ContrastIndices {
    pub fn materialize(&self, bank: &MemoryBank) -> ContrastBatchSample {
        ContrastBatchSample {
            positive: bank.row(self.positive).to_vec(),
            negatives: self.negatives.iter().map(|&k| bank.row(k).to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sampled {
    Pair(ContrastIndices),
    /// The anchor is labeled noise this epoch.
    Skip,
}

/// Candidates for an anchor: cluster-mates and instances with another label.
pub fn eligible(labels: &PseudoLabeling, anchor: usize) -> (Vec<usize>, Vec<usize>) {
    let own = labels.labels[anchor];
    let mut mates = Vec::new();
    let mut others = Vec::new();
    for (j, &l) in labels.labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if l == own {
            mates.push(j);
        } else {
            others.push(j);
        }
    }
    (mates, others)
}

/// Draws one positive among the anchor's cluster-mates and `negatives`
/// instances with a different pseudo label, both uniformly without
/// replacement. Noise anchors are skipped; an anchor alone in its cluster
/// uses its own memory row as the positive.
pub fn sample_pairs<R: Rng + ?Sized>(
    labels: &PseudoLabeling,
    anchor: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Sampled> {
    if anchor >= labels.labels.len() {
        return Err(Error::invalid(format!("anchor {anchor} out of range")));
    }
    if labels.is_noise(anchor) {
        return Ok(Sampled::Skip);
    }
    let (mates, others) = eligible(labels, anchor);
    if negatives > others.len() {
        return Err(Error::Config(format!(
            "{negatives} negatives requested, only {} instances carry another label",
            others.len()
        )));
    }
    let positive = if mates.is_empty() {
        anchor
    } else {
        mates[rng.random_range(0..mates.len())]
    };
    let negatives = sample(rng, others.len(), negatives)
        .into_iter()
        .map(|i| others[i])
        .collect();
    Ok(Sampled::Pair(ContrastIndices {
        anchor,
        positive,
        negatives,
    }))
}
