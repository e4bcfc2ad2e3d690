//! Contrastive alignment of the updated model's hidden states with those of
//! the masked reference, using in-batch top-k hard negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    Dot,
}

/// Which encoder supplies the negatives for anchor `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSource {
    /// Other anchors `h_j`, `j ≠ i`.
    Anchors,
    /// Other positives `h⁺_j`, `j ≠ i`.
    Positives,
}

/// What each branch contributes as its representation of a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Final hidden state `h_t`.
    Hidden,
    /// Score vector `h_t · Eᵀ`, restricted to the items the reference knows.
    Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub similarity: Similarity,
    pub negatives: NegativeSource,
    pub representation: Representation,
    /// Fixed `d × d'` map applied to both sides before comparing; identity when absent.
    #[serde(skip)]
    pub projection: Option<Tensor>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            top_k: 16,
            similarity: Similarity::Cosine,
            negatives: NegativeSource::Anchors,
            representation: Representation::Hidden,
            projection: None,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `n × k` matrix keeping the first `k` of `n` columns.
pub fn leading_selection(n: usize, k: usize) -> Tensor {
    let mut data = vec![0.0; n * k];
    for i in 0..k.min(n) {
        data[i * k + i] = 1.0;
    }
    Tensor::new(vec![n, k], data).expect("selection shape")
}

/// The first `k` columns of a matrix.
pub fn leading_columns(t: &Tensor, k: usize) -> Tensor {
    let data = (0..t.rows()).flat_map(|r| t.row(r)[..k].iter().copied()).collect();
    Tensor::new(vec![t.rows(), k], data).expect("column slice shape")
}

/// The `k` indices other than `self_index` with the largest values; ties go
/// to the lower index. `k` is clamped to `row.len() − 1`.
pub fn select_hard_negatives(row: &[f64], self_index: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != self_index).collect();
    let k = k.min(idx.len());
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean InfoNCE over the batch. `positives` should be untracked; a batch of
/// fewer than two rows has no negatives and yields a constant zero.
pub fn infonce_topk(tape: &mut Tape, anchors: Var, positives: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.validate()?;
    let (a_shape, p_shape) = (tape.value(anchors).shape().to_vec(), tape.value(positives).shape().to_vec());
    if a_shape.len() != 2 || a_shape != p_shape {
        return Err(Error::shape("infonce_topk", format!("anchors {a_shape:?} vs positives {p_shape:?}")));
    }
    let b = a_shape[0];
    if b < 2 {
        log::warn!("contrastive batch of {b} row(s) has no negatives; loss set to 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (mut h, mut hp) = (anchors, positives);
    if let Some(w) = &cfg.projection {
        let w = tape.constant(w.clone());
        h = tape.matmul(h, w)?;
        hp = tape.matmul(hp, w)?;
    }
    if cfg.similarity == Similarity::Cosine {
        h = tape.normalize_rows(h)?;
        hp = tape.normalize_rows(hp)?;
    }
    let pos = tape.row_dot(h, hp)?;
    let sims = match cfg.negatives {
        NegativeSource::Anchors => tape.matmul_nt(h, h)?,
        NegativeSource::Positives => tape.matmul_nt(h, hp)?,
    };
    let s = tape.value(sims);
    let negatives = (0..b).map(|i| select_hard_negatives(s.row(i), i, cfg.top_k)).collect();
    tape.info_nce(pos, sims, negatives, cfg.temperature)
}
