//! Self-attentive next-item model: item and position embeddings, pre-norm
//! causal transformer blocks, and tied-embedding scoring.

mod checkpoint;
mod params;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use params::{ParamSet, ITEM_EMBEDDING, POSITION_EMBEDDING};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Segment, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Number of real items; the embedding table has one extra padding row.
    pub n_items: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 150,
            n_blocks: 2,
            n_heads: 1,
            max_seq_len: 50,
            dropout_rate: 0.2,
            n_items: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        if self.max_seq_len == 0 || self.n_items == 0 {
            return Err(Error::Config("max_seq_len and n_items must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.n_items + 1
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn with_items(&self, n_items: usize) -> Self {
        Self { n_items, ..self.clone() }
    }

    /// Fresh parameters: embeddings and projections ~ N(0, 0.02²), biases 0,
    /// layer-norm gains 1; the padding row is zero.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamSet> {
        self.validate()?;
        let d = self.hidden_dim;
        let f = self.ffn_dim();
        let mut p = ParamSet::new();
        let mut items = rng.normal_tensor(&[self.vocab_size(), d], INIT_STD);
        items.data_mut()[..d].fill(0.0);
        p.insert(ITEM_EMBEDDING, items);
        p.insert(POSITION_EMBEDDING, rng.normal_tensor(&[self.max_seq_len, d], INIT_STD));
        for l in 0..self.n_blocks {
            let name = |s: &str| format!("blocks.{l}.{s}");
            p.insert(name("attn_norm.gain"), Tensor::ones(&[d]));
            p.insert(name("attn_norm.shift"), Tensor::zeros(&[d]));
            for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
                p.insert(name(w), rng.normal_tensor(&[d, d], INIT_STD));
            }
            p.insert(name("ffn_norm.gain"), Tensor::ones(&[d]));
            p.insert(name("ffn_norm.shift"), Tensor::zeros(&[d]));
            p.insert(name("ffn.w1"), rng.normal_tensor(&[d, f], INIT_STD));
            p.insert(name("ffn.b1"), Tensor::zeros(&[f]));
            p.insert(name("ffn.w2"), rng.normal_tensor(&[f, d], INIT_STD));
            p.insert(name("ffn.b2"), Tensor::zeros(&[d]));
        }
        p.insert("final_norm.gain", Tensor::ones(&[d]));
        p.insert("final_norm.shift", Tensor::zeros(&[d]));
        Ok(p)
    }

    /// Extends the item table to `n_items` rows (plus padding); new rows are
    /// freshly initialized, existing rows copied unchanged.
    pub fn grow(&self, params: &ParamSet, n_items: usize, rng: &mut Rng) -> Result<(ModelConfig, ParamSet)> {
        let old = params.require(ITEM_EMBEDDING)?;
        let d = self.hidden_dim;
        if n_items + 1 < old.rows() {
            return Err(Error::Invalid(format!("cannot shrink item table from {} to {}", old.rows() - 1, n_items)));
        }
        let mut table = old.pad_rows(n_items + 1);
        let fresh = n_items + 1 - old.rows();
        if fresh > 0 {
            let init = rng.normal_tensor(&[fresh, d], INIT_STD);
            table.data_mut()[old.len()..].copy_from_slice(init.data());
        }
        let mut out = params.clone();
        out.insert(ITEM_EMBEDDING, table);
        Ok((self.with_items(n_items), out))
    }
}

/// Packed batch of prefixes: every real token is a row, sequences are
/// contiguous segments, padding never materializes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
}

impl Batch {
    pub fn from_prefixes<'a, I>(prefixes: I, max_seq_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut b = Batch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
        };
        for p in prefixes {
            if p.is_empty() {
                return Err(Error::Invalid("empty prefix".into()));
            }
            if p.len() > max_seq_len {
                return Err(Error::Invalid(format!("sequence of length {} exceeds max_seq_len {max_seq_len}", p.len())));
            }
            if p.contains(&0) {
                return Err(Error::Invalid("padding index inside a sequence".into()));
            }
            b.segments.push(Segment {
                start: b.tokens.len(),
                len: p.len(),
            });
            b.tokens.extend_from_slice(p);
            b.positions.extend(0..p.len());
        }
        if b.segments.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        Ok(b)
    }

    /// Accepts left-padded rows (leading zeros are padding).
    pub fn from_padded(rows: &[Vec<usize>], max_seq_len: usize) -> Result<Self> {
        let trimmed: Vec<&[usize]> = rows
            .iter()
            .map(|r| {
                let start = r.iter().position(|&t| t != 0).unwrap_or(r.len());
                &r[start..]
            })
            .collect();
        Self::from_prefixes(trimmed, max_seq_len)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    fn last_rows(&self) -> Vec<Option<usize>> {
        self.segments.iter().map(|s| Some(s.start + s.len - 1)).collect()
    }
}

/// Parameters placed on a tape, either tracked or as constants.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` not bound")))
    }
}

pub fn bind(tape: &mut Tape, params: &ParamSet, tracked: bool) -> Result<Bound> {
    let mut vars = HashMap::with_capacity(params.len());
    for (name, t) in params.iter() {
        let v = if tracked {
            tape.param(name, t.clone())?
        } else {
            tape.constant(t.clone())
        };
        vars.insert(name.clone(), v);
    }
    Ok(Bound { vars })
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let shape = tape.value(x).shape().to_vec();
            let n = tape.value(x).len();
            let data = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
            tape.mul_const(x, Tensor::from_parts(shape, data))
        }
        _ => Ok(x),
    }
}

/// Final-position hidden states `[B × d]`. Dropout is active iff `train_rng` is given.
pub fn forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &Batch, mut train_rng: Option<&mut Rng>) -> Result<Var> {
    let n_rows = tape.value(p.get(ITEM_EMBEDDING)?).rows();
    if let Some(&t) = batch.tokens.iter().find(|&&t| t >= n_rows) {
        return Err(Error::Invalid(format!("item {t} outside a table of {} items", n_rows - 1)));
    }
    if batch.positions.iter().any(|&pos| pos >= cfg.max_seq_len) {
        return Err(Error::Invalid(format!("sequence exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let rate = cfg.dropout_rate;
    let items = tape.gather_rows(p.get(ITEM_EMBEDDING)?, batch.tokens.iter().map(|&t| Some(t)).collect())?;
    let pos = tape.gather_rows(p.get(POSITION_EMBEDDING)?, batch.positions.iter().map(|&t| Some(t)).collect())?;
    let mut x = tape.add(items, pos)?;
    x = dropout(tape, x, rate, train_rng.as_deref_mut())?;

    for l in 0..cfg.n_blocks {
        let w = |s: &str| p.get(&format!("blocks.{l}.{s}"));
        let a = tape.layer_norm(x, w("attn_norm.gain")?, w("attn_norm.shift")?, LN_EPS)?;
        let q = tape.matmul(a, w("attn.w_q")?)?;
        let k = tape.matmul(a, w("attn.w_k")?)?;
        let v = tape.matmul(a, w("attn.w_v")?)?;
        let att = tape.causal_attention(q, k, v, batch.segments.clone(), cfg.n_heads)?;
        let o = tape.matmul(att, w("attn.w_o")?)?;
        let o = dropout(tape, o, rate, train_rng.as_deref_mut())?;
        x = tape.add(x, o)?;

        let f = tape.layer_norm(x, w("ffn_norm.gain")?, w("ffn_norm.shift")?, LN_EPS)?;
        let f = tape.matmul(f, w("ffn.w1")?)?;
        let f = tape.add_bias(f, w("ffn.b1")?)?;
        let f = tape.relu(f)?;
        let f = dropout(tape, f, rate, train_rng.as_deref_mut())?;
        let f = tape.matmul(f, w("ffn.w2")?)?;
        let f = tape.add_bias(f, w("ffn.b2")?)?;
        let f = dropout(tape, f, rate, train_rng.as_deref_mut())?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(x, p.get("final_norm.gain")?, p.get("final_norm.shift")?, LN_EPS)?;
    tape.gather_rows(x, batch.last_rows())
}

/// Logits over real items: column `j` scores item `j + 1`.
pub fn score(tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
    let table = p.get(ITEM_EMBEDDING)?;
    let rows = tape.value(table).rows();
    let items = tape.slice_rows(table, 1, rows)?;
    tape.matmul_nt(hidden, items)
}

/// Mean next-item cross-entropy; `targets` are item indices (`1..=n_items`).
pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let n = tape.value(logits).cols();
    let mut cols = Vec::with_capacity(targets.len());
    for &t in targets {
        if t == 0 || t > n {
            return Err(Error::TargetOutOfRange { target: t, n_items: n });
        }
        cols.push(t - 1);
    }
    tape.cross_entropy(logits, &cols)
}

/// Eval-mode final hidden states without gradient tracking.
pub fn hidden_states(params: &ParamSet, cfg: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false)?;
    let h = forward(&mut tape, &p, cfg, batch, None)?;
    Ok(tape.value(h).clone())
}

/// Eval-mode logits `[B × n_items]`.
pub fn logits(params: &ParamSet, cfg: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false)?;
    let h = forward(&mut tape, &p, cfg, batch, None)?;
    let l = score(&mut tape, &p, h)?;
    Ok(tape.value(l).clone())
}
