//! Contextual token representations.
//!
//! [`Encoder`] is the representation-provider interface the taggers read
//! from. [`TransformerEncoder`] is a BERT-style post-LayerNorm transformer
//! initialised from a seed; its width and depth are configurable, so it
//! covers both desk-scale runs and the 768-wide base geometry.

use std::collections::HashMap;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Span};
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Dropout, LayerNorm, Linear, ParamStore, DTYPE};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Word-level token vocabulary; ids 0 and 1 are reserved for padding and unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all = vec!["[PAD]".to_string(), "[UNK]".to_string()];
        let mut index: HashMap<String, u32> = HashMap::new();
        index.insert(all[0].clone(), PAD);
        index.insert(all[1].clone(), UNK);
        for t in tokens {
            if !index.contains_key(t) {
                index.insert(t.to_string(), all.len() as u32);
                all.push(t.to_string());
            }
        }
        Self { tokens: all, index }
    }

    pub fn from_examples(examples: &[Example]) -> Self {
        Self::from_tokens(examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for TokenVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < 2 {
            return Err(serde::de::Error::custom("token vocabulary lacks reserved entries"));
        }
        Ok(Self::from_tokens(tokens[2..].iter().map(String::as_str)))
    }
}

/// Hidden states for a padded batch.
#[derive(Debug, Clone)]
pub struct TokenReps {
    /// `[batch, len, hidden]`.
    pub hidden: Tensor,
    /// `[batch, len]`, 1 at real tokens and 0 at padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TokenReps {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Restricts to batch rows `[start, start + len)`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<TokenReps> {
        Ok(TokenReps {
            hidden: self.hidden.narrow(0, start, len)?,
            mask: self.mask.narrow(0, start, len)?,
            lengths: self.lengths[start..start + len].to_vec(),
        })
    }
}

/// Two stochastic views of the same batch.
#[derive(Debug, Clone)]
pub struct DualViews {
    pub a: TokenReps,
    pub b: TokenReps,
}

pub trait Encoder {
    fn hidden_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Encodes a batch; dropout is active only when a generator is supplied.
    fn forward(&self, ids: &[Vec<u32>], dropout: Option<&mut Dropout>) -> Result<TokenReps>;

    /// Deterministic single-sentence encoding.
    fn encode(&self, ids: &[u32]) -> Result<TokenReps> {
        self.forward(&[ids.to_vec()], None)
    }

    /// Encodes the batch twice under independent dropout masks.
    fn encode_dual(&self, ids: &[Vec<u32>], dropout: &mut Dropout) -> Result<DualViews> {
        let mut doubled = ids.to_vec();
        doubled.extend_from_slice(ids);
        let both = self.forward(&doubled, Some(dropout))?;
        let n = ids.len();
        Ok(DualViews {
            a: both.narrow(0, n)?,
            b: both.narrow(n, n)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 100,
        }
    }
}

impl EncoderConfig {
    /// Base-size geometry (768 wide, 12 layers, 12 heads).
    pub fn base() -> Self {
        Self {
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_len: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.hidden ({}) must be a positive multiple of encoder.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.max_len == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder.max_len and encoder.ffn must be positive".into()));
        }
        Ok(())
    }
}

struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    up: Linear,
    down: Linear,
    ffn_norm: LayerNorm,
}

pub struct TransformerEncoder {
    cfg: EncoderConfig,
    tokens: Tensor,
    positions: Tensor,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let tokens = store.normal("encoder.tokens", &[vocab_size, d], 0.02)?;
        let positions = store.normal("encoder.positions", &[cfg.max_len, d], 0.02)?;
        let embed_norm = LayerNorm::new(store, "encoder.embed_norm", d)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("encoder.layer{i}");
            blocks.push(Block {
                query: Linear::new(store, &format!("{p}.query"), d, d)?,
                key: Linear::new(store, &format!("{p}.key"), d, d)?,
                value: Linear::new(store, &format!("{p}.value"), d, d)?,
                output: Linear::new(store, &format!("{p}.output"), d, d)?,
                attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                up: Linear::new(store, &format!("{p}.up"), d, cfg.ffn)?,
                down: Linear::new(store, &format!("{p}.down"), cfg.ffn, d)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
            });
        }
        Ok(Self {
            cfg,
            tokens,
            positions,
            embed_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn attention(
        &self,
        block: &Block,
        x: &Tensor,
        key_mask: &Tensor,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let h = self.cfg.heads;
        let dh = d / h;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(block.query.forward(x)?)?;
        let k = split(block.key.forward(x)?)?;
        let v = split(block.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(key_mask)?;
        let mut probs = softmax_last(&scores)?;
        if let Some(dr) = dropout.as_deref_mut() {
            probs = dr.apply(&probs)?;
        }
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        block.output.forward(&ctx)
    }
}

impl Encoder for TransformerEncoder {
    fn hidden_size(&self) -> usize {
        self.cfg.hidden
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn forward(&self, ids: &[Vec<u32>], mut dropout: Option<&mut Dropout>) -> Result<TokenReps> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        for &len in &lengths {
            if len == 0 {
                return Err(Error::EmptyInput("zero-length sentence"));
            }
            if len > self.cfg.max_len {
                return Err(Error::TooLong {
                    len,
                    max_len: self.cfg.max_len,
                });
            }
        }
        let device = self.tokens.device();
        let b = ids.len();
        let l = *lengths.iter().max().unwrap_or(&0);
        let mut flat = Vec::with_capacity(b * l);
        let mut mask = Vec::with_capacity(b * l);
        for row in ids {
            flat.extend(row.iter().copied());
            flat.extend(std::iter::repeat_n(PAD, l - row.len()));
            mask.extend(std::iter::repeat_n(1.0f64, row.len()));
            mask.extend(std::iter::repeat_n(0.0f64, l - row.len()));
        }
        let flat = Tensor::from_vec(flat, b * l, device)?;
        let mask = Tensor::from_vec(mask, (b, l), device)?.to_dtype(DTYPE)?;
        // Additive key mask: 0 for real tokens, -1e9 for padding.
        let key_mask = ((mask.clone() - 1.0)? * 1e9)?.reshape((b, 1, 1, l))?;

        let tok = self.tokens.index_select(&flat, 0)?.reshape((b, l, self.cfg.hidden))?;
        let pos = self.positions.narrow(0, 0, l)?;
        let mut x = self.embed_norm.forward(&tok.broadcast_add(&pos)?)?;
        if let Some(dr) = dropout.as_deref_mut() {
            x = dr.apply(&x)?;
        }
        for block in &self.blocks {
            let mut attn = self.attention(block, &x, &key_mask, &mut dropout)?;
            if let Some(dr) = dropout.as_deref_mut() {
                attn = dr.apply(&attn)?;
            }
            x = block.attn_norm.forward(&(x + attn)?)?;
            let mut ff = block.down.forward(&block.up.forward(&x)?.gelu()?)?;
            if let Some(dr) = dropout.as_deref_mut() {
                ff = dr.apply(&ff)?;
            }
            x = block.ffn_norm.forward(&(x + ff)?)?;
        }
        Ok(TokenReps {
            hidden: x,
            mask,
            lengths,
        })
    }
}

/// Mean of the hidden vectors over each `(batch row, inclusive span)`; returns `[spans, hidden]`.
pub fn span_pool(reps: &TokenReps, spans: &[(usize, Span)]) -> Result<Tensor> {
    let (b, l, d) = reps.hidden.dims3()?;
    let mut weights = vec![0f64; spans.len() * b * l];
    for (i, (row, span)) in spans.iter().enumerate() {
        let len = *reps.lengths.get(*row).ok_or(Error::InvalidSpan {
            start: span.start,
            end: span.end,
            len: 0,
        })?;
        span.validate(len)?;
        let w = 1.0 / span.width() as f64;
        for t in span.start..=span.end {
            weights[i * b * l + row * l + t] = w;
        }
    }
    let device = reps.hidden.device();
    let weights = Tensor::from_vec(weights, (spans.len(), b * l), &Device::Cpu)?
        .to_dtype(reps.hidden.dtype())?
        .to_device(device)?;
    Ok(weights.matmul(&reps.hidden.reshape((b * l, d))?)?)
}

/// Mean-pooled representation of one span of one batch row.
pub fn span_embed(reps: &TokenReps, row: usize, span: Span) -> Result<Tensor> {
    Ok(span_pool(reps, &[(row, span)])?.squeeze(0)?)
}

/// Masked mean over the sequence dimension: `[batch, len, d]` → `[batch, d]`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let counts = mask.sum_keepdim(D::Minus1)?;
    let summed = x.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?.sum(1)?;
    Ok(summed.broadcast_div(&counts)?)
}
