//! Miniature transformer text encoder: whitespace tokenizer, post-LN
//! blocks, CLS pooling, and taped building blocks shared by the frozen
//! dual encoder and the trainable introspector stack.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, TensorId};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
/// First id handed out to a real vocabulary word.
pub const FIRST_WORD_ID: u32 = 3;

/// Additive attention-mask value for PAD keys. Large enough that the
/// post-max-subtraction exponential underflows to exactly 0.0, which is
/// what makes padding invariance bitwise.
const MASK_NEG: f64 = -1e9;

/// Whitespace tokenizer over a fixed dense vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub vocab: BTreeMap<String, u32>,
    pub max_len: usize,
}

impl TokenizerSpec {
    /// Assign dense ids starting after the specials, in the order given.
    /// Duplicate words keep their first id.
    pub fn build<I: IntoIterator<Item = String>>(words: I, max_len: usize) -> Self {
        let mut vocab = BTreeMap::new();
        let mut next = FIRST_WORD_ID;
        for w in words {
            let w = w.to_lowercase();
            if !w.is_empty() && !vocab.contains_key(&w) {
                vocab.insert(w, next);
                next += 1;
            }
        }
        Self { vocab, max_len }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + FIRST_WORD_ID as usize
    }

    /// Lowercased whitespace split; unknown words map to UNK; CLS is
    /// prepended; output is truncated then padded to max_len. Returns
    /// the padded ids and the true (unpadded) length.
    pub fn tokenize(&self, text: &str) -> (Vec<u32>, usize) {
        let mut ids = vec![CLS_ID];
        for word in text.to_lowercase().split_whitespace() {
            if ids.len() == self.max_len {
                break;
            }
            ids.push(*self.vocab.get(word).unwrap_or(&UNK_ID));
        }
        let len = ids.len();
        ids.resize(self.max_len, PAD_ID);
        (ids, len)
    }

    /// Like tokenize but without trailing padding. Attention masking
    /// makes the padded and trimmed encodings identical, so internal
    /// paths use this cheaper form.
    pub fn tokenize_trimmed(&self, text: &str) -> Vec<u32> {
        let (ids, len) = self.tokenize(text);
        ids[..len].to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            intermediate_dim: 256,
            vocab_size: FIRST_WORD_ID as usize,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config("num_layers must be >= 2".into()));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.intermediate_dim < self.hidden_dim {
            return Err(Error::Config(format!(
                "intermediate_dim {} must be >= hidden_dim {}",
                self.intermediate_dim, self.hidden_dim
            )));
        }
        if self.max_len == 0 || self.vocab_size < FIRST_WORD_ID as usize {
            return Err(Error::Config("max_len and vocab_size must cover specials".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// One post-LN transformer block: self-attention, add & norm,
/// feed-forward, add & norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerWeights {
    /// Random-features init standing in for pretrained weights. The
    /// encoder is frozen, so the draw must already behave like a usable
    /// feature map: tiny q/k keep attention near-uniform (stable token
    /// pooling into CLS), while value/output and feed-forward matrices
    /// use unit-gain scales (1/sqrt fan-in) so token content survives
    /// depth instead of washing out under repeated layer norms — and so
    /// gradients keep O(1) scale through introspector copies of these
    /// layers.
    pub fn init<R: Rng>(d: usize, f: usize, rng: &mut R) -> Self {
        let attn_sigma = 0.02;
        let d_sigma = 1.0 / (d as f64).sqrt();
        let f_sigma = 1.0 / (f as f64).sqrt();
        Self {
            wq: Tensor::trunc_normal(&[d, d], attn_sigma, rng),
            bq: Tensor::zeros(&[1, d]),
            wk: Tensor::trunc_normal(&[d, d], attn_sigma, rng),
            bk: Tensor::zeros(&[1, d]),
            wv: Tensor::trunc_normal(&[d, d], d_sigma, rng),
            bv: Tensor::zeros(&[1, d]),
            wo: Tensor::trunc_normal(&[d, d], d_sigma, rng),
            bo: Tensor::zeros(&[1, d]),
            ln1_gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"),
            ln1_bias: Tensor::zeros(&[1, d]),
            w1: Tensor::trunc_normal(&[d, f], d_sigma, rng),
            b1: Tensor::zeros(&[1, f]),
            w2: Tensor::trunc_normal(&[f, d], f_sigma, rng),
            b2: Tensor::zeros(&[1, d]),
            ln2_gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"),
            ln2_bias: Tensor::zeros(&[1, d]),
        }
    }

    pub fn named_fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    pub fn named_fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        // Token identity must dominate position for retrieval-style
        // features, so positions enter at a tenth of the token scale.
        let d = config.hidden_dim;
        Ok(Self {
            config,
            token_emb: Tensor::trunc_normal(&[config.vocab_size, d], 1.0, rng),
            pos_emb: Tensor::trunc_normal(&[config.max_len, d], 0.1, rng),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights::init(d, config.intermediate_dim, rng))
                .collect(),
        })
    }

    /// h0: token embedding + position embedding per position, as a tape
    /// constant (embeddings live on the frozen side, so they never need
    /// gradients).
    pub fn embed(&self, tape: &mut Tape, ids: &[u32]) -> Result<TensorId> {
        let d = self.config.hidden_dim;
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} outside [1, {}]",
                ids.len(),
                self.config.max_len
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of vocabulary range {}",
                    self.config.vocab_size
                )));
            }
            let tok = &self.token_emb.data[id * d..(id + 1) * d];
            let pe = &self.pos_emb.data[pos * d..(pos + 1) * d];
            data.extend(tok.iter().zip(pe).map(|(a, b)| a + b));
        }
        Ok(tape.constant(Tensor::new(vec![ids.len(), d], data)?))
    }

    /// All hidden states h0..hL for a (possibly padded) id sequence.
    /// PAD positions are masked out of attention, so trailing padding
    /// cannot influence real positions.
    pub fn forward_all_layers(&self, ids: &[u32]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let enc = lease_encoder(&mut tape, self, false);
        let h0 = self.embed(&mut tape, ids)?;
        let mask = pad_mask(&mut tape, ids);
        let states = run_layers(&mut tape, &enc.layers, h0, mask)?;
        Ok(states.iter().map(|&id| tape.tensor(id).clone()).collect())
    }

    /// CLS embedding of the top layer.
    pub fn encode(&self, tok: &TokenizerSpec, text: &str) -> Result<Vec<f64>> {
        let ids = tok.tokenize_trimmed(text);
        let states = self.forward_all_layers(&ids)?;
        let top = states.last().expect("at least h0");
        let d = self.config.hidden_dim;
        Ok(top.data[..d].to_vec())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named_fields() {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        out
    }
}

/// Inner product similarity (Eq.-style raw dot, no normalization).
pub fn dot_score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "dot_score",
            detail: format!("{} vs {}", u.len(), v.len()),
        });
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Tape-side handles for one leased transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub heads: usize,
}

/// Tape-side handles for a whole leased encoder.
pub struct TapedEncoder {
    pub layers: Vec<LayerIds>,
}

pub fn lease_layer(tape: &mut Tape, w: &LayerWeights, heads: usize, trainable: bool) -> LayerIds {
    let mut put = |t: &Tensor| {
        let mut t = t.clone();
        t.requires_grad = trainable;
        tape.leaf(t)
    };
    LayerIds {
        wq: put(&w.wq),
        bq: put(&w.bq),
        wk: put(&w.wk),
        bk: put(&w.bk),
        wv: put(&w.wv),
        bv: put(&w.bv),
        wo: put(&w.wo),
        bo: put(&w.bo),
        ln1_gain: put(&w.ln1_gain),
        ln1_bias: put(&w.ln1_bias),
        w1: put(&w.w1),
        b1: put(&w.b1),
        w2: put(&w.w2),
        b2: put(&w.b2),
        ln2_gain: put(&w.ln2_gain),
        ln2_bias: put(&w.ln2_bias),
        heads,
    }
}

pub fn lease_encoder(tape: &mut Tape, w: &EncoderWeights, trainable: bool) -> TapedEncoder {
    TapedEncoder {
        layers: w
            .layers
            .iter()
            .map(|l| lease_layer(tape, l, w.config.num_heads, trainable))
            .collect(),
    }
}

/// Additive key mask for PAD positions, or None when nothing is padded.
pub fn pad_mask(tape: &mut Tape, ids: &[u32]) -> Option<TensorId> {
    if ids.iter().all(|&id| id != PAD_ID) {
        return None;
    }
    let row: Vec<f64> = ids
        .iter()
        .map(|&id| if id == PAD_ID { MASK_NEG } else { 0.0 })
        .collect();
    Some(tape.constant(Tensor::new(vec![1, ids.len()], row).expect("mask shape")))
}

/// One post-LN block over hidden states h (n×d).
pub fn layer_forward(
    tape: &mut Tape,
    h: TensorId,
    l: &LayerIds,
    mask: Option<TensorId>,
) -> Result<TensorId> {
    let d = tape.shape(h).1;
    if d % l.heads != 0 {
        return Err(Error::Dimension {
            op: "layer_forward",
            detail: format!("hidden dim {d} not divisible by {} heads", l.heads),
        });
    }
    let dh = d / l.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(h, l.wq)?;
    let q = tape.add_row_broadcast(q, l.bq)?;
    let k = tape.matmul(h, l.wk)?;
    let k = tape.add_row_broadcast(k, l.bk)?;
    let v = tape.matmul(h, l.wv)?;
    let v = tape.add_row_broadcast(v, l.bv)?;

    let mut head_outs = Vec::with_capacity(l.heads);
    for g in 0..l.heads {
        let qh = tape.slice_cols(q, g * dh, dh)?;
        let kh = tape.slice_cols(k, g * dh, dh)?;
        let vh = tape.slice_cols(v, g * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add_row_broadcast(scores, m)?,
            None => scores,
        };
        let probs = tape.softmax_rows(scores)?;
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let attn = tape.concat_cols(&head_outs)?;
    let attn = tape.matmul(attn, l.wo)?;
    let attn = tape.add_row_broadcast(attn, l.bo)?;
    let res1 = tape.add(h, attn)?;
    let norm1 = tape.layer_norm(res1, l.ln1_gain, l.ln1_bias)?;

    let ff = tape.matmul(norm1, l.w1)?;
    let ff = tape.add_row_broadcast(ff, l.b1)?;
    let ff = tape.gelu(ff);
    let ff = tape.matmul(ff, l.w2)?;
    let ff = tape.add_row_broadcast(ff, l.b2)?;
    let res2 = tape.add(norm1, ff)?;
    tape.layer_norm(res2, l.ln2_gain, l.ln2_bias)
}

/// Run a stack of layers from h0, returning every state h0..hL.
pub fn run_layers(
    tape: &mut Tape,
    layers: &[LayerIds],
    h0: TensorId,
    mask: Option<TensorId>,
) -> Result<Vec<TensorId>> {
    let mut states = Vec::with_capacity(layers.len() + 1);
    states.push(h0);
    let mut h = h0;
    for l in layers {
        h = layer_forward(tape, h, l, mask)?;
        states.push(h);
    }
    Ok(states)
}
