//! Frozen dual encoder plus the pluggable intent introspector, joined
//! through two zero-initialized linear projections. The introspector
//! taps hidden states at an early base layer, reads the instruction
//! embedding through zp1, and injects its output back at a late base
//! layer through zp2 — inert at initialization, trainable thereafter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    dot_score, lease_layer, pad_mask, run_layers, EncoderWeights, LayerIds, LayerWeights,
    TokenizerSpec,
};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, TensorId};

/// Fully connected map whose weights and biases start (and restart, at
/// every pruning event) as exact zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroProjection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ZeroProjection {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[d_in, d_out]), bias: Tensor::zeros(&[1, d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data.iter().chain(&self.bias.data).all(|&v| v == 0.0)
    }

    pub fn re_zero(&mut self) {
        self.weight.data.fill(0.0);
        self.bias.data.fill(0.0);
    }
}

/// Structural description of the introspector: which teacher layers
/// survive (indices into the phase-1 stack, cumulative across pruning
/// events), its dims, and where it taps/injects on the base encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrospectorSpec {
    pub retained_layers: Vec<usize>,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub l_early: usize,
    pub l_late: usize,
}

impl IntrospectorSpec {
    pub fn validate(&self, base_layers: usize) -> Result<()> {
        if self.l_early >= self.l_late || self.l_late > base_layers {
            return Err(Error::Config(format!(
                "tap/inject must satisfy 0 <= l_early < l_late <= {base_layers}, got ({}, {})",
                self.l_early, self.l_late
            )));
        }
        if self.retained_layers.is_empty() {
            return Err(Error::Config("introspector needs at least one layer".into()));
        }
        let contiguous = self
            .retained_layers
            .windows(2)
            .all(|w| w[1] == w[0] + 1);
        if !contiguous {
            return Err(Error::Config(format!(
                "retained layer indices must be ascending and contiguous, got {:?}",
                self.retained_layers
            )));
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || self.hidden_dim % self.num_heads != 0
            || self.intermediate_dim < self.hidden_dim
        {
            return Err(Error::Config(format!(
                "bad introspector dims d'={} h'={} f'={}",
                self.hidden_dim, self.num_heads, self.intermediate_dim
            )));
        }
        Ok(())
    }
}

/// The full model: frozen dual encoder, trainable introspector stack,
/// the two zero projections, and the frozen width-reduction bridge used
/// once the introspector is narrower than the base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentModel {
    pub tokenizer: TokenizerSpec,
    pub base_query: EncoderWeights,
    pub base_doc: EncoderWeights,
    pub introspector: Vec<LayerWeights>,
    pub zp1: ZeroProjection,
    pub zp2: ZeroProjection,
    pub reduction: Option<Tensor>,
    pub spec: IntrospectorSpec,
}

impl IntentModel {
    /// Phase-1 assembly: the introspector is an exact copy of the base
    /// query encoder's transformer layers, the projections are zero,
    /// and the side network spans input embeddings to final hidden
    /// states (l_early = 0, l_late = L).
    pub fn init_from_base(
        tokenizer: TokenizerSpec,
        base_query: EncoderWeights,
        base_doc: EncoderWeights,
    ) -> Result<Self> {
        base_query.config.validate()?;
        base_doc.config.validate()?;
        if base_query.config.hidden_dim != base_doc.config.hidden_dim {
            return Err(Error::Config("query/document encoder dims differ".into()));
        }
        let cfg = base_query.config;
        let model = Self {
            tokenizer,
            introspector: base_query.layers.clone(),
            zp1: ZeroProjection::new(cfg.hidden_dim, cfg.hidden_dim),
            zp2: ZeroProjection::new(cfg.hidden_dim, cfg.hidden_dim),
            reduction: None,
            spec: IntrospectorSpec {
                retained_layers: (0..cfg.num_layers).collect(),
                hidden_dim: cfg.hidden_dim,
                num_heads: cfg.num_heads,
                intermediate_dim: cfg.intermediate_dim,
                l_early: 0,
                l_late: cfg.num_layers,
            },
            base_query,
            base_doc,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate(self.base_query.config.num_layers)?;
        let d = self.base_query.config.hidden_dim;
        let dp = self.spec.hidden_dim;
        if self.zp1.d_in() != d || self.zp1.d_out() != dp {
            return Err(Error::Config(format!(
                "zp1 must map {d}->{dp}, got {}->{}",
                self.zp1.d_in(),
                self.zp1.d_out()
            )));
        }
        if self.zp2.d_in() != dp || self.zp2.d_out() != d {
            return Err(Error::Config(format!(
                "zp2 must map {dp}->{d}, got {}->{}",
                self.zp2.d_in(),
                self.zp2.d_out()
            )));
        }
        if self.introspector.len() != self.spec.retained_layers.len() {
            return Err(Error::Config(format!(
                "introspector has {} layers but spec retains {}",
                self.introspector.len(),
                self.spec.retained_layers.len()
            )));
        }
        match (&self.reduction, dp == d) {
            (None, true) => {}
            (Some(r), false) if r.rows() == d && r.cols() == dp => {}
            _ => {
                return Err(Error::Config(format!(
                    "width bridge inconsistent: d={d}, d'={dp}, reduction {:?}",
                    self.reduction.as_ref().map(|r| r.shape.clone())
                )));
            }
        }
        Ok(())
    }

    /// Instruction embedding c: CLS of the frozen base query encoder.
    /// Constant for the lifetime of the model, hence cacheable.
    pub fn embed_instruction(&self, instruction: &str) -> Result<Vec<f64>> {
        self.base_query.encode(&self.tokenizer, instruction)
    }

    /// Document embedding from the frozen document encoder.
    pub fn embed_document(&self, doc: &str) -> Result<Vec<f64>> {
        self.base_doc.encode(&self.tokenizer, doc)
    }

    /// Plain query embedding, introspector bypassed entirely.
    pub fn embed_query_plain(&self, query: &str) -> Result<Vec<f64>> {
        self.base_query.encode(&self.tokenizer, query)
    }

    /// Intent-conditioned query embedding (evaluation path: nothing
    /// requires gradients).
    pub fn encode_query_with_intent(&self, query: &str, instruction: &str) -> Result<Vec<f64>> {
        let c = self.embed_instruction(instruction)?;
        self.encode_query_with_cached_intent(query, &c)
    }

    /// Same, with the instruction embedding already computed.
    pub fn encode_query_with_cached_intent(&self, query: &str, c: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let leased = self.lease(&mut tape, false);
        let ids = self.tokenizer.tokenize_trimmed(query);
        let out = leased.query_embedding(&mut tape, self, &ids, c)?;
        Ok(tape.data(out).to_vec())
    }

    /// s(q, I, d): intent-conditioned query embedding dotted with the
    /// frozen document embedding.
    pub fn score(&self, query: &str, instruction: &str, doc: &str) -> Result<f64> {
        let qv = self.encode_query_with_intent(query, instruction)?;
        let dv = self.embed_document(doc)?;
        dot_score(&qv, &dv)
    }

    /// Put the model on a tape. Only introspector layers and the zero
    /// projections are ever leased as trainable; the dual encoder and
    /// the reduction bridge always enter as constants.
    pub fn lease(&self, tape: &mut Tape, trainable: bool) -> LeasedModel {
        let base_layers: Vec<LayerIds> = self
            .base_query
            .layers
            .iter()
            .map(|l| lease_layer(tape, l, self.base_query.config.num_heads, false))
            .collect();
        let intro_layers: Vec<LayerIds> = self
            .introspector
            .iter()
            .map(|l| lease_layer(tape, l, self.spec.num_heads, trainable))
            .collect();
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        let zp1_w = put(&self.zp1.weight);
        let zp1_b = put(&self.zp1.bias);
        let zp2_w = put(&self.zp2.weight);
        let zp2_b = put(&self.zp2.bias);
        let reduction = self.reduction.as_ref().map(|r| tape.constant(r.clone()));
        LeasedModel { base_layers, intro_layers, zp1_w, zp1_b, zp2_w, zp2_b, reduction }
    }

    /// Trainable tensors in a stable order: introspector layers, then
    /// the two projections. Everything else is frozen by contract.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.introspector.iter().enumerate() {
            for (field, _) in layer.named_fields() {
                names.push(format!("introspector.{i}.{field}"));
            }
        }
        names.extend(
            ["zp1.weight", "zp1.bias", "zp2.weight", "zp2.bias"].map(String::from),
        );
        names
    }

    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.introspector {
            out.extend(layer.named_fields().into_iter().map(|(_, t)| t));
        }
        out.push(&self.zp1.weight);
        out.push(&self.zp1.bias);
        out.push(&self.zp2.weight);
        out.push(&self.zp2.bias);
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.introspector {
            out.extend(layer.named_fields_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.zp1.weight);
        out.push(&mut self.zp1.bias);
        out.push(&mut self.zp2.weight);
        out.push(&mut self.zp2.bias);
        out
    }
}

/// Tape handles for one leased [`IntentModel`].
pub struct LeasedModel {
    pub base_layers: Vec<LayerIds>,
    pub intro_layers: Vec<LayerIds>,
    pub zp1_w: TensorId,
    pub zp1_b: TensorId,
    pub zp2_w: TensorId,
    pub zp2_b: TensorId,
    pub reduction: Option<TensorId>,
}

impl LeasedModel {
    /// In the order the trainable tensors appear in
    /// `IntentModel::trainable_tensors`.
    pub fn trainable_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for l in &self.intro_layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias,
                l.w1, l.b1, l.w2, l.b2, l.ln2_gain, l.ln2_bias,
            ]);
        }
        out.extend([self.zp1_w, self.zp1_b, self.zp2_w, self.zp2_b]);
        out
    }

    /// The two-step intent-conditioned query encoding:
    /// 1. run the frozen base up to l_early;
    /// 2. bridge those hidden states to introspector width, add the
    ///    zp1-projected instruction embedding to every token row, and
    ///    run the introspector to get K;
    /// 3. run the frozen base on to l_late, add zp2(K) token-wise as a
    ///    skip connection, finish the remaining base layers;
    /// 4. return the CLS row of the top layer.
    pub fn query_embedding(
        &self,
        tape: &mut Tape,
        model: &IntentModel,
        query_ids: &[u32],
        c: &[f64],
    ) -> Result<TensorId> {
        let spec = &model.spec;
        let l_base = self.base_layers.len();
        spec.validate(l_base)?;
        let h0 = model.base_query.embed(tape, query_ids)?;
        let mask = pad_mask(tape, query_ids);

        // Base stack up to the tap point.
        let early_states =
            run_layers(tape, &self.base_layers[..spec.l_early], h0, mask)?;
        let h_early = *early_states.last().expect("h0 always present");

        // Introspection: bridge width, add zp1(c), run the side stack.
        let reduced = match self.reduction {
            Some(r) => tape.matmul(h_early, r)?,
            None => h_early,
        };
        let c_row = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
        let c_proj = tape.matmul(c_row, self.zp1_w)?;
        let c_proj = tape.add(c_proj, self.zp1_b)?;
        let intro_in = tape.add_row_broadcast(reduced, c_proj)?;
        let intro_states = run_layers(tape, &self.intro_layers, intro_in, mask)?;
        let k = *intro_states.last().expect("introspector has layers");

        // Base stack on to the injection point, then the skip add.
        let mid_states = run_layers(
            tape,
            &self.base_layers[spec.l_early..spec.l_late],
            h_early,
            mask,
        )?;
        let h_late = *mid_states.last().expect("nonempty");
        let inj = tape.matmul(k, self.zp2_w)?;
        let inj = tape.add_row_broadcast(inj, self.zp2_b)?;
        let fused = tape.add(h_late, inj)?;

        let final_states =
            run_layers(tape, &self.base_layers[spec.l_late..], fused, mask)?;
        let top = *final_states.last().expect("nonempty");
        tape.select_row(top, 0)
    }
}

/// Frozen width-reduction bridge: a seeded Gaussian d×d' matrix with
/// orthonormalized columns. Pure function of the dimensions, so pruning
/// stays a pure function of (teacher, target).
pub fn make_reduction(d: usize, d_prime: usize) -> Result<Tensor> {
    if d_prime > d {
        return Err(Error::Config(format!(
            "reduction must shrink width, got {d}->{d_prime}"
        )));
    }
    let seed = 0x9e37_79b9_7f4a_7c15u64 ^ ((d as u64) << 32) ^ d_prime as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns as vectors in R^d, Gram-Schmidt orthonormalized.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_prime);
    while cols.len() < d_prime {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &cols {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw; resample
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut data = vec![0.0; d * d_prime];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d_prime + j] = col[i];
        }
    }
    Tensor::new(vec![d, d_prime], data)
}
