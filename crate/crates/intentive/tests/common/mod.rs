//! Shared helpers for integration tests: a central finite-difference
//! oracle, tolerance assertions, and closed-form tensor construction
//! for cross-checks against the NumPy reference.
#![allow(dead_code)]

use intentive::encoder::{EncoderConfig, EncoderWeights, LayerWeights};
use intentive::numcore::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Central finite differences of a scalar function at x.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

/// Mixed absolute/relative closeness: |a-b| <= atol + rtol*max(|a|,|b|).
pub fn assert_close_tol(analytic: &[f64], fd: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: length mismatch");
    for (i, (a, b)) in analytic.iter().zip(fd).enumerate() {
        let tol = atol + rtol * a.abs().max(b.abs());
        assert!(
            (a - b).abs() <= tol,
            "{what}: grad[{i}] analytic {a} vs fd {b} (tol {tol})"
        );
    }
}

/// Build the scalar expression twice: once on a gradient tape to collect
/// analytic gradients of every listed leaf, then repeatedly with
/// perturbed leaf values for the finite-difference oracle.
///
/// `leaves` provides (shape, initial values) per differentiable input;
/// `build` must return a scalar node.
pub fn fd_check<F>(leaves: &[(Vec<usize>, Vec<f64>)], rtol: f64, atol: f64, what: &str, mut build: F)
where
    F: FnMut(&mut Tape, &[TensorId]) -> TensorId,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves
        .iter()
        .map(|(shape, vals)| {
            tape.leaf(Tensor::new(shape.clone(), vals.clone()).unwrap().with_grad())
        })
        .collect();
    let root = build(&mut tape, &ids);
    let f0 = tape.value(root).expect("fd_check output must be scalar");
    assert!(f0.is_finite(), "{what}: non-finite output {f0}");
    tape.backward(root).unwrap();
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| tape.grad(id).expect("leaf requires grad").to_vec())
        .collect();

    // Finite-difference pass over the concatenated leaf values.
    let flat0: Vec<f64> = leaves.iter().flat_map(|(_, v)| v.clone()).collect();
    let eval = |flat: &[f64]| {
        let mut tape = Tape::new();
        let mut off = 0;
        let ids: Vec<TensorId> = leaves
            .iter()
            .map(|(shape, vals)| {
                let vals2 = flat[off..off + vals.len()].to_vec();
                off += vals.len();
                tape.constant(Tensor::new(shape.clone(), vals2).unwrap())
            })
            .collect();
        let root = build(&mut tape, &ids);
        tape.value(root).unwrap()
    };
    let fd = fd_grad(eval, &flat0, 1e-5);
    assert_close_tol(&analytic, &fd, rtol, atol, what);
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Deterministic dyadic-rational fill keyed by a tensor name. Values are
/// integer multiples of 1/64 in [-14/64, 14/64], so the NumPy reference
/// (python/golden_reference.py) constructs bit-identical weights from
/// the same formula without any serialization between the two sides.
pub fn fnv1a(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in s.as_bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn formula_tensor(name: &str, rows: usize, cols: usize) -> Tensor {
    let h = fnv1a(name);
    let p = (3 + h % 17) as i64;
    let q = (5 + (h >> 8) % 19) as i64;
    let r = ((h >> 16) % 23) as i64;
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows as i64 {
        for j in 0..cols as i64 {
            data.push(((i * p + j * q + r) % 29 - 14) as f64 / 64.0);
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn formula_layer(prefix: &str, d: usize, f: usize) -> LayerWeights {
    let t = |field: &str, rows, cols| formula_tensor(&format!("{prefix}.{field}"), rows, cols);
    LayerWeights {
        wq: t("wq", d, d),
        bq: t("bq", 1, d),
        wk: t("wk", d, d),
        bk: t("bk", 1, d),
        wv: t("wv", d, d),
        bv: t("bv", 1, d),
        wo: t("wo", d, d),
        bo: t("bo", 1, d),
        ln1_gain: t("ln1_gain", 1, d),
        ln1_bias: t("ln1_bias", 1, d),
        w1: t("w1", d, f),
        b1: t("b1", 1, f),
        w2: t("w2", f, d),
        b2: t("b2", 1, d),
        ln2_gain: t("ln2_gain", 1, d),
        ln2_bias: t("ln2_bias", 1, d),
    }
}

pub fn formula_encoder(prefix: &str, config: EncoderConfig) -> EncoderWeights {
    EncoderWeights {
        token_emb: formula_tensor(&format!("{prefix}.token_emb"), config.vocab_size, config.hidden_dim),
        pos_emb: formula_tensor(&format!("{prefix}.pos_emb"), config.max_len, config.hidden_dim),
        layers: (0..config.num_layers)
            .map(|i| formula_layer(&format!("{prefix}.layer.{i}"), config.hidden_dim, config.intermediate_dim))
            .collect(),
        config,
    }
}

/// Small-but-real world for model-level tests: 4 instructions over two
/// topics, one format, two relations; 16 documents; 6 queries per
/// instruction of which 2 are held out.
pub fn micro_world_spec() -> intentive::datagen::IntentWorldSpec {
    intentive::datagen::IntentWorldSpec {
        topics: vec!["stars".into(), "cells".into()],
        formats: vec!["article".into()],
        relations: vec!["answers".into(), "counters".into()],
        docs_per_topic: 8,
        queries_per_instruction: 6,
        ambiguous_fraction: 0.5,
        validation_fraction: 0.34,
        seed: 7,
    }
}

/// Pipeline config sized to run a full phase in well under a second.
pub fn micro_config() -> intentive::pipeline::PipelineConfig {
    intentive::pipeline::PipelineConfig {
        world: micro_world_spec(),
        encoder: EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            intermediate_dim: 16,
            vocab_size: 3,
            max_len: 12,
        },
        train: intentive::training::TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            alpha: 0.5,
            m_instr: 2,
            hard_negatives: 1,
            epochs_per_phase: 1,
            seed: 7,
        },
        schedule: vec![],
        phases: 1,
        refinement: false,
        refine_per_instruction: 2,
        seed: 7,
    }
}

/// Frozen outputs of the NumPy reference implementation, computed on
/// formula-constructed weights (see python/golden_reference.py).
#[derive(serde::Deserialize)]
pub struct Golden {
    pub config: GoldenConfig,
    pub query_ids: Vec<u32>,
    pub doc_ids: Vec<u32>,
    pub query_states: Vec<Vec<Vec<f64>>>,
    pub doc_cls: Vec<f64>,
    pub dot: f64,
    pub intent: GoldenIntent,
}

#[derive(serde::Deserialize)]
pub struct GoldenConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

#[derive(serde::Deserialize)]
pub struct GoldenIntent {
    pub l_early: usize,
    pub l_late: usize,
    pub c: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Golden {
    pub fn load() -> Self {
        serde_json::from_str(include_str!("../fixtures/encoder_golden.json"))
            .expect("fixture parses")
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.config.num_layers,
            hidden_dim: self.config.hidden_dim,
            num_heads: self.config.num_heads,
            intermediate_dim: self.config.intermediate_dim,
            vocab_size: self.config.vocab_size,
            max_len: self.config.max_len,
        }
    }
}
