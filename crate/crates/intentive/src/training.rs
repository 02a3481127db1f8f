//! Contrastive objectives over documents and instructions, hard
//! negative mining, and the per-phase training loop. Only the
//! introspector stack and the two zero projections receive gradients;
//! the dual encoder stays frozen throughout.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, InstructionRecord, PairRecord, Split};
use crate::error::{Error, Result};
use crate::introspect::{IntentModel, LeasedModel};
use crate::numcore::{adam_step, AdamState, Tape, Tensor, TensorId};
use crate::retrieval::{build_index, search, DenseIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub m_instr: usize,
    pub hard_negatives: usize,
    pub epochs_per_phase: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-3,
            alpha: 0.5,
            m_instr: 4,
            hard_negatives: 1,
            epochs_per_phase: 60,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs_per_phase == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite and >= 0".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub instruction_id: String,
    pub query: String,
    pub positive_doc: String,
    pub hard_negative_ids: Vec<String>,
    pub negative_instruction_ids: Vec<String>,
}

/// Training triples from the train-split pair records (negatives are
/// filled in later by mining and per-epoch sampling).
pub fn triples_from_pairs(pairs: &[PairRecord]) -> Vec<TrainingTriple> {
    pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| TrainingTriple {
            instruction_id: p.instruction_id.clone(),
            query: p.query.clone(),
            positive_doc: p.document.clone(),
            hard_negative_ids: Vec::new(),
            negative_instruction_ids: Vec::new(),
        })
        .collect()
}

/// One trace line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Stable log-sum-exp with canonical (value-sorted) summation so the
/// result is exactly invariant under permutation of the inputs.
fn lse_sorted(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
    exps.sort_by(|a, b| a.partial_cmp(b).expect("exp of finite score"));
    max + exps.iter().sum::<f64>().ln()
}

fn nll(pos: f64, negs: &[f64]) -> Result<f64> {
    if !pos.is_finite() || negs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("loss scores must be finite".into()));
    }
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    Ok(lse_sorted(&all) - pos)
}

/// L1 term: -log( e^{s+} / (e^{s+} + sum e^{s-}) ) over document
/// negatives.
pub fn loss_doc(pos_score: f64, neg_scores: &[f64]) -> Result<f64> {
    nll(pos_score, neg_scores)
}

/// L2 term: same functional form over mismatched-instruction scores
/// s(q, I-, d+).
pub fn loss_instr(pos_score: f64, neg_instr_scores: &[f64]) -> Result<f64> {
    nll(pos_score, neg_instr_scores)
}

/// L = L1 + alpha * L2.
pub fn total_loss(l1: f64, l2: f64, alpha: f64) -> f64 {
    l1 + alpha * l2
}

/// Fill hard negatives: top-k documents under (q, I+) that are not the
/// gold document, scored by the given (previous-phase) model. With
/// zero projections this is exactly the frozen base dual encoder.
pub fn mine_hard_negatives(
    prev_model: &IntentModel,
    triples: &mut [TrainingTriple],
    instructions: &[InstructionRecord],
    corpus: &Corpus,
    k: usize,
) -> Result<()> {
    if k == 0 {
        return Ok(());
    }
    if corpus.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "corpus of {} docs cannot supply {k} hard negatives",
            corpus.len()
        )));
    }
    let index = build_index(prev_model, corpus)?;
    let text_by_id: BTreeMap<&str, &str> = instructions
        .iter()
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect();
    let id_by_doc: BTreeMap<&str, &str> = corpus
        .texts
        .iter()
        .zip(&corpus.ids)
        .map(|(t, i)| (t.as_str(), i.as_str()))
        .collect();
    let mut c_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for triple in triples.iter_mut() {
        let inst_text = text_by_id.get(triple.instruction_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("unknown instruction {}", triple.instruction_id))
        })?;
        if !c_cache.contains_key(inst_text) {
            c_cache.insert(inst_text, prev_model.embed_instruction(inst_text)?);
        }
        let qv = prev_model
            .encode_query_with_cached_intent(&triple.query, &c_cache[inst_text])?;
        let gold = id_by_doc.get(triple.positive_doc.as_str()).copied();
        let ranked = search(&index, &qv, k + 1)?;
        triple.hard_negative_ids = ranked
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| Some(id.as_str()) != gold)
            .take(k)
            .collect();
    }
    Ok(())
}

/// One example's fully resolved tape inputs.
pub struct BatchItem<'a> {
    pub query_ids: Vec<u32>,
    pub c_pos: &'a [f64],
    pub c_negs: Vec<&'a [f64]>,
    pub d_pos: &'a [f64],
    pub d_negs: Vec<&'a [f64]>,
}

/// Build the batch loss on the tape:
/// mean over items of [ L1 + alpha * L2 ] with
/// L1 = lse(s+, doc negatives) - s+ and
/// L2 = lse(s+, mismatched-instruction scores) - s+.
/// Returns the loss node plus the scalar means of the two terms.
pub fn batch_loss(
    tape: &mut Tape,
    model: &IntentModel,
    leased: &LeasedModel,
    items: &[BatchItem],
    alpha: f64,
) -> Result<(TensorId, f64, f64)> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut per_item = Vec::with_capacity(items.len());
    let mut l1_sum = 0.0;
    let mut l2_sum = 0.0;
    for item in items {
        let d = item.d_pos.len();
        let q_pos = leased.query_embedding(tape, model, &item.query_ids, item.c_pos)?;
        let d_pos = tape.constant(Tensor::new(vec![1, d], item.d_pos.to_vec())?);
        let s_pos = tape.dot(q_pos, d_pos)?;

        let mut doc_scores = vec![s_pos];
        for neg in &item.d_negs {
            let nd = tape.constant(Tensor::new(vec![1, d], neg.to_vec())?);
            doc_scores.push(tape.dot(q_pos, nd)?);
        }
        let doc_row = tape.concat_cols(&doc_scores)?;
        let lse1 = tape.logsumexp_row(doc_row)?;
        let neg_pos = tape.scale(s_pos, -1.0);
        let l1 = tape.add(lse1, neg_pos)?;

        let mut instr_scores = vec![s_pos];
        for c_neg in &item.c_negs {
            let q_neg = leased.query_embedding(tape, model, &item.query_ids, c_neg)?;
            instr_scores.push(tape.dot(q_neg, d_pos)?);
        }
        let instr_row = tape.concat_cols(&instr_scores)?;
        let lse2 = tape.logsumexp_row(instr_row)?;
        let l2 = tape.add(lse2, neg_pos)?;

        l1_sum += tape.value(l1)?;
        l2_sum += tape.value(l2)?;
        let l2_scaled = tape.scale(l2, alpha);
        per_item.push(tape.add(l1, l2_scaled)?);
    }
    let row = tape.concat_cols(&per_item)?;
    let sum = tape.sum(row);
    let mean = tape.scale(sum, 1.0 / items.len() as f64);
    let n = items.len() as f64;
    Ok((mean, l1_sum / n, l2_sum / n))
}

/// Mini-batch training for one phase. Document negatives are the other
/// in-batch positives plus mined hard negatives; instruction negatives
/// are resampled every epoch from instructions with a different
/// relation tag. Adam updates touch only the introspector and the zero
/// projections.
pub fn train_phase(
    model: &mut IntentModel,
    triples: &[TrainingTriple],
    instructions: &[InstructionRecord],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::InvalidInput("no training triples".into()));
    }

    // Frozen-side caches: document embeddings by id and by text,
    // instruction embeddings by id, negative-instruction pools by
    // relation.
    let index: DenseIndex = build_index(model, corpus)?;
    let emb_by_id: BTreeMap<&str, &Vec<f64>> = index
        .ids
        .iter()
        .map(String::as_str)
        .zip(&index.embeddings)
        .collect();
    let id_by_text: BTreeMap<&str, &str> = corpus
        .texts
        .iter()
        .zip(&corpus.ids)
        .map(|(t, i)| (t.as_str(), i.as_str()))
        .collect();
    let rec_by_id: BTreeMap<&str, &InstructionRecord> =
        instructions.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut c_by_id: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rec in instructions {
        c_by_id.insert(&rec.id, model.embed_instruction(&rec.text)?);
    }
    // For each relation, the ids of instructions with a different one.
    let mut neg_pool: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in instructions {
        neg_pool.entry(&rec.relation).or_default();
    }
    let relations: Vec<&str> = neg_pool.keys().copied().collect();
    for rel in relations {
        let pool: Vec<&str> = instructions
            .iter()
            .filter(|r| r.relation != rel)
            .map(|r| r.id.as_str())
            .collect();
        if pool.len() < cfg.m_instr {
            return Err(Error::Config(format!(
                "only {} instructions outside relation {rel:?}, need {} negatives",
                pool.len(),
                cfg.m_instr
            )));
        }
        neg_pool.insert(rel, pool);
    }

    struct Prepared<'a> {
        query_ids: Vec<u32>,
        c_pos: &'a [f64],
        gold_id: &'a str,
        d_pos: &'a [f64],
        hard_ids: &'a [String],
        relation: &'a str,
    }
    let mut prepared = Vec::with_capacity(triples.len());
    for t in triples {
        let rec = rec_by_id.get(t.instruction_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("unknown instruction {}", t.instruction_id))
        })?;
        let gold_id = id_by_text.get(t.positive_doc.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("positive document not in corpus: {:?}", t.positive_doc))
        })?;
        if t.hard_negative_ids.iter().any(|id| id == gold_id) {
            return Err(Error::InvalidInput(format!(
                "gold document {gold_id} listed among hard negatives"
            )));
        }
        prepared.push(Prepared {
            query_ids: model.tokenizer.tokenize_trimmed(&t.query),
            c_pos: &c_by_id[t.instruction_id.as_str()],
            gold_id,
            d_pos: emb_by_id[gold_id],
            hard_ids: &t.hard_negative_ids,
            relation: &rec.relation,
        });
    }

    let sizes: Vec<usize> = model.trainable_tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(cfg.learning_rate, &sizes);
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs_per_phase {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b9).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // Per-epoch instruction negatives: sample without
            // replacement from the different-relation pool.
            let mut c_negs_per_item: Vec<Vec<&[f64]>> = Vec::with_capacity(chunk.len());
            for &ti in chunk {
                let pool = &neg_pool[prepared[ti].relation];
                let mut picks: Vec<&str> = pool.clone();
                picks.partial_shuffle(&mut rng, cfg.m_instr);
                c_negs_per_item.push(
                    picks[..cfg.m_instr]
                        .iter()
                        .map(|id| c_by_id[id].as_slice())
                        .collect(),
                );
            }
            let items: Vec<BatchItem> = chunk
                .iter()
                .zip(c_negs_per_item)
                .map(|(&ti, c_negs)| {
                    let p = &prepared[ti];
                    let mut d_negs: Vec<&[f64]> = chunk
                        .iter()
                        .filter(|&&tj| tj != ti && prepared[tj].gold_id != p.gold_id)
                        .map(|&tj| prepared[tj].d_pos)
                        .collect();
                    for id in p.hard_ids {
                        d_negs.push(emb_by_id[id.as_str()]);
                    }
                    BatchItem {
                        query_ids: p.query_ids.clone(),
                        c_pos: p.c_pos,
                        c_negs,
                        d_pos: p.d_pos,
                        d_negs,
                    }
                })
                .collect();

            let mut tape = Tape::new();
            let leased = model.lease(&mut tape, true);
            let (loss, l1, l2) = batch_loss(&mut tape, model, &leased, &items, cfg.alpha)?;
            let total = tape.value(loss)?;
            tape.backward(loss)?;
            let ids = leased.trainable_ids();
            let grads: Vec<&[f64]> = ids
                .iter()
                .map(|&id| tape.grad(id).expect("trainable leaf receives a gradient"))
                .collect();
            let mut params = model.trainable_tensors_mut();
            adam_step(&mut params, &grads, &mut adam)?;
            trace.push(TraceRecord { step, l1, l2, total });
            step += 1;
        }
    }
    Ok(trace)
}
