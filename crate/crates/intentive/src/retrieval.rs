//! Brute-force dense retrieval, nDCG@10, and per-instruction
//! evaluation with the four instruction treatments.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datagen::{rewrite_instruction, Corpus, InstructionRecord, PairRecord, QrelRecord};
use crate::error::{Error, Result};
use crate::introspect::IntentModel;

/// In-memory exact index: one embedding row per document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub ids: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub dim: usize,
}

/// Embed every corpus document with the frozen document encoder.
pub fn build_index(model: &IntentModel, corpus: &Corpus) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty corpus".into()));
    }
    let dim = model.base_doc.config.hidden_dim;
    let mut embeddings = Vec::with_capacity(corpus.len());
    for text in &corpus.texts {
        let v = model.embed_document(text)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite document embedding for {text:?}"
            )));
        }
        embeddings.push(v);
    }
    Ok(DenseIndex { ids: corpus.ids.clone(), embeddings, dim })
}

/// Top-k by dot product, descending; ties broken by ascending doc id;
/// k larger than the corpus returns everything.
pub fn search(index: &DenseIndex, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("search needs k >= 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Dimension {
            op: "search",
            detail: format!("query dim {} vs index dim {}", query.len(), index.dim),
        });
    }
    let mut scored: Vec<(usize, f64)> = index
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.iter().zip(query).map(|(a, b)| a * b).sum::<f64>()))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("index rows and query are finite")
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect())
}

/// Binary-gain nDCG truncated at rank 10.
pub fn ndcg_at_10(ranked_ids: &[String], gold_ids: &[String]) -> Result<f64> {
    if gold_ids.is_empty() {
        return Err(Error::InvalidInput("empty gold set".into()));
    }
    let dcg: f64 = ranked_ids
        .iter()
        .take(10)
        .enumerate()
        .filter(|(_, id)| gold_ids.contains(id))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..gold_ids.len().min(10))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    Correct,
    Rewrite,
    Remove,
    Incorrect,
}

impl Treatment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Correct => "correct",
            Self::Rewrite => "rewrite",
            Self::Remove => "remove",
            Self::Incorrect => "incorrect",
        }
    }

    pub const ALL: [Treatment; 4] =
        [Self::Correct, Self::Rewrite, Self::Remove, Self::Incorrect];
}

impl std::str::FromStr for Treatment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(Self::Correct),
            "rewrite" => Ok(Self::Rewrite),
            "remove" => Ok(Self::Remove),
            "incorrect" => Ok(Self::Incorrect),
            other => Err(Error::Usage(format!(
                "unknown treatment {other:?} (expected correct|rewrite|remove|incorrect)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub instruction_id: String,
    pub query: String,
    pub ranked_ids: Vec<String>,
    pub ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_instruction: Vec<(String, f64)>,
    pub macro_avg: f64,
    pub per_query: Option<Vec<QueryOutcome>>,
}

/// Seeded derangement over instructions for the "incorrect" treatment:
/// instructions sorted by (relation, id) and rotated by an offset that
/// maximizes relation mismatches, chosen among ties by the seed. A
/// rotation by 0 < k < n can never map an instruction to itself.
pub fn derange_instructions(
    instructions: &[InstructionRecord],
    seed: u64,
) -> Result<BTreeMap<String, String>> {
    let n = instructions.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "derangement needs at least two instructions".into(),
        ));
    }
    let mut order: Vec<&InstructionRecord> = instructions.iter().collect();
    order.sort_by(|a, b| a.relation.cmp(&b.relation).then_with(|| a.id.cmp(&b.id)));
    let flips = |k: usize| -> usize {
        (0..n)
            .filter(|&i| order[i].relation != order[(i + k) % n].relation)
            .count()
    };
    let best = (1..n).map(flips).max().expect("n >= 2");
    let candidates: Vec<usize> = (1..n).filter(|&k| flips(k) == best).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = candidates[rng.random_range(0..candidates.len())];
    Ok((0..n)
        .map(|i| (order[i].id.clone(), order[(i + k) % n].id.clone()))
        .collect())
}

/// Evaluate the model on the validation pairs, one score per
/// instruction plus the macro average. The treatment decides which
/// instruction text conditions each query:
/// correct = as generated, rewrite = templated paraphrase,
/// remove = empty text, incorrect = seeded derangement.
pub fn evaluate_per_instruction(
    model: &IntentModel,
    instructions: &[InstructionRecord],
    valset: &[PairRecord],
    qrels: &[QrelRecord],
    index: &DenseIndex,
    treatment: Treatment,
    seed: u64,
    keep_ranked: bool,
) -> Result<EvalReport> {
    if valset.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let by_id: BTreeMap<&str, &InstructionRecord> =
        instructions.iter().map(|r| (r.id.as_str(), r)).collect();
    let gold: BTreeMap<(&str, &str), &Vec<String>> = qrels
        .iter()
        .map(|q| ((q.instruction_id.as_str(), q.query.as_str()), &q.gold_document_ids))
        .collect();
    let deranged = match treatment {
        Treatment::Incorrect => Some(derange_instructions(instructions, seed)?),
        _ => None,
    };

    // The instruction text each (treated) instruction id encodes under.
    let treated_text = |inst_id: &str| -> Result<String> {
        let rec = by_id.get(inst_id).ok_or_else(|| {
            Error::InvalidInput(format!("validation pair references unknown {inst_id}"))
        })?;
        Ok(match treatment {
            Treatment::Correct => rec.text.clone(),
            Treatment::Rewrite => rewrite_instruction(rec),
            Treatment::Remove => String::new(),
            Treatment::Incorrect => {
                let target = &deranged.as_ref().expect("built above")[inst_id];
                by_id[target.as_str()].text.clone()
            }
        })
    };

    let mut c_cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for pair in valset {
        let inst_id = pair.instruction_id.as_str();
        let text = treated_text(inst_id)?;
        if !c_cache.contains_key(&text) {
            let c = model.embed_instruction(&text)?;
            c_cache.insert(text.clone(), c);
        }
        let c = &c_cache[&text];
        let qv = model.encode_query_with_cached_intent(&pair.query, c)?;
        let ranked = search(index, &qv, 10)?;
        let ranked_ids: Vec<String> = ranked.into_iter().map(|(id, _)| id).collect();
        let golds = gold.get(&(inst_id, pair.query.as_str())).ok_or_else(|| {
            Error::InvalidInput(format!(
                "no qrel for instruction {inst_id} query {:?}",
                pair.query
            ))
        })?;
        let score = ndcg_at_10(&ranked_ids, golds)?;
        grouped.entry(inst_id).or_default().push(score);
        if keep_ranked {
            outcomes.push(QueryOutcome {
                instruction_id: inst_id.to_string(),
                query: pair.query.clone(),
                ranked_ids,
                ndcg10: score,
            });
        }
    }

    let per_instruction: Vec<(String, f64)> = grouped
        .into_iter()
        .map(|(id, scores)| {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            (id.to_string(), mean)
        })
        .collect();
    let macro_avg = per_instruction.iter().map(|(_, v)| v).sum::<f64>()
        / per_instruction.len() as f64;
    Ok(EvalReport {
        per_instruction,
        macro_avg,
        per_query: keep_ranked.then_some(outcomes),
    })
}

/// JSONL serialization: one line per instruction plus a summary line.
pub fn write_report(path: &std::path::Path, report: &EvalReport, label: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        instruction_id: &'a str,
        ndcg10: f64,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        treatment: &'a str,
        macro_ndcg10: f64,
        num_instructions: usize,
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for (id, v) in &report.per_instruction {
        out.push_str(&serde_json::to_string(&Line { instruction_id: id, ndcg10: *v })?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&Summary {
        treatment: label,
        macro_ndcg10: report.macro_avg,
        num_instructions: report.per_instruction.len(),
    })?);
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}
