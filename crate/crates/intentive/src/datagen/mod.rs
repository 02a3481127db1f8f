//! Instruction-data synthesis: a deterministic synthetic "intent world"
//! for offline training and tests, drawback-extrapolation refinement,
//! and (in [`llm`]) the three-step LLM pipeline behind an abstract
//! text-generation client.
//!
//! World construction: instructions are templated over
//! (topic, format, relation). Every topic's documents split evenly over
//! (format, relation) cells. The first `paired` documents of each cell
//! share a content marker with their counterparts in every other cell
//! of the same topic, so a query built from that marker is ambiguous:
//! its gold document depends on the governing instruction. Remaining
//! documents carry globally unique markers.

pub mod llm;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Salt vocabulary: a small closed pool so that validation-time salts
/// are still in-distribution for training.
const SALT_POOL: usize = 64;
/// Salt-index space reserved for the original world; refinement draws
/// from [REFINE_SALT_BASE, SALT_POOL^2).
const REFINE_SALT_BASE: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub text: String,
    pub topic: String,
    pub format: String,
    pub relation: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub instruction_id: String,
    pub query: String,
    pub document: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelRecord {
    pub instruction_id: String,
    pub query: String,
    pub gold_document_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentWorldSpec {
    pub topics: Vec<String>,
    pub formats: Vec<String>,
    pub relations: Vec<String>,
    pub docs_per_topic: usize,
    pub queries_per_instruction: usize,
    pub ambiguous_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for IntentWorldSpec {
    fn default() -> Self {
        Self {
            topics: ["astronomy", "biology", "chemistry", "geology", "music", "history"]
                .map(String::from)
                .to_vec(),
            formats: ["article", "snippet"].map(String::from).to_vec(),
            relations: ["answers", "counters"].map(String::from).to_vec(),
            docs_per_topic: 48,
            queries_per_instruction: 31,
            ambiguous_fraction: 0.5,
            validation_fraction: 0.2,
            seed: 7,
        }
    }
}

impl IntentWorldSpec {
    pub fn cells(&self) -> usize {
        self.formats.len() * self.relations.len()
    }

    pub fn docs_per_cell(&self) -> usize {
        self.docs_per_topic / self.cells()
    }

    /// Documents per cell that share their content marker across the
    /// whole topic (the ambiguity substrate).
    pub fn paired_per_cell(&self) -> usize {
        (self.ambiguous_fraction * self.docs_per_cell() as f64).round() as usize
    }

    pub fn ambiguous_per_instruction(&self) -> usize {
        (self.ambiguous_fraction * self.queries_per_instruction as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() || self.formats.is_empty() {
            return Err(Error::Config("topics and formats must be nonempty".into()));
        }
        if self.relations.len() < 2 {
            return Err(Error::Config("relation set size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0,1)".into()));
        }
        let any_multiword = self
            .topics
            .iter()
            .chain(&self.formats)
            .chain(&self.relations)
            .any(|w| w.split_whitespace().count() != 1 || *w != w.to_lowercase());
        if any_multiword {
            return Err(Error::Config(
                "topic/format/relation tags must be single lowercase words".into(),
            ));
        }
        if self.docs_per_topic == 0 || self.docs_per_topic % self.cells() != 0 {
            return Err(Error::Config(format!(
                "docs_per_topic {} must be a positive multiple of formats x relations = {}",
                self.docs_per_topic,
                self.cells()
            )));
        }
        if self.queries_per_instruction == 0 {
            return Err(Error::Config("queries_per_instruction must be positive".into()));
        }
        let n_amb = self.ambiguous_per_instruction();
        if n_amb > 0 && self.paired_per_cell() == 0 {
            return Err(Error::Config(
                "ambiguity requested but ambiguous_fraction rounds to zero paired documents per cell"
                    .into(),
            ));
        }
        let unpaired = self.docs_per_cell() - self.paired_per_cell();
        if n_amb < self.queries_per_instruction && unpaired == 0 {
            return Err(Error::Config(
                "unambiguous queries requested but every document is paired".into(),
            ));
        }
        // A trailing odd relation has no ambiguity partner, so all its
        // queries are unambiguous and need unpaired documents.
        if self.relations.len() % 2 == 1 && unpaired == 0 {
            return Err(Error::Config(
                "odd relation count requires unpaired documents per cell".into(),
            ));
        }
        let total_salt_keys =
            self.topics.len() * self.formats.len() * self.relations.len()
                * self.queries_per_instruction;
        if total_salt_keys > REFINE_SALT_BASE {
            return Err(Error::Config(format!(
                "world too large for the salt pool: {total_salt_keys} query keys > {REFINE_SALT_BASE}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldData {
    pub instructions: Vec<InstructionRecord>,
    pub pairs: Vec<PairRecord>,
    pub qrels: Vec<QrelRecord>,
}

fn salt_words(k: usize) -> (String, String) {
    (format!("w{:02}", k % SALT_POOL), format!("w{:02}", (k / SALT_POOL) % SALT_POOL))
}

fn shared_content(ti: usize, j: usize) -> String {
    format!("c{ti}x{j}")
}

fn unique_content(ti: usize, gi: usize, ri: usize, slot: usize) -> String {
    format!("u{ti}g{gi}r{ri}s{slot}")
}

fn instruction_text(topic: &str, format: &str, relation: &str) -> String {
    format!("retrieve a {topic} {format} that {relation} the query")
}

/// Templated paraphrase used by the rewrite evaluation treatment: same
/// tags, different surface form. Untyped instructions are returned
/// unchanged.
pub fn rewrite_instruction(rec: &InstructionRecord) -> String {
    if rec.topic == "untyped" || rec.format == "untyped" || rec.relation == "untyped" {
        return rec.text.clone();
    }
    format!(
        "please locate the {} about {} which {} this query",
        rec.format, rec.topic, rec.relation
    )
}

fn doc_text(spec: &IntentWorldSpec, ti: usize, gi: usize, ri: usize, slot: usize) -> String {
    let content = if slot < spec.paired_per_cell() {
        shared_content(ti, slot)
    } else {
        unique_content(ti, gi, ri, slot)
    };
    format!(
        "{} {} {} {}",
        spec.topics[ti], spec.formats[gi], spec.relations[ri], content
    )
}

/// Evenly spread validation picks: slot i goes to validation exactly
/// when the running count floor((i+1)*vf) ticks up, giving
/// floor(n*vf) validation slots out of any n.
pub fn validation_slot(i: usize, vf: f64) -> bool {
    ((i + 1) as f64 * vf).floor() > (i as f64 * vf).floor()
}

/// Deterministic world synthesis: instructions, (query, document)
/// pairs with train/validation split, and binary qrels. A pure
/// function of the spec; byte-identical across runs.
pub fn synth_world(spec: &IntentWorldSpec) -> Result<WorldData> {
    spec.validate()?;
    let (nt, nf, nr) = (spec.topics.len(), spec.formats.len(), spec.relations.len());
    let q_per = spec.queries_per_instruction;
    let n_amb = spec.ambiguous_per_instruction();
    let paired = spec.paired_per_cell();
    let unpaired = spec.docs_per_cell() - paired;
    let vf = spec.validation_fraction;

    let mut instructions = Vec::with_capacity(nt * nf * nr);
    for t in 0..nt {
        for g in 0..nf {
            for r in 0..nr {
                instructions.push(InstructionRecord {
                    id: format!("inst-{:03}", instructions.len()),
                    text: instruction_text(
                        &spec.topics[t],
                        &spec.formats[g],
                        &spec.relations[r],
                    ),
                    topic: spec.topics[t].clone(),
                    format: spec.formats[g].clone(),
                    relation: spec.relations[r].clone(),
                });
            }
        }
    }

    let mut pairs = Vec::new();
    for t in 0..nt {
        for g in 0..nf {
            for r in 0..nr {
                let inst_id = format!("inst-{:03}", (t * nf + g) * nr + r);
                // Relations pair up (0,1), (2,3), ...; a trailing odd
                // relation has no partner and gets no ambiguous queries.
                let has_partner = (r ^ 1) < nr;
                for i in 0..q_per {
                    let ambiguous = i < n_amb && has_partner && paired > 0;
                    let (query, document) = if ambiguous {
                        let j = i % paired;
                        // Salt key shared with the partner instruction
                        // (independent of r) so both emit the same string.
                        let k = (t * nf + g) * q_per + i;
                        let (s1, s2) = salt_words(k);
                        let q = format!(
                            "{} {} {} {}",
                            shared_content(t, j),
                            spec.topics[t],
                            s1,
                            s2
                        );
                        (q, doc_text(spec, t, g, r, j))
                    } else {
                        let base = if has_partner && paired > 0 {
                            i.saturating_sub(n_amb)
                        } else {
                            i
                        };
                        let slot = paired + base % unpaired;
                        let k = ((t * nf + g) * nr + r) * q_per + i;
                        let (s1, s2) = salt_words(k);
                        let q = format!(
                            "{} {} {} {}",
                            unique_content(t, g, r, slot),
                            spec.topics[t],
                            s1,
                            s2
                        );
                        (q, doc_text(spec, t, g, r, slot))
                    };
                    let split = if validation_slot(i, vf) {
                        Split::Validation
                    } else {
                        Split::Train
                    };
                    pairs.push(PairRecord {
                        instruction_id: inst_id.clone(),
                        query,
                        document,
                        split,
                    });
                }
            }
        }
    }

    let corpus = Corpus::from_pairs(&pairs);
    let qrels = pairs
        .iter()
        .map(|p| QrelRecord {
            instruction_id: p.instruction_id.clone(),
            query: p.query.clone(),
            gold_document_ids: vec![corpus.id_of(&p.document).expect("doc from pairs")],
        })
        .collect();

    Ok(WorldData { instructions, pairs, qrels })
}

/// Document corpus derived from pair records: unique document texts in
/// first-appearance order, with ids assigned in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
}

impl Corpus {
    pub fn from_pairs(pairs: &[PairRecord]) -> Self {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        for p in pairs {
            if !seen.contains_key(p.document.as_str()) {
                seen.insert(p.document.as_str(), ids.len());
                ids.push(format!("doc-{:04}", ids.len()));
                texts.push(p.document.clone());
            }
        }
        Self { ids, texts }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id_of(&self, text: &str) -> Option<String> {
        self.texts.iter().position(|t| t == text).map(|i| self.ids[i].clone())
    }
}

/// Every distinct word needed to tokenize the world: record texts,
/// rewrite paraphrases, and the whole salt pool.
pub fn vocab_words(instructions: &[InstructionRecord], pairs: &[PairRecord]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for rec in instructions {
        for w in rec.text.split_whitespace() {
            words.insert(w.to_lowercase());
        }
        for w in rewrite_instruction(rec).split_whitespace() {
            words.insert(w.to_lowercase());
        }
    }
    for p in pairs {
        for w in p.query.split_whitespace().chain(p.document.split_whitespace()) {
            words.insert(w.to_lowercase());
        }
    }
    for k in 0..SALT_POOL {
        words.insert(format!("w{k:02}"));
    }
    words.into_iter().collect()
}

/// Bottom quartile (floor(n/4), at least 1) of instructions by score,
/// ties broken by ascending instruction id.
pub fn bottom_quartile(scores: &[(String, f64)]) -> Result<Vec<String>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty evaluation report".into()));
    }
    if scores.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "drawback extrapolation needs >= 4 instructions, got {}",
            scores.len()
        )));
    }
    let mut ranked: Vec<&(String, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("nDCG values are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let take = (scores.len() / 4).max(1);
    Ok(ranked.into_iter().take(take).map(|(id, _)| id.clone()).collect())
}

/// Synthetic-path drawback extrapolation: pick the challenging
/// (bottom-quartile) instructions from the scores, then append
/// `k_new_per_instruction` fresh hard training pairs for every
/// instruction sharing a challenging relation tag. `salt_offset` counts
/// refinement pairs already generated in this run so salts stay unique.
pub fn extrapolate_drawbacks_synth(
    spec: &IntentWorldSpec,
    instructions: &[InstructionRecord],
    scores: &[(String, f64)],
    k_new_per_instruction: usize,
    salt_offset: usize,
) -> Result<Vec<PairRecord>> {
    spec.validate()?;
    let challenging = bottom_quartile(scores)?;
    let relations: BTreeSet<&str> = instructions
        .iter()
        .filter(|r| challenging.contains(&r.id))
        .map(|r| r.relation.as_str())
        .collect();
    let paired = spec.paired_per_cell();
    let mut out = Vec::new();
    for rec in instructions {
        if !relations.contains(rec.relation.as_str()) {
            continue;
        }
        let ti = spec.topics.iter().position(|t| *t == rec.topic).ok_or_else(|| {
            Error::InvalidInput(format!("instruction {} has unknown topic", rec.id))
        })?;
        let gi = spec.formats.iter().position(|f| *f == rec.format).unwrap_or(0);
        let ri = spec.relations.iter().position(|r| *r == rec.relation).unwrap_or(0);
        for c in 0..k_new_per_instruction {
            let k = REFINE_SALT_BASE + salt_offset + out.len();
            if k >= SALT_POOL * SALT_POOL {
                return Err(Error::InvalidInput(
                    "refinement salt space exhausted".into(),
                ));
            }
            let (s1, s2) = salt_words(k);
            // Hard queries: reuse the shared-content region when it
            // exists so the new data exercises intent disambiguation.
            let slot = if paired > 0 { c % paired } else { c % spec.docs_per_cell() };
            let content = if paired > 0 {
                shared_content(ti, slot)
            } else {
                unique_content(ti, gi, ri, slot)
            };
            out.push(PairRecord {
                instruction_id: rec.id.clone(),
                query: format!("{} {} {} {}", content, rec.topic, s1, s2),
                document: doc_text(spec, ti, gi, ri, slot),
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
