//! The three-step LLM data pipeline behind an abstract text-generation
//! client: instruction generation, query-document pair generation, and
//! query self-check. Ships with a scripted mock client; the real
//! endpoint adapter lives in the CLI.

use std::collections::{BTreeSet, VecDeque};

use crate::datagen::{InstructionRecord, PairRecord, Split};
use crate::error::{Error, Result};

pub const INSTRUCTION_PROMPT: &str = include_str!("../../prompts/instruction_generation.txt");
pub const PAIR_PROMPT: &str = include_str!("../../prompts/pair_generation.txt");
pub const SELF_CHECK_PROMPT: &str = include_str!("../../prompts/query_self_check.txt");

/// Built-in in-context example blocks for the two templates whose slots
/// the operations do not take as arguments.
const PAIR_EXAMPLE: &str = "Instruction: retrieve a science article that answers the query\n\
Query: what makes the sky blue\n\
Retrieved text: science article rayleigh scattering explains the blue color of the sky";
const SELF_CHECK_EXAMPLE: &str = "The instruction: retrieve a science article that answers the query\n\
The retrieved text: science article rayleigh scattering explains the blue color of the sky\n\
The query: what makes the sky blue\n\
Output: what makes the sky blue";

/// One capability: complete a prompt into generated text.
pub trait TextGenClient {
    fn complete(&mut self, prompt: &str) -> Result<String>;
}

/// Scripted client for offline tests: returns queued responses in
/// order and records every prompt it was given.
#[derive(Default)]
pub struct MockTextGenClient {
    pub responses: VecDeque<String>,
    pub prompts: Vec<String>,
}

impl MockTextGenClient {
    pub fn with_responses<I: IntoIterator<Item = String>>(responses: I) -> Self {
        Self { responses: responses.into_iter().collect(), prompts: Vec::new() }
    }
}

impl TextGenClient for MockTextGenClient {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        self.prompts.push(prompt.to_string());
        self.responses
            .pop_front()
            .ok_or_else(|| Error::Transport("mock client ran out of responses".into()))
    }
}

/// Parse tags out of an instruction that follows the synthetic-world
/// template; anything else is "untyped".
pub fn parse_tags(text: &str) -> (String, String, String) {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() == 8
        && words[0] == "retrieve"
        && words[1] == "a"
        && words[4] == "that"
        && words[6] == "the"
        && words[7] == "query"
    {
        (words[2].to_string(), words[3].to_string(), words[5].to_string())
    } else {
        ("untyped".into(), "untyped".into(), "untyped".into())
    }
}

pub fn render_instruction_prompt(in_context_examples: &[String]) -> String {
    INSTRUCTION_PROMPT
        .replace("<GIVE INSTRUCTION EXAMPLES HERE>", &in_context_examples.join("\n"))
}

/// Step 1: generate up to n deduplicated instructions. Keeps asking the
/// client (bounded attempts) until n lines are collected or a round
/// adds nothing new.
pub fn gen_instructions_llm(
    client: &mut dyn TextGenClient,
    n: usize,
    in_context_examples: &[String],
) -> Result<Vec<InstructionRecord>> {
    const MAX_ATTEMPTS: usize = 8;
    let prompt = render_instruction_prompt(in_context_examples);
    let mut seen = BTreeSet::new();
    let mut records: Vec<InstructionRecord> = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        if records.len() >= n {
            break;
        }
        let reply = client.complete(&prompt)?;
        let mut new_any = false;
        for line in reply.lines() {
            let text = line.trim().to_lowercase();
            if text.is_empty() || !seen.insert(text.clone()) {
                continue;
            }
            new_any = true;
            let (topic, format, relation) = parse_tags(&text);
            records.push(InstructionRecord {
                id: format!("inst-llm-{:03}", records.len()),
                text,
                topic,
                format,
                relation,
            });
            if records.len() >= n {
                break;
            }
        }
        if !new_any {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::Generation("no parseable instruction lines".into()));
    }
    Ok(records)
}

pub fn render_pair_prompt(instruction: &InstructionRecord) -> String {
    let text_type = if instruction.topic == "untyped" {
        "text".to_string()
    } else {
        format!("a {} {}", instruction.topic, instruction.format)
    };
    PAIR_PROMPT
        .replace("<TEXT TYPE>", &text_type)
        .replace("<EXAMPLES OF QUERY-DOCUMENT PAIR GENERATION>", PAIR_EXAMPLE)
        .replace("<INSTRUCTION>", &instruction.text)
}

/// Step 2: generate (query, document) pairs for one instruction. The
/// client's reply is parsed as alternating "query:" / "document:" (or
/// "retrieved text:") lines.
pub fn gen_pairs_llm(
    client: &mut dyn TextGenClient,
    instruction: &InstructionRecord,
) -> Result<Vec<PairRecord>> {
    let reply = client.complete(&render_pair_prompt(instruction))?;
    let mut out = Vec::new();
    let mut pending_query: Option<String> = None;
    for line in reply.lines() {
        let line = line.trim();
        let lower = line.to_lowercase();
        if let Some(rest) = lower.strip_prefix("query:") {
            pending_query = Some(rest.trim().to_string());
        } else if let Some(rest) = lower
            .strip_prefix("document:")
            .or_else(|| lower.strip_prefix("retrieved text:"))
        {
            if let Some(q) = pending_query.take() {
                let d = rest.trim().to_string();
                if !q.is_empty() && !d.is_empty() {
                    out.push(PairRecord {
                        instruction_id: instruction.id.clone(),
                        query: q,
                        document: d,
                        split: Split::Train,
                    });
                }
            }
        }
    }
    // Exact-text dedup, preserving first appearance.
    let mut seen = BTreeSet::new();
    out.retain(|p| seen.insert((p.query.clone(), p.document.clone())));
    if out.is_empty() {
        return Err(Error::Generation(format!(
            "no parseable query/document pairs for {}",
            instruction.id
        )));
    }
    Ok(out)
}

pub fn render_self_check_prompt(
    instruction: &InstructionRecord,
    query: &str,
    document: &str,
) -> String {
    SELF_CHECK_PROMPT
        .replace("<EXAMPLES OF QUERY REFINEMENT>", SELF_CHECK_EXAMPLE)
        .replace("<INSTRUCTION>", &instruction.text)
        .replace("<RETRIEVED TEXT>", document)
        .replace("<QUERY>", query)
}

/// Step 3: self-check one query; the client's (trimmed) output is the
/// possibly revised query, verbatim.
pub fn self_check_query(
    client: &mut dyn TextGenClient,
    instruction: &InstructionRecord,
    query: &str,
    document: &str,
) -> Result<String> {
    let reply = client.complete(&render_self_check_prompt(instruction, query, document))?;
    let revised = reply.trim().to_string();
    if revised.is_empty() {
        return Err(Error::Generation("self-check returned empty output".into()));
    }
    Ok(revised)
}

/// LLM-path drawback extrapolation: challenging instructions become
/// in-context examples for fresh instruction generation, then each new
/// instruction gets pairs generated for it.
pub fn extrapolate_drawbacks_llm(
    client: &mut dyn TextGenClient,
    challenging: &[InstructionRecord],
    n_new_instructions: usize,
) -> Result<(Vec<InstructionRecord>, Vec<PairRecord>)> {
    let examples: Vec<String> = challenging.iter().map(|r| r.text.clone()).collect();
    let new_instructions = gen_instructions_llm(client, n_new_instructions, &examples)?;
    let mut pairs = Vec::new();
    for rec in &new_instructions {
        pairs.extend(gen_pairs_llm(client, rec)?);
    }
    Ok((new_instructions, pairs))
}
