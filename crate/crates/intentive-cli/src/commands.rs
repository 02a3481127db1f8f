use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use intentive::checkpoint::{load_model, save_model, RunManifest};
use intentive::datagen::llm::{gen_instructions_llm, gen_pairs_llm, TextGenClient};
use intentive::datagen::{
    read_jsonl, synth_world, validation_slot, write_jsonl, Corpus, InstructionRecord,
    PairRecord, QrelRecord, Split, WorldData,
};
use intentive::error::{Error, Result};
use intentive::introspect::IntentModel;
use intentive::pipeline::{model_for_world, run_pipeline};
use intentive::retrieval::{build_index, evaluate_per_instruction, write_report, Treatment};
use intentive::training::TraceRecord;

use crate::config::RunConfig;
use crate::httpgen::HttpTextGenClient;

pub const LLM_ENDPOINT_VAR: &str = "INTENTIVE_LLM_ENDPOINT";

fn load_world(data_dir: &Path) -> Result<WorldData> {
    let instructions: Vec<InstructionRecord> =
        read_jsonl(&data_dir.join("instructions.jsonl"))?;
    let pairs: Vec<PairRecord> = read_jsonl(&data_dir.join("pairs.jsonl"))?;
    let qrels: Vec<QrelRecord> = read_jsonl(&data_dir.join("qrels.jsonl"))?;
    if instructions.is_empty() || pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no usable data under {}",
            data_dir.display()
        )));
    }
    Ok(WorldData { instructions, pairs, qrels })
}

fn write_world(data_dir: &Path, world: &WorldData) -> Result<()> {
    write_jsonl(&data_dir.join("instructions.jsonl"), &world.instructions)?;
    write_jsonl(&data_dir.join("pairs.jsonl"), &world.pairs)?;
    write_jsonl(&data_dir.join("qrels.jsonl"), &world.qrels)?;
    Ok(())
}

fn llm_world(cfg: &RunConfig, client: &mut dyn TextGenClient) -> Result<WorldData> {
    // A handful of template instructions seed the in-context examples.
    let seed_world = synth_world(&cfg.world)?;
    let examples: Vec<String> = seed_world
        .instructions
        .iter()
        .take(4)
        .map(|r| r.text.clone())
        .collect();
    let n = cfg.world.topics.len() * cfg.world.formats.len() * cfg.world.relations.len();
    let instructions = gen_instructions_llm(client, n, &examples)?;
    let mut pairs = Vec::new();
    for rec in &instructions {
        let mut ps = gen_pairs_llm(client, rec)?;
        for (i, p) in ps.iter_mut().enumerate() {
            if validation_slot(i, cfg.world.validation_fraction) {
                p.split = Split::Validation;
            }
        }
        pairs.extend(ps);
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

pub fn cmd_gen_data(cfg: &RunConfig, llm: bool) -> Result<()> {
    cfg.validate()?;
    let world = if llm {
        let endpoint = std::env::var(LLM_ENDPOINT_VAR).map_err(|_| {
            Error::Usage(format!("--llm requires the {LLM_ENDPOINT_VAR} environment variable"))
        })?;
        let mut client = HttpTextGenClient::new(&endpoint)?;
        llm_world(cfg, &mut client)?
    } else {
        synth_world(&cfg.world)?
    };
    write_world(&cfg.data_dir, &world)?;
    println!(
        "wrote {} instructions, {} pairs, {} qrels to {}",
        world.instructions.len(),
        world.pairs.len(),
        world.qrels.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

/// Manifest as it stood right after phase `p`'s training (its model
/// snapshot predates any pruning scheduled at that boundary).
fn manifest_at(manifest: &RunManifest, p: usize) -> RunManifest {
    RunManifest {
        seed: manifest.seed,
        phases_completed: p,
        train_sizes: manifest.train_sizes[..p].to_vec(),
        prune_events: manifest
            .prune_events
            .iter()
            .filter(|e| e.after_phase < p)
            .cloned()
            .collect(),
        refinement_events: manifest
            .refinement_events
            .iter()
            .filter(|e| e.after_phase < p)
            .cloned()
            .collect(),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let pipeline_cfg = cfg.pipeline();
    let world = load_world(&cfg.data_dir)?;
    let corpus = Corpus::from_pairs(&world.pairs);
    let model = model_for_world(&pipeline_cfg, &world)?;
    let outcome = run_pipeline(&pipeline_cfg, &world, &corpus, model)?;

    fs::create_dir_all(&cfg.checkpoint_dir)?;
    for (i, m) in outcome.phase_models.iter().enumerate() {
        let p = i + 1;
        save_model(
            &cfg.checkpoint_dir.join(format!("phase-{p}.ckpt")),
            m,
            &manifest_at(&outcome.manifest, p),
        )?;
        write_jsonl(
            &cfg.checkpoint_dir.join(format!("trace-phase-{p}.jsonl")),
            &outcome.phase_records[i].trace,
        )?;
        write_report(
            &cfg.report_dir.join(format!("eval-phase-{p}.jsonl")),
            &outcome.phase_records[i].validation,
            Treatment::Correct.as_str(),
        )?;
    }
    save_model(
        &cfg.checkpoint_dir.join("final.ckpt"),
        &outcome.model,
        &outcome.manifest,
    )?;
    let mut manifest_json = serde_json::to_string_pretty(&outcome.manifest)?;
    manifest_json.push('\n');
    fs::write(cfg.checkpoint_dir.join("manifest.json"), manifest_json)?;
    write_jsonl(
        &cfg.data_dir.join("refinement_pairs.jsonl"),
        &outcome.appended_pairs,
    )?;

    for rec in &outcome.phase_records {
        println!(
            "phase {}: {} train pairs, {} steps, final loss {:.4}, validation nDCG@10 {:.4}",
            rec.phase,
            rec.train_size,
            rec.trace.len(),
            rec.trace.last().map_or(f64::NAN, |t| t.total),
            rec.validation.macro_avg
        );
    }
    println!("final checkpoint: {}", cfg.checkpoint_dir.join("final.ckpt").display());
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    treatment: Treatment,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let world = load_world(&cfg.data_dir)?;
    let corpus = Corpus::from_pairs(&world.pairs);
    let valset: Vec<PairRecord> = world
        .pairs
        .iter()
        .filter(|p| p.split == Split::Validation)
        .cloned()
        .collect();
    let index = build_index(&model, &corpus)?;
    let report = evaluate_per_instruction(
        &model,
        &world.instructions,
        &valset,
        &world.qrels,
        &index,
        treatment,
        cfg.seed,
        false,
    )?;
    let out = out.unwrap_or_else(|| {
        cfg.report_dir.join(format!("eval-{}.jsonl", treatment.as_str()))
    });
    write_report(&out, &report, treatment.as_str())?;
    println!(
        "{}: macro nDCG@10 {:.4} over {} instructions -> {}",
        treatment.as_str(),
        report.macro_avg,
        report.per_instruction.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    checkpoint_a: String,
    checkpoint_b: String,
    num_encodes: usize,
    qps_a: f64,
    qps_b: f64,
    ratio_b_over_a: f64,
}

fn throughput(model: &IntentModel, work: &[(String, Vec<f64>)], n: usize) -> Result<f64> {
    // Warm-up pass, then one timed loop. Single-threaded by
    // construction, so timings are stable.
    for (q, c) in work.iter().take(25) {
        model.encode_query_with_cached_intent(q, c)?;
    }
    let start = Instant::now();
    for i in 0..n {
        let (q, c) = &work[i % work.len()];
        model.encode_query_with_cached_intent(q, c)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(n as f64 / secs)
}

pub fn cmd_bench(
    cfg: &RunConfig,
    ckpt_a: &Path,
    ckpt_b: &Path,
    queries: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model_a, _) = load_model(ckpt_a)?;
    let (model_b, _) = load_model(ckpt_b)?;
    if model_a.base_query != model_b.base_query
        || model_a.base_doc != model_b.base_doc
        || model_a.tokenizer != model_b.tokenizer
    {
        return Err(Error::InvalidInput(
            "benchmarked checkpoints must share the same base encoder".into(),
        ));
    }
    let world = load_world(&cfg.data_dir)?;
    let mut work = Vec::new();
    for rec in &world.instructions {
        let c = model_a.embed_instruction(&rec.text)?;
        for p in world.pairs.iter().filter(|p| p.instruction_id == rec.id).take(2) {
            work.push((p.query.clone(), c.clone()));
        }
    }
    if work.is_empty() {
        return Err(Error::InvalidInput("no queries to benchmark".into()));
    }
    let n = queries.max(1000);
    let qps_a = throughput(&model_a, &work, n)?;
    let qps_b = throughput(&model_b, &work, n)?;
    let report = BenchReport {
        checkpoint_a: ckpt_a.display().to_string(),
        checkpoint_b: ckpt_b.display().to_string(),
        num_encodes: n,
        qps_a,
        qps_b,
        ratio_b_over_a: qps_b / qps_a,
    };
    let out = out.unwrap_or_else(|| cfg.report_dir.join("bench.json"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    fs::write(&out, body)?;
    println!(
        "qps_a {:.1}, qps_b {:.1}, ratio {:.3} over {} encodes -> {}",
        qps_a,
        qps_b,
        report.ratio_b_over_a,
        n,
        out.display()
    );
    Ok(())
}

/// Last line of a report file is its summary record.
fn report_summary(path: &Path) -> Result<Option<(String, f64, usize)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let last = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .next_back()
        .ok_or_else(|| Error::InvalidInput(format!("{} is empty", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(last)?;
    let get = |k: &str| {
        v.get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("{} summary lacks {k}", path.display())))
    };
    Ok(Some((
        get("treatment")?.as_str().unwrap_or_default().to_string(),
        get("macro_ndcg10")?.as_f64().unwrap_or(f64::NAN),
        get("num_instructions")?.as_u64().unwrap_or(0) as usize,
    )))
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let manifest_path = cfg.checkpoint_dir.join("manifest.json");
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    fs::create_dir_all(&cfg.report_dir)?;

    let mut phase_tsv = String::from("phase\tmacro_ndcg10\ttrain_size\n");
    let mut loss_tsv = String::from("phase\tstep\tl1\tl2\ttotal\n");
    for p in 1..=manifest.phases_completed {
        let summary = report_summary(&cfg.report_dir.join(format!("eval-phase-{p}.jsonl")))?
            .ok_or_else(|| {
                Error::InvalidInput(format!("missing per-phase report for phase {p}"))
            })?;
        let train_size = manifest.train_sizes.get(p - 1).copied().unwrap_or(0);
        phase_tsv.push_str(&format!("{p}\t{:.6}\t{train_size}\n", summary.1));
        let trace: Vec<TraceRecord> =
            read_jsonl(&cfg.checkpoint_dir.join(format!("trace-phase-{p}.jsonl")))?;
        for t in &trace {
            loss_tsv.push_str(&format!(
                "{p}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                t.step, t.l1, t.l2, t.total
            ));
        }
    }
    fs::write(cfg.report_dir.join("phase_ndcg.tsv"), phase_tsv)?;
    fs::write(cfg.report_dir.join("loss_curve.tsv"), loss_tsv)?;

    let mut ablation_tsv = String::from("treatment\tmacro_ndcg10\tnum_instructions\n");
    let mut rows = 0;
    for t in Treatment::ALL {
        let path = cfg.report_dir.join(format!("eval-{}.jsonl", t.as_str()));
        if let Some((name, macro_avg, n)) = report_summary(&path)? {
            ablation_tsv.push_str(&format!("{name}\t{macro_avg:.6}\t{n}\n"));
            rows += 1;
        }
    }
    fs::write(cfg.report_dir.join("ablation.tsv"), ablation_tsv)?;
    println!(
        "wrote phase_ndcg.tsv ({} phases), loss_curve.tsv, ablation.tsv ({rows} treatments) to {}",
        manifest.phases_completed,
        cfg.report_dir.display()
    );
    Ok(())
}
