//! Python bindings: the world synthesizer, the intent model with its
//! introspector operations, checkpointing, pruning, and the scalar
//! retrieval/loss helpers. Configuration crosses the boundary as JSON
//! strings; vectors as plain lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use intentive::checkpoint::{load_model, save_model, RunManifest};
use intentive::datagen::{synth_world, Corpus, IntentWorldSpec, Split, WorldData};
use intentive::error::Error;
use intentive::introspect::IntentModel;
use intentive::pipeline::{init_world_model, model_for_world, run_pipeline, PipelineConfig};
use intentive::pruning::{apply_phase_pruning, PruneTarget};
use intentive::retrieval as rt;

fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Io(inner) => PyIOError::new_err(inner.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Synthesized instruction world: instructions, train/validation query
/// pairs, and binary relevance judgments.
#[pyclass]
struct World {
    inner: WorldData,
}

#[pymethods]
impl World {
    /// Build from an IntentWorldSpec JSON object ({} for defaults).
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn synth(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: IntentWorldSpec = match spec_json {
            None => IntentWorldSpec::default(),
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
        };
        Ok(Self { inner: synth_world(&spec).map_err(pyerr)? })
    }

    #[getter]
    fn num_instructions(&self) -> usize {
        self.inner.instructions.len()
    }

    #[getter]
    fn num_pairs(&self) -> usize {
        self.inner.pairs.len()
    }

    #[getter]
    fn num_documents(&self) -> usize {
        Corpus::from_pairs(&self.inner.pairs).len()
    }

    #[getter]
    fn num_validation_pairs(&self) -> usize {
        self.inner.pairs.iter().filter(|p| p.split == Split::Validation).count()
    }

    fn instruction_texts(&self) -> Vec<String> {
        self.inner.instructions.iter().map(|r| r.text.clone()).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "World({} instructions, {} pairs, {} documents)",
            self.inner.instructions.len(),
            self.inner.pairs.len(),
            Corpus::from_pairs(&self.inner.pairs).len()
        )
    }
}

/// Frozen dual encoder plus the trainable introspector and zero
/// projections.
#[pyclass]
struct Model {
    inner: IntentModel,
    manifest: RunManifest,
}

#[pymethods]
impl Model {
    /// Phase-1 model for a world. `config_json` is a PipelineConfig
    /// object; omit it for the desk-scale defaults.
    #[staticmethod]
    #[pyo3(signature = (world, config_json=None))]
    fn for_world(world: &World, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: PipelineConfig = match config_json {
            None => PipelineConfig::default(),
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
        };
        let inner = model_for_world(&cfg, &world.inner).map_err(pyerr)?;
        let manifest = RunManifest { seed: cfg.seed, ..RunManifest::default() };
        Ok(Self { inner, manifest })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, manifest) = load_model(&path).map_err(pyerr)?;
        Ok(Self { inner, manifest })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner, &self.manifest).map_err(pyerr)
    }

    fn embed_instruction(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.embed_instruction(text).map_err(pyerr)
    }

    fn embed_document(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.embed_document(text).map_err(pyerr)
    }

    /// Query embedding with the introspector bypassed.
    fn encode_query_plain(&self, query: &str) -> PyResult<Vec<f64>> {
        self.inner.embed_query_plain(query).map_err(pyerr)
    }

    /// Intent-conditioned query embedding.
    fn encode_query(&self, query: &str, instruction: &str) -> PyResult<Vec<f64>> {
        self.inner.encode_query_with_intent(query, instruction).map_err(pyerr)
    }

    /// s(q, I, d): inner product of the conditioned query embedding and
    /// the document embedding.
    fn score(&self, query: &str, instruction: &str, document: &str) -> PyResult<f64> {
        self.inner.score(query, instruction, document).map_err(pyerr)
    }

    /// Structure-prune the introspector to the given dimensions and
    /// re-zero the projections.
    fn prune(
        &mut self,
        layers: usize,
        hidden_dim: usize,
        num_heads: usize,
        intermediate_dim: usize,
    ) -> PyResult<()> {
        let target = PruneTarget { layers, hidden_dim, num_heads, intermediate_dim };
        self.inner = apply_phase_pruning(&self.inner, &target).map_err(pyerr)?;
        Ok(())
    }

    /// (layers, hidden_dim, num_heads, intermediate_dim) of the
    /// introspector stack.
    fn introspector_shape(&self) -> (usize, usize, usize, usize) {
        let s = &self.inner.spec;
        (s.retained_layers.len(), s.hidden_dim, s.num_heads, s.intermediate_dim)
    }

    /// (l_early, l_late) tap/inject points into the base stack.
    fn tap_points(&self) -> (usize, usize) {
        (self.inner.spec.l_early, self.inner.spec.l_late)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.trainable_names()
    }

    fn manifest_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.manifest).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!(
            "Model(base {} layers x {}, introspector {} layers x {}, taps {}..{})",
            self.inner.base_query.config.num_layers,
            self.inner.base_query.config.hidden_dim,
            s.retained_layers.len(),
            s.hidden_dim,
            s.l_early,
            s.l_late
        )
    }
}

/// Run the full multi-phase pipeline (synthesis, mining, training,
/// refinement, pruning) and return a JSON summary with the manifest and
/// per-phase validation scores. Heavy: minutes at desk scale, so pass
/// a reduced config for quick experiments.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn run_desk_pipeline(config_json: Option<&str>) -> PyResult<String> {
    let cfg: PipelineConfig = match config_json {
        None => PipelineConfig::default(),
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
    };
    let (world, corpus, model) = init_world_model(&cfg).map_err(pyerr)?;
    let outcome = run_pipeline(&cfg, &world, &corpus, model).map_err(pyerr)?;
    let summary = serde_json::json!({
        "manifest": outcome.manifest,
        "phase_ndcg10": outcome
            .phase_records
            .iter()
            .map(|r| r.validation.macro_avg)
            .collect::<Vec<f64>>(),
        "final_introspector_layers": outcome.model.spec.retained_layers.len(),
        "final_hidden_dim": outcome.model.spec.hidden_dim,
    });
    serde_json::to_string(&summary).map_err(json_err)
}

/// Binary-gain nDCG@10.
#[pyfunction]
fn ndcg_at_10(ranked_ids: Vec<String>, gold_ids: Vec<String>) -> PyResult<f64> {
    rt::ndcg_at_10(&ranked_ids, &gold_ids).map_err(pyerr)
}

/// Document-contrast loss term: lse(s+, s-...) - s+.
#[pyfunction]
fn loss_doc(pos_score: f64, neg_scores: Vec<f64>) -> PyResult<f64> {
    intentive::training::loss_doc(pos_score, &neg_scores).map_err(pyerr)
}

/// Instruction-contrast loss term, same functional form.
#[pyfunction]
fn loss_instr(pos_score: f64, neg_scores: Vec<f64>) -> PyResult<f64> {
    intentive::training::loss_instr(pos_score, &neg_scores).map_err(pyerr)
}

/// L = L1 + alpha * L2.
#[pyfunction]
fn total_loss(l1: f64, l2: f64, alpha: f64) -> f64 {
    intentive::training::total_loss(l1, l2, alpha)
}

#[pymodule]
fn intentive_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<World>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_desk_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_10, m)?)?;
    m.add_function(wrap_pyfunction!(loss_doc, m)?)?;
    m.add_function(wrap_pyfunction!(loss_instr, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    Ok(())
}
