//! Multi-phase orchestration: mine negatives with the previous phase's
//! model, train, evaluate the validation split, extrapolate drawbacks
//! into fresh training pairs, then prune and continue. The manifest is
//! the source of truth for what happened when.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{PruneEvent, RefinementEvent, RunManifest};
use crate::datagen::{
    bottom_quartile, extrapolate_drawbacks_synth, synth_world, vocab_words, Corpus,
    IntentWorldSpec, PairRecord, Split, WorldData,
};
use crate::encoder::{EncoderConfig, EncoderWeights, TokenizerSpec};
use crate::error::{Error, Result};
use crate::introspect::IntentModel;
use crate::pruning::{apply_phase_pruning, validate_schedule, PruneSchedule, PruneTarget};
use crate::retrieval::{build_index, evaluate_per_instruction, EvalReport, Treatment};
use crate::training::{
    mine_hard_negatives, train_phase, triples_from_pairs, TraceRecord, TrainConfig,
    TrainingTriple,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: IntentWorldSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// schedule[i] is applied after phase i+1.
    pub schedule: PruneSchedule,
    pub phases: usize,
    pub refinement: bool,
    /// New pairs per challenging instruction at each refinement step.
    pub refine_per_instruction: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// Desk-scale run: a 4-layer base encoder, three phases, pruning
    /// after phases 1 and 2 down to a 2-layer, 16-wide introspector.
    fn default() -> Self {
        Self {
            world: IntentWorldSpec::default(),
            encoder: EncoderConfig {
                num_layers: 4,
                hidden_dim: 32,
                num_heads: 4,
                intermediate_dim: 64,
                vocab_size: 0, // filled from the tokenizer
                max_len: 16,
            },
            train: TrainConfig::default(),
            schedule: vec![
                PruneTarget { layers: 3, hidden_dim: 32, num_heads: 4, intermediate_dim: 64 },
                PruneTarget { layers: 2, hidden_dim: 32, num_heads: 4, intermediate_dim: 64 },
            ],
            phases: 3,
            refinement: true,
            refine_per_instruction: 12,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases == 0 {
            return Err(Error::Config("at least one phase required".into()));
        }
        if self.schedule.len() > self.phases - 1 {
            return Err(Error::Config(format!(
                "{} pruning events cannot fit into {} phases",
                self.schedule.len(),
                self.phases
            )));
        }
        validate_schedule(&self.schedule)?;
        self.world.validate()?;
        self.train.validate()?;
        if self.refinement && self.refine_per_instruction == 0 {
            return Err(Error::Config(
                "refinement enabled but zero pairs per instruction".into(),
            ));
        }
        Ok(())
    }
}

/// Assemble the phase-1 model for a given world: frozen dual encoder
/// initialized from the seed over the world's closed vocabulary,
/// introspector cloned from the query side, zero projections.
pub fn model_for_world(cfg: &PipelineConfig, world: &WorldData) -> Result<IntentModel> {
    let words = vocab_words(&world.instructions, &world.pairs);
    let tokenizer = TokenizerSpec::build(words, cfg.encoder.max_len);
    let config = EncoderConfig { vocab_size: tokenizer.vocab_size(), ..cfg.encoder };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_query = EncoderWeights::init(config, &mut rng)?;
    let base_doc = EncoderWeights::init(config, &mut rng)?;
    IntentModel::init_from_base(tokenizer, base_query, base_doc)
}

/// Synthesize the world and assemble the phase-1 model. Deterministic
/// in the config.
pub fn init_world_model(cfg: &PipelineConfig) -> Result<(WorldData, Corpus, IntentModel)> {
    cfg.validate()?;
    let world = synth_world(&cfg.world)?;
    let corpus = Corpus::from_pairs(&world.pairs);
    let model = model_for_world(cfg, &world)?;
    Ok((world, corpus, model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub train_size: usize,
    pub trace: Vec<TraceRecord>,
    pub validation: EvalReport,
}

pub struct RunOutcome {
    pub model: IntentModel,
    pub manifest: RunManifest,
    pub phase_records: Vec<PhaseRecord>,
    /// Model snapshot at the end of each phase's training, before any
    /// pruning that follows it.
    pub phase_models: Vec<IntentModel>,
    /// Pairs appended by drawback extrapolation, in order.
    pub appended_pairs: Vec<PairRecord>,
    /// Final training set, including refinement additions and the last
    /// round of mined negatives.
    pub triples: Vec<TrainingTriple>,
}

fn phase_train_config(cfg: &PipelineConfig, phase: usize) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = cfg
        .train
        .seed
        .wrapping_add((phase as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    t
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    world: &WorldData,
    corpus: &Corpus,
    mut model: IntentModel,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let valset: Vec<PairRecord> = world
        .pairs
        .iter()
        .filter(|p| p.split == Split::Validation)
        .cloned()
        .collect();
    let mut triples = triples_from_pairs(&world.pairs);
    let mut appended = Vec::new();
    let mut phase_records = Vec::with_capacity(cfg.phases);
    let mut phase_models = Vec::with_capacity(cfg.phases);
    let mut manifest = RunManifest { seed: cfg.seed, ..RunManifest::default() };

    // Phase-1 negatives come from the untouched zero-projection model,
    // which scores exactly like the frozen base dual encoder.
    mine_hard_negatives(
        &model,
        &mut triples,
        &world.instructions,
        corpus,
        cfg.train.hard_negatives,
    )?;

    for phase in 1..=cfg.phases {
        manifest.train_sizes.push(triples.len());
        let tcfg = phase_train_config(cfg, phase);
        let trace = train_phase(&mut model, &triples, &world.instructions, corpus, &tcfg)?;
        phase_models.push(model.clone());
        manifest.phases_completed = phase;

        let index = build_index(&model, corpus)?;
        let validation = evaluate_per_instruction(
            &model,
            &world.instructions,
            &valset,
            &world.qrels,
            &index,
            Treatment::Correct,
            cfg.seed,
            false,
        )?;
        phase_records.push(PhaseRecord {
            phase,
            train_size: triples.len(),
            trace,
            validation: validation.clone(),
        });

        if phase == cfg.phases {
            break;
        }
        if cfg.refinement {
            let new_pairs = extrapolate_drawbacks_synth(
                &cfg.world,
                &world.instructions,
                &validation.per_instruction,
                cfg.refine_per_instruction,
                appended.len(),
            )?;
            manifest.refinement_events.push(RefinementEvent {
                after_phase: phase,
                challenging_instruction_ids: bottom_quartile(&validation.per_instruction)?,
                added_pairs: new_pairs.len(),
            });
            triples.extend(triples_from_pairs(&new_pairs));
            appended.extend(new_pairs);
        }
        // Next phase's negatives: trained model from this phase, before
        // the pruning below touches it.
        mine_hard_negatives(
            &model,
            &mut triples,
            &world.instructions,
            corpus,
            cfg.train.hard_negatives,
        )?;
        if let Some(target) = cfg.schedule.get(phase - 1) {
            let teacher = PruneTarget {
                layers: model.introspector.len(),
                hidden_dim: model.spec.hidden_dim,
                num_heads: model.spec.num_heads,
                intermediate_dim: model.spec.intermediate_dim,
            };
            model = apply_phase_pruning(&model, target)?;
            manifest.prune_events.push(PruneEvent {
                after_phase: phase,
                teacher,
                target: *target,
                retained_layers: model.spec.retained_layers.clone(),
                l_early: model.spec.l_early,
                l_late: model.spec.l_late,
            });
        }
    }

    Ok(RunOutcome {
        model,
        manifest,
        phase_records,
        phase_models,
        appended_pairs: appended,
        triples,
    })
}
