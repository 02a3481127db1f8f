//! One declarative TOML file per run; flags override individual keys.
//! Omitted sections fall back to the desk-scale defaults. Sections
//! that are present must be complete.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use intentive::datagen::IntentWorldSpec;
use intentive::encoder::EncoderConfig;
use intentive::error::{Error, Result};
use intentive::pipeline::PipelineConfig;
use intentive::pruning::PruneTarget;
use intentive::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
    #[serde(default = "default_phases")]
    pub phases: usize,
    #[serde(default = "default_refinement")]
    pub refinement: bool,
    #[serde(default = "default_refine_per_instruction")]
    pub refine_per_instruction: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub world: IntentWorldSpec,
    #[serde(default = "default_schedule")]
    pub prune: Vec<PruneTarget>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("runs/default/data")
}
fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("runs/default/checkpoints")
}
fn default_report_dir() -> PathBuf {
    PathBuf::from("runs/default/reports")
}
fn default_phases() -> usize {
    PipelineConfig::default().phases
}
fn default_refinement() -> bool {
    PipelineConfig::default().refinement
}
fn default_refine_per_instruction() -> usize {
    PipelineConfig::default().refine_per_instruction
}
fn default_seed() -> u64 {
    PipelineConfig::default().seed
}
fn default_encoder() -> EncoderConfig {
    PipelineConfig::default().encoder
}
fn default_schedule() -> Vec<PruneTarget> {
    PipelineConfig::default().schedule
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            checkpoint_dir: default_checkpoint_dir(),
            report_dir: default_report_dir(),
            phases: default_phases(),
            refinement: default_refinement(),
            refine_per_instruction: default_refine_per_instruction(),
            seed: default_seed(),
            encoder: default_encoder(),
            train: TrainConfig::default(),
            world: IntentWorldSpec::default(),
            prune: default_schedule(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            world: self.world.clone(),
            encoder: self.encoder,
            train: self.train.clone(),
            schedule: self.prune.clone(),
            phases: self.phases,
            refinement: self.refinement,
            refine_per_instruction: self.refine_per_instruction,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()
    }
}

/// Flag-level overrides shared by the subcommands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Rebase data/checkpoints/reports under one run directory.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub phases: Option<usize>,
    /// true/false; toggles drawback-extrapolation refinement.
    #[arg(long, global = true)]
    pub refinement: Option<bool>,
    #[arg(long, global = true)]
    pub epochs_per_phase: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(run) = &self.run_dir {
            cfg.data_dir = run.join("data");
            cfg.checkpoint_dir = run.join("checkpoints");
            cfg.report_dir = run.join("reports");
        }
        if let Some(p) = &self.data_dir {
            cfg.data_dir = p.clone();
        }
        if let Some(p) = &self.checkpoint_dir {
            cfg.checkpoint_dir = p.clone();
        }
        if let Some(p) = &self.report_dir {
            cfg.report_dir = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.phases {
            cfg.phases = p;
        }
        if let Some(r) = self.refinement {
            cfg.refinement = r;
        }
        if let Some(e) = self.epochs_per_phase {
            cfg.train.epochs_per_phase = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
    }
}
