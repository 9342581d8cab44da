//! JSON run configuration. Unknown keys are rejected; the schema lives in
//! `schema/run_config.schema.json` next to the crate manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::PromptSpec;
use crate::error::{Error, Result};
use crate::nursing::{
    Mode, NursingSchedule, DEFAULT_BASE_STEP_SIZE, DEFAULT_LAMBDA, DEFAULT_NURSING_END, DEFAULT_TOTAL_STEPS,
};
use crate::testbed::scene::{SceneFamily, SceneGenerator};

pub const DEFAULT_RESOLUTION: [usize; 2] = [16, 16];

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Vocabulary ids, one per prompt position.
    pub tokens: Vec<usize>,
    pub object_tokens: Vec<usize>,
    #[serde(default)]
    pub attribute_pairs: Vec<(usize, usize)>,
    #[serde(default = "yes")]
    pub exclude_token_zero: bool,
}

impl PromptConfig {
    pub fn spec(&self) -> PromptSpec {
        PromptSpec {
            sequence_length: self.tokens.len(),
            object_tokens: self.object_tokens.clone(),
            attribute_pairs: self.attribute_pairs.clone(),
            exclude_token_zero: self.exclude_token_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub nursing_end: usize,
    /// `alpha_k = base_step_size * (1 - k / T)` unless `step_sizes` is given.
    pub base_step_size: f64,
    pub step_sizes: Option<Vec<f64>>,
    pub lambda: f64,
    pub use_smoothing: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_TOTAL_STEPS,
            nursing_end: DEFAULT_NURSING_END,
            base_step_size: DEFAULT_BASE_STEP_SIZE,
            step_sizes: None,
            lambda: DEFAULT_LAMBDA,
            use_smoothing: true,
        }
    }
}

impl ScheduleConfig {
    pub fn to_schedule(&self) -> Result<NursingSchedule> {
        let schedule = match &self.step_sizes {
            Some(sizes) => NursingSchedule {
                total_steps: self.total_steps,
                nursing_end: self.nursing_end,
                step_sizes: sizes.clone(),
                lambda: self.lambda,
                use_smoothing: self.use_smoothing,
            },
            None => NursingSchedule::linear(
                self.total_steps,
                self.nursing_end,
                self.base_step_size,
                self.lambda,
                self.use_smoothing,
            )?,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderFlags {
    /// Final-step attention heatmap per token.
    pub heatmaps: bool,
    /// Predicted clean latent at every step.
    pub frames: bool,
    pub loss_plot: bool,
}

impl Default for RenderFlags {
    fn default() -> Self {
        Self { heatmaps: true, frames: false, loss_plot: true }
    }
}

fn default_mode() -> Mode {
    Mode::DivideAndBind
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_resolution() -> [usize; 2] {
    DEFAULT_RESOLUTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub family: SceneFamily,
    /// Falls back to the family's evaluation prompt.
    #[serde(default)]
    pub prompt: Option<PromptConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    pub attention_resolution: [usize; 2],
    #[serde(default)]
    pub render: RenderFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: SceneFamily::default(),
            prompt: None,
            schedule: ScheduleConfig::default(),
            mode: default_mode(),
            seeds: default_seeds(),
            model: None,
            output_dir: None,
            attention_resolution: DEFAULT_RESOLUTION,
            render: RenderFlags::default(),
        }
    }
}

fn invalid(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(m),
        other => Error::Validation(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Token ids and spec actually used by a run.
    pub fn resolved_prompt(&self) -> PromptConfig {
        self.prompt.clone().unwrap_or_else(|| {
            let p = SceneGenerator::new(self.family).task_prompt();
            PromptConfig {
                tokens: p.tokens,
                object_tokens: p.spec.object_tokens,
                attribute_pairs: p.spec.attribute_pairs,
                exclude_token_zero: p.spec.exclude_token_zero,
            }
        })
    }

    pub fn spec(&self) -> PromptSpec {
        self.resolved_prompt().spec()
    }

    pub fn nursing_schedule(&self) -> Result<NursingSchedule> {
        self.schedule.to_schedule().map_err(invalid)
    }

    /// Checks every invariant a run depends on; failures are validation errors.
    pub fn validate(&self) -> Result<()> {
        let prompt = self.resolved_prompt();
        if prompt.tokens.is_empty() {
            return Err(Error::Validation("prompt.tokens is empty".into()));
        }
        prompt.spec().validate().map_err(invalid)?;
        self.nursing_schedule()?;
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds is empty".into()));
        }
        if self.attention_resolution.contains(&0) {
            return Err(Error::Validation("attention_resolution must be positive".into()));
        }
        Ok(())
    }
}
