//! Wire types for the scfam HTTP service. Every body is JSON.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use scfam_core::divergence::{DivergenceReport, FeatureSample, HEstimate, TrainerConfig};
use scfam_core::harness::{AblationRow, MetricsRecord};
use scfam_core::labels::{SemanticLabelMaps, DEFAULT_ZETA};
use scfam_core::rf::{FieldRect, LayerSpec, Taps};
use scfam_core::scene::BoxAnnotation;
use scfam_core::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Receptive fields of layer `layer` (1-based). Without `positions` every
/// grid position is returned, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfRequest {
    pub layers: Vec<LayerSpec>,
    pub layer: usize,
    /// `[height, width]`
    pub image: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldAt {
    pub u: usize,
    pub v: usize,
    pub rect: FieldRect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfResponse {
    pub receptive_field_size: usize,
    pub jump: usize,
    pub grid: [usize; 2],
    pub fields: Vec<FieldAt>,
}

fn default_zeta() -> f64 {
    DEFAULT_ZETA
}

/// Labels either one receptive field (`field`) or a whole scene on a
/// backbone (`scene`). Exactly one must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub boxes: Vec<BoxAnnotation>,
    pub num_classes: usize,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image: [usize; 2],
    pub layers: Vec<LayerSpec>,
    pub taps: Taps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<SemanticLabelMaps>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceMode {
    /// One term per class subset (mixed classes included), summed.
    #[default]
    Mch,
    /// Single-class subsets only.
    Classwise,
    /// All samples in one source/target problem.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRequest {
    pub samples: Vec<FeatureSample>,
    #[serde(default)]
    pub mode: DivergenceMode,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<DivergenceReport>,
    /// The per-subset table (`subset,d_h,n_source,n_target,status`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<HEstimate>,
}

/// Generates a dataset under the server's output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    #[serde(default)]
    pub config: SynthConfig,
    /// Relative directory under the output root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthResponse {
    pub dir: PathBuf,
    /// Scenes per split.
    pub counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    /// Experiment config as TOML text.
    pub config_toml: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRequest {
    pub config_toml: String,
    pub grid_toml: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCsv {
    pub name: String,
    pub csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub runs: Vec<NamedCsv>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub metrics_csv: String,
    /// PNG bytes, base64 (standard alphabet, padded).
    pub loss_png: String,
    pub divergence_png: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Ablate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn finished(self) -> bool {
        self != JobState::Running
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub dir: PathBuf,
    pub metrics_csv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last: Option<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateResult {
    pub dir: PathBuf,
    pub table_csv: String,
    pub rows: Vec<AblationRow>,
    pub all_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobResult {
    Train(TrainResult),
    Ablate(AblateResult),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Iterations (train) or cells (ablate) finished so far.
    pub done: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
