//! Experiment configuration, read from and written to TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::divergence::TrainerConfig;
use crate::error::{Error, Result};
use crate::labels::{LabelingConfig, DEFAULT_ZETA};
use crate::losses::LossWeights;
use crate::net::{BackboneConfig, NetConfig};
use crate::synth::SynthConfig;

/// Which alignment components are switched on. All off is source-only
/// training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Local pixel and global image-level adaptation (the base aligner).
    pub base_da: bool,
    /// Mid-level pixel adaptation on F2.
    pub mda: bool,
    /// Semantic prediction heads and their losses.
    pub spm: bool,
    /// Semantic bridges into the pixel discriminators.
    pub sbc: bool,
    /// Semantic attention weighting of the pixel domain losses.
    pub asm: bool,
    /// Semantic consistency regularization.
    pub scr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

impl Toggles {
    pub const fn source_only() -> Self {
        Self {
            base_da: false,
            mda: false,
            spm: false,
            sbc: false,
            asm: false,
            scr: false,
        }
    }

    pub const fn full() -> Self {
        Self {
            base_da: true,
            mda: true,
            spm: true,
            sbc: true,
            asm: true,
            scr: true,
        }
    }

    /// The cumulative component chain: MDA, +SPM, +SBC, +ASM, +SCR.
    pub fn chain() -> Vec<(&'static str, Toggles)> {
        let mut t = Toggles {
            base_da: true,
            mda: true,
            ..Self::source_only()
        };
        let mut rows = vec![("MDA", t)];
        t.spm = true;
        rows.push(("+SPM", t));
        t.sbc = true;
        rows.push(("+SBC", t));
        t.asm = true;
        rows.push(("+ASM", t));
        t.scr = true;
        rows.push(("+SCR", t));
        rows
    }

    pub fn validate(&self) -> Result<()> {
        for (on, name) in [(self.sbc, "sbc"), (self.asm, "asm"), (self.scr, "scr")] {
            if on && !self.spm {
                return Err(Error::InvalidConfig(format!("toggle `{name}` requires `spm`")));
            }
        }
        if (self.sbc || self.asm) && !(self.base_da || self.mda) {
            return Err(Error::InvalidConfig("`sbc` and `asm` need a pixel discriminator (`base_da` or `mda`)".into()));
        }
        Ok(())
    }

    pub fn any_da(&self) -> bool {
        self.base_da || self.mda
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub trunk_depth: usize,
    pub local_sem_channels: usize,
    pub mid_sem_channels: usize,
    pub global_hidden: usize,
    pub disc_hidden: usize,
    pub det_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            trunk_depth: n.trunk_depth,
            local_sem_channels: n.local_sem_channels,
            mid_sem_channels: n.mid_sem_channels,
            global_hidden: n.global_hidden,
            disc_hidden: n.disc_hidden,
            det_hidden: n.det_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingSection {
    pub zeta: f64,
}

impl Default for LabelingSection {
    fn default() -> Self {
        Self { zeta: DEFAULT_ZETA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencySection {
    /// Output size (H_a, W_a) of the adaptive mean pooling; clamped to the
    /// mid grid when larger.
    pub pool: [usize; 2],
}

impl Default for ConsistencySection {
    fn default() -> Self {
        Self { pool: [10, 10] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_grad_norm: f64,
    pub schedule: Vec<Stage>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_grad_norm: 10.0,
            schedule: vec![
                Stage {
                    iterations: 2000,
                    learning_rate: 1e-3,
                },
                Stage {
                    iterations: 500,
                    learning_rate: 1e-4,
                },
            ],
        }
    }
}

impl OptimizerConfig {
    pub fn total_iterations(&self) -> usize {
        self.schedule.iter().map(|s| s.iterations).sum()
    }

    /// Learning rate of 0-based iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let mut end = 0;
        for s in &self.schedule {
            end += s.iterations;
            if it < end {
                return s.learning_rate;
            }
        }
        self.schedule.last().map_or(0.0, |s| s.learning_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_source: usize,
    pub batch_target: usize,
    pub log_every: usize,
    /// Write wall-clock seconds into the metrics CSV. Off by default so that
    /// identical runs produce identical files; timings always go to
    /// `timing.csv`.
    pub record_wall_clock: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_source: 4,
            batch_target: 4,
            log_every: 250,
            record_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub images_per_domain: usize,
    pub positions_per_image: usize,
    pub seed: u64,
    pub trainer: TrainerConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            images_per_domain: 32,
            positions_per_image: 16,
            seed: 17,
            trainer: TrainerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory written by `synth`; when absent the data is generated in
    /// memory from `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed for weight init and batch order.
    pub seed: u64,
    pub toggles: Toggles,
    pub labeling: LabelingSection,
    pub consistency: ConsistencySection,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "scfam".into(),
            seed: 0,
            toggles: Toggles::full(),
            labeling: LabelingSection::default(),
            consistency: ConsistencySection::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainSection::default(),
            backbone: BackboneConfig::default(),
            heads: HeadConfig::default(),
            probe: ProbeConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn num_classes(&self) -> usize {
        self.data.synth.scene.num_classes
    }

    pub fn net_config(&self) -> NetConfig {
        let h = &self.heads;
        NetConfig {
            backbone: self.backbone.clone(),
            num_classes: self.num_classes(),
            trunk_depth: h.trunk_depth,
            local_sem_channels: h.local_sem_channels,
            mid_sem_channels: h.mid_sem_channels,
            global_hidden: h.global_hidden,
            disc_hidden: h.disc_hidden,
            det_hidden: h.det_hidden,
            bridge: self.toggles.sbc,
        }
    }

    pub fn labeling_config(&self) -> Result<LabelingConfig> {
        LabelingConfig::new(self.labeling.zeta, self.num_classes())
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        self.labeling_config()?;
        self.loss.validate()?;
        self.net_config().validate()?;
        self.probe.trainer.validate()?;
        self.data.synth.scene.validate()?;
        self.data.synth.shift.validate()?;
        let [ph, pw] = self.consistency.pool;
        if ph == 0 || pw == 0 {
            return Err(Error::InvalidConfig("consistency pool must be at least 1x1".into()));
        }
        if self.train.batch_source == 0 || self.train.batch_target == 0 || self.train.log_every == 0 {
            return Err(Error::InvalidConfig("batch sizes and log_every must be >= 1".into()));
        }
        if self.optimizer.schedule.iter().any(|s| !(s.learning_rate >= 0.0 && s.learning_rate.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be finite and >= 0".into()));
        }
        if self.backbone.input_channels != 3 {
            return Err(Error::InvalidConfig("scenes are RGB; backbone.input_channels must be 3".into()));
        }
        Ok(())
    }
}
