use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcg_core::audio_lm::{AudioLmConfig, FinetuneConfig, LoraConfig};
use pcg_core::dsp::{LabelMode, MelParams};
use pcg_core::eval::{SegMode, WaccWeights};
use pcg_core::ingest::CohortConfig;
use pcg_core::segmenter::{GatePolicy, Hysteresis, SegTrainConfig, SegmenterConfig};
use pcg_core::tasks::TaskId;
use serde::{Deserialize, Serialize};

use crate::run::{sha256_hex, Usage};

/// Overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "PCG_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Dataset directories, relative to `root`.
    pub circor: PathBuf,
    pub cinc2016: PathBuf,
    pub pascal_a: PathBuf,
    pub pascal_b: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            circor: "circor".into(),
            cinc2016: "cinc2016".into(),
            pascal_a: "pascal_a".into(),
            pascal_b: "pascal_b".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cohort: CohortConfig,
    /// Recordings per zero-shot dataset.
    pub binary_recordings: usize,
    pub binary_snr_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig::default(),
            binary_recordings: 40,
            binary_snr_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksConfig {
    /// Tasks to build items for.
    pub include: Vec<TaskId>,
}

impl Default for TasksConfig {
    fn default() -> Self {
        Self {
            include: TaskId::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSection {
    pub model: SegmenterConfig,
    pub train: SegTrainConfig,
    pub label_mode: LabelMode,
    pub hysteresis: Hysteresis,
    pub gate: GatePolicy,
    pub checkpoint_every: usize,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        Self {
            model: SegmenterConfig::default(),
            train: SegTrainConfig::default(),
            label_mode: LabelMode::default(),
            hysteresis: Hysteresis::default(),
            gate: GatePolicy::default(),
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub model: AudioLmConfig,
    pub lora: LoraConfig,
    pub train: FinetuneConfig,
    /// Audio beyond this many seconds is dropped before encoding.
    pub max_audio_s: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            model: AudioLmConfig::default(),
            lora: LoraConfig::default(),
            train: FinetuneConfig::default(),
            max_audio_s: None,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub system: String,
    pub mode: SegMode,
    pub weights: WaccWeights,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            system: "toy audio LM".into(),
            mode: SegMode::Ns,
            weights: WaccWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component seed is set from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub sample_rate: u32,
    pub spectrogram: MelParams,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub tasks: TasksConfig,
    pub segmenter: SegmenterSection,
    pub lm: LmSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs".into(),
            data: DataConfig::default(),
            sample_rate: 16000,
            spectrogram: MelParams::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            tasks: TasksConfig::default(),
            segmenter: SegmenterSection::default(),
            lm: LmSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies the data-root
    /// environment override and `seed`, then copies the master seed into
    /// every component.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            config.data.root = root.into();
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        config.resolve();
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&mut self) {
        let s = self.seed;
        self.synth.cohort.seed = s;
        self.segmenter.train.seed = s;
        self.lm.train.seed = s;
    }

    fn validate(&self) -> Result<()> {
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Usage(format!("split.ratio {} not in (0, 1)", self.split.ratio)).into());
        }
        if self.tasks.include.is_empty() {
            return Err(Usage("tasks.include is empty".into()).into());
        }
        if self.segmenter.model.n_mels != self.spectrogram.n_mels || self.lm.model.n_mels != self.spectrogram.n_mels {
            return Err(Usage("segmenter.model.n_mels and lm.model.n_mels must equal spectrogram.n_mels".into()).into());
        }
        if self.segmenter.checkpoint_every == 0 || self.lm.checkpoint_every == 0 {
            return Err(Usage("checkpoint_every must be positive".into()).into());
        }
        Ok(())
    }

    pub fn dataset_root(&self, dir: &Path) -> PathBuf {
        self.data.root.join(dir)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Hash of the resolved configuration with every path blanked, so moving
    /// data or outputs does not change it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.data = DataConfig {
            root: PathBuf::new(),
            circor: PathBuf::new(),
            cinc2016: PathBuf::new(),
            pascal_a: PathBuf::new(),
            pascal_b: PathBuf::new(),
        };
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Hash of one serializable section, for resume checks.
pub fn section_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("section serializes").as_bytes())
}
