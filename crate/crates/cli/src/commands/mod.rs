pub mod dataset;
pub mod evaluate;
pub mod synth;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcg_core::dsp::{features, PatchSequence};
use pcg_core::ingest::{read_wav, AnnotatedRecording, PcgRecording, Site};
use pcg_core::tasks::{from_jsonl, DatasetRecord, SplitManifest};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::run::Usage;

pub const DATASET_DIR: &str = "dataset";
pub const SEGMENTER_DIR: &str = "segmenter";
pub const LM_DIR: &str = "lm";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_DIR: &str = "report";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const STATE_FILE: &str = "state.ckpt";

pub fn out(config: &RunConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

pub fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

/// Refuses to write into a populated directory unless `force` is set.
pub fn claim_dir(path: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(path) {
        if !force {
            return Err(Usage(format!("{} already has content; pass --force to overwrite", path.display())).into());
        }
        fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
    }
    crate::run::create_dir(path)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_manifest(config: &RunConfig) -> Result<SplitManifest> {
    let path = out(config, DATASET_DIR).join(MANIFEST_FILE);
    serde_json::from_str(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_records(config: &RunConfig, file: &str) -> Result<Vec<DatasetRecord>> {
    let path = out(config, DATASET_DIR).join(file);
    from_jsonl(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Content hash over recording ids and samples, in order.
pub fn recordings_hash<'a>(recordings: impl IntoIterator<Item = &'a PcgRecording>) -> String {
    let mut h = Sha256::new();
    for r in recordings {
        h.update(r.recording_id.as_bytes());
        h.update(r.sample_rate.to_le_bytes());
        for s in &r.samples {
            h.update(s.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn load_audio(root: &Path, rel: &str, patient_id: &str, recording_id: &str) -> Result<PcgRecording> {
    let path = root.join(rel);
    let (samples, rate) = read_wav(&path)?;
    Ok(PcgRecording::new(patient_id, recording_id, Site::Unknown, samples, rate)?)
}

/// LM input patches for `rec`, cropped to `lm.max_audio_s`.
pub fn lm_features(config: &RunConfig, rec: &PcgRecording) -> Result<PatchSequence> {
    let mut samples: &[f64] = &rec.samples;
    if let Some(max) = config.lm.max_audio_s {
        let n = ((max * rec.sample_rate as f64).round() as usize).max(1);
        samples = &samples[..n.min(samples.len())];
    }
    Ok(features(
        samples,
        rec.sample_rate,
        config.sample_rate,
        &config.spectrogram,
        config.lm.model.patch_shape,
    )?)
}

pub fn circor_root(config: &RunConfig) -> PathBuf {
    config.dataset_root(&config.data.circor)
}

pub fn load_circor(config: &RunConfig) -> Result<Vec<AnnotatedRecording>> {
    let root = circor_root(config);
    let recs = pcg_core::ingest::load_circor(&root).with_context(|| format!("loading {}", root.display()))?;
    if recs.is_empty() {
        anyhow::bail!("no recordings found under {}", root.display());
    }
    Ok(recs)
}

pub fn curve_tsv(curve: &[f64]) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{}\t{l:.17e}\n", i + 1));
    }
    s
}

/// Step count and hashes stored alongside a resumable training state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StateMeta {
    pub step: usize,
    pub curve: Vec<f64>,
    pub section_hash: String,
    pub dataset_hash: String,
}

impl StateMeta {
    pub fn check(&self, section_hash: &str, dataset_hash: &str, path: &Path) -> Result<()> {
        if self.section_hash != section_hash {
            anyhow::bail!(
                "{}: configuration changed since this state was saved (hash {} vs {})",
                path.display(),
                self.section_hash,
                section_hash
            );
        }
        if self.dataset_hash != dataset_hash {
            anyhow::bail!(
                "{}: training data changed since this state was saved (hash {} vs {})",
                path.display(),
                self.dataset_hash,
                dataset_hash
            );
        }
        Ok(())
    }
}
