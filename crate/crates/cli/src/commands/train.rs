use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use pcg_core::audio_lm::{self, continue_finetune, lora_wrap, AudioLm, FinetuneState, LmExample, Tokenizer};
use pcg_core::checkpoint::Container;
use pcg_core::dsp::{FrameMask, PatchSequence};
use pcg_core::nn::Optimizer;
use pcg_core::segmenter::{self, continue_training, labelled_features, SegTrainState, SegmenterModel};
use pcg_core::tasks::Side;
use serde_json::json;

use super::{
    circor_root, curve_tsv, load_audio, load_circor, lm_features, out, read_manifest, read_records, recordings_hash,
    StateMeta, DATASET_DIR, LM_DIR, MANIFEST_FILE, SEGMENTER_DIR, SEGMENTER_FILE, LM_FILE, STATE_FILE, TRAIN_FILE,
};
use crate::config::{section_hash, RunConfig};
use crate::run::{create_dir, file_hash, sha256_hex, RunDir, VERSION};

pub const CURVE_FILE: &str = "curve.tsv";
pub const ADAPTERS_FILE: &str = "adapters.ckpt";

fn read_state(path: &Path, header: &str, section: &str, data: &str) -> Result<Option<(Container, StateMeta)>> {
    if !path.exists() {
        return Ok(None);
    }
    let c = Container::read(path, header).with_context(|| format!("reading {}", path.display()))?;
    let meta: StateMeta = serde_json::from_value(c.meta.clone()).with_context(|| format!("state meta in {}", path.display()))?;
    meta.check(section, data, path)?;
    info!("resuming from step {} ({})", meta.step, path.display());
    Ok(Some((c, meta)))
}

fn state_container(mut c: Container, optimizer: &Optimizer, meta: &StateMeta) -> Result<Container> {
    let model_meta = std::mem::take(&mut c.meta);
    c.meta = serde_json::to_value(meta)?;
    if let (Some(dst), Some(src)) = (c.meta.as_object_mut(), model_meta.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    c.push_optimizer(optimizer);
    Ok(c)
}

/// End step of this invocation: the configured total, or earlier when
/// interrupted on purpose.
fn target(steps: usize, stop_after: Option<usize>) -> usize {
    stop_after.map_or(steps, |s| s.min(steps))
}

pub fn train_seg(config: &RunConfig, stop_after: Option<usize>) -> Result<()> {
    let path = out(config, SEGMENTER_DIR);
    create_dir(&path)?;
    let mut dir = RunDir::new(path, "train-seg", config);
    let manifest = read_manifest(config)?;
    dir.input("manifest", file_hash(&out(config, DATASET_DIR).join(MANIFEST_FILE))?);

    let seg = &config.segmenter;
    let recordings: Vec<_> = load_circor(config)?
        .into_iter()
        .filter(|r| manifest.side_of(&r.recording.patient_id) == Some(Side::Train) && !r.intervals.is_empty())
        .collect();
    if recordings.is_empty() {
        anyhow::bail!("no annotated training recordings");
    }
    let data: Vec<(PatchSequence, FrameMask)> = recordings
        .iter()
        .map(|r| {
            labelled_features(
                &r.recording,
                &r.intervals,
                config.sample_rate,
                &config.spectrogram,
                seg.model.patch_shape,
                seg.label_mode,
            )
        })
        .collect::<pcg_core::Result<_>>()?;
    let intervals: Vec<String> = recordings.iter().map(|r| format!("{:?}", r.intervals)).collect();
    let dataset_hash = sha256_hex(
        format!("{}{}", recordings_hash(recordings.iter().map(|r| &r.recording)), intervals.join("\n")).as_bytes(),
    );
    dir.input("training_data", dataset_hash.clone());
    let section = section_hash(&(config.seed, config.sample_rate, &config.spectrogram, &seg.model, &seg.train, seg.label_mode));

    let state_path = dir.file(STATE_FILE);
    let mut state = match read_state(&state_path, segmenter::HEADER, &section, &dataset_hash)? {
        Some((c, meta)) => SegTrainState {
            model: SegmenterModel::from_container(&c)?,
            optimizer: c.optimizer()?,
            step: meta.step,
            curve: meta.curve,
        },
        None => SegTrainState::new(SegmenterModel::new(seg.model, seg.train.seed)?, &seg.train),
    };
    let end = target(seg.train.steps, stop_after);
    info!(
        "training segmenter on {} of {} recordings, steps {}..{end}",
        segmenter::training_subset(data.len(), seg.train.train_fraction, seg.train.seed)?.len(),
        data.len(),
        state.step
    );
    while state.step < end {
        let until = (state.step + seg.checkpoint_every).min(end);
        continue_training(&data, &seg.train, &mut state, until)?;
        info!("step {} loss {:.5}", state.step, state.curve.last().copied().unwrap_or(f64::NAN));
        let meta = StateMeta {
            step: state.step,
            curve: state.curve.clone(),
            section_hash: section.clone(),
            dataset_hash: dataset_hash.clone(),
        };
        state_container(state.model.to_container(json!({})), &state.optimizer, &meta)?.write(&state_path)?;
    }
    if state.step < seg.train.steps {
        info!("stopped at step {} of {}", state.step, seg.train.steps);
        return Ok(());
    }
    let meta = json!({
        "version": VERSION,
        "config_hash": config.hash(),
        "dataset_hash": dataset_hash,
        "train_fraction": seg.train.train_fraction,
        "steps": state.step,
        "final_loss": state.curve.last(),
    });
    dir.output(SEGMENTER_FILE, &state.model.to_container(meta).to_bytes()?)?;
    dir.output(CURVE_FILE, curve_tsv(&state.curve).as_bytes())?;
    if state_path.exists() {
        dir.record_existing(STATE_FILE)?;
    }
    dir.finish(config)?;
    Ok(())
}

/// Training examples from `train.jsonl`, audio loaded once per recording.
pub fn lm_examples(config: &RunConfig, file: &str) -> Result<(Vec<LmExample>, String)> {
    let records = read_records(config, file)?;
    let root = circor_root(config);
    let mut cache: BTreeMap<String, PatchSequence> = BTreeMap::new();
    let mut recordings = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let rr = &r.item.recording_ref;
        let rel = rr
            .audio_path
            .clone()
            .ok_or_else(|| anyhow::anyhow!("item for {} has no audio path", rr.recording_id))?;
        if !cache.contains_key(&rel) {
            let rec = load_audio(&root, &rel, &rr.patient_id, &rr.recording_id)?;
            cache.insert(rel.clone(), lm_features(config, &rec)?);
            recordings.push(rec);
        }
        out.push(LmExample {
            patches: cache[&rel].clone(),
            item: r.item,
        });
    }
    Ok((out, recordings_hash(&recordings)))
}

pub fn initial_lm(config: &RunConfig) -> Result<AudioLm> {
    let base = AudioLm::new(config.lm.model, Tokenizer::default(), config.seed)?;
    Ok(lora_wrap(base, &config.lm.lora, config.seed)?)
}

pub fn train_lm(config: &RunConfig, stop_after: Option<usize>) -> Result<()> {
    let path = out(config, LM_DIR);
    create_dir(&path)?;
    let mut dir = RunDir::new(path, "train-lm", config);
    let train_path = out(config, DATASET_DIR).join(TRAIN_FILE);
    let (data, audio_hash) = lm_examples(config, TRAIN_FILE)?;
    if data.is_empty() {
        anyhow::bail!("{} has no items", train_path.display());
    }
    let dataset_hash = sha256_hex(format!("{}{audio_hash}", file_hash(&train_path)?).as_bytes());
    dir.input("train.jsonl", file_hash(&train_path)?);
    dir.input("training_audio", audio_hash);
    let lm = &config.lm;
    let section = section_hash(&(config.seed, config.sample_rate, &config.spectrogram, &lm.model, &lm.lora, &lm.train, lm.max_audio_s));

    let state_path = dir.file(STATE_FILE);
    let mut state = match read_state(&state_path, audio_lm::HEADER, &section, &dataset_hash)? {
        Some((c, meta)) => FinetuneState {
            model: AudioLm::from_container(&c)?,
            optimizer: c.optimizer()?,
            step: meta.step,
            curve: meta.curve,
        },
        None => FinetuneState::new(initial_lm(config)?, &lm.train),
    };
    let end = target(lm.train.steps, stop_after);
    info!("finetuning on {} items, steps {}..{end}", data.len(), state.step);
    while state.step < end {
        let until = (state.step + lm.checkpoint_every).min(end);
        continue_finetune(&data, &lm.train, &mut state, until)?;
        info!("step {} loss {:.5}", state.step, state.curve.last().copied().unwrap_or(f64::NAN));
        let meta = StateMeta {
            step: state.step,
            curve: state.curve.clone(),
            section_hash: section.clone(),
            dataset_hash: dataset_hash.clone(),
        };
        state_container(state.model.to_container(json!({})), &state.optimizer, &meta)?.write(&state_path)?;
    }
    if state.step < lm.train.steps {
        info!("stopped at step {} of {}", state.step, lm.train.steps);
        return Ok(());
    }
    let meta = json!({
        "version": VERSION,
        "config_hash": config.hash(),
        "dataset_hash": dataset_hash,
        "steps": state.step,
        "final_loss": state.curve.last(),
    });
    dir.output(LM_FILE, &state.model.to_container(meta.clone()).to_bytes()?)?;
    dir.output(ADAPTERS_FILE, &state.model.export_adapters(meta)?.to_bytes()?)?;
    dir.output(CURVE_FILE, curve_tsv(&state.curve).as_bytes())?;
    if state_path.exists() {
        dir.record_existing(STATE_FILE)?;
    }
    dir.finish(config)?;
    Ok(())
}
