use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use log::info;
use pcg_core::audio_lm::{self, score_options, AudioLm};
use pcg_core::checkpoint::Container;
use pcg_core::eval::{evaluate, render_report, EvalDataset, EvalReport, PredictionEntry, PredictionLog, SegMode};
use pcg_core::ingest::{load_binary_dataset, AnnotatedRecording, BinaryLabel, MurmurAnnotation, MurmurClass, PcgRecording, SegmentIntervals};
use pcg_core::segmenter::{self, segment_and_gate, SegmenterModel};
use pcg_core::tasks::{build_mc_item, item_seed, McItem, TaskId};

use super::{
    circor_root, load_audio, lm_features, out, read_records, DATASET_DIR, EVAL_DIR, LM_DIR, LM_FILE, REPORT_DIR,
    SEGMENTER_DIR, SEGMENTER_FILE, TEST_FILE,
};
use crate::config::RunConfig;
use crate::run::{create_dir, file_hash, Usage, RunDir};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TABLES_FILE: &str = "tables.txt";

/// One scored question: its recording, the item, and the gold label string.
struct Question {
    recording: PcgRecording,
    item: McItem,
    gold: String,
}

fn binary_label_str(label: BinaryLabel) -> &'static str {
    match label {
        BinaryLabel::Normal => "normal",
        BinaryLabel::Abnormal => "abnormal",
    }
}

fn circor_questions(config: &RunConfig) -> Result<Vec<Question>> {
    let root = circor_root(config);
    let mut cache: BTreeMap<String, PcgRecording> = BTreeMap::new();
    let mut out = Vec::new();
    for r in read_records(config, TEST_FILE)? {
        let rr = &r.item.recording_ref;
        let rel = rr
            .audio_path
            .clone()
            .ok_or_else(|| anyhow::anyhow!("item for {} has no audio path", rr.recording_id))?;
        if !cache.contains_key(&rel) {
            cache.insert(rel.clone(), load_audio(&root, &rel, &rr.patient_id, &rr.recording_id)?);
        }
        out.push(Question {
            recording: cache[&rel].clone(),
            gold: r.item.gold_label().to_string(),
            item: r.item,
        });
    }
    Ok(out)
}

/// A presence question per recording; normal is asked with gold Absent and
/// abnormal with gold Present, and scored on the normal/abnormal mapping.
fn binary_questions(config: &RunConfig, dataset: EvalDataset) -> Result<Vec<Question>> {
    let kind = dataset.binary_kind().expect("binary dataset");
    let rel = match dataset {
        EvalDataset::Cinc2016 => &config.data.cinc2016,
        EvalDataset::PascalA => &config.data.pascal_a,
        _ => &config.data.pascal_b,
    };
    let root = config.dataset_root(rel);
    let set = load_binary_dataset(&root, kind).with_context(|| format!("loading {}", root.display()))?;
    set.entries
        .into_iter()
        .map(|(recording, label)| {
            let class = match label {
                BinaryLabel::Normal => MurmurClass::Absent,
                BinaryLabel::Abnormal => MurmurClass::Present,
            };
            let ar = AnnotatedRecording {
                recording: recording.clone(),
                intervals: SegmentIntervals::default(),
                annotation: MurmurAnnotation::without_features(class),
                murmur_audible: false,
                audio_path: None,
            };
            let seed = item_seed(config.seed, &recording.patient_id, &recording.recording_id, TaskId::MurmurPresence);
            let item = build_mc_item(&ar, TaskId::MurmurPresence, seed)?.expect("presence applies to every recording");
            Ok(Question {
                recording,
                item,
                gold: binary_label_str(label).to_string(),
            })
        })
        .collect()
}

pub fn run(config: &RunConfig, mode: SegMode, dataset: EvalDataset) -> Result<()> {
    let lm_path = out(config, LM_DIR).join(LM_FILE);
    let lm = AudioLm::from_container(&Container::read(&lm_path, audio_lm::HEADER).with_context(|| format!("reading {}", lm_path.display()))?)?;
    let model_tag = file_hash(&lm_path)?;
    let seg_path = out(config, SEGMENTER_DIR).join(SEGMENTER_FILE);
    let seg = match mode {
        SegMode::Ns => None,
        SegMode::Ws => {
            if !seg_path.exists() {
                return Err(Usage(format!(
                    "WS evaluation needs a segmenter checkpoint at {}; run train-seg first",
                    seg_path.display()
                ))
                .into());
            }
            Some(SegmenterModel::from_container(&Container::read(&seg_path, segmenter::HEADER)?)?)
        }
    };

    let path = out(config, EVAL_DIR).join(format!("{dataset}_{}", mode.to_string().to_lowercase()));
    create_dir(&path)?;
    let mut dir = RunDir::new(path, "eval", config);
    dir.input("lm.ckpt", model_tag.clone());
    if seg.is_some() {
        dir.input("segmenter.ckpt", file_hash(&seg_path)?);
    }
    let questions = match dataset {
        EvalDataset::CircorTest => {
            dir.input("test.jsonl", file_hash(&out(config, DATASET_DIR).join(TEST_FILE))?);
            circor_questions(config)?
        }
        d => binary_questions(config, d)?,
    };
    dir.input("audio", super::recordings_hash(questions.iter().map(|q| &q.recording)));

    let mut patches_cache = BTreeMap::new();
    let mut entries = Vec::with_capacity(questions.len());
    for q in &questions {
        let id = &q.recording.recording_id;
        if !patches_cache.contains_key(id) {
            let audio = match &seg {
                None => q.recording.clone(),
                Some(model) => {
                    let s = &config.segmenter;
                    let (_, gated) = segment_and_gate(model, &q.recording, config.sample_rate, &config.spectrogram, &s.hysteresis, s.gate)?;
                    gated.recording
                }
            };
            patches_cache.insert(id.clone(), lm_features(config, &audio)?);
        }
        let scores = score_options(&lm, &patches_cache[id], &q.item)?;
        let item_ref = format!("{id}/{}", q.item.task_id);
        entries.push(PredictionEntry::from_scores(&item_ref, &q.item, &q.gold, scores)?);
    }
    let log = PredictionLog {
        model_tag,
        config_hash: config.hash(),
        mode,
        dataset,
        entries,
    };
    let report = evaluate(&config.eval.system, &log, &config.eval.weights)?;
    info!("{dataset} {mode}: {} items", log.entries.len());
    dir.output(PREDICTIONS_FILE, log.to_jsonl()?.as_bytes())?;
    dir.output(REPORT_JSON, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    dir.output(TABLES_FILE, render_report(std::slice::from_ref(&report))?.text.as_bytes())?;
    dir.finish(config)?;
    Ok(())
}

/// Collects every evaluation report under the output directory into one
/// set of tables.
pub fn report(config: &RunConfig) -> Result<()> {
    let eval_root = out(config, EVAL_DIR);
    let mut names: Vec<String> = fs::read_dir(&eval_root)
        .with_context(|| format!("reading {}", eval_root.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(REPORT_JSON).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        anyhow::bail!("no evaluation reports under {}", eval_root.display());
    }
    let path = out(config, REPORT_DIR);
    create_dir(&path)?;
    let mut dir = RunDir::new(path, "report", config);
    let mut reports: Vec<EvalReport> = Vec::new();
    for name in &names {
        let p = eval_root.join(name).join(REPORT_JSON);
        let text = super::read_text(&p)?;
        reports.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
        dir.input(&format!("eval/{name}/{REPORT_JSON}"), file_hash(&p)?);
    }
    let rendered = render_report(&reports)?;
    dir.output(REPORT_TEXT, rendered.text.as_bytes())?;
    dir.output(REPORT_JSON, (rendered.json + "\n").as_bytes())?;
    print!("{}", rendered.text);
    dir.finish(config)?;
    Ok(())
}
