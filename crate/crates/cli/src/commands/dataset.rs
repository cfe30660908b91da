use std::collections::BTreeMap;

use anyhow::Result;
use log::info;
use pcg_core::tasks::{build_dataset, stratified_split, to_jsonl, Side, TaskId};

use super::{claim_dir, load_circor, out, recordings_hash, DATASET_DIR, MANIFEST_FILE, TEST_FILE, TRAIN_FILE};
use crate::config::RunConfig;
use crate::run::RunDir;

pub const COUNTS_FILE: &str = "counts.json";

pub fn run(config: &RunConfig, force: bool) -> Result<()> {
    let path = out(config, DATASET_DIR);
    claim_dir(&path, force)?;
    let mut dir = RunDir::new(path, "build-dataset", config);

    let recordings = load_circor(config)?;
    dir.input("circor", recordings_hash(recordings.iter().map(|r| &r.recording)));
    let mut patients: BTreeMap<String, _> = BTreeMap::new();
    for r in &recordings {
        patients.insert(r.recording.patient_id.clone(), r.annotation.murmur_class);
    }
    let roster: Vec<_> = patients.into_iter().collect();
    let manifest = stratified_split(&roster, config.split.ratio, config.seed)?;
    dir.output(MANIFEST_FILE, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;

    let mut counts = BTreeMap::new();
    for (side, file, name) in [(Side::Train, TRAIN_FILE, "train"), (Side::Test, TEST_FILE, "test")] {
        let mut built = build_dataset(&recordings, &manifest, side, config.seed)?;
        built.records.retain(|r| config.tasks.include.contains(&r.item.task_id));
        let side_counts: BTreeMap<TaskId, usize> = TaskId::ALL
            .iter()
            .map(|&t| (t, built.records.iter().filter(|r| r.item.task_id == t).count()))
            .collect();
        info!("{name}: {} items", built.records.len());
        dir.output(file, to_jsonl(&built.records)?.as_bytes())?;
        counts.insert(name, side_counts);
    }
    dir.output(COUNTS_FILE, (serde_json::to_string_pretty(&counts)? + "\n").as_bytes())?;
    dir.finish(config)?;
    Ok(())
}
