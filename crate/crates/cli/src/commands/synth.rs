use anyhow::Result;
use log::info;
use pcg_core::ingest::{synth_binary, synth_cohort, write_binary_dataset, write_circor_patient, BinaryKind};

use super::{claim_dir, recordings_hash};
use crate::config::RunConfig;
use crate::run::{create_dir, RunDir};

/// Writes a synthetic CirCor-layout corpus and the three zero-shot sets
/// under the data root.
pub fn run(config: &RunConfig, force: bool) -> Result<()> {
    let root = &config.data.root;
    let circor = config.dataset_root(&config.data.circor);
    claim_dir(&circor, force)?;
    let mut dir = RunDir::new(root.clone(), "synth", config);

    let patients = synth_cohort(&config.synth.cohort)?;
    for p in &patients {
        let recs: Vec<_> = p
            .recordings
            .iter()
            .map(|r| (r.recording.clone(), r.intervals.clone()))
            .collect();
        write_circor_patient(&circor, &p.patient_id, &p.annotation, &p.murmur_locations, &recs)?;
    }
    let all = patients.iter().flat_map(|p| p.recordings.iter().map(|r| &r.recording));
    dir.output_hash("circor", recordings_hash(all));
    info!(
        "wrote {} patients, {} recordings to {}",
        patients.len(),
        patients.iter().map(|p| p.recordings.len()).sum::<usize>(),
        circor.display()
    );

    let sets = [
        (BinaryKind::Cinc2016, &config.data.cinc2016, "c"),
        (BinaryKind::PascalA, &config.data.pascal_a, "a"),
        (BinaryKind::PascalB, &config.data.pascal_b, "b"),
    ];
    for (k, (kind, rel, prefix)) in sets.into_iter().enumerate() {
        let path = config.dataset_root(rel);
        claim_dir(&path, force)?;
        let seed = config.seed.wrapping_add(1 + k as u64);
        let entries = synth_binary(config.synth.binary_recordings, prefix, seed, config.synth.binary_snr_db)?;
        write_binary_dataset(&path, kind, &entries)?;
        dir.output_hash(kind.as_str(), recordings_hash(entries.iter().map(|(r, _)| r)));
        info!("wrote {} {} recordings", entries.len(), kind.as_str());
    }
    create_dir(root)?;
    dir.finish(config)?;
    Ok(())
}
