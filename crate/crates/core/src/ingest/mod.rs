//! Dataset loaders and the synthetic recording generator.

mod binary;
mod circor;
mod synth;
mod types;
mod wav;

pub use binary::{load_binary_dataset, write_binary_dataset, BinaryDataset, BinaryKind, BinaryLabel};
pub use circor::{
    load_circor, normalize_label, parse_patient_metadata, parse_segmentation, write_circor_patient,
    PatientMetadata, RecordingEntry,
};
pub use synth::{
    apportion, synth_binary, synth_cohort, synthesize_pcg, CohortConfig, Envelope, MurmurSpec, MurmurTiming,
    SynthSpec, SyntheticPatient, S1_BAND_HZ, S2_BAND_HZ,
};
pub use types::*;
pub use wav::{read_wav, write_wav};
