//! The eleven multiple-choice murmur tasks: label vocabularies, question
//! paraphrase pools, the patient-level stratified split and item
//! construction with distractor padding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{AnnotatedRecording, Feature, MurmurClass, Phase};

pub const N_OPTIONS: usize = 6;
pub const OPTION_LETTERS: [char; N_OPTIONS] = ['A', 'B', 'C', 'D', 'E', 'F'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    MurmurPresence,
    SysTiming,
    SysShape,
    SysGrading,
    SysPitch,
    SysQuality,
    DiaTiming,
    DiaShape,
    DiaGrading,
    DiaPitch,
    DiaQuality,
}

impl TaskId {
    pub const ALL: [TaskId; 11] = [
        TaskId::MurmurPresence,
        TaskId::SysTiming,
        TaskId::SysShape,
        TaskId::SysGrading,
        TaskId::SysPitch,
        TaskId::SysQuality,
        TaskId::DiaTiming,
        TaskId::DiaShape,
        TaskId::DiaGrading,
        TaskId::DiaPitch,
        TaskId::DiaQuality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::MurmurPresence => "murmur_presence",
            TaskId::SysTiming => "sys_timing",
            TaskId::SysShape => "sys_shape",
            TaskId::SysGrading => "sys_grading",
            TaskId::SysPitch => "sys_pitch",
            TaskId::SysQuality => "sys_quality",
            TaskId::DiaTiming => "dia_timing",
            TaskId::DiaShape => "dia_shape",
            TaskId::DiaGrading => "dia_grading",
            TaskId::DiaPitch => "dia_pitch",
            TaskId::DiaQuality => "dia_quality",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        TaskId::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn feature(phase: Phase, feature: Feature) -> TaskId {
        use Feature::*;
        match (phase, feature) {
            (Phase::Systolic, Timing) => TaskId::SysTiming,
            (Phase::Systolic, Shape) => TaskId::SysShape,
            (Phase::Systolic, Grading) => TaskId::SysGrading,
            (Phase::Systolic, Pitch) => TaskId::SysPitch,
            (Phase::Systolic, Quality) => TaskId::SysQuality,
            (Phase::Diastolic, Timing) => TaskId::DiaTiming,
            (Phase::Diastolic, Shape) => TaskId::DiaShape,
            (Phase::Diastolic, Grading) => TaskId::DiaGrading,
            (Phase::Diastolic, Pitch) => TaskId::DiaPitch,
            (Phase::Diastolic, Quality) => TaskId::DiaQuality,
        }
    }

    /// `None` for the presence task.
    pub fn phase_feature(self) -> Option<(Phase, Feature)> {
        use Feature::*;
        Some(match self {
            TaskId::MurmurPresence => return None,
            TaskId::SysTiming => (Phase::Systolic, Timing),
            TaskId::SysShape => (Phase::Systolic, Shape),
            TaskId::SysGrading => (Phase::Systolic, Grading),
            TaskId::SysPitch => (Phase::Systolic, Pitch),
            TaskId::SysQuality => (Phase::Systolic, Quality),
            TaskId::DiaTiming => (Phase::Diastolic, Timing),
            TaskId::DiaShape => (Phase::Diastolic, Shape),
            TaskId::DiaGrading => (Phase::Diastolic, Grading),
            TaskId::DiaPitch => (Phase::Diastolic, Pitch),
            TaskId::DiaQuality => (Phase::Diastolic, Quality),
        })
    }

    pub fn vocabulary(self) -> LabelVocabulary {
        let labels: &[&str] = match self {
            TaskId::MurmurPresence => &["Present", "Absent", "Unknown"],
            TaskId::SysTiming => &["Early-systolic", "Mid-systolic", "Late-systolic", "Holosystolic"],
            TaskId::SysShape => &["Crescendo", "Decrescendo", "Diamond", "Plateau"],
            TaskId::SysGrading => &["I/VI", "II/VI", "III/VI", "IV/VI", "V/VI", "VI/VI"],
            TaskId::SysPitch | TaskId::DiaPitch => &["Low", "Medium", "High"],
            TaskId::SysQuality => &["Blowing", "Harsh", "Musical"],
            TaskId::DiaTiming => &["Early-diastolic", "Mid-diastolic", "Holodiastolic"],
            TaskId::DiaShape => &["Decrescendo", "Plateau"],
            TaskId::DiaGrading => &["I/VI", "II/VI", "III/VI"],
            TaskId::DiaQuality => &["Blowing", "Harsh"],
        };
        LabelVocabulary {
            task_id: self,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The three fixed phrasings of this task's question.
    pub fn paraphrases(self) -> [String; 3] {
        if self == TaskId::MurmurPresence {
            return [
                "Is a heart murmur present in this recording?".into(),
                "Does this heart sound recording contain a murmur?".into(),
                "Listening to this phonocardiogram, is a murmur present, absent, or unknown?".into(),
            ];
        }
        let (phase, feature) = self.phase_feature().expect("feature task");
        let phase = phase.name().to_ascii_lowercase();
        match feature {
            Feature::Timing => [
                format!("What is the timing of the {phase} murmur?"),
                format!("When does the {phase} murmur occur within its phase?"),
                format!("Which option best describes the timing of the {phase} murmur?"),
            ],
            Feature::Shape => [
                format!("What is the shape of the {phase} murmur?"),
                format!("How does the intensity of the {phase} murmur change over time?"),
                format!("Which option best describes the shape of the {phase} murmur?"),
            ],
            Feature::Grading => [
                format!("What is the grade of the {phase} murmur?"),
                format!("How loud is the {phase} murmur on the grading scale?"),
                format!("Which option best describes the grading of the {phase} murmur?"),
            ],
            Feature::Pitch => [
                format!("What is the pitch of the {phase} murmur?"),
                format!("Is the {phase} murmur low, medium, or high pitched?"),
                format!("Which option best describes the pitch of the {phase} murmur?"),
            ],
            Feature::Quality => [
                format!("What is the quality of the {phase} murmur?"),
                format!("How would you describe the sound quality of the {phase} murmur?"),
                format!("Which option best describes the quality of the {phase} murmur?"),
            ],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    pub task_id: TaskId,
    pub labels: Vec<String>,
}

impl LabelVocabulary {
    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingRef {
    pub patient_id: String,
    pub recording_id: String,
    /// Audio path relative to the dataset root.
    pub audio_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub task_id: TaskId,
    pub recording_ref: RecordingRef,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    pub paraphrase_id: usize,
    pub rng_seed: u64,
}

impl McItem {
    pub fn gold_label(&self) -> &str {
        &self.options[self.gold_index]
    }
}

/// Deterministic per-item seed so construction order cannot change output.
pub fn item_seed(seed: u64, patient_id: &str, recording_id: &str, task: TaskId) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [patient_id, recording_id, task.as_str()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Gold label for `task` under the inclusion policy: presence for every
/// recording, feature tasks only for recordings where the murmur is audible
/// and the feature is annotated.
pub fn gold_label(rec: &AnnotatedRecording, task: TaskId) -> Option<String> {
    match task.phase_feature() {
        None => Some(rec.annotation.murmur_class.as_str().to_string()),
        Some((phase, feature)) => {
            if rec.annotation.murmur_class != MurmurClass::Present || !rec.murmur_audible {
                return None;
            }
            rec.annotation.phase(phase).get(feature).map(str::to_string)
        }
    }
}

/// Six options holding `gold` exactly once. Vocabularies with six or more
/// labels contribute five random distractors; smaller ones are padded by
/// cycling the incorrect labels in vocabulary order. Final order is shuffled.
pub fn build_options(task: TaskId, gold: &str, rng: &mut impl Rng) -> Result<(Vec<String>, usize)> {
    let vocab = task.vocabulary();
    if !vocab.contains(gold) {
        return Err(Error::LabelNotInVocabulary {
            task: task.as_str().into(),
            label: gold.into(),
        });
    }
    let mut incorrect: Vec<String> = vocab.labels.iter().filter(|l| *l != gold).cloned().collect();
    let mut options = vec![gold.to_string()];
    if vocab.labels.len() >= N_OPTIONS {
        incorrect.shuffle(rng);
        options.extend(incorrect.into_iter().take(N_OPTIONS - 1));
    } else {
        options.extend(incorrect.iter().cloned().cycle().take(N_OPTIONS - 1));
    }
    options.shuffle(rng);
    let gold_index = options.iter().position(|o| o == gold).expect("gold retained");
    Ok((options, gold_index))
}

pub fn build_mc_item(rec: &AnnotatedRecording, task: TaskId, seed: u64) -> Result<Option<McItem>> {
    let Some(gold) = gold_label(rec, task) else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paraphrase_id = rng.random_range(0..3);
    let (options, gold_index) = build_options(task, &gold, &mut rng)?;
    Ok(Some(McItem {
        task_id: task,
        recording_ref: RecordingRef {
            patient_id: rec.recording.patient_id.clone(),
            recording_id: rec.recording.recording_id.clone(),
            audio_path: rec.audio_path.clone(),
        },
        question: task.paraphrases()[paraphrase_id].clone(),
        options,
        gold_index,
        paraphrase_id,
        rng_seed: seed,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
    pub classes: BTreeMap<MurmurClass, ClassSplit>,
}

impl SplitManifest {
    pub fn side_of(&self, patient_id: &str) -> Option<Side> {
        if self.train_patients.contains(patient_id) {
            Some(Side::Train)
        } else if self.test_patients.contains(patient_id) {
            Some(Side::Test)
        } else {
            None
        }
    }
}

/// Within each murmur class: sort, seeded shuffle, then the first
/// `floor(ratio * n + 0.5)` patients go to train.
pub fn stratified_split(patients: &[(String, MurmurClass)], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<MurmurClass, BTreeSet<String>> = BTreeMap::new();
    for (id, class) in patients {
        by_class.entry(*class).or_default().insert(id.clone());
    }
    let mut manifest = SplitManifest {
        seed,
        ratio,
        train_patients: BTreeSet::new(),
        test_patients: BTreeSet::new(),
        classes: BTreeMap::new(),
    };
    for class in MurmurClass::ALL {
        let Some(ids) = by_class.get(&class) else {
            warn!("class {} has no patients", class.as_str());
            continue;
        };
        let mut ids: Vec<String> = ids.iter().cloned().collect();
        let class_seed = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1));
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
        let n_train = ((ratio * ids.len() as f64) + 0.5).floor() as usize;
        let (train, test) = ids.split_at(n_train.min(ids.len()));
        manifest.classes.insert(
            class,
            ClassSplit {
                total: ids.len(),
                train: train.len(),
                test: test.len(),
            },
        );
        manifest.train_patients.extend(train.iter().cloned());
        manifest.test_patients.extend(test.iter().cloned());
    }
    let overlap: Vec<_> = manifest
        .train_patients
        .intersection(&manifest.test_patients)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::InvalidInput(format!(
            "patients listed under more than one class: {overlap:?}"
        )));
    }
    Ok(manifest)
}

/// One line of the on-disk dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: Side,
    #[serde(flatten)]
    pub item: McItem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    pub records: Vec<DatasetRecord>,
    /// Item count per task; every task id is present, possibly with 0.
    pub counts: BTreeMap<TaskId, usize>,
}

pub fn build_dataset(
    recordings: &[AnnotatedRecording],
    manifest: &SplitManifest,
    side: Side,
    seed: u64,
) -> Result<BuiltDataset> {
    let mut counts: BTreeMap<TaskId, usize> = TaskId::ALL.iter().map(|&t| (t, 0)).collect();
    let mut records = Vec::new();
    for rec in recordings {
        let patient = &rec.recording.patient_id;
        match manifest.side_of(patient) {
            Some(s) if s == side => {}
            Some(_) => continue,
            None => {
                return Err(Error::InvalidInput(format!(
                    "patient {patient} is not covered by the split manifest"
                )))
            }
        }
        for task in TaskId::ALL {
            let s = item_seed(seed, patient, &rec.recording.recording_id, task);
            if let Some(item) = build_mc_item(rec, task, s)? {
                *counts.get_mut(&task).expect("all tasks") += 1;
                records.push(DatasetRecord { split: side, item });
            }
        }
    }
    Ok(BuiltDataset { records, counts })
}

/// Serializes records one JSON object per line.
pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
