//! Normal/abnormal datasets used for zero-shot evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::types::{PcgRecording, Site};
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryKind {
    Cinc2016,
    PascalA,
    PascalB,
}

impl BinaryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryKind::Cinc2016 => "cinc2016",
            BinaryKind::PascalA => "pascal_a",
            BinaryKind::PascalB => "pascal_b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataset {
    pub kind: BinaryKind,
    pub entries: Vec<(PcgRecording, BinaryLabel)>,
    /// Records named by a reference table whose audio file was absent.
    pub missing: usize,
}

impl BinaryDataset {
    pub fn label_counts(&self) -> (usize, usize) {
        let normal = self
            .entries
            .iter()
            .filter(|(_, l)| *l == BinaryLabel::Normal)
            .count();
        (normal, self.entries.len() - normal)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn load_recording(path: &Path, name: &str) -> Result<PcgRecording> {
    let (samples, rate) = read_wav(path)?;
    PcgRecording::new(name, name, Site::Unknown, samples, rate)
}

pub fn load_binary_dataset(root: &Path, kind: BinaryKind) -> Result<BinaryDataset> {
    let mut entries = Vec::new();
    let mut missing = 0;
    match kind {
        BinaryKind::Cinc2016 => {
            for dir in sorted_entries(root)? {
                let is_subset = dir.is_dir()
                    && dir
                        .file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("training-"));
                if !is_subset {
                    continue;
                }
                let reference = dir.join("REFERENCE.csv");
                let text = fs::read_to_string(&reference).map_err(|e| Error::io(&reference, e))?;
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (name, label) = line.split_once(',').ok_or_else(|| Error::Parse {
                        file: reference.clone(),
                        line: i + 1,
                        message: "expected `name,label`".into(),
                    })?;
                    let label = match label.trim() {
                        "1" => BinaryLabel::Abnormal,
                        "-1" => BinaryLabel::Normal,
                        other => {
                            return Err(Error::Parse {
                                file: reference.clone(),
                                line: i + 1,
                                message: format!("label must be 1 or -1, got `{other}`"),
                            })
                        }
                    };
                    let name = name.trim();
                    let wav = dir.join(format!("{name}.wav"));
                    if !wav.exists() {
                        warn!("{}: listed in reference table but missing", wav.display());
                        missing += 1;
                        continue;
                    }
                    entries.push((load_recording(&wav, name)?, label));
                }
            }
        }
        BinaryKind::PascalA | BinaryKind::PascalB => {
            for dir in sorted_entries(root)? {
                if !dir.is_dir() {
                    continue;
                }
                let folder = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_ascii_lowercase();
                let label = if folder.contains("murmur") || folder.contains("abnormal") {
                    BinaryLabel::Abnormal
                } else if folder.contains("normal") {
                    BinaryLabel::Normal
                } else {
                    warn!("{}: not a normal/murmur class folder, skipped", dir.display());
                    continue;
                };
                for file in sorted_entries(&dir)? {
                    if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                        continue;
                    }
                    let stem = file
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string();
                    entries.push((load_recording(&file, &stem)?, label));
                }
            }
        }
    }
    if missing > 0 {
        warn!("{}: {missing} referenced recordings missing", root.display());
    }
    Ok(BinaryDataset {
        kind,
        entries,
        missing,
    })
}

/// Writes `entries` in the on-disk layout of `kind`. CinC 2016 records all
/// go into `training-a`.
pub fn write_binary_dataset(
    root: &Path,
    kind: BinaryKind,
    entries: &[(PcgRecording, BinaryLabel)],
) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    match kind {
        BinaryKind::Cinc2016 => {
            let dir = root.join("training-a");
            mkdir(&dir)?;
            let mut reference = String::new();
            for (rec, label) in entries {
                write_wav(&dir.join(format!("{}.wav", rec.recording_id)), &rec.samples, rec.sample_rate)?;
                let code = match label {
                    BinaryLabel::Normal => "-1",
                    BinaryLabel::Abnormal => "1",
                };
                reference.push_str(&format!("{},{code}\n", rec.recording_id));
            }
            let path = dir.join("REFERENCE.csv");
            fs::write(&path, reference).map_err(|e| Error::io(&path, e))
        }
        BinaryKind::PascalA | BinaryKind::PascalB => {
            let prefix = if kind == BinaryKind::PascalA { "A" } else { "B" };
            for (rec, label) in entries {
                let folder = match label {
                    BinaryLabel::Normal => format!("{prefix}training_normal"),
                    BinaryLabel::Abnormal => format!("{prefix}training_murmur"),
                };
                let dir = root.join(folder);
                mkdir(&dir)?;
                write_wav(&dir.join(format!("{}.wav", rec.recording_id)), &rec.samples, rec.sample_rate)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(name: &str) -> PcgRecording {
        PcgRecording::new(name, name, Site::Unknown, vec![0.1; 400], 2000).unwrap()
    }

    #[test]
    fn cinc_reference_row_maps_to_abnormal() {
        let dir = tempfile::tempdir().unwrap();
        write_binary_dataset(dir.path(), BinaryKind::Cinc2016, &[(rec("a0001"), BinaryLabel::Abnormal)]).unwrap();
        let text = fs::read_to_string(dir.path().join("training-a/REFERENCE.csv")).unwrap();
        assert_eq!(text, "a0001,1\n");
        let ds = load_binary_dataset(dir.path(), BinaryKind::Cinc2016).unwrap();
        assert_eq!(ds.entries.len(), 1);
        assert_eq!(ds.entries[0].0.recording_id, "a0001");
        assert_eq!(ds.entries[0].1, BinaryLabel::Abnormal);
    }

    #[test]
    fn missing_audio_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_binary_dataset(dir.path(), BinaryKind::Cinc2016, &[(rec("a0001"), BinaryLabel::Normal)]).unwrap();
        fs::write(dir.path().join("training-a/REFERENCE.csv"), "a0001,-1\na0002,1\n").unwrap();
        let ds = load_binary_dataset(dir.path(), BinaryKind::Cinc2016).unwrap();
        assert_eq!(ds.entries.len(), 1);
        assert_eq!(ds.entries[0].1, BinaryLabel::Normal);
        assert_eq!(ds.missing, 1);
    }

    #[test]
    fn pascal_folders_define_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries: Vec<_> = (0..3).map(|i| (rec(&format!("n{i}")), BinaryLabel::Normal)).collect();
        entries.extend((0..2).map(|i| (rec(&format!("m{i}")), BinaryLabel::Abnormal)));
        write_binary_dataset(dir.path(), BinaryKind::PascalB, &entries).unwrap();
        fs::create_dir_all(dir.path().join("Btraining_extrastole")).unwrap();
        let ds = load_binary_dataset(dir.path(), BinaryKind::PascalB).unwrap();
        assert_eq!(ds.entries.len(), 5);
        assert_eq!(ds.label_counts(), (3, 2));
    }

    #[test]
    fn empty_class_folder_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("Atraining_murmur")).unwrap();
        let ds = load_binary_dataset(dir.path(), BinaryKind::PascalA).unwrap();
        assert!(ds.entries.is_empty());
    }

    #[test]
    fn abnormal_folder_is_not_read_as_normal() {
        let dir = tempfile::tempdir().unwrap();
        let abnormal = dir.path().join("abnormal");
        fs::create_dir_all(&abnormal).unwrap();
        write_wav(&abnormal.join("x.wav"), &rec("x").samples, 2000).unwrap();
        let ds = load_binary_dataset(dir.path(), BinaryKind::PascalA).unwrap();
        assert_eq!(ds.label_counts(), (0, 1));
    }
}
