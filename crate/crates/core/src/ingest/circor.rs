//! CirCor DigiScope directory layout: `<patient>.txt` metadata, plus
//! `<id>_<site>.wav` audio and `<id>_<site>.tsv` segmentation per recording.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::types::*;
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingEntry {
    pub site: Site,
    pub wav: String,
    pub tsv: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientMetadata {
    pub patient_id: String,
    pub sample_rate: u32,
    pub recordings: Vec<RecordingEntry>,
    pub annotation: MurmurAnnotation,
    pub murmur_locations: Vec<Site>,
    pub fields: BTreeMap<String, String>,
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn is_missing(value: &str) -> bool {
    matches!(value.trim(), "" | "nan" | "NaN" | "NA" | "n/a")
}

/// Canonical label spelling. Diastolic grades are recorded on a /IV scale in
/// the source data and are mapped onto the shared /VI grade labels.
pub fn normalize_label(phase: Phase, feature: Feature, raw: &str) -> Option<String> {
    let raw = raw.trim();
    if is_missing(raw) {
        return None;
    }
    if feature == Feature::Grading {
        let upper = raw.to_ascii_uppercase();
        if let Some((grade, scale)) = upper.split_once('/') {
            if phase == Phase::Diastolic && scale == "IV" {
                return Some(format!("{grade}/VI"));
            }
            return Some(format!("{grade}/{scale}"));
        }
    }
    Some(raw.to_string())
}

fn feature_key(phase: Phase, feature: Feature) -> String {
    format!("{} murmur {}", phase.name(), feature.name())
}

pub fn parse_patient_metadata(path: &Path, text: &str) -> Result<PatientMetadata> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (no, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(path, 1, "empty metadata file"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() < 3 {
        return Err(parse_err(path, no, "header must be `<patient> <n_recordings> <sample_rate>`"));
    }
    let patient_id = head[0].to_string();
    let n_recordings: usize = head[1]
        .parse()
        .map_err(|_| parse_err(path, no, format!("bad recording count `{}`", head[1])))?;
    let sample_rate: u32 = head[2]
        .parse()
        .ok()
        .filter(|&r| r > 0)
        .ok_or_else(|| parse_err(path, no, format!("bad sample rate `{}`", head[2])))?;

    let mut recordings = Vec::with_capacity(n_recordings);
    for _ in 0..n_recordings {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, no, "fewer recording lines than declared"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let wav = tokens.iter().find(|t| t.ends_with(".wav"));
        match (tokens.first(), wav) {
            (Some(site), Some(wav)) if !site.starts_with('#') => recordings.push(RecordingEntry {
                site: Site::from_code(site),
                wav: wav.to_string(),
                tsv: tokens.iter().find(|t| t.ends_with(".tsv")).map(|t| t.to_string()),
            }),
            _ => return Err(parse_err(path, no, "recording line must name a site and a .wav file")),
        }
    }

    let mut fields = BTreeMap::new();
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| parse_err(path, no, "expected `#Key: value`"))?;
        let (key, value) = body
            .split_once(':')
            .ok_or_else(|| parse_err(path, no, "expected `#Key: value`"))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }

    let murmur_class = match fields.get("Murmur").map(String::as_str) {
        Some(v) => MurmurClass::parse(v).unwrap_or_else(|| {
            warn!("{}: unparseable murmur field `{v}`, using Unknown", path.display());
            MurmurClass::Unknown
        }),
        None => MurmurClass::Unknown,
    };
    let mut annotation = MurmurAnnotation::without_features(murmur_class);
    if murmur_class != MurmurClass::Absent {
        for phase in [Phase::Systolic, Phase::Diastolic] {
            for feature in Feature::ALL {
                let value = fields
                    .get(&feature_key(phase, feature))
                    .and_then(|raw| normalize_label(phase, feature, raw));
                annotation.phase_mut(phase).set(feature, value);
            }
        }
    }
    annotation.validate()?;

    let murmur_locations = fields
        .get("Murmur locations")
        .filter(|v| !is_missing(v))
        .map(|v| v.split('+').map(Site::from_code).collect())
        .unwrap_or_default();

    Ok(PatientMetadata {
        patient_id,
        sample_rate,
        recordings,
        annotation,
        murmur_locations,
        fields,
    })
}

/// Parses `onset TAB offset TAB state-code` rows. Rows are clipped to
/// `duration_s`, sorted, and trimmed so they never overlap.
pub fn parse_segmentation(path: &Path, text: &str, duration_s: f64) -> Result<SegmentIntervals> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 3 {
            return Err(parse_err(path, i + 1, "expected onset, offset, state"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(path, i + 1, format!("bad number `{s}`")))
        };
        let onset = num(cols[0])?;
        let offset = num(cols[1])?;
        let state = cols[2]
            .parse::<f64>()
            .ok()
            .and_then(|c| SegmentState::from_code(c as u8))
            .ok_or_else(|| parse_err(path, i + 1, format!("bad state code `{}`", cols[2])))?;
        rows.push(Interval::new(onset.max(0.0), offset.min(duration_s), state));
    }
    rows.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut out: Vec<Interval> = Vec::with_capacity(rows.len());
    for mut iv in rows {
        if let Some(last) = out.last() {
            iv.onset_s = iv.onset_s.max(last.offset_s);
        }
        if iv.onset_s < iv.offset_s {
            out.push(iv);
        }
    }
    SegmentIntervals::new(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads every recording listed by the per-patient metadata files under
/// `root`, in patient-file then listing order.
pub fn load_circor(root: &Path) -> Result<Vec<AnnotatedRecording>> {
    let mut out = Vec::new();
    for path in sorted_entries(root)? {
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let meta = parse_patient_metadata(&path, &read_text(&path)?)?;
        for entry in &meta.recordings {
            let wav_path = root.join(&entry.wav);
            if !wav_path.exists() {
                warn!("{}: listed audio file is missing, skipped", wav_path.display());
                continue;
            }
            let (samples, file_rate) = read_wav(&wav_path)?;
            if file_rate != meta.sample_rate {
                warn!(
                    "{}: header rate {file_rate} Hz differs from metadata {} Hz; using metadata",
                    wav_path.display(),
                    meta.sample_rate
                );
            }
            let recording_id = entry.wav.trim_end_matches(".wav").to_string();
            let recording = PcgRecording::new(
                meta.patient_id.clone(),
                recording_id.clone(),
                entry.site,
                samples,
                meta.sample_rate,
            )?;
            let tsv_name = entry
                .tsv
                .clone()
                .unwrap_or_else(|| format!("{recording_id}.tsv"));
            let tsv_path = root.join(&tsv_name);
            let intervals = if tsv_path.exists() {
                parse_segmentation(&tsv_path, &read_text(&tsv_path)?, recording.duration_s)?
            } else {
                warn!("{}: no segmentation table, using empty intervals", tsv_path.display());
                SegmentIntervals::default()
            };
            let murmur_audible = meta.annotation.murmur_class == MurmurClass::Present
                && (meta.murmur_locations.is_empty() || meta.murmur_locations.contains(&entry.site));
            out.push(AnnotatedRecording {
                recording,
                intervals,
                annotation: meta.annotation.clone(),
                murmur_audible,
                audio_path: Some(entry.wav.clone()),
            });
        }
    }
    Ok(out)
}

/// Writes one patient in the CirCor layout. All recordings must belong to
/// `patient_id` and share a sample rate.
pub fn write_circor_patient(
    root: &Path,
    patient_id: &str,
    annotation: &MurmurAnnotation,
    murmur_locations: &[Site],
    recordings: &[(PcgRecording, SegmentIntervals)],
) -> Result<()> {
    let rate = recordings.first().map_or(4000, |(r, _)| r.sample_rate);
    let mut meta = format!("{patient_id} {} {rate}\n", recordings.len());
    for (rec, intervals) in recordings {
        let id = &rec.recording_id;
        let _ = writeln!(meta, "{} {id}.hea {id}.wav {id}.tsv", rec.site.code());
        write_wav(&root.join(format!("{id}.wav")), &rec.samples, rec.sample_rate)?;
        let mut tsv = String::new();
        for iv in intervals {
            let _ = writeln!(tsv, "{:.6}\t{:.6}\t{}", iv.onset_s, iv.offset_s, iv.state.code());
        }
        let tsv_path = root.join(format!("{id}.tsv"));
        fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    }
    let opt = |v: Option<&str>| v.unwrap_or("nan").to_string();
    let locations = if murmur_locations.is_empty() {
        "nan".to_string()
    } else {
        murmur_locations
            .iter()
            .map(|s| s.code())
            .collect::<Vec<_>>()
            .join("+")
    };
    let _ = writeln!(meta, "#Murmur: {}", annotation.murmur_class.as_str());
    let _ = writeln!(meta, "#Murmur locations: {locations}");
    for phase in [Phase::Systolic, Phase::Diastolic] {
        for feature in Feature::ALL {
            let _ = writeln!(
                meta,
                "#{}: {}",
                feature_key(phase, feature),
                opt(annotation.phase(phase).get(feature))
            );
        }
    }
    let outcome = if annotation.murmur_class == MurmurClass::Absent {
        "Normal"
    } else {
        "Abnormal"
    };
    let _ = writeln!(meta, "#Outcome: {outcome}");
    let _ = writeln!(meta, "#Campaign: synthetic");
    let path = root.join(format!("{patient_id}.txt"));
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const META: &str = "\
2530 2 4000
AV 2530_AV.hea 2530_AV.wav 2530_AV.tsv
MV 2530_MV.hea 2530_MV.wav 2530_MV.tsv
#Age: Child
#Murmur: Present
#Murmur locations: AV
#Systolic murmur timing: Holosystolic
#Systolic murmur shape: Diamond
#Systolic murmur grading: III/VI
#Systolic murmur pitch: High
#Systolic murmur quality: Harsh
#Diastolic murmur timing: nan
#Diastolic murmur grading: nan
";

    #[test]
    fn parses_metadata() {
        let m = parse_patient_metadata(Path::new("2530.txt"), META).unwrap();
        assert_eq!(m.patient_id, "2530");
        assert_eq!(m.sample_rate, 4000);
        assert_eq!(m.recordings.len(), 2);
        assert_eq!(m.recordings[1].site, Site::Mitral);
        assert_eq!(m.annotation.murmur_class, MurmurClass::Present);
        assert_eq!(m.annotation.systolic.grading.as_deref(), Some("III/VI"));
        assert!(m.annotation.diastolic.is_empty());
        assert_eq!(m.murmur_locations, vec![Site::Aortic]);
    }

    #[test]
    fn absent_patient_has_empty_features() {
        let text = META.replace("#Murmur: Present", "#Murmur: Absent");
        let m = parse_patient_metadata(Path::new("p.txt"), &text).unwrap();
        assert_eq!(m.annotation, MurmurAnnotation::absent());
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let text = META.replace("#Age: Child", "Age Child");
        let err = parse_patient_metadata(Path::new("2530.txt"), &text).unwrap_err();
        match err {
            Error::Parse { file, line, .. } => {
                assert_eq!(file, Path::new("2530.txt"));
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_text(&text).contains("2530.txt:4"));
    }

    fn err_text(text: &str) -> String {
        parse_patient_metadata(Path::new("2530.txt"), text)
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn unparseable_optional_fields_do_not_fail() {
        let text = META.replace("#Murmur: Present", "#Murmur: ???").replace("#Age: Child", "#Age: 12:3");
        let m = parse_patient_metadata(Path::new("p.txt"), &text).unwrap();
        assert_eq!(m.annotation.murmur_class, MurmurClass::Unknown);
    }

    #[test]
    fn out_of_vocabulary_label_is_a_hard_error() {
        let text = META.replace("Diamond", "Hexagonal");
        assert!(matches!(
            parse_patient_metadata(Path::new("p.txt"), &text),
            Err(Error::LabelNotInVocabulary { .. })
        ));
    }

    #[test]
    fn diastolic_grades_map_onto_shared_scale() {
        assert_eq!(
            normalize_label(Phase::Diastolic, Feature::Grading, "II/IV").as_deref(),
            Some("II/VI")
        );
        assert_eq!(normalize_label(Phase::Systolic, Feature::Pitch, "nan"), None);
    }

    #[test]
    fn segmentation_rows_map_state_codes() {
        let text = "0.0\t0.4\t1\n0.4\t0.8\t2\n";
        let iv = parse_segmentation(Path::new("x.tsv"), text, 10.0).unwrap();
        // Oracle: independent line split.
        let expected: Vec<(f64, f64, u8)> = text
            .lines()
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                (c[0].parse().unwrap(), c[1].parse().unwrap(), c[2].parse().unwrap())
            })
            .collect();
        assert_eq!(iv.len(), expected.len());
        for (got, want) in iv.iter().zip(&expected) {
            assert_eq!((got.onset_s, got.offset_s, got.state.code()), *want);
        }
        assert_eq!(iv.as_slice()[0].state, SegmentState::S1);
        assert_eq!(iv.as_slice()[1].state, SegmentState::Systole);
        let zero = parse_segmentation(Path::new("x.tsv"), "0\t1\t0\n", 2.0).unwrap();
        assert_eq!(zero.as_slice()[0].state, SegmentState::Unlabeled);
    }

    #[test]
    fn overlapping_rows_are_trimmed() {
        let iv = parse_segmentation(Path::new("x.tsv"), "0\t0.5\t1\n0.4\t0.9\t2\n0.8\t3\t3\n", 2.0).unwrap();
        assert!(SegmentIntervals::new(iv.as_slice().to_vec()).is_ok());
        assert!(iv.within(2.0));
    }
}
