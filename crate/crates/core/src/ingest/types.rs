use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Aortic,
    Pulmonic,
    Tricuspid,
    Mitral,
    Unknown,
}

impl Site {
    pub const AUSCULTATION: [Site; 4] = [Site::Aortic, Site::Pulmonic, Site::Tricuspid, Site::Mitral];

    /// Parses the CirCor two-letter location code; anything else is `Unknown`.
    pub fn from_code(code: &str) -> Site {
        match code.trim() {
            "AV" => Site::Aortic,
            "PV" => Site::Pulmonic,
            "TV" => Site::Tricuspid,
            "MV" => Site::Mitral,
            _ => Site::Unknown,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Site::Aortic => "AV",
            Site::Pulmonic => "PV",
            Site::Tricuspid => "TV",
            Site::Mitral => "MV",
            Site::Unknown => "Phc",
        }
    }
}

/// One auscultation recording. Samples are dimensionless amplitudes in
/// `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcgRecording {
    pub patient_id: String,
    pub recording_id: String,
    pub site: Site,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub duration_s: f64,
}

impl PcgRecording {
    pub fn new(
        patient_id: impl Into<String>,
        recording_id: impl Into<String>,
        site: Site,
        samples: Vec<f64>,
        sample_rate: u32,
    ) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("recording has no samples".into()));
        }
        let duration_s = samples.len() as f64 / sample_rate as f64;
        Ok(Self {
            patient_id: patient_id.into(),
            recording_id: recording_id.into(),
            site,
            samples,
            sample_rate,
            duration_s,
        })
    }

    /// Same identity, new waveform.
    pub fn with_samples(&self, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(
            self.patient_id.clone(),
            self.recording_id.clone(),
            self.site,
            samples,
            sample_rate,
        )
    }

    pub fn resampled(&self, to_rate: u32) -> Result<Self> {
        if to_rate == self.sample_rate {
            return Ok(self.clone());
        }
        self.with_samples(
            crate::dsp::resample(&self.samples, self.sample_rate, to_rate),
            to_rate,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentState {
    Unlabeled,
    S1,
    Systole,
    S2,
    Diastole,
}

impl SegmentState {
    /// CirCor segmentation codes: 0 unlabeled, 1 S1, 2 systole, 3 S2,
    /// 4 diastole.
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SegmentState::Unlabeled,
            1 => SegmentState::S1,
            2 => SegmentState::Systole,
            3 => SegmentState::S2,
            4 => SegmentState::Diastole,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            SegmentState::Unlabeled => 0,
            SegmentState::S1 => 1,
            SegmentState::Systole => 2,
            SegmentState::S2 => 3,
            SegmentState::Diastole => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub onset_s: f64,
    pub offset_s: f64,
    pub state: SegmentState,
}

impl Interval {
    pub fn new(onset_s: f64, offset_s: f64, state: SegmentState) -> Self {
        Self {
            onset_s,
            offset_s,
            state,
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Sorted, non-overlapping, non-empty intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentIntervals {
    intervals: Vec<Interval>,
}

impl SegmentIntervals {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        for iv in &intervals {
            if iv.onset_s.partial_cmp(&iv.offset_s) != Some(std::cmp::Ordering::Less) || iv.onset_s < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "interval [{}, {}) is empty or negative",
                    iv.onset_s, iv.offset_s
                )));
            }
        }
        for pair in intervals.windows(2) {
            if pair[1].onset_s < pair[0].offset_s {
                return Err(Error::InvalidInput(format!(
                    "intervals [{}, {}) and [{}, {}) overlap or are unsorted",
                    pair[0].onset_s, pair[0].offset_s, pair[1].onset_s, pair[1].offset_s
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interval> {
        self.intervals.iter()
    }

    pub fn as_slice(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.intervals.iter().map(Interval::duration).sum()
    }

    pub fn within(&self, duration_s: f64) -> bool {
        self.intervals
            .last()
            .is_none_or(|iv| iv.offset_s <= duration_s + 1e-9)
    }

    /// Keeps only intervals whose state passes `keep`, merging touching
    /// neighbours.
    pub fn filtered(&self, keep: impl Fn(SegmentState) -> bool) -> SegmentIntervals {
        let mut out: Vec<Interval> = Vec::new();
        for iv in self.intervals.iter().filter(|iv| keep(iv.state)) {
            match out.last_mut() {
                Some(last) if (iv.onset_s - last.offset_s).abs() < 1e-12 && last.state == iv.state => {
                    last.offset_s = iv.offset_s;
                }
                _ => out.push(*iv),
            }
        }
        SegmentIntervals { intervals: out }
    }
}

impl<'a> IntoIterator for &'a SegmentIntervals {
    type Item = &'a Interval;
    type IntoIter = std::slice::Iter<'a, Interval>;

    fn into_iter(self) -> Self::IntoIter {
        self.intervals.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MurmurClass {
    Present,
    Absent,
    Unknown,
}

impl MurmurClass {
    pub const ALL: [MurmurClass; 3] = [MurmurClass::Present, MurmurClass::Absent, MurmurClass::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            MurmurClass::Present => "Present",
            MurmurClass::Absent => "Absent",
            MurmurClass::Unknown => "Unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "Present" => Some(MurmurClass::Present),
            "Absent" => Some(MurmurClass::Absent),
            "Unknown" => Some(MurmurClass::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Systolic,
    Diastolic,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Systolic => "Systolic",
            Phase::Diastolic => "Diastolic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Timing,
    Shape,
    Grading,
    Pitch,
    Quality,
}

impl Feature {
    pub const ALL: [Feature; 5] = [
        Feature::Timing,
        Feature::Shape,
        Feature::Grading,
        Feature::Pitch,
        Feature::Quality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Timing => "timing",
            Feature::Shape => "shape",
            Feature::Grading => "grading",
            Feature::Pitch => "pitch",
            Feature::Quality => "quality",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseFeatures {
    pub timing: Option<String>,
    pub shape: Option<String>,
    pub grading: Option<String>,
    pub pitch: Option<String>,
    pub quality: Option<String>,
}

impl PhaseFeatures {
    pub fn get(&self, feature: Feature) -> Option<&str> {
        match feature {
            Feature::Timing => self.timing.as_deref(),
            Feature::Shape => self.shape.as_deref(),
            Feature::Grading => self.grading.as_deref(),
            Feature::Pitch => self.pitch.as_deref(),
            Feature::Quality => self.quality.as_deref(),
        }
    }

    pub fn set(&mut self, feature: Feature, value: Option<String>) {
        let slot = match feature {
            Feature::Timing => &mut self.timing,
            Feature::Shape => &mut self.shape,
            Feature::Grading => &mut self.grading,
            Feature::Pitch => &mut self.pitch,
            Feature::Quality => &mut self.quality,
        };
        *slot = value;
    }

    pub fn is_empty(&self) -> bool {
        Feature::ALL.iter().all(|&f| self.get(f).is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MurmurAnnotation {
    pub murmur_class: MurmurClass,
    pub systolic: PhaseFeatures,
    pub diastolic: PhaseFeatures,
}

impl MurmurAnnotation {
    pub fn absent() -> Self {
        Self::without_features(MurmurClass::Absent)
    }

    pub fn without_features(murmur_class: MurmurClass) -> Self {
        Self {
            murmur_class,
            systolic: PhaseFeatures::default(),
            diastolic: PhaseFeatures::default(),
        }
    }

    pub fn phase(&self, phase: Phase) -> &PhaseFeatures {
        match phase {
            Phase::Systolic => &self.systolic,
            Phase::Diastolic => &self.diastolic,
        }
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut PhaseFeatures {
        match phase {
            Phase::Systolic => &mut self.systolic,
            Phase::Diastolic => &mut self.diastolic,
        }
    }

    /// Checks the Absent-implies-empty rule and every label against the
    /// task vocabularies.
    pub fn validate(&self) -> Result<()> {
        if self.murmur_class == MurmurClass::Absent
            && !(self.systolic.is_empty() && self.diastolic.is_empty())
        {
            return Err(Error::InvalidInput(
                "murmur-absent annotation carries phase features".into(),
            ));
        }
        for phase in [Phase::Systolic, Phase::Diastolic] {
            for feature in Feature::ALL {
                if let Some(label) = self.phase(phase).get(feature) {
                    let task = crate::tasks::TaskId::feature(phase, feature);
                    if !task.vocabulary().contains(label) {
                        return Err(Error::LabelNotInVocabulary {
                            task: task.as_str().into(),
                            label: label.into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// A recording with its segmentation and the patient-level annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRecording {
    pub recording: PcgRecording,
    pub intervals: SegmentIntervals,
    pub annotation: MurmurAnnotation,
    /// Whether the murmur is audible at this recording's site.
    pub murmur_audible: bool,
    /// Path of the audio file relative to the dataset root, when loaded
    /// from disk.
    pub audio_path: Option<String>,
}
