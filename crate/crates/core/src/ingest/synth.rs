//! Synthetic phonocardiograms with exactly known segmentation and murmur
//! labels.

use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::binary::BinaryLabel;
use super::types::*;
use crate::error::{Error, Result};

/// Centre-frequency bands for the S1 and S2 tone bursts.
pub const S1_BAND_HZ: (f64, f64) = (30.0, 60.0);
pub const S2_BAND_HZ: (f64, f64) = (60.0, 100.0);
/// Share of the non-burst part of each beat spent in systole.
const SYSTOLE_SHARE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Plateau,
    Diamond,
    Decrescendo,
    Crescendo,
}

impl Envelope {
    fn gain(self, x: f64) -> f64 {
        match self {
            Envelope::Plateau => 1.0,
            Envelope::Diamond => 1.0 - (2.0 * x - 1.0).abs(),
            Envelope::Decrescendo => 1.0 - x,
            Envelope::Crescendo => x,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Envelope::Plateau => "Plateau",
            Envelope::Diamond => "Diamond",
            Envelope::Decrescendo => "Decrescendo",
            Envelope::Crescendo => "Crescendo",
        }
    }
}

/// Portion of the phase a murmur occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MurmurTiming {
    Early,
    Mid,
    Late,
    Holo,
}

impl MurmurTiming {
    fn span(self) -> (f64, f64) {
        match self {
            MurmurTiming::Early => (0.0, 0.5),
            MurmurTiming::Mid => (0.25, 0.75),
            MurmurTiming::Late => (0.5, 1.0),
            MurmurTiming::Holo => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MurmurSpec {
    pub phase: Phase,
    pub band_hz: (f64, f64),
    pub envelope: Envelope,
    /// Murmur RMS relative to the S1 burst peak.
    pub relative_amplitude: f64,
    pub timing: MurmurTiming,
}

impl MurmurSpec {
    /// Expert-style labels implied by the acoustic parameters.
    pub fn labels(&self) -> PhaseFeatures {
        let suffix = match self.phase {
            Phase::Systolic => "systolic",
            Phase::Diastolic => "diastolic",
        };
        let timing = match self.timing {
            MurmurTiming::Early => format!("Early-{suffix}"),
            MurmurTiming::Mid => format!("Mid-{suffix}"),
            MurmurTiming::Late => format!("Late-{suffix}"),
            MurmurTiming::Holo => format!("Holo{suffix}"),
        };
        let a = self.relative_amplitude;
        let grading = ["I/VI", "II/VI", "III/VI", "IV/VI", "V/VI", "VI/VI"]
            [[0.2, 0.4, 0.6, 0.8, 1.0].iter().take_while(|&&t| a >= t).count()];
        let (lo, hi) = self.band_hz;
        let centre = 0.5 * (lo + hi);
        let pitch = if centre < 150.0 {
            "Low"
        } else if centre < 300.0 {
            "Medium"
        } else {
            "High"
        };
        let relative_width = (hi - lo) / centre;
        let quality = if relative_width < 0.4 {
            "Musical"
        } else if relative_width < 1.0 {
            "Harsh"
        } else {
            "Blowing"
        };
        PhaseFeatures {
            timing: Some(timing),
            shape: Some(self.envelope.label().into()),
            grading: Some(grading.into()),
            pitch: Some(pitch.into()),
            quality: Some(quality.into()),
        }
    }

    pub fn annotation(&self) -> MurmurAnnotation {
        let mut annotation = MurmurAnnotation::without_features(MurmurClass::Present);
        *annotation.phase_mut(self.phase) = self.labels();
        annotation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_beats: usize,
    pub beat_period_s: f64,
    pub s1_dur_s: f64,
    pub s2_dur_s: f64,
    pub murmur: Option<MurmurSpec>,
    pub noise_snr_db: f64,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_beats: 5,
            beat_period_s: 0.8,
            s1_dur_s: 0.1,
            s2_dur_s: 0.08,
            murmur: None,
            noise_snr_db: 20.0,
            seed: 0,
            sample_rate: 4000,
        }
    }
}

impl SynthSpec {
    /// A randomized recording drawn from `seed`; half carry a murmur.
    pub fn sample(seed: u64, noise_snr_db: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let murmur = rng.random_bool(0.5).then(|| random_murmur(&mut rng));
        Self {
            n_beats: rng.random_range(4..=6),
            beat_period_s: rng.random_range(0.6..1.0),
            s1_dur_s: rng.random_range(0.08..0.12),
            s2_dur_s: rng.random_range(0.06..0.1),
            murmur,
            noise_snr_db,
            seed,
            sample_rate: 4000,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.n_beats == 0 || self.sample_rate == 0 {
            return bad("n_beats and sample_rate must be positive");
        }
        if !(self.beat_period_s > 0.0 && self.s1_dur_s > 0.0 && self.s2_dur_s > 0.0) {
            return bad("durations must be positive");
        }
        if self.s1_dur_s + self.s2_dur_s >= self.beat_period_s {
            return bad("S1 + S2 must be shorter than the beat period");
        }
        if let Some(m) = &self.murmur {
            let nyquist = self.sample_rate as f64 / 2.0;
            if m.band_hz.1 >= nyquist {
                return Err(Error::InvalidInput(format!(
                    "murmur band upper edge {} Hz is at or above Nyquist {nyquist} Hz",
                    m.band_hz.1
                )));
            }
            if !(0.0 <= m.band_hz.0 && m.band_hz.0 < m.band_hz.1) || m.relative_amplitude < 0.0 {
                return bad("murmur band must be increasing and amplitude non-negative");
            }
            m.annotation().validate()?;
        }
        Ok(())
    }
}

fn random_murmur(rng: &mut impl Rng) -> MurmurSpec {
    let phase = if rng.random_bool(0.8) {
        Phase::Systolic
    } else {
        Phase::Diastolic
    };
    // One amplitude per grade; diastolic grades stop at III/VI.
    let (timings, envelopes, widths, amplitudes): (&[MurmurTiming], &[Envelope], &[f64], &[f64]) = match phase {
        Phase::Systolic => (
            &[MurmurTiming::Early, MurmurTiming::Mid, MurmurTiming::Late, MurmurTiming::Holo],
            &[Envelope::Plateau, Envelope::Diamond, Envelope::Decrescendo, Envelope::Crescendo],
            &[0.25, 0.7, 1.4],
            &[0.15, 0.3, 0.5, 0.7, 0.9, 1.1],
        ),
        Phase::Diastolic => (
            &[MurmurTiming::Early, MurmurTiming::Mid, MurmurTiming::Holo],
            &[Envelope::Plateau, Envelope::Decrescendo],
            &[0.7, 1.4],
            &[0.15, 0.3, 0.5],
        ),
    };
    let centre = *[100.0, 220.0, 400.0].choose(rng).unwrap();
    let width = *widths.choose(rng).unwrap() * centre;
    MurmurSpec {
        phase,
        band_hz: (centre - width / 2.0, centre + width / 2.0),
        envelope: *envelopes.choose(rng).unwrap(),
        relative_amplitude: *amplitudes.choose(rng).unwrap(),
        timing: *timings.choose(rng).unwrap(),
    }
}

fn hann_burst(out: &mut [f64], rate: f64, start: usize, len: usize, freq: f64, amp: f64, phase: f64) {
    for i in 0..len {
        let Some(slot) = out.get_mut(start + i) else {
            break;
        };
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
        *slot += amp * w * (2.0 * PI * freq * i as f64 / rate + phase).sin();
    }
}

/// Unit-RMS noise restricted to `band` by zeroing FFT bins.
fn band_noise(n: usize, rate: f64, band: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f < band.0 || f > band.1 {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let real: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (real.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    real.into_iter().map(|v| if rms > 0.0 { v / rms } else { 0.0 }).collect()
}

/// Renders `n_beats` cycles of S1 burst, systole, S2 burst and diastole,
/// with an optional murmur in one phase and white noise at the requested
/// SNR. Returned intervals are the construction times.
pub fn synthesize_pcg(spec: &SynthSpec) -> Result<(PcgRecording, SegmentIntervals, MurmurAnnotation)> {
    spec.validate()?;
    let rate = spec.sample_rate as f64;
    let total_s = spec.n_beats as f64 * spec.beat_period_s;
    let n = (total_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clean = vec![0.0; n];
    let mut intervals = Vec::with_capacity(4 * spec.n_beats);

    let rest = spec.beat_period_s - spec.s1_dur_s - spec.s2_dur_s;
    let systole = rest * SYSTOLE_SHARE;
    let murmur_noise = spec
        .murmur
        .as_ref()
        .map(|m| band_noise(n, rate, m.band_hz, &mut rng));

    for beat in 0..spec.n_beats {
        let t0 = beat as f64 * spec.beat_period_s;
        let bounds = [
            t0,
            t0 + spec.s1_dur_s,
            t0 + spec.s1_dur_s + systole,
            t0 + spec.s1_dur_s + systole + spec.s2_dur_s,
            (t0 + spec.beat_period_s).min(total_s),
        ];
        let states = [SegmentState::S1, SegmentState::Systole, SegmentState::S2, SegmentState::Diastole];
        for (k, state) in states.into_iter().enumerate() {
            intervals.push(Interval::new(bounds[k], bounds[k + 1], state));
        }
        let idx = |t: f64| (t * rate).round() as usize;
        let s1_freq = rng.random_range(S1_BAND_HZ.0..S1_BAND_HZ.1);
        let s2_freq = rng.random_range(S2_BAND_HZ.0..S2_BAND_HZ.1);
        let s1_phase = rng.random_range(0.0..2.0 * PI);
        let s2_phase = rng.random_range(0.0..2.0 * PI);
        hann_burst(&mut clean, rate, idx(bounds[0]), idx(bounds[1]) - idx(bounds[0]), s1_freq, 1.0, s1_phase);
        hann_burst(&mut clean, rate, idx(bounds[2]), idx(bounds[3]) - idx(bounds[2]), s2_freq, 0.8, s2_phase);

        if let (Some(m), Some(noise)) = (&spec.murmur, &murmur_noise) {
            let (p0, p1) = match m.phase {
                Phase::Systolic => (bounds[1], bounds[2]),
                Phase::Diastolic => (bounds[3], bounds[4]),
            };
            let (f0, f1) = m.timing.span();
            let (a, b) = (idx(p0 + f0 * (p1 - p0)), idx(p0 + f1 * (p1 - p0)).min(n));
            for i in a..b {
                let x = (i - a) as f64 / (b - a).max(1) as f64;
                clean[i] += m.relative_amplitude * m.envelope.gain(x) * noise[i];
            }
        }
    }

    let power = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_std = (power / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
    let mut samples: Vec<f64> = clean
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + noise_std * e
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut samples {
            *v *= 0.9 / peak;
        }
    }

    let recording = PcgRecording::new(
        format!("synth{}", spec.seed),
        format!("synth{}", spec.seed),
        Site::Unknown,
        samples,
        spec.sample_rate,
    )?;
    let annotation = spec
        .murmur
        .as_ref()
        .map_or_else(MurmurAnnotation::absent, MurmurSpec::annotation);
    Ok((recording, SegmentIntervals::new(intervals)?, annotation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    /// Class shares for (Present, Absent, Unknown).
    pub class_mix: [f64; 3],
    pub seed: u64,
    pub sample_rate: u32,
    pub noise_snr_db: f64,
    pub max_recordings_per_patient: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            class_mix: [0.19, 0.74, 0.07],
            seed: 0,
            sample_rate: 4000,
            noise_snr_db: 10.0,
            max_recordings_per_patient: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub annotation: MurmurAnnotation,
    pub murmur_locations: Vec<Site>,
    pub recordings: Vec<AnnotatedRecording>,
}

/// Class counts for `n` items by largest remainder.
pub fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Patients with one to four site recordings each. Present patients carry
/// one murmur audible at a non-empty subset of their sites; Unknown patients
/// are recorded at low SNR without a murmur.
pub fn synth_cohort(config: &CohortConfig) -> Result<Vec<SyntheticPatient>> {
    let counts = apportion(config.n_patients, &config.class_mix);
    let mut classes: Vec<MurmurClass> = MurmurClass::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    classes.shuffle(&mut rng);

    let mut patients = Vec::with_capacity(classes.len());
    for (i, class) in classes.into_iter().enumerate() {
        let patient_id = format!("{}", 50000 + i);
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let n_sites = prng.random_range(1..=config.max_recordings_per_patient.clamp(1, 4));
        let mut sites: Vec<Site> = Site::AUSCULTATION.choose_multiple(&mut prng, n_sites).copied().collect();
        sites.sort();
        let murmur = (class == MurmurClass::Present).then(|| random_murmur(&mut prng));
        let murmur_locations: Vec<Site> = if murmur.is_some() {
            let mut locs: Vec<Site> = sites.iter().copied().filter(|_| prng.random_bool(0.6)).collect();
            if locs.is_empty() {
                locs.push(*sites.choose(&mut prng).unwrap());
            }
            locs
        } else {
            Vec::new()
        };
        let annotation = match &murmur {
            Some(m) => m.annotation(),
            None => MurmurAnnotation::without_features(class),
        };
        let snr = if class == MurmurClass::Unknown {
            0.0
        } else {
            config.noise_snr_db
        };

        let mut recordings = Vec::with_capacity(sites.len());
        for site in sites {
            let audible = murmur_locations.contains(&site);
            let spec = SynthSpec {
                n_beats: prng.random_range(4..=6),
                beat_period_s: prng.random_range(0.6..1.0),
                s1_dur_s: prng.random_range(0.08..0.12),
                s2_dur_s: prng.random_range(0.06..0.1),
                murmur: murmur.clone().filter(|_| audible),
                noise_snr_db: snr,
                seed: prng.random(),
                sample_rate: config.sample_rate,
            };
            let (rec, intervals, _) = synthesize_pcg(&spec)?;
            let recording_id = format!("{patient_id}_{}", site.code());
            let recording = PcgRecording {
                patient_id: patient_id.clone(),
                recording_id: recording_id.clone(),
                site,
                ..rec
            };
            recordings.push(AnnotatedRecording {
                recording,
                intervals,
                annotation: annotation.clone(),
                murmur_audible: audible,
                audio_path: Some(format!("{recording_id}.wav")),
            });
        }
        patients.push(SyntheticPatient {
            patient_id,
            annotation,
            murmur_locations,
            recordings,
        });
    }
    Ok(patients)
}

/// Normal/abnormal recordings for zero-shot sets: a recording is abnormal
/// exactly when it carries a murmur. Ids are `{prefix}{index:04}`.
pub fn synth_binary(n: usize, prefix: &str, seed: u64, noise_snr_db: f64) -> Result<Vec<(PcgRecording, BinaryLabel)>> {
    (0..n)
        .map(|i| {
            let spec = SynthSpec::sample(seed.wrapping_mul(1_000_033).wrapping_add(i as u64), noise_snr_db);
            let label = if spec.murmur.is_some() {
                BinaryLabel::Abnormal
            } else {
                BinaryLabel::Normal
            };
            let (rec, _, _) = synthesize_pcg(&spec)?;
            let id = format!("{prefix}{i:04}");
            let rec = PcgRecording {
                patient_id: id.clone(),
                recording_id: id,
                site: Site::Unknown,
                ..rec
            };
            Ok((rec, label))
        })
        .collect()
}
