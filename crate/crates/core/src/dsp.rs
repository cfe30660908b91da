//! Signal front-end: band-limited resampling, log-mel spectrograms, patch
//! tiling and rasterization of interval annotations onto the frame grid.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SegmentIntervals, SegmentState};

/// Zero crossings of the sinc kernel on each side of the centre tap.
const SINC_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 9.0;

/// Resamples with a Kaiser-windowed sinc interpolator evaluated on a
/// precomputed polyphase table. Output length is
/// `round(len * to_rate / from_rate)`.
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    assert!(from_rate > 0 && to_rate > 0, "sample rates must be positive");
    if from_rate == to_rate {
        return samples.to_vec();
    }
    let g = gcd(from_rate as u64, to_rate as u64);
    let up = (to_rate as u64 / g) as usize;
    let down = (from_rate as u64 / g) as usize;
    let out_len = ((samples.len() as u64 * to_rate as u64 + from_rate as u64 / 2)
        / from_rate as u64) as usize;

    // Cutoff relative to the input Nyquist; shrinks when decimating.
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half = (SINC_ZERO_CROSSINGS as f64 / cutoff).ceil() as usize;
    let taps = 2 * half;
    let i0_beta = bessel_i0(KAISER_BETA);

    // table[p][j] weights input sample `base - half + 1 + j` for an output
    // whose fractional input position is p / up.
    let table: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let offset = j as f64 - (half as f64 - 1.0);
                    let x = frac - offset;
                    let ratio = x / half as f64;
                    if ratio.abs() >= 1.0 {
                        return 0.0;
                    }
                    let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / i0_beta;
                    cutoff * sinc(cutoff * x) * window
                })
                .collect()
        })
        .collect();

    let n_in = samples.len() as i64;
    (0..out_len)
        .map(|n| {
            let pos = n as u64 * down as u64;
            let base = (pos / up as u64) as i64;
            let phase = (pos % up as u64) as usize;
            let first = base - half as i64 + 1;
            table[phase]
                .iter()
                .enumerate()
                .filter_map(|(j, w)| {
                    let k = first + j as i64;
                    (0..n_in).contains(&k).then(|| w * samples[k as usize])
                })
                .sum()
        })
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 160,
            n_mels: 64,
            floor: 1e-10,
        }
    }
}

/// Log-mel spectrogram, `n_frames × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<f64>,
    pub hop_s: f64,
    pub n_mels: usize,
    pub source_rate: u32,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Per-utterance standardization to zero mean and unit variance over all
    /// entries. Constant inputs map to all zeros.
    pub fn standardized(&self) -> Spectrogram {
        let mean = self.frames.mean().unwrap_or(0.0);
        let var = self.frames.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
        let std = var.sqrt();
        let frames = if std < 1e-9 {
            Array2::zeros(self.frames.raw_dim())
        } else {
            self.frames.mapv(|v| (v - mean) / std)
        };
        Spectrogram {
            frames,
            ..self.clone()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank spanning `0..rate/2`, shaped
/// `n_mels × (n_fft / 2 + 1)`, each triangle peaking at 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let max_mel = hz_to_mel(rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * rate as f64 / n_fft as f64;
            let w = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
            bank[[m, b]] = w;
        }
    }
    bank
}

/// `log(mel · |STFT|² + floor)` with a periodic Hann window and no edge
/// padding, so `n_frames = 1 + (len - n_fft) / hop`.
pub fn log_mel(samples: &[f64], rate: u32, params: &MelParams) -> Result<Spectrogram> {
    let MelParams {
        n_fft,
        hop,
        n_mels,
        floor,
    } = *params;
    if n_fft == 0 || hop == 0 || n_mels == 0 {
        return Err(Error::InvalidInput("spectrogram parameters must be positive".into()));
    }
    if samples.len() < n_fft {
        return Err(Error::InvalidInput(format!(
            "signal of {} samples is shorter than one FFT window ({n_fft})",
            samples.len()
        )));
    }
    let n_frames = 1 + (samples.len() - n_fft) / hop;
    let n_bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut power = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            power[[t, b]] = buf[b].norm_sqr();
        }
    }
    let bank = mel_filterbank(n_mels, n_fft, rate);
    let frames = power.dot(&bank.t()).mapv(|v| (v + floor).ln());
    Ok(Spectrogram {
        frames,
        hop_s: hop as f64 / rate as f64,
        n_mels,
        source_rate: rate,
    })
}

/// `(time_frames, mel_bins)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchShape {
    pub time_frames: usize,
    pub mel_bins: usize,
}

impl PatchShape {
    pub fn new(time_frames: usize, mel_bins: usize) -> Self {
        Self {
            time_frames,
            mel_bins,
        }
    }

    pub fn len(&self) -> usize {
        self.time_frames * self.mel_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for PatchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.time_frames, self.mel_bins)
    }
}

/// Patches stored one per row, flattened time-major within each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    pub patch_shape: PatchShape,
    /// Inclusive `(first_frame, last_frame)` of real (unpadded) frames.
    pub frame_span: Vec<(usize, usize)>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_s: f64,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    /// Inverse of [`patchify`], dropping the zero padding.
    pub fn reconstruct(&self) -> Array2<f64> {
        let PatchShape {
            time_frames,
            mel_bins,
        } = self.patch_shape;
        let per_time = self.n_mels / mel_bins;
        let mut out = Array2::zeros((self.n_frames, self.n_mels));
        for (p, row) in self.patches.rows().into_iter().enumerate() {
            let t0 = (p / per_time) * time_frames;
            let m0 = (p % per_time) * mel_bins;
            for dt in 0..time_frames {
                if t0 + dt >= self.n_frames {
                    break;
                }
                for dm in 0..mel_bins {
                    out[[t0 + dt, m0 + dm]] = row[dt * mel_bins + dm];
                }
            }
        }
        out
    }

    pub fn reversed(&self) -> PatchSequence {
        let mut out = self.clone();
        out.patches = self.patches.slice(s![..;-1, ..]).as_standard_layout().into_owned();
        out.frame_span.reverse();
        out
    }
}

pub fn patchify(spec: &Spectrogram, shape: PatchShape) -> Result<PatchSequence> {
    let PatchShape {
        time_frames,
        mel_bins,
    } = shape;
    if time_frames == 0 || mel_bins == 0 {
        return Err(Error::InvalidInput("patch dimensions must be positive".into()));
    }
    if mel_bins > spec.n_mels {
        return Err(Error::shape(
            format!("patch mel bins <= {}", spec.n_mels),
            mel_bins,
        ));
    }
    if !spec.n_mels.is_multiple_of(mel_bins) {
        return Err(Error::shape(
            format!("patch mel bins dividing {}", spec.n_mels),
            mel_bins,
        ));
    }
    let n_frames = spec.n_frames();
    let n_time = n_frames.div_ceil(time_frames);
    let per_time = spec.n_mels / mel_bins;
    let mut patches = Array2::zeros((n_time * per_time, shape.len()));
    let mut frame_span = Vec::with_capacity(n_time * per_time);
    for tb in 0..n_time {
        let t0 = tb * time_frames;
        let t1 = (t0 + time_frames).min(n_frames);
        for mb in 0..per_time {
            let m0 = mb * mel_bins;
            let p = tb * per_time + mb;
            for t in t0..t1 {
                for m in 0..mel_bins {
                    patches[[p, (t - t0) * mel_bins + m]] = spec.frames[[t, m0 + m]];
                }
            }
            frame_span.push((t0, t1 - 1));
        }
    }
    Ok(PatchSequence {
        patches,
        patch_shape: shape,
        frame_span,
        n_frames,
        n_mels: spec.n_mels,
        hop_s: spec.hop_s,
    })
}

/// Resamples to `target_rate`, computes the standardized log-mel
/// spectrogram and cuts it into patches. Clips shorter than one FFT window
/// are zero-padded to a single frame.
pub fn features(
    samples: &[f64],
    rate: u32,
    target_rate: u32,
    params: &MelParams,
    shape: PatchShape,
) -> Result<PatchSequence> {
    let mut x = resample(samples, rate, target_rate);
    if x.len() < params.n_fft {
        x.resize(params.n_fft, 0.0);
    }
    let spec = log_mel(&x, target_rate, params)?.standardized();
    patchify(&spec, shape)
}

/// Which annotated states count as heartbeat occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// S1, systole, S2 and diastole.
    #[default]
    Broad,
    /// S1 and S2 only.
    Strict,
}

impl LabelMode {
    pub fn is_occurrence(self, state: SegmentState) -> bool {
        match state {
            SegmentState::S1 | SegmentState::S2 => true,
            SegmentState::Systole | SegmentState::Diastole => self == LabelMode::Broad,
            SegmentState::Unlabeled => false,
        }
    }
}

/// Binary per-frame occupancy targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMask {
    pub values: Vec<u8>,
    pub hop_s: f64,
}

impl FrameMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Frame `t` is 1 iff its centre `t·hop + hop/2` lies in `[onset, offset)`
/// of an interval whose state counts as occurrence under `mode`.
pub fn frame_labels(
    intervals: &SegmentIntervals,
    n_frames: usize,
    hop_s: f64,
    mode: LabelMode,
) -> FrameMask {
    let mut values = vec![0u8; n_frames];
    for iv in intervals.iter().filter(|iv| mode.is_occurrence(iv.state)) {
        // First frame whose centre is >= onset.
        let first = ((iv.onset_s / hop_s) - 0.5).ceil().max(0.0) as usize;
        for (t, v) in values.iter_mut().enumerate().skip(first) {
            let centre = t as f64 * hop_s + hop_s / 2.0;
            if centre >= iv.offset_s {
                break;
            }
            if centre >= iv.onset_s {
                *v = 1;
            }
        }
    }
    FrameMask { values, hop_s }
}
