//! Heartbeat segmentation front-end: a bidirectional scan encoder over
//! spectrogram patches with a per-frame linear head, trained with frame-level
//! binary cross-entropy; plus interval extraction and audio gating.

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::dsp::{features, frame_labels, FrameMask, LabelMode, MelParams, PatchSequence, PatchShape};
use crate::error::{Error, Result};
use crate::ingest::{Interval, PcgRecording, SegmentIntervals, SegmentState};
use crate::nn::{bce_value, glorot, zeros, Grads, Mat, Optimizer, OptimizerKind, ParamStore, Tape, Var};

pub const HEADER: &str = "pcgseg-v1";
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub layers: usize,
    pub width: usize,
    pub n_mels: usize,
    pub patch_shape: PatchShape,
    /// Share weights between the forward and backward scans.
    #[serde(default)]
    pub tie_directions: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            n_mels: 64,
            patch_shape: PatchShape::new(2, 64),
            tie_directions: false,
        }
    }
}

impl SegmenterConfig {
    fn mel_blocks(&self) -> usize {
        self.n_mels / self.patch_shape.mel_bins
    }

    fn step_dim(&self) -> usize {
        self.mel_blocks() * self.patch_shape.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    pub config: SegmenterConfig,
    pub params: ParamStore,
}

/// Per-frame heartbeat probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbabilities {
    pub values: Vec<f64>,
    pub hop_s: f64,
}

fn direction_names(l: usize, dir: &str, tied: bool) -> (String, String) {
    let dir = if tied { "fwd" } else { dir };
    (format!("layer{l}.{dir}.in"), format!("layer{l}.{dir}.decay"))
}

impl SegmenterModel {
    /// Random encoder, zero head: an untrained model predicts 0.5 everywhere.
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.width == 0 {
            return Err(Error::InvalidInput("segmenter needs at least one layer of positive width".into()));
        }
        if config.patch_shape.is_empty() || !config.n_mels.is_multiple_of(config.patch_shape.mel_bins) {
            return Err(Error::shape(
                format!("patch mel bins dividing {}", config.n_mels),
                config.patch_shape,
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let mut p = ParamStore::new();
        p.insert("embed.w", glorot(w, config.step_dim(), &mut rng), true);
        p.insert("embed.b", zeros(1, w), true);
        // Decays spread so the layer sees both short and long memories.
        let decay = Mat::from_shape_fn((1, w), |(_, j)| {
            let a = 0.5 + 0.45 * j as f64 / (w.max(2) - 1) as f64;
            (a / (1.0 - a)).ln()
        });
        for l in 0..config.layers {
            let dirs: &[&str] = if config.tie_directions { &["fwd"] } else { &["fwd", "bwd"] };
            for dir in dirs {
                let (win, wdecay) = direction_names(l, dir, false);
                p.insert(win, glorot(w, w, &mut rng), true);
                p.insert(wdecay, decay.clone(), true);
            }
            p.insert(format!("layer{l}.out.w"), glorot(w, w, &mut rng), true);
            p.insert(format!("layer{l}.out.b"), zeros(1, w), true);
        }
        p.insert("head.w", zeros(config.patch_shape.time_frames, w), true);
        p.insert("head.b", zeros(1, config.patch_shape.time_frames), true);
        Ok(Self { config, params: p })
    }

    fn check(&self, patches: &PatchSequence) -> Result<()> {
        if patches.patch_shape != self.config.patch_shape || patches.n_mels != self.config.n_mels {
            return Err(Error::shape(
                format!("patch shape {} over {} mels", self.config.patch_shape, self.config.n_mels),
                format!("patch shape {} over {} mels", patches.patch_shape, patches.n_mels),
            ));
        }
        Ok(())
    }

    /// Builds the graph up to per-frame probabilities (`n_frames × 1`).
    pub fn forward_graph(&self, tape: &mut Tape<'_>, patches: &PatchSequence) -> Result<Var> {
        self.check(patches)?;
        let c = &self.config;
        let p = &self.params;
        let n_steps = patches.len() / c.mel_blocks();
        let x = Mat::from_shape_vec((n_steps, c.step_dim()), patches.patches.iter().copied().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        let x = tape.constant(x);
        let w = tape.param(p.expect_id("embed.w")?);
        let b = tape.param(p.expect_id("embed.b")?);
        let proj = tape.matmul_t(x, w);
        let mut h = tape.add_row(proj, b);
        for l in 0..c.layers {
            let mut scans = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let (win, wdecay) = direction_names(l, dir, c.tie_directions);
                let w_in = tape.param(p.expect_id(&win)?);
                let decay = tape.param(p.expect_id(&wdecay)?);
                let u = tape.matmul_t(h, w_in);
                scans.push(tape.scan(u, decay, reverse));
            }
            let s = tape.add(scans[0], scans[1]);
            let wo = tape.param(p.expect_id(&format!("layer{l}.out.w"))?);
            let bo = tape.param(p.expect_id(&format!("layer{l}.out.b"))?);
            let o = tape.matmul_t(s, wo);
            let o = tape.add_row(o, bo);
            let o = tape.tanh(o);
            h = tape.add(h, o);
        }
        let hw = tape.param(p.expect_id("head.w")?);
        let hb = tape.param(p.expect_id("head.b")?);
        let logits = tape.matmul_t(h, hw);
        let logits = tape.add_row(logits, hb);
        let tf = c.patch_shape.time_frames;
        let logits = tape.reshape(logits, n_steps * tf, 1);
        let logits = tape.slice_rows(logits, 0, patches.n_frames);
        Ok(tape.sigmoid(logits))
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(HEADER, meta);
        c.meta["segmenter"] = json!(self.config);
        c.push_params("seg/", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: SegmenterConfig = serde_json::from_value(c.meta["segmenter"].clone())?;
        let params = c.params("seg/");
        let expected = SegmenterModel::new(config, 0)?;
        for (_, name, value) in expected.params.iter() {
            match params.by_name(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => return Err(Error::shape(format!("{name} {:?}", value.dim()), format!("{:?}", v.dim()))),
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, params })
    }
}

/// Inference: one probability per spectrogram frame.
pub fn seg_forward(model: &SegmenterModel, patches: &PatchSequence) -> Result<FrameProbabilities> {
    let mut tape = Tape::new(&model.params);
    let out = model.forward_graph(&mut tape, patches)?;
    let values = tape
        .value(out)
        .iter()
        .map(|&v| v.clamp(BCE_EPS, 1.0 - BCE_EPS))
        .collect();
    Ok(FrameProbabilities {
        values,
        hop_s: patches.hop_s,
    })
}

/// Frame-averaged binary cross-entropy, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &FrameProbabilities, mask: &FrameMask) -> Result<f64> {
    if probs.values.len() != mask.len() {
        return Err(Error::shape(format!("{} mask frames", probs.values.len()), mask.len()));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput("empty frame sequence".into()));
    }
    Ok(bce_value(
        probs.values.iter().copied(),
        mask.values.iter().map(|&v| v as f64),
        BCE_EPS,
    ))
}

/// Loss and parameter gradients for one recording.
pub fn loss_and_grads(model: &SegmenterModel, patches: &PatchSequence, mask: &FrameMask) -> Result<(f64, Grads)> {
    if patches.n_frames != mask.len() {
        return Err(Error::shape(format!("{} mask frames", patches.n_frames), mask.len()));
    }
    let mut tape = Tape::new(&model.params);
    let probs = model.forward_graph(&mut tape, patches)?;
    let loss = tape.bce(probs, &mask.as_f64(), BCE_EPS);
    Ok((tape.scalar(loss), tape.backward(loss)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub train_fraction: f64,
    #[serde(default = "sgd")]
    pub optimizer: OptimizerKind,
    /// Rescale the batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn sgd() -> OptimizerKind {
    OptimizerKind::Sgd
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            steps: 600,
            batch: 8,
            seed: 0,
            train_fraction: 1.0 / 3.0,
            optimizer: OptimizerKind::Sgd,
            clip_norm: Some(1.0),
        }
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainState {
    pub model: SegmenterModel,
    pub optimizer: Optimizer,
    pub step: usize,
    pub curve: Vec<f64>,
}

impl SegTrainState {
    pub fn new(model: SegmenterModel, config: &SegTrainConfig) -> Self {
        Self {
            model,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            step: 0,
            curve: Vec::new(),
        }
    }
}

fn derived_seed(seed: u64, tag: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(n.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Seeded uniform subset of `round(fraction * n)` indices (at least one),
/// returned in ascending order.
pub fn training_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("train_fraction {fraction} not in (0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no training data".into()));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(seed, "subset", n as u64)));
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Runs optimisation steps until `state.step == until`. Each step's batch is
/// drawn from a generator keyed by `(seed, step)`, so a resumed run sees the
/// same batches as an uninterrupted one.
pub fn continue_training(
    data: &[(PatchSequence, FrameMask)],
    config: &SegTrainConfig,
    state: &mut SegTrainState,
    until: usize,
) -> Result<()> {
    let subset = training_subset(data.len(), config.train_fraction, config.seed)?;
    while state.step < until {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, "batch", state.step as u64));
        let mut total = Grads::default();
        let mut loss = 0.0;
        let weight = 1.0 / config.batch as f64;
        for _ in 0..config.batch {
            let &i = subset.choose(&mut rng).expect("non-empty subset");
            let (patches, mask) = &data[i];
            let (l, g) = loss_and_grads(&state.model, patches, mask)?;
            loss += l * weight;
            total.accumulate(g, weight);
        }
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Divergence {
                step: state.step,
                loss,
            });
        }
        if let Some(max) = config.clip_norm {
            let norm = total.norm();
            if norm > max {
                total.scale(max / norm);
            }
        }
        state.optimizer.apply(&mut state.model.params, &total);
        state.curve.push(loss);
        state.step += 1;
    }
    Ok(())
}

/// Trains every encoder and head parameter on a seeded `train_fraction`
/// subset of `data`. Returns the final state, including the loss curve.
pub fn train_segmenter(
    data: &[(PatchSequence, FrameMask)],
    model_config: SegmenterConfig,
    config: &SegTrainConfig,
) -> Result<SegTrainState> {
    if config.batch == 0 {
        return Err(Error::InvalidInput("batch must be positive".into()));
    }
    let model = SegmenterModel::new(model_config, config.seed)?;
    let mut state = SegTrainState::new(model, config);
    continue_training(data, config, &mut state, config.steps)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hysteresis {
    pub on_threshold: f64,
    pub off_threshold: f64,
    pub min_dur_s: f64,
}

impl Default for Hysteresis {
    fn default() -> Self {
        Self {
            on_threshold: 0.6,
            off_threshold: 0.4,
            min_dur_s: 0.03,
        }
    }
}

/// Opens an interval at the first frame with probability `>= on`, closes it
/// at the first later frame below `off`. Frame `t` spans
/// `[t·hop, (t+1)·hop)`.
pub fn mask_to_intervals(probs: &FrameProbabilities, h: &Hysteresis) -> SegmentIntervals {
    let hop = probs.hop_s;
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let close = |start: usize, end: usize, out: &mut Vec<Interval>| {
        let iv = Interval::new(start as f64 * hop, end as f64 * hop, SegmentState::Unlabeled);
        if iv.duration() >= h.min_dur_s - 1e-12 {
            out.push(iv);
        }
    };
    for (t, &p) in probs.values.iter().enumerate() {
        match open {
            None if p >= h.on_threshold => open = Some(t),
            Some(start) if p < h.off_threshold => {
                close(start, t, &mut out);
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        close(start, probs.values.len(), &mut out);
    }
    SegmentIntervals::new(out).expect("frames are increasing")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolicy {
    /// Keep only samples inside intervals, concatenated.
    #[default]
    Excise,
    /// Keep length, silence samples outside intervals.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gated {
    pub recording: PcgRecording,
    /// Set when excision found nothing to keep and returned the input.
    pub passthrough: bool,
}

fn sample_range(iv: &Interval, rate: u32, len: usize) -> (usize, usize) {
    let r = rate as f64;
    let a = ((iv.onset_s * r).round() as usize).min(len);
    let b = ((iv.offset_s * r).round() as usize).min(len);
    (a, b)
}

pub fn gate_audio(recording: &PcgRecording, intervals: &SegmentIntervals, policy: GatePolicy) -> Result<Gated> {
    if !intervals.within(recording.duration_s) {
        return Err(Error::InvalidInput(format!(
            "intervals extend past the {} s recording {}",
            recording.duration_s, recording.recording_id
        )));
    }
    let n = recording.samples.len();
    let rate = recording.sample_rate;
    let samples = match policy {
        GatePolicy::Excise => {
            let mut kept = Vec::new();
            for iv in intervals {
                let (a, b) = sample_range(iv, rate, n);
                kept.extend_from_slice(&recording.samples[a..b]);
            }
            if kept.is_empty() {
                warn!("{}: no heartbeat intervals, audio left ungated", recording.recording_id);
                return Ok(Gated {
                    recording: recording.clone(),
                    passthrough: true,
                });
            }
            kept
        }
        GatePolicy::Zero => {
            let mut out = vec![0.0; n];
            for iv in intervals {
                let (a, b) = sample_range(iv, rate, n);
                out[a..b].copy_from_slice(&recording.samples[a..b]);
            }
            out
        }
    };
    Ok(Gated {
        recording: recording.with_samples(samples, rate)?,
        passthrough: false,
    })
}

/// Fraction of frames where `probs >= 0.5` agrees with the mask.
pub fn frame_accuracy(probs: &FrameProbabilities, mask: &FrameMask) -> f64 {
    let hits = probs
        .values
        .iter()
        .zip(&mask.values)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    hits as f64 / mask.len().max(1) as f64
}

/// For every reference onset and offset, the distance in seconds to the
/// nearest predicted boundary of the same kind. Empty when either side has
/// no intervals.
pub fn boundary_errors(predicted: &SegmentIntervals, reference: &SegmentIntervals) -> Vec<f64> {
    if predicted.is_empty() {
        return Vec::new();
    }
    let nearest = |x: f64, pick: fn(&Interval) -> f64| {
        predicted
            .iter()
            .map(|iv| (pick(iv) - x).abs())
            .fold(f64::INFINITY, f64::min)
    };
    let mut out = Vec::with_capacity(reference.len() * 2);
    for iv in reference {
        out.push(nearest(iv.onset_s, |p| p.onset_s));
        out.push(nearest(iv.offset_s, |p| p.offset_s));
    }
    out
}

/// Patches of `recording` with frame targets derived from its annotated
/// intervals.
pub fn labelled_features(
    recording: &PcgRecording,
    intervals: &SegmentIntervals,
    target_rate: u32,
    mel: &MelParams,
    shape: PatchShape,
    mode: LabelMode,
) -> Result<(PatchSequence, FrameMask)> {
    let patches = features(&recording.samples, recording.sample_rate, target_rate, mel, shape)?;
    let mask = frame_labels(intervals, patches.n_frames, patches.hop_s, mode);
    Ok((patches, mask))
}

/// Segments and gates one recording with a trained model.
pub fn segment_and_gate(
    model: &SegmenterModel,
    recording: &PcgRecording,
    target_rate: u32,
    mel: &MelParams,
    hysteresis: &Hysteresis,
    policy: GatePolicy,
) -> Result<(SegmentIntervals, Gated)> {
    let patches = features(&recording.samples, recording.sample_rate, target_rate, mel, model.config.patch_shape)?;
    let probs = seg_forward(model, &patches)?;
    let intervals = mask_to_intervals(&probs, hysteresis);
    // Frames may overrun the clip by less than one hop.
    let clipped: Vec<Interval> = intervals
        .iter()
        .filter(|iv| iv.onset_s < recording.duration_s)
        .map(|iv| Interval::new(iv.onset_s, iv.offset_s.min(recording.duration_s), iv.state))
        .collect();
    let intervals = SegmentIntervals::new(clipped)?;
    let gated = gate_audio(recording, &intervals, policy)?;
    Ok((intervals, gated))
}
