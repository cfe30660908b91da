//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Pass a criterion number (or several) to run a
//! subset: `cargo test -p pcg-cli --test acceptance -- 2 4`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use pcg_core::audio_lm::{
    answer_accuracy, continue_finetune, loss_and_grads as lm_loss_and_grads, lora_merge, lora_wrap, next_token_loss,
    render_prompt, AudioLm, AudioLmConfig, FinetuneConfig, FinetuneState, LmExample, LoraConfig, Tokenizer,
};
use pcg_core::dsp::{features, FrameMask, LabelMode, MelParams, PatchSequence, PatchShape};
use pcg_core::eval::{
    accuracy_by_task, binary_pairs, class_precision, render_report, weighted_accuracy, EvalDataset, EvalReport,
    PredictionEntry, PredictionLog, SegMode, WaccWeights,
};
use pcg_core::ingest::{
    synth_cohort, synthesize_pcg, AnnotatedRecording, BinaryLabel, CohortConfig, MurmurClass, SynthSpec,
};
use pcg_core::segmenter::{
    self, bce_loss, boundary_errors, frame_accuracy, labelled_features, mask_to_intervals, seg_forward,
    train_segmenter, FrameProbabilities, Hysteresis, SegTrainConfig, SegmenterConfig, SegmenterModel,
};
use pcg_core::tasks::{build_dataset, build_mc_item, item_seed, stratified_split, Side, TaskId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn perturb(params: &mut pcg_core::nn::ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

/// `n` random patches of shape (2, 4).
fn toy_patches(n: usize, seed: u64) -> PatchSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchSequence {
        patches: Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0..1.0)),
        patch_shape: PatchShape::new(2, 4),
        frame_span: (0..n).map(|i| (2 * i, 2 * i + 1)).collect(),
        n_frames: 2 * n,
        n_mels: 4,
        hop_s: 0.01,
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

const H: f64 = 1e-5;

fn loss_correctness() -> Outcome {
    let mut seg = SegmenterModel::new(
        SegmenterConfig {
            layers: 2,
            width: 6,
            n_mels: 4,
            patch_shape: PatchShape::new(2, 4),
            tie_directions: false,
        },
        1,
    )
    .map_err(err)?;
    let seq = toy_patches(5, 2);
    let mask = FrameMask {
        values: vec![0, 1, 1, 0, 0, 1, 1, 1, 0, 1],
        hop_s: 0.01,
    };
    let half = bce_loss(&seg_forward(&seg, &seq).map_err(err)?, &mask).map_err(err)?;
    let flat = FrameProbabilities {
        values: vec![0.5; 10],
        hop_s: 0.01,
    };
    let flat_loss = bce_loss(&flat, &mask).map_err(err)?;
    ensure!((half - 2f64.ln()).abs() <= 1e-9, "untrained segmenter bce {half}");
    ensure!((flat_loss - 2f64.ln()).abs() <= 1e-9, "bce(0.5) {flat_loss}");

    perturb(&mut seg.params, 0.5, 3);
    let (_, grads) = segmenter::loss_and_grads(&seg, &seq, &mask).map_err(err)?;
    let mut worst_seg: f64 = 0.0;
    let mut n_seg = 0;
    let ids: Vec<_> = seg.params.ids().collect();
    for id in ids {
        let g = grads.get(id).ok_or("segmenter parameter without gradient")?.clone();
        for ((r, c), &a) in g.indexed_iter() {
            let orig = seg.params.get(id)[[r, c]];
            seg.params.get_mut(id)[[r, c]] = orig + H;
            let up = bce_loss(&seg_forward(&seg, &seq).map_err(err)?, &mask).map_err(err)?;
            seg.params.get_mut(id)[[r, c]] = orig - H;
            let down = bce_loss(&seg_forward(&seg, &seq).map_err(err)?, &mask).map_err(err)?;
            seg.params.get_mut(id)[[r, c]] = orig;
            worst_seg = worst_seg.max(rel_err(a, (up - down) / (2.0 * H)));
            n_seg += 1;
        }
    }

    let config = AudioLmConfig {
        n_mels: 4,
        patch_shape: PatchShape::new(2, 4),
        enc_layers: 1,
        enc_width: 8,
        enc_heads: 2,
        pool_stride: 2,
        width: 16,
        heads: 2,
        dec_layers: 1,
        ff_mult: 2,
        positional: true,
    };
    let mut lm = AudioLm::new(config, Tokenizer::default(), 4).map_err(err)?;
    perturb(&mut lm.params, 0.2, 5);
    let audio = toy_patches(4, 6);
    let tokens = lm.tokenizer.tokenize("s1 s2");
    let sup = [0, 1, 1, 1, 1];
    let (_, grads) = lm_loss_and_grads(&lm, &audio, &tokens, &sup, true).map_err(err)?;
    let grads = grads.ok_or("no gradients")?;
    let mut worst_lm: f64 = 0.0;
    let mut n_lm = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<_> = lm.params.ids().collect();
    for id in ids {
        let name = lm.params.name(id).to_string();
        let Some(g) = grads.get(id).cloned() else {
            continue;
        };
        let (rows, cols) = g.dim();
        for _ in 0..16 {
            let (r, c) = if name == "dec.tok" {
                (tokens.ids[rng.random_range(0..tokens.ids.len() - 1)], rng.random_range(0..cols))
            } else {
                (rng.random_range(0..rows), rng.random_range(0..cols))
            };
            let orig = lm.params.get(id)[[r, c]];
            lm.params.get_mut(id)[[r, c]] = orig + H;
            let up = next_token_loss(&lm, &audio, &tokens, &sup).map_err(err)?;
            lm.params.get_mut(id)[[r, c]] = orig - H;
            let down = next_token_loss(&lm, &audio, &tokens, &sup).map_err(err)?;
            lm.params.get_mut(id)[[r, c]] = orig;
            worst_lm = worst_lm.max(rel_err(g[[r, c]], (up - down) / (2.0 * H)));
            n_lm += 1;
        }
    }
    ensure!(worst_seg <= 1e-4, "bce gradient relative error {worst_seg:.2e}");
    ensure!(worst_lm <= 1e-4, "next-token gradient relative error {worst_lm:.2e}");
    Ok(format!(
        "bce(0.5) = ln 2; max rel err bce {worst_seg:.1e} ({n_seg} coords), next-token {worst_lm:.1e} ({n_lm} coords)"
    ))
}

fn segmenter_efficacy() -> Outcome {
    let mel = MelParams::default();
    let config = SegmenterConfig::default();
    let mut data = Vec::new();
    for seed in 0..200u64 {
        let (rec, intervals, _) = synthesize_pcg(&SynthSpec::sample(seed, 10.0)).map_err(err)?;
        let (patches, mask) =
            labelled_features(&rec, &intervals, 16000, &mel, config.patch_shape, LabelMode::Strict).map_err(err)?;
        data.push((patches, mask, intervals));
    }
    let train: Vec<_> = data[..150].iter().map(|(p, m, _)| (p.clone(), m.clone())).collect();
    let tc = SegTrainConfig::default();
    let state = train_segmenter(&train, config, &tc).map_err(err)?;
    let mut acc = 0.0;
    let mut errors = Vec::new();
    let held_out = &data[150..];
    for (patches, mask, intervals) in held_out {
        let probs = seg_forward(&state.model, patches).map_err(err)?;
        acc += frame_accuracy(&probs, mask);
        let predicted = mask_to_intervals(&probs, &Hysteresis::default());
        let truth = intervals.filtered(|s| LabelMode::Strict.is_occurrence(s));
        errors.extend(boundary_errors(&predicted, &truth).into_iter().map(|e| e / probs.hop_s));
    }
    acc /= held_out.len() as f64;
    ensure!(!errors.is_empty(), "no boundaries matched");
    errors.sort_by(f64::total_cmp);
    let median = errors[errors.len() / 2];
    let detail = format!(
        "held-out frame accuracy {acc:.4} (>= 0.95), median boundary error {median:.2} hops (<= 2), trained on {} of 150",
        segmenter::training_subset(150, tc.train_fraction, tc.seed).map_err(err)?.len()
    );
    ensure!(acc >= 0.95 && median <= 2.0, "{detail}");
    Ok(detail)
}

/// 32 systolic-grading items spread evenly over the six grades, each on the
/// first two seconds of a distinct synthetic recording.
fn memorization_items(shape: PatchShape) -> Result<Vec<LmExample>, String> {
    let mel = MelParams::default();
    let mut recs = Vec::new();
    for seed in 0..400u64 {
        let (recording, intervals, annotation) = synthesize_pcg(&SynthSpec::sample(seed, 10.0)).map_err(err)?;
        recs.push(AnnotatedRecording {
            murmur_audible: annotation.murmur_class == MurmurClass::Present,
            recording,
            intervals,
            annotation,
            audio_path: None,
        });
    }
    let grades = TaskId::SysGrading.vocabulary().labels;
    let mut used = vec![false; recs.len()];
    let mut data = Vec::new();
    while data.len() < 32 {
        let before = data.len();
        for g in &grades {
            let Some(i) = (0..recs.len())
                .find(|&i| !used[i] && recs[i].annotation.systolic.grading.as_deref() == Some(g.as_str()))
            else {
                continue;
            };
            used[i] = true;
            let ar = &recs[i];
            let seed = item_seed(7, &ar.recording.patient_id, &ar.recording.recording_id, TaskId::SysGrading);
            let item = build_mc_item(ar, TaskId::SysGrading, seed).map_err(err)?.ok_or("no grading item")?;
            let rate = ar.recording.sample_rate;
            let crop = &ar.recording.samples[..(2 * rate as usize).min(ar.recording.samples.len())];
            let patches = features(crop, rate, 16000, &mel, shape).map_err(err)?;
            data.push(LmExample { patches, item });
            if data.len() == 32 {
                break;
            }
        }
        ensure!(data.len() > before, "ran out of graded recordings at {}", data.len());
    }
    Ok(data)
}

fn toy_lm_config(width: usize, heads: usize, dec_layers: usize) -> AudioLmConfig {
    AudioLmConfig {
        n_mels: 64,
        patch_shape: PatchShape::new(4, 64),
        enc_layers: 1,
        enc_width: 32,
        enc_heads: 2,
        pool_stride: 4,
        width,
        heads,
        dec_layers,
        ff_mult: 2,
        positional: true,
    }
}

fn all_roles() -> Vec<String> {
    ["q", "k", "v", "o", "ff_in", "ff_out"].iter().map(|s| s.to_string()).collect()
}

/// Singular values by one-sided Jacobi rotations, descending.
fn singular_values(m: &Array2<f64>) -> Vec<f64> {
    let mut a = m.clone();
    let n = a.ncols();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).dot(&a.column(p));
                let beta = a.column(q).dot(&a.column(q));
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.nrows() {
                    let (x, y) = (a[[i, p]], a[[i, q]]);
                    a[[i, p]] = c * x - s * y;
                    a[[i, q]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn lora_contract() -> Outcome {
    let data: Vec<LmExample> = memorization_items(PatchShape::new(4, 64))?.into_iter().take(8).collect();
    let base = AudioLm::new(toy_lm_config(32, 2, 1), Tokenizer::default(), 3).map_err(err)?;
    let rank = 2;
    let lora = LoraConfig {
        rank,
        alpha: 4.0,
        targets: all_roles(),
        train_projector: false,
    };
    let wrapped = lora_wrap(base.clone(), &lora, 4).map_err(err)?;
    let ids = wrapped.tokenizer.tokenize(&render_prompt(&data[0].item)).ids;
    let max_diff = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let identity = max_diff(
        &base.token_logits(&data[0].patches, &ids).map_err(err)?,
        &wrapped.token_logits(&data[0].patches, &ids).map_err(err)?,
    );
    ensure!(identity <= 1e-6, "zero-init adapters change logits by {identity:.2e}");

    let frozen_before = wrapped.params.frozen_checksum();
    let tc = FinetuneConfig {
        lr: 1e-2,
        steps: 30,
        batch: 4,
        ..FinetuneConfig::default()
    };
    let mut state = FinetuneState::new(wrapped, &tc);
    continue_finetune(&data, &tc, &mut state, tc.steps).map_err(err)?;
    let trained = state.model;
    ensure!(trained.params.frozen_checksum() == frozen_before, "frozen checksum changed during training");
    for (_, name, value) in base.params.iter() {
        ensure!(trained.params.by_name(name) == Some(value), "base tensor {name} moved");
    }

    let merged = lora_merge(trained.clone()).map_err(err)?;
    let mut merge_diff: f64 = 0.0;
    for ex in &data {
        let ids = trained.tokenizer.tokenize(&render_prompt(&ex.item)).ids;
        merge_diff = merge_diff.max(max_diff(
            &trained.token_logits(&ex.patches, &ids).map_err(err)?,
            &merged.token_logits(&ex.patches, &ids).map_err(err)?,
        ));
    }
    ensure!(merge_diff <= 1e-5, "merged logits differ by {merge_diff:.2e}");

    let mut worst_rank = 0;
    let mut layers = 0;
    for (name, _) in base.linear_names() {
        let w = format!("{name}.w");
        let delta = merged.params.by_name(&w).ok_or("missing merged weight")? - base.params.by_name(&w).ok_or("missing base weight")?;
        let sv = singular_values(&delta);
        ensure!(sv[0] > 0.0, "{name}: adapter update is zero");
        let numeric_rank = sv.iter().filter(|&&s| s > 1e-8 * sv[0]).count();
        ensure!(numeric_rank <= rank, "{name}: rank {numeric_rank} > {rank} ({sv:?})");
        worst_rank = worst_rank.max(numeric_rank);
        layers += 1;
    }
    Ok(format!(
        "identity {identity:.1e}, merge {merge_diff:.1e}, max rank(dW) {worst_rank} <= {rank} over {layers} layers, frozen checksum unchanged"
    ))
}

fn memorization() -> Outcome {
    let config = toy_lm_config(64, 4, 2);
    let data = memorization_items(config.patch_shape)?;
    let lora = LoraConfig {
        rank: 8,
        alpha: 16.0,
        targets: all_roles(),
        train_projector: true,
    };
    let initial = lora_wrap(AudioLm::new(config, Tokenizer::default(), 0).map_err(err)?, &lora, 1).map_err(err)?;

    let frozen = FinetuneConfig {
        lr: 0.0,
        steps: 50,
        batch: 8,
        ..FinetuneConfig::default()
    };
    let mut still = FinetuneState::new(initial.clone(), &frozen);
    continue_finetune(&data, &frozen, &mut still, frozen.steps).map_err(err)?;
    let chance = answer_accuracy(&still.model, &data).map_err(err)?;
    let n = data.len() as f64;
    let sigma = ((1.0 / 6.0) * (5.0 / 6.0) / n).sqrt();
    ensure!(
        (chance - 1.0 / 6.0).abs() <= 3.0 * sigma,
        "lr = 0 accuracy {chance:.3} outside 1/6 ± {:.3}",
        3.0 * sigma
    );

    let tc = FinetuneConfig {
        lr: 3e-3,
        steps: 2000,
        batch: 8,
        seed: 0,
        cosine: true,
        ..FinetuneConfig::default()
    };
    let mut state = FinetuneState::new(initial, &tc);
    let mut acc = 0.0;
    while state.step < tc.steps {
        let next = state.step + 50;
        continue_finetune(&data, &tc, &mut state, next).map_err(err)?;
        acc = answer_accuracy(&state.model, &data).map_err(err)?;
        if acc == 1.0 {
            break;
        }
    }
    let detail = format!(
        "training accuracy {acc:.3} at step {} (loss {:.4}); lr = 0 accuracy {chance:.3} within 1/6 ± {:.3}",
        state.step,
        state.curve.last().copied().unwrap_or(f64::NAN),
        3.0 * sigma
    );
    ensure!(acc == 1.0, "{detail}");
    Ok(detail)
}

/// Upper 1% point of the chi-squared distribution with 5 degrees of freedom.
const CHI2_5_CRIT_01: f64 = 15.086;

fn dataset_builder() -> Outcome {
    let config = CohortConfig {
        n_patients: 100,
        class_mix: [0.19, 0.74, 0.07],
        seed: 5,
        ..CohortConfig::default()
    };
    let recordings: Vec<_> = synth_cohort(&config).map_err(err)?.into_iter().flat_map(|p| p.recordings).collect();
    let roster: Vec<_> = recordings
        .iter()
        .map(|r| (r.recording.patient_id.clone(), r.annotation.murmur_class))
        .collect::<BTreeMap<_, _>>()
        .into_iter()
        .collect();
    let mut per_class = BTreeMap::new();
    for (_, c) in &roster {
        *per_class.entry(*c).or_insert(0usize) += 1;
    }
    ensure!(
        per_class[&MurmurClass::Absent] == 74 && per_class[&MurmurClass::Present] == 19 && per_class[&MurmurClass::Unknown] == 7,
        "roster mix {per_class:?}"
    );

    let mut worst_dev: f64 = 0.0;
    for seed in 0..100 {
        let m = stratified_split(&roster, 0.75, seed).map_err(err)?;
        ensure!(m.train_patients.is_disjoint(&m.test_patients), "seed {seed}: patient in both sides");
        ensure!(m.train_patients.len() + m.test_patients.len() == roster.len(), "seed {seed}: patients dropped");
        for (class, &n) in &per_class {
            let t = roster.iter().filter(|(p, c)| c == class && m.train_patients.contains(p)).count();
            let dev = (t as f64 - 0.75 * n as f64).abs();
            worst_dev = worst_dev.max(dev);
            ensure!(dev < 1.0, "seed {seed}: {class:?} train {t} of {n}");
        }
        for side in [Side::Train, Side::Test] {
            let built = build_dataset(&recordings, &m, side, seed).map_err(err)?;
            let patients = match side {
                Side::Train => &m.train_patients,
                Side::Test => &m.test_patients,
            };
            for r in &built.records {
                ensure!(patients.contains(&r.item.recording_ref.patient_id), "seed {seed}: leaked item");
            }
        }
    }

    let mut counts = [0usize; 6];
    let mut items = 0;
    let m = stratified_split(&roster, 0.75, 0).map_err(err)?;
    for side in [Side::Train, Side::Test] {
        for r in build_dataset(&recordings, &m, side, 0).map_err(err)?.records {
            let item = r.item;
            ensure!(item.options.len() == 6, "{} options", item.options.len());
            ensure!(item.gold_index < 6, "gold index {}", item.gold_index);
            let gold = pcg_core::tasks::gold_label(
                recordings
                    .iter()
                    .find(|x| x.recording.recording_id == item.recording_ref.recording_id)
                    .ok_or("item without recording")?,
                item.task_id,
            )
            .ok_or("item for an inapplicable task")?;
            ensure!(item.options[item.gold_index] == gold, "gold not at gold_index");
            counts[item.gold_index] += 1;
            items += 1;
        }
    }
    let expected = items as f64 / 6.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ensure!(chi2 < CHI2_5_CRIT_01, "gold positions {counts:?}, chi2 {chi2:.2}");
    Ok(format!(
        "mix 74/19/7, max |train - 0.75n| {worst_dev:.2}, no leakage over 100 seeds, {items} items, gold positions {counts:?} chi2 {chi2:.2} < {CHI2_5_CRIT_01}"
    ))
}

fn random_entry(rng: &mut impl Rng, i: usize) -> PredictionEntry {
    let classes = ["Present", "Unknown", "Absent"];
    let task = TaskId::ALL[rng.random_range(0..TaskId::ALL.len())];
    let options: Vec<String> = if task == TaskId::MurmurPresence {
        (0..6).map(|k| classes[k % 3].to_string()).collect()
    } else {
        (0..6).map(|k| format!("L{}", (k + rng.random_range(0..3)) % 4)).collect()
    };
    let gold = options[rng.random_range(0..6)].clone();
    let pick = rng.random_range(0..6);
    let mut scores: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..-1.0)).collect();
    scores[pick] = 0.0;
    PredictionEntry {
        item_ref: format!("r{i}"),
        task_id: task,
        gold,
        predicted: options[pick].clone(),
        options,
        scores,
    }
}

fn log_of(entries: Vec<PredictionEntry>, dataset: EvalDataset) -> PredictionLog {
    PredictionLog {
        model_tag: "m".into(),
        config_hash: "c".into(),
        mode: SegMode::Ns,
        dataset,
        entries,
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.random_range(1..60);
        let log = log_of((0..n).map(|i| random_entry(&mut rng, i)).collect(), EvalDataset::CircorTest);

        let acc = accuracy_by_task(&log).map_err(err)?;
        for t in TaskId::ALL {
            let (mut hit, mut tot) = (0usize, 0usize);
            for e in log.entries.iter().filter(|e| e.task_id == t) {
                tot += 1;
                hit += usize::from(e.gold == e.predicted);
            }
            match acc.get(&t) {
                None => ensure!(tot == 0, "trial {trial}: {t} missing"),
                Some(&a) => ensure!(a == hit as f64 / tot as f64, "trial {trial}: {t} {a} vs {hit}/{tot}"),
            }
        }

        let weights = WaccWeights {
            present: rng.random_range(1..10) as f64,
            unknown: rng.random_range(1..10) as f64,
            absent: rng.random_range(1..10) as f64,
        };
        let (mut num, mut den) = (0.0, 0.0);
        for e in log.entries.iter().filter(|e| e.task_id == TaskId::MurmurPresence) {
            let w = match e.gold.as_str() {
                "Present" => weights.present,
                "Unknown" => weights.unknown,
                _ => weights.absent,
            };
            den += w;
            if e.gold == e.predicted {
                num += w;
            }
        }
        match weighted_accuracy(&log, &weights) {
            Ok(w) => ensure!(w == num / den, "trial {trial}: W.acc {w} vs {}", num / den),
            Err(_) => ensure!(den == 0.0, "trial {trial}: W.acc failed with {den} weight"),
        }

        let presence: Vec<_> = log.entries.iter().filter(|e| e.task_id == TaskId::MurmurPresence).cloned().collect();
        let binary = log_of(
            presence
                .into_iter()
                .map(|mut e| {
                    e.gold = if e.gold == "Absent" { "normal" } else { "abnormal" }.to_string();
                    e
                })
                .collect(),
            EvalDataset::PascalA,
        );
        let pairs = binary_pairs(&binary).map_err(err)?;
        for (class, name) in [(BinaryLabel::Normal, "normal"), (BinaryLabel::Abnormal, "abnormal")] {
            let mut predicted = 0usize;
            let mut tp = 0usize;
            for e in &binary.entries {
                let p = if e.predicted == "Absent" { "normal" } else { "abnormal" };
                if p == name {
                    predicted += 1;
                    tp += usize::from(e.gold == name);
                }
            }
            let oracle = (predicted > 0).then(|| tp as f64 / predicted as f64);
            ensure!(class_precision(&pairs, class) == oracle, "trial {trial}: {name} precision");
        }
    }

    let mk = |gold: &str, pred: &str| PredictionEntry {
        item_ref: "x".into(),
        task_id: TaskId::MurmurPresence,
        gold: gold.into(),
        predicted: pred.into(),
        options: vec!["Present".into(), "Absent".into()],
        scores: vec![0.0, 0.0],
    };
    let mut worked: Vec<_> = (0..2).map(|_| mk("Present", "Absent")).collect();
    worked.extend((0..8).map(|_| mk("Absent", "Absent")));
    let w = weighted_accuracy(&log_of(worked, EvalDataset::CircorTest), &WaccWeights::default()).map_err(err)?;
    ensure!(w == 8.0 / 18.0, "worked example {w}");

    let unit = WaccWeights {
        present: 1.0,
        unknown: 1.0,
        absent: 1.0,
    };
    for _ in 0..200 {
        let n = rng.random_range(1..80);
        let entries: Vec<_> = (0..n)
            .map(|i| {
                let mut e = random_entry(&mut rng, i);
                e.task_id = TaskId::MurmurPresence;
                e.options = ["Present", "Unknown", "Absent"].iter().map(|s| s.to_string()).collect();
                e.gold = e.options[rng.random_range(0..3)].clone();
                e.predicted = e.options[rng.random_range(0..3)].clone();
                e.scores.truncate(3);
                e
            })
            .collect();
        let log = log_of(entries, EvalDataset::CircorTest);
        let plain = accuracy_by_task(&log).map_err(err)?[&TaskId::MurmurPresence];
        ensure!(weighted_accuracy(&log, &unit).map_err(err)? == plain, "(1,1,1) weights differ from accuracy");
    }
    Ok("1000 random logs match recounts; 8/18 exact; (1,1,1) weights equal accuracy".into())
}

fn fixture(name: &str) -> Result<PredictionLog, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let log = PredictionLog::from_jsonl(&text).map_err(err)?;
    log.validate().map_err(err)?;
    Ok(log)
}

fn fixture_reproduction() -> Outcome {
    let circor = fixture("circor_presence.jsonl")?;
    let wacc = weighted_accuracy(&circor, &WaccWeights::default()).map_err(err)?;
    ensure!((wacc - 0.756).abs() <= 0.0005, "W.acc {wacc:.4}");

    let pascal = fixture("pascal_b.jsonl")?;
    let pairs = binary_pairs(&pascal).map_err(err)?;
    let normal = class_precision(&pairs, BinaryLabel::Normal).ok_or("no normal predictions")?;
    let abnormal = class_precision(&pairs, BinaryLabel::Abnormal).ok_or("no abnormal predictions")?;
    ensure!((normal - 0.753).abs() <= 0.0005, "Pascal B normal precision {normal:.4}");
    ensure!((abnormal - 0.625).abs() <= 0.0005, "Pascal B abnormal precision {abnormal:.4}");

    let weights = WaccWeights::default();
    let reports: Vec<EvalReport> = [&circor, &pascal]
        .iter()
        .map(|l| pcg_core::eval::evaluate("fixture", l, &weights))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let rendered = render_report(&reports).map_err(err)?;
    let tables = pcg_core::eval::parse_report(&rendered.json).map_err(err)?.tables;
    let features = ["Timing", "Shape", "Grading", "Pitch", "Quality"];
    ensure!(tables.systolic.columns == features, "systolic columns {:?}", tables.systolic.columns);
    let mut dia = features.to_vec();
    dia.push("Murmur W.acc");
    ensure!(tables.diastolic.columns == dia, "diastolic columns {:?}", tables.diastolic.columns);
    let zs = [
        "CinC 2016 Accuracy",
        "Pascal A Normal Precision",
        "Pascal A Abnormal Precision",
        "Pascal B Normal Precision",
        "Pascal B Abnormal Precision",
    ];
    ensure!(tables.zero_shot.columns == zs, "zero-shot columns {:?}", tables.zero_shot.columns);
    for t in [&tables.systolic, &tables.diastolic, &tables.zero_shot] {
        for row in &t.rows {
            ensure!(row.cells.len() == t.columns.len(), "{}: ragged row {}", t.title, row.system);
        }
    }
    let header_lines = [
        "System | Timing | Shape | Grading | Pitch | Quality",
        "System | Timing | Shape | Grading | Pitch | Quality | Murmur W.acc",
        "System | CinC 2016 % Accuracy | Pascal A Normal / Abnormal Precision | Pascal B Normal / Abnormal Precision",
    ];
    let squeezed: Vec<String> = rendered
        .text
        .lines()
        .map(|l| l.split('|').map(str::trim).collect::<Vec<_>>().join(" | "))
        .collect();
    for h in header_lines {
        ensure!(squeezed.iter().any(|l| l == h), "missing header `{h}`");
    }
    let fixture_row = squeezed.iter().find(|l| l.starts_with("fixture WS") && l.contains('%') && !l.contains("W.acc"));
    ensure!(
        squeezed.iter().any(|l| l.starts_with("fixture WS") && l.ends_with("| 75.6")),
        "W.acc cell missing"
    );
    ensure!(
        fixture_row.is_some_and(|l| l.ends_with("| 75.3 / 62.5 %")),
        "Pascal B cell missing: {fixture_row:?}"
    );
    Ok(format!(
        "W.acc {wacc:.4}, Pascal B precision {normal:.4} / {abnormal:.4}, table columns match"
    ))
}

const PIPELINE: &str = r#"
seed = 3
[synth]
binary_recordings = 8
[synth.cohort]
n_patients = 24
[segmenter]
checkpoint_every = 20
[segmenter.train]
steps = 40
batch = 4
[lm]
max_audio_s = 2.0
[lm.model]
patch_shape = { time_frames = 4, mel_bins = 64 }
enc_layers = 1
enc_width = 32
enc_heads = 2
width = 32
heads = 2
dec_layers = 1
ff_mult = 2
[lm.train]
steps = 40
batch = 4
"#;

fn pipeline_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    fs::write(dir.join("run.toml"), PIPELINE).map_err(err)?;
    let steps: [&[&str]; 8] = [
        &["synth"],
        &["build-dataset"],
        &["train-seg"],
        &["train-lm"],
        &["eval", "--mode", "ns"],
        &["eval", "--mode", "ws"],
        &["eval", "--mode", "ws", "--dataset", "pascal_b"],
        &["report"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_pcg"))
            .current_dir(dir)
            .env_remove("PCG_DATA_ROOT")
            .env("RUST_LOG", "warn")
            .args(["--config", "run.toml"])
            .args(args)
            .output()
            .map_err(err)?;
        ensure!(
            out.status.success(),
            "pcg {args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let read = |f: &str| fs::read(dir.join("runs/report").join(f)).map_err(err);
    Ok((read("report.txt")?, read("report.json")?))
}

fn pipeline_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    ensure!(first.0 == second.0, "report.txt differs between runs");
    ensure!(first.1 == second.1, "report.json differs between runs");
    Ok(format!(
        "two end-to-end runs give identical report.txt ({} B) and report.json ({} B)",
        first.0.len(),
        first.1.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("loss correctness", loss_correctness),
        ("segmenter efficacy", segmenter_efficacy),
        ("LoRA contract", lora_contract),
        ("memorization", memorization),
        ("dataset builder", dataset_builder),
        ("metric oracles", metric_oracles),
        ("fixture reproduction", fixture_reproduction),
        ("pipeline determinism", pipeline_determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {k} {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {k} {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
