//! Audio-conditioned causal language model with low-rank adapters and
//! multiple-choice scoring.

mod finetune;
mod model;
mod scoring;
mod tokenizer;

pub use finetune::{answer_accuracy, continue_finetune, finetune, FinetuneConfig, FinetuneState, LmExample};
pub use model::{lora_merge, lora_wrap, sinusoid, AudioLm, AudioLmConfig, LoraConfig, LoraSpec, Role, HEADER};
pub use scoring::{
    answer, argmax, encode_answer, greedy_decode, loss_and_grads, next_token_logprobs, next_token_loss,
    render_prompt, score_options,
};
pub use tokenizer::{TokenSequence, Tokenizer, BOS, EOS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{PatchSequence, PatchShape};
    use crate::nn::{Mat, Tape};
    use crate::tasks::{McItem, RecordingRef, TaskId};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> AudioLmConfig {
        AudioLmConfig {
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
        }
    }

    fn tiny_model(seed: u64) -> AudioLm {
        AudioLm::new(tiny_config(), Tokenizer::default(), seed).unwrap()
    }

    fn patches(n: usize, seed: u64) -> PatchSequence {
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

    fn item(options: &[&str], gold: usize) -> McItem {
        McItem {
            task_id: TaskId::SysPitch,
            recording_ref: RecordingRef {
                patient_id: "p".into(),
                recording_id: "p_AV".into(),
                audio_path: None,
            },
            question: "Pitch?".into(),
            options: options.iter().map(|s| s.to_string()).collect(),
            gold_index: gold,
            paraphrase_id: 0,
            rng_seed: 0,
        }
    }

    fn perturb_all(model: &mut AudioLm, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let mut c = tiny_config();
        c.pool_stride = 1;
        let m = AudioLm::new(c, Tokenizer::default(), 0).unwrap();
        assert_eq!(m.encode_audio(&patches(7, 1)).unwrap().dim(), (7, 16));
        let m2 = tiny_model(0);
        assert_eq!(m2.encode_audio(&patches(10, 1)).unwrap().nrows(), 5);
        let mut z1 = patches(6, 1);
        z1.patches.fill(0.0);
        let mut z2 = patches(6, 2);
        z2.patches.fill(0.0);
        assert_eq!(m2.encode_audio(&z1).unwrap(), m2.encode_audio(&z2).unwrap());
        let wrong = PatchSequence {
            patch_shape: PatchShape::new(1, 4),
            ..patches(4, 0)
        };
        assert!(matches!(m2.encode_audio(&wrong), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn loss_definitions() {
        let m = tiny_model(1);
        let a = patches(4, 3);
        let tokens = m.tokenizer.tokenize("abcd");
        let logits = m.token_logits(&a, &tokens.ids).unwrap();
        let row = logits.row(2);
        let max = row.fold(f64::NEG_INFINITY, |x, &v| x.max(v));
        let p = (row[tokens.ids[2]] - max).exp() / row.iter().map(|v| (v - max).exp()).sum::<f64>();
        let loss = next_token_loss(&m, &a, &tokens, &[0, 0, 1, 0]).unwrap();
        assert!((loss + p.ln()).abs() < 1e-10);
        assert!(next_token_loss(&m, &a, &tokens, &[0, 0, 0, 0]).is_err());
        assert!(next_token_loss(&m, &a, &tokens, &[0, 1]).is_err());

        let mut uniform = m.clone();
        let head = uniform.params.expect_id("dec.head.w").unwrap();
        uniform.params.get_mut(head).fill(0.0);
        let v = uniform.tokenizer.vocab_size() as f64;
        let l = next_token_loss(&uniform, &a, &tokens, &[1, 1, 1, 1]).unwrap();
        assert!((l - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_token_answer_worked_example() {
        let store = crate::nn::ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(ndarray::array![[0.0, 0.0, -800.0, -800.0], [0.0, 0.0, 0.0, 0.0]]);
        let l = tape.cross_entropy(logits, &[0, 0]);
        let oracle = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((tape.scalar(l) - oracle).abs() < 1e-12);
        assert!((oracle - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn gradient_check_covers_encoder_and_decoder() {
        let mut m = tiny_model(2);
        perturb_all(&mut m, 0.2, 3);
        let a = patches(4, 5);
        let tokens = m.tokenizer.tokenize("xyzw");
        let mask = [0, 1, 1, 1];
        let (_, grads) = loss_and_grads(&m, &a, &tokens, &mask, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        let mut checked_enc = false;
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let name = m.params.name(id).to_string();
            let Some(g) = grads.get(id).cloned() else {
                // Rows of the embedding table for unused tokens get nothing.
                assert!(name == "dec.tok" || name == "dec.head.w", "{name} has no gradient");
                continue;
            };
            checked_enc |= name.starts_with("enc.");
            let (rows, cols) = g.dim();
            for _ in 0..12 {
                let (r, c) = if name == "dec.tok" {
                    (tokens.ids[rng.random_range(0..3)], rng.random_range(0..cols))
                } else {
                    (rng.random_range(0..rows), rng.random_range(0..cols))
                };
                let orig = m.params.get(id)[[r, c]];
                m.params.get_mut(id)[[r, c]] = orig + h;
                let up = next_token_loss(&m, &a, &tokens, &mask).unwrap();
                m.params.get_mut(id)[[r, c]] = orig - h;
                let down = next_token_loss(&m, &a, &tokens, &mask).unwrap();
                m.params.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let an = g[[r, c]];
                worst = worst.max((an - numeric).abs() / (an.abs() + numeric.abs()).max(1e-6));
            }
        }
        assert!(checked_enc);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn causality() {
        let m = tiny_model(4);
        let a = patches(6, 1);
        let base = m.tokenizer.tokenize("heart").ids;
        let logits = m.token_logits(&a, &base).unwrap();
        let j = 2;
        let mut changed = base.clone();
        changed[j] = b'q' as usize;
        let l2 = m.token_logits(&a, &changed).unwrap();
        for t in 0..base.len() {
            let diff = (&logits.row(t) - &l2.row(t)).mapv(f64::abs).sum();
            if t <= j {
                assert_eq!(diff, 0.0, "position {t}");
            } else {
                assert!(diff > 0.0, "position {t}");
            }
        }
        let l3 = m.token_logits(&patches(6, 2), &base).unwrap();
        for t in 0..base.len() {
            assert!((&logits.row(t) - &l3.row(t)).mapv(f64::abs).sum() > 0.0);
        }
    }

    fn wrapped(seed: u64, targets: &[&str]) -> AudioLm {
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: targets.iter().map(|s| s.to_string()).collect(),
            train_projector: false,
        };
        lora_wrap(tiny_model(seed), &cfg, seed + 100).unwrap()
    }

    #[test]
    fn wrapping_is_identity_and_counts_parameters() {
        let base = tiny_model(5);
        let w = wrapped(5, &["q", "v", "ff_in"]);
        let a = patches(4, 0);
        let ids = w.tokenizer.tokenize("abc").ids;
        let diff = &base.token_logits(&a, &ids).unwrap() - &w.token_logits(&a, &ids).unwrap();
        assert!(diff.iter().all(|v| v.abs() <= 1e-12));
        // Encoder width 8 (ff 16), decoder width 16 (ff 32), rank 2.
        let expected = 2 * (8 + 8) + 2 * (8 + 8) + 2 * (8 + 16) + 2 * (16 + 16) + 2 * (16 + 16) + 2 * (16 + 32);
        let trainable: usize = w
            .params
            .iter()
            .filter(|(id, _, _)| w.params.is_trainable(*id))
            .map(|(_, _, v)| v.len())
            .sum();
        assert_eq!(trainable, expected);
        let err = lora_wrap(tiny_model(0), &LoraConfig { targets: vec!["gate".into()], ..Default::default() }, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("gate") && err.contains("ff_out"), "{err}");
        let none = LoraConfig {
            targets: vec![],
            ..Default::default()
        };
        assert!(lora_wrap(tiny_model(0), &none, 0).is_err());
    }

    #[test]
    fn merge_matches_adapted_model() {
        let mut w = wrapped(6, &["q", "k", "v", "o", "ff_out"]);
        for name in w.adapter_names() {
            let id = w.params.expect_id(&name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(id.0 as u64);
            w.params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        let a = patches(5, 2);
        let ids = w.tokenizer.tokenize("murmur").ids;
        let before = w.token_logits(&a, &ids).unwrap();
        let merged = lora_merge(w.clone()).unwrap();
        assert!(merged.adapter_names().is_empty());
        let after = merged.token_logits(&a, &ids).unwrap();
        assert!((&before - &after).iter().all(|v| v.abs() <= 1e-5));
        assert!(matches!(lora_merge(merged), Err(crate::Error::NoAdapters)));

        let zero_b = wrapped(6, &["q"]);
        let merged = lora_merge(zero_b).unwrap();
        let base = tiny_model(6);
        for (_, name, value) in base.params.iter() {
            assert_eq!(merged.params.by_name(name).unwrap(), value, "{name}");
        }
    }

    #[test]
    fn scoring_properties() {
        let mut m = tiny_model(7);
        perturb_all(&mut m, 0.1, 8);
        let a = patches(4, 4);
        let it = item(&["Low", "High", "Low", "Medium", "High", "Low"], 3);
        let scores = score_options(&m, &a, &it).unwrap();
        assert_eq!(scores[0], scores[2]);
        assert_eq!(scores[1], scores[4]);

        // Brute force: incremental next-token distributions per option.
        for (k, &s) in scores.iter().enumerate() {
            let (tokens, mask) = encode_answer(&m, &it, k);
            let mut total = 0.0;
            for t in (0..tokens.ids.len()).filter(|&t| mask[t] == 1) {
                total += next_token_logprobs(&m, &a, &tokens.ids[..t]).unwrap()[tokens.ids[t]];
            }
            assert!((total - s).abs() < 1e-9);
        }
        assert_eq!(answer(&m, &a, &it).unwrap(), argmax(&scores));

        let lp = next_token_logprobs(&m, &a, &[BOS, 65]).unwrap();
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-6);

        let mut uniform = m.clone();
        let head = uniform.params.expect_id("dec.head.w").unwrap();
        uniform.params.get_mut(head).fill(0.0);
        let it = item(&["Aa", "Bb", "Cc", "Dd", "Ee", "Ff"], 0);
        let s = score_options(&uniform, &a, &it).unwrap();
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-9));
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(argmax(&[-3.2, -1.1, -5.0]), 1);
        assert_eq!(argmax(&[-1.0, -2.0, -1.0]), 0);
    }

    #[test]
    fn prompt_layout() {
        let it = item(&["a", "b", "c", "d", "e", "f"], 0);
        assert_eq!(render_prompt(&it), "Pitch?\nA. a\nB. b\nC. c\nD. d\nE. e\nF. f\nAnswer: ");
        let m = tiny_model(0);
        let (tokens, mask) = encode_answer(&m, &it, 1);
        assert_eq!(tokens.ids.first(), Some(&BOS));
        assert_eq!(tokens.ids.last(), Some(&EOS));
        assert_eq!(mask.iter().filter(|&&v| v == 1).count(), 2);
    }

    fn lm_data(n: usize) -> Vec<LmExample> {
        (0..n)
            .map(|i| LmExample {
                patches: patches(4, i as u64),
                item: item(&["Low", "High", "Medium", "Low", "High", "Medium"], i % 3),
            })
            .collect()
    }

    #[test]
    fn finetune_freezes_base_and_resumes_exactly() {
        let model = wrapped(9, &["q", "k", "v", "o"]);
        let frozen = model.params.frozen_checksum();
        let data = lm_data(4);
        let config = FinetuneConfig {
            lr: 1e-2,
            steps: 6,
            batch: 2,
            seed: 3,
            ..Default::default()
        };
        let done = finetune(model.clone(), &data, &config).unwrap();
        assert_eq!(done.model.params.frozen_checksum(), frozen);
        assert_ne!(done.model.params, model.params);

        let mut partial = FinetuneState::new(model.clone(), &config);
        continue_finetune(&data, &config, &mut partial, 2).unwrap();
        let mut c = partial.model.to_container(serde_json::json!({}));
        c.push_optimizer(&partial.optimizer);
        let bytes = c.to_bytes().unwrap();
        let c = crate::checkpoint::Container::from_bytes(&bytes, HEADER).unwrap();
        let mut resumed = FinetuneState {
            model: AudioLm::from_container(&c).unwrap(),
            optimizer: c.optimizer().unwrap(),
            step: 2,
            curve: partial.curve.clone(),
        };
        continue_finetune(&data, &config, &mut resumed, 6).unwrap();
        assert_eq!(resumed.curve, done.curve);
        assert_eq!(resumed.model.params, done.model.params);

        let still = finetune(model.clone(), &data, &FinetuneConfig { lr: 0.0, ..config }).unwrap();
        assert_eq!(still.model.params, model.params);
        assert!(finetune(tiny_model(0), &data, &config).is_err());
    }

    /// Singular values by one-sided Jacobi rotations, largest first.
    fn singular_values(mut a: Mat) -> Vec<f64> {
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
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for k in 0..a.nrows() {
                        let (x, y) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * x - s * y;
                        a[[k, q]] = s * x + c * y;
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

    #[test]
    fn adapter_update_has_bounded_rank() {
        let data = lm_data(4);
        let config = FinetuneConfig {
            lr: 5e-2,
            steps: 5,
            batch: 2,
            ..Default::default()
        };
        let base = wrapped(10, &["q", "ff_in"]);
        let trained = finetune(base.clone(), &data, &config).unwrap().model;
        let merged = lora_merge(trained).unwrap();
        for (name, _) in base.linear_names() {
            if base.params.id(&format!("{name}.lora_a")).is_none() {
                continue;
            }
            let w = format!("{name}.w");
            let delta = merged.params.by_name(&w).unwrap() - base.params.by_name(&w).unwrap();
            let sv = singular_values(delta);
            assert!(sv[0] > 0.0, "{name} did not move");
            assert!(sv[2..].iter().all(|&s| s < 1e-8 * sv[0]), "{name}: {sv:?}");
        }
    }
}
