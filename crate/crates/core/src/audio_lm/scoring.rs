use super::model::AudioLm;
use super::tokenizer::{TokenSequence, BOS, EOS};
use crate::dsp::PatchSequence;
use crate::error::{Error, Result};
use crate::nn::{Grads, Tape};
use crate::tasks::{McItem, OPTION_LETTERS};

/// Question, one `"A. label"` line per option, then `"Answer: "`.
pub fn render_prompt(item: &McItem) -> String {
    let mut s = item.question.clone();
    s.push('\n');
    for (letter, option) in OPTION_LETTERS.iter().zip(&item.options) {
        s.push_str(&format!("{letter}. {option}\n"));
    }
    s.push_str("Answer: ");
    s
}

/// Token ids of `[BOS] prompt option [EOS]` with the supervise mask set on
/// the option text and the closing EOS.
pub fn encode_answer(model: &AudioLm, item: &McItem, option: usize) -> (TokenSequence, Vec<u8>) {
    let prompt = render_prompt(item);
    let answer = &item.options[option];
    let tok = &model.tokenizer;
    let mut ids = vec![BOS];
    ids.extend(tok.tokenize(&prompt).ids);
    let context = ids.len();
    ids.extend(tok.tokenize(answer).ids);
    ids.push(EOS);
    let mut mask = vec![0u8; ids.len()];
    mask[context..].fill(1);
    let text = format!("{prompt}{answer}");
    (TokenSequence { ids, text }, mask)
}

fn supervised(tokens: &TokenSequence, mask: &[u8]) -> Result<Vec<usize>> {
    if mask.len() != tokens.ids.len() {
        return Err(Error::shape(format!("{} mask entries", tokens.ids.len()), mask.len()));
    }
    let positions: Vec<usize> = (0..mask.len()).filter(|&t| mask[t] == 1).collect();
    if positions.is_empty() {
        return Err(Error::InvalidInput("no supervised positions".into()));
    }
    Ok(positions)
}

/// Mean negative log-likelihood over supervised positions, with its
/// gradient when `with_grads` is set.
pub fn loss_and_grads(
    model: &AudioLm,
    patches: &PatchSequence,
    tokens: &TokenSequence,
    supervise_mask: &[u8],
    with_grads: bool,
) -> Result<(f64, Option<Grads>)> {
    let positions = supervised(tokens, supervise_mask)?;
    let mut tape = Tape::new(&model.params);
    let audio = model.encode_graph(&mut tape, patches)?;
    let m = tape.value(audio).nrows();
    let hidden = model.decode_graph(&mut tape, audio, &tokens.ids)?;
    let rows: Vec<usize> = positions.iter().map(|&t| m + t - 1).collect();
    let targets: Vec<usize> = positions.iter().map(|&t| tokens.ids[t]).collect();
    let logits = model.logits_at(&mut tape, hidden, &rows)?;
    let loss = tape.cross_entropy(logits, &targets);
    let grads = with_grads.then(|| tape.backward(loss));
    Ok((tape.scalar(loss), grads))
}

/// `mean_t −ln P(x_t | x_<t, audio)` over positions with mask 1.
pub fn next_token_loss(
    model: &AudioLm,
    patches: &PatchSequence,
    tokens: &TokenSequence,
    supervise_mask: &[u8],
) -> Result<f64> {
    loss_and_grads(model, patches, tokens, supervise_mask, false).map(|(l, _)| l)
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Log-probabilities of the next token after `prefix`.
pub fn next_token_logprobs(model: &AudioLm, patches: &PatchSequence, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(&model.params);
    let audio = model.encode_graph(&mut tape, patches)?;
    let m = tape.value(audio).nrows();
    let hidden = model.decode_graph(&mut tape, audio, prefix)?;
    let logits = model.logits_at(&mut tape, hidden, &[m + prefix.len() - 1])?;
    Ok(log_softmax_row(tape.value(logits).row(0)))
}

/// Total log-likelihood of each option's answer span (text plus EOS) given
/// the shared prompt.
pub fn score_options(model: &AudioLm, patches: &PatchSequence, item: &McItem) -> Result<Vec<f64>> {
    if item.options.len() < 2 {
        return Err(Error::InvalidInput("an item needs at least two options".into()));
    }
    let mut tape = Tape::new(&model.params);
    let audio = model.encode_graph(&mut tape, patches)?;
    let audio_value = tape.value(audio).clone();
    let m = audio_value.nrows();
    let mut scores = Vec::with_capacity(item.options.len());
    for k in 0..item.options.len() {
        let (tokens, mask) = encode_answer(model, item, k);
        let positions = supervised(&tokens, &mask)?;
        let mut tape = Tape::new(&model.params);
        let audio = tape.constant(audio_value.clone());
        let hidden = model.decode_graph(&mut tape, audio, &tokens.ids)?;
        let rows: Vec<usize> = positions.iter().map(|&t| m + t - 1).collect();
        let logits = model.logits_at(&mut tape, hidden, &rows)?;
        let lv = tape.value(logits);
        let total: f64 = positions
            .iter()
            .enumerate()
            .map(|(r, &t)| log_softmax_row(lv.row(r))[tokens.ids[t]])
            .sum();
        scores.push(total);
    }
    Ok(scores)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn answer(model: &AudioLm, patches: &PatchSequence, item: &McItem) -> Result<usize> {
    Ok(argmax(&score_options(model, patches, item)?))
}

/// Greedy continuation of `prefix` until EOS or `max_new` tokens.
pub fn greedy_decode(model: &AudioLm, patches: &PatchSequence, prefix: &[usize], max_new: usize) -> Result<Vec<usize>> {
    let mut ids = prefix.to_vec();
    for _ in 0..max_new {
        let lp = next_token_logprobs(model, patches, &ids)?;
        let next = argmax(&lp);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(ids[prefix.len()..].to_vec())
}
