use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::tokenizer::Tokenizer;
use crate::checkpoint::Container;
use crate::dsp::{PatchSequence, PatchShape};
use crate::error::{Error, Result};
use crate::nn::{glorot, randn, zeros, Mat, ParamStore, Tape, Var};

pub const HEADER: &str = "pcglm-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioLmConfig {
    pub n_mels: usize,
    pub patch_shape: PatchShape,
    pub enc_layers: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    /// Mean-pool this many encoder outputs into one audio embedding.
    pub pool_stride: usize,
    pub width: usize,
    pub heads: usize,
    pub dec_layers: usize,
    pub ff_mult: usize,
    #[serde(default)]
    pub positional: bool,
}

impl Default for AudioLmConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            patch_shape: PatchShape::new(2, 64),
            enc_layers: 2,
            enc_width: 64,
            enc_heads: 4,
            pool_stride: 4,
            width: 128,
            heads: 4,
            dec_layers: 4,
            ff_mult: 2,
            positional: true,
        }
    }
}

/// Weight matrices that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    FfIn,
    FfOut,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::FfIn, Role::FfOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::FfIn => "ff_in",
            Role::FfOut => "ff_out",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::UnknownRole {
                role: s.to_string(),
                valid: Role::ALL.map(Role::as_str).join(", "),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Role>,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Audio encoder, projector and causal decoder sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioLm {
    pub config: AudioLmConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
    pub lora: Option<LoraSpec>,
}

/// `n × d` sinusoidal position table.
pub fn sinusoid(n: usize, d: usize) -> Mat {
    Mat::from_shape_fn((n, d), |(pos, i)| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn insert_block(p: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) {
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{prefix}.{ln}.g"), Mat::ones((1, d)), true);
        p.insert(format!("{prefix}.{ln}.b"), zeros(1, d), true);
    }
    for role in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.{role}.w"), glorot(d, d, rng), true);
    }
    p.insert(format!("{prefix}.ff_in.w"), glorot(ff, d, rng), true);
    p.insert(format!("{prefix}.ff_in.b"), zeros(1, ff), true);
    p.insert(format!("{prefix}.ff_out.w"), glorot(d, ff, rng), true);
    p.insert(format!("{prefix}.ff_out.b"), zeros(1, d), true);
}

impl AudioLm {
    pub fn new(config: AudioLmConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let c = &config;
        if !c.width.is_multiple_of(c.heads) || !c.enc_width.is_multiple_of(c.enc_heads) {
            return Err(Error::InvalidInput("widths must be divisible by head counts".into()));
        }
        if c.pool_stride == 0 || c.patch_shape.is_empty() || !c.n_mels.is_multiple_of(c.patch_shape.mel_bins) {
            return Err(Error::InvalidInput("invalid pooling or patch configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (ew, d, v) = (c.enc_width, c.width, tokenizer.vocab_size());
        p.insert("enc.patch.w", glorot(ew, c.patch_shape.len(), &mut rng), true);
        p.insert("enc.patch.b", zeros(1, ew), true);
        for l in 0..c.enc_layers {
            insert_block(&mut p, &format!("enc.layer{l}"), ew, ew * c.ff_mult, &mut rng);
        }
        p.insert("enc.ln.g", Mat::ones((1, ew)), true);
        p.insert("enc.ln.b", zeros(1, ew), true);
        p.insert("proj.w", glorot(d, ew, &mut rng), true);
        p.insert("proj.b", zeros(1, d), true);
        p.insert("dec.tok", randn(v, d, 1.0, &mut rng), true);
        for l in 0..c.dec_layers {
            insert_block(&mut p, &format!("dec.layer{l}"), d, d * c.ff_mult, &mut rng);
        }
        p.insert("dec.ln.g", Mat::ones((1, d)), true);
        p.insert("dec.ln.b", zeros(1, d), true);
        p.insert("dec.head.w", randn(v, d, 1.0 / (d as f64).sqrt(), &mut rng), true);
        Ok(Self {
            config,
            tokenizer,
            params: p,
            lora: None,
        })
    }

    /// Names of every linear layer that can carry an adapter, with its role.
    pub fn linear_names(&self) -> Vec<(String, Role)> {
        let mut out = Vec::new();
        let blocks = (0..self.config.enc_layers)
            .map(|l| format!("enc.layer{l}"))
            .chain((0..self.config.dec_layers).map(|l| format!("dec.layer{l}")));
        for prefix in blocks {
            for role in Role::ALL {
                out.push((format!("{prefix}.{role}"), role));
            }
        }
        out
    }

    /// `x·Wᵀ (+ b) (+ (α/r)·x·Aᵀ·Bᵀ)` for the linear layer `name`.
    fn linear(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
        let p = &self.params;
        let w = tape.param(p.expect_id(&format!("{name}.w"))?);
        let mut y = tape.matmul_t(x, w);
        if let (Some(spec), Some(a)) = (&self.lora, p.id(&format!("{name}.lora_a"))) {
            let b = p.expect_id(&format!("{name}.lora_b"))?;
            let a = tape.param(a);
            let b = tape.param(b);
            let xa = tape.matmul_t(x, a);
            let delta = tape.matmul_t(xa, b);
            let delta = tape.scale(delta, spec.scale());
            y = tape.add(y, delta);
        }
        if let Some(b) = p.id(&format!("{name}.b")) {
            let b = tape.param(b);
            y = tape.add_row(y, b);
        }
        Ok(y)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
        let g = tape.param(self.params.expect_id(&format!("{name}.g"))?);
        let b = tape.param(self.params.expect_id(&format!("{name}.b"))?);
        Ok(tape.layer_norm(x, g, b))
    }

    fn block(&self, tape: &mut Tape<'_>, x: Var, prefix: &str, heads: usize, causal: bool) -> Result<Var> {
        let d = tape.value(x).ncols();
        let dh = d / heads;
        let h = self.layer_norm(tape, x, &format!("{prefix}.ln1"))?;
        let q = self.linear(tape, h, &format!("{prefix}.q"))?;
        let k = self.linear(tape, h, &format!("{prefix}.k"))?;
        let v = self.linear(tape, h, &format!("{prefix}.v"))?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s, causal);
            outs.push(tape.matmul(a, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = self.linear(tape, cat, &format!("{prefix}.o"))?;
        let x = tape.add(x, o);
        let h = self.layer_norm(tape, x, &format!("{prefix}.ln2"))?;
        let f = self.linear(tape, h, &format!("{prefix}.ff_in"))?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, &format!("{prefix}.ff_out"))?;
        Ok(tape.add(x, f))
    }

    fn add_positions(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        if !self.config.positional {
            return x;
        }
        let (n, d) = tape.value(x).dim();
        let pe = tape.constant(sinusoid(n, d));
        tape.add(x, pe)
    }

    /// Audio embeddings at decoder width, one per pooled group of patches.
    pub fn encode_graph(&self, tape: &mut Tape<'_>, patches: &PatchSequence) -> Result<Var> {
        let c = &self.config;
        if patches.patch_shape != c.patch_shape || patches.n_mels != c.n_mels {
            return Err(Error::shape(
                format!("patch shape {} over {} mels", c.patch_shape, c.n_mels),
                format!("patch shape {} over {} mels", patches.patch_shape, patches.n_mels),
            ));
        }
        if patches.is_empty() {
            return Err(Error::InvalidInput("empty patch sequence".into()));
        }
        let x = tape.constant(patches.patches.as_standard_layout().into_owned());
        let mut h = self.linear(tape, x, "enc.patch")?;
        h = self.add_positions(tape, h);
        for l in 0..c.enc_layers {
            h = self.block(tape, h, &format!("enc.layer{l}"), c.enc_heads, false)?;
        }
        h = self.layer_norm(tape, h, "enc.ln")?;
        if c.pool_stride > 1 {
            h = tape.mean_pool_rows(h, c.pool_stride);
        }
        self.linear(tape, h, "proj")
    }

    /// Final decoder hidden states over `[audio ‖ tokens]`.
    pub fn decode_graph(&self, tape: &mut Tape<'_>, audio: Var, ids: &[usize]) -> Result<Var> {
        let v = self.tokenizer.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tok = tape.param(self.params.expect_id("dec.tok")?);
        let mut x = if ids.is_empty() {
            audio
        } else {
            let emb = tape.gather_rows(tok, ids);
            tape.concat_rows(&[audio, emb])
        };
        x = self.add_positions(tape, x);
        for l in 0..self.config.dec_layers {
            x = self.block(tape, x, &format!("dec.layer{l}"), self.config.heads, true)?;
        }
        self.layer_norm(tape, x, "dec.ln")
    }

    /// Vocabulary logits at the given rows of the hidden-state matrix.
    pub fn logits_at(&self, tape: &mut Tape<'_>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows);
        let w = tape.param(self.params.expect_id("dec.head.w")?);
        Ok(tape.matmul_t(h, w))
    }

    pub fn encode_audio(&self, patches: &PatchSequence) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let out = self.encode_graph(&mut tape, patches)?;
        Ok(tape.value(out).clone())
    }

    /// Row `t` holds the logits predicting `ids[t]` from the audio and
    /// `ids[..t]`.
    pub fn token_logits(&self, patches: &PatchSequence, ids: &[usize]) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let audio = self.encode_graph(&mut tape, patches)?;
        let m = tape.value(audio).nrows();
        let hidden = self.decode_graph(&mut tape, audio, ids)?;
        let rows: Vec<usize> = (0..ids.len()).map(|t| m + t - 1).collect();
        let logits = self.logits_at(&mut tape, hidden, &rows)?;
        Ok(tape.value(logits).clone())
    }

    pub fn adapter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    /// Checkpoint with base weights and adapters under separate prefixes.
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(HEADER, meta);
        c.meta["audio_lm"] = json!(self.config);
        c.meta["tokenizer"] = json!(self.tokenizer);
        c.meta["lora"] = json!(self.lora);
        for (id, name, value) in self.params.iter() {
            let prefix = if is_adapter(name) { "adapter/" } else { "base/" };
            c.push(format!("{prefix}{name}"), value.clone(), self.params.is_trainable(id));
        }
        c
    }

    /// Adapter tensors only, for sharing a finetune on top of a known base.
    pub fn export_adapters(&self, meta: serde_json::Value) -> Result<Container> {
        if self.lora.is_none() {
            return Err(Error::NoAdapters);
        }
        let mut c = Container::new(HEADER, meta);
        c.meta["lora"] = json!(self.lora);
        for (id, name, value) in self.params.iter().filter(|(_, n, _)| is_adapter(n)) {
            c.push(format!("adapter/{name}"), value.clone(), self.params.is_trainable(id));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: AudioLmConfig = serde_json::from_value(c.meta["audio_lm"].clone())?;
        let tokenizer: Tokenizer = serde_json::from_value(c.meta["tokenizer"].clone())?;
        let lora: Option<LoraSpec> = serde_json::from_value(c.meta["lora"].clone())?;
        let mut params = c.params("base/");
        for t in &c.tensors {
            if let Some(name) = t.name.strip_prefix("adapter/") {
                params.insert(name, t.value.clone(), t.trainable);
            }
        }
        let reference = AudioLm::new(config, tokenizer.clone(), 0)?;
        for (_, name, value) in reference.params.iter() {
            match params.by_name(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(Error::shape(format!("{name} {:?}", value.dim()), format!("{:?}", v.dim())))
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(Self {
            config,
            tokenizer,
            params,
            lora,
        })
    }
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    /// Also finetune the audio-to-decoder projector.
    #[serde(default)]
    pub train_projector: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: ["q", "k", "v", "o"].map(String::from).to_vec(),
            train_projector: false,
        }
    }
}

/// Freezes every base parameter and attaches a rank-`r` adapter to each
/// targeted linear layer of the encoder and decoder. `A` starts from
/// `N(0, 1/d_in)`, `B` from zero, so outputs are unchanged.
pub fn lora_wrap(mut model: AudioLm, config: &LoraConfig, seed: u64) -> Result<AudioLm> {
    if config.rank == 0 {
        return Err(Error::InvalidInput("LoRA rank must be at least 1".into()));
    }
    if config.targets.is_empty() {
        return Err(Error::InvalidInput("LoRA needs at least one target role".into()));
    }
    if model.lora.is_some() {
        return Err(Error::InvalidInput("model already carries adapters".into()));
    }
    let targets: BTreeSet<Role> = config
        .targets
        .iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.set_trainable(id, false);
    }
    if config.train_projector {
        for name in ["proj.w", "proj.b"] {
            let id = model.params.expect_id(name)?;
            model.params.set_trainable(id, true);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = config.rank;
    for (name, role) in model.linear_names() {
        if !targets.contains(&role) {
            continue;
        }
        let (d_out, d_in) = model.params.by_name(&format!("{name}.w")).expect("linear weight").dim();
        let a = randn(r, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
        model.params.insert(format!("{name}.lora_a"), a, true);
        model.params.insert(format!("{name}.lora_b"), zeros(d_out, r), true);
    }
    model.lora = Some(LoraSpec {
        rank: r,
        alpha: config.alpha,
        targets,
    });
    Ok(model)
}

/// Folds each adapter into its base matrix, `W + (α/r)·B·A`, and drops the
/// adapter tensors. Trainability flags of the remaining tensors are kept.
pub fn lora_merge(mut model: AudioLm) -> Result<AudioLm> {
    let spec = model.lora.take().ok_or(Error::NoAdapters)?;
    for (name, _) in model.linear_names() {
        let (Some(a), Some(b)) = (
            model.params.by_name(&format!("{name}.lora_a")),
            model.params.by_name(&format!("{name}.lora_b")),
        ) else {
            continue;
        };
        let delta = b.dot(a) * spec.scale();
        let id = model.params.expect_id(&format!("{name}.w"))?;
        *model.params.get_mut(id) += &delta;
    }
    model.params.remove_where(is_adapter);
    Ok(model)
}
