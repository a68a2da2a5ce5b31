//! The projection module that turns a latent embedding into a pseudo word
//! token, the noise injected into that latent during training, and the
//! prompt scaffold "a photo of <pseudo> that <condition>".

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diff::{Tape, Tensor, VarId};
use crate::encoder::{encode, hex, sample, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::symmetric_infonce;
use crate::optim::AdamW;
use crate::rng::{stream, stream_at};
use crate::text::{TokenSeq, Vocabulary, MAX_LEN, PSEUDO};

/// Slot index of the pseudo token inside every composed prompt.
pub const PSEUDO_SLOT: usize = 3;

pub const PHI_FIELDS: [&str; 4] = ["w_1", "b_1", "w_2", "b_2"];

/// Two-layer tanh MLP mapping a d-dim latent to a d-dim token vector.
#[derive(Debug, Clone)]
pub struct PhiParams {
    pub d: usize,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl PhiParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("phi init: d must be positive"));
        }
        Ok(PhiParams {
            d,
            w_1: sample(vec![d, 4 * d], rng),
            b_1: sample(vec![4 * d], rng),
            w_2: sample(vec![4 * d, d], rng),
            b_2: sample(vec![d], rng),
        })
    }

    pub fn fields(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
        ]
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "w_1" => Some(&mut self.w_1),
            "b_1" => Some(&mut self.b_1),
            "w_2" => Some(&mut self.w_2),
            "b_2" => Some(&mut self.b_2),
            _ => None,
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for name in PHI_FIELDS {
            self.field_mut(name).unwrap().requires_grad = flag;
        }
    }

    pub fn byte_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.fields() {
            h.update(t.to_bytes());
        }
        hex(&h.finalize())
    }

    pub fn insert(&self, tape: &mut Tape) -> PhiVars {
        PhiVars {
            w_1: tape.leaf(&self.w_1),
            b_1: tape.leaf(&self.b_1),
            w_2: tape.leaf(&self.w_2),
            b_2: tape.leaf(&self.b_2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhiVars {
    pub w_1: VarId,
    pub b_1: VarId,
    pub w_2: VarId,
    pub b_2: VarId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// n*u per coordinate, n ~ N(0,1), u ~ U(0,1).
    Product,
    Gauss,
    /// U(-1, 1).
    Unif,
    None,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(NoiseKind::Product),
            "gauss" => Ok(NoiseKind::Gauss),
            "unif" => Ok(NoiseKind::Unif),
            "none" => Ok(NoiseKind::None),
            _ => Err(Error::input(format!(
                "unknown noise kind {s:?}; expected product|gauss|unif|none"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Product => "product",
            NoiseKind::Gauss => "gauss",
            NoiseKind::Unif => "unif",
            NoiseKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub scale: f64,
}

impl NoiseConfig {
    pub fn new(kind: NoiseKind, scale: f64) -> Result<Self> {
        if scale < 0.0 {
            return Err(Error::input(format!(
                "noise scale must be non-negative, got {scale}"
            )));
        }
        Ok(NoiseConfig { kind, scale })
    }

    pub fn none() -> Self {
        NoiseConfig {
            kind: NoiseKind::None,
            scale: 0.0,
        }
    }

    fn is_off(&self) -> bool {
        self.kind == NoiseKind::None || self.scale == 0.0
    }
}

/// Normal-uniform product noise at half strength; the training recipe's
/// standard perturbation.
impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { kind: NoiseKind::Product, scale: 0.5 }
    }
}

/// latent + scale * eta, elementwise. The perturbation is sampled data, not
/// part of any gradient path; scale 0 draws nothing and returns the input.
pub fn inject_noise(latent: &[f64], cfg: &NoiseConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if cfg.scale < 0.0 {
        return Err(Error::input(format!(
            "inject_noise: negative scale {}",
            cfg.scale
        )));
    }
    if cfg.is_off() {
        return Ok(latent.to_vec());
    }
    let out = latent
        .iter()
        .map(|&x| {
            let eta = match cfg.kind {
                NoiseKind::Product => {
                    let n: f64 = StandardNormal.sample(rng);
                    let u: f64 = rng.gen_range(0.0..1.0);
                    n * u
                }
                NoiseKind::Gauss => StandardNormal.sample(rng),
                NoiseKind::Unif => rng.gen_range(-1.0..1.0),
                NoiseKind::None => unreachable!("is_off handled above"),
            };
            x + cfg.scale * eta
        })
        .collect();
    Ok(out)
}

/// MLP forward: tanh(latent W1 + b1) W2 + b2. Differentiable through both
/// the weights and the latent.
pub fn project(tape: &mut Tape, phi: &PhiVars, latent: VarId) -> Result<VarId> {
    let h = tape.affine(latent, phi.w_1, phi.b_1)?;
    let t = tape.tanh(h);
    tape.affine(t, phi.w_2, phi.b_2)
}

/// Token ids for `a photo of <pseudo>` plus `that <cond...>` when a
/// condition is present, and the slot map binding the pseudo vector.
pub fn compose_prompt(
    pseudo: VarId,
    cond: &TokenSeq,
    vocab: &Vocabulary,
) -> Result<(TokenSeq, BTreeMap<usize, VarId>)> {
    let mut ids = Vec::with_capacity(5 + cond.len());
    for word in ["a", "photo", "of"] {
        let id = vocab.id(word).ok_or_else(|| {
            Error::input(format!("compose_prompt: scaffold word {word:?} not in vocabulary"))
        })?;
        ids.push(id);
    }
    ids.push(PSEUDO);
    if !cond.is_empty() {
        let that = vocab.id("that").ok_or_else(|| {
            Error::input("compose_prompt: scaffold word \"that\" not in vocabulary")
        })?;
        ids.push(that);
        if cond.ids.contains(&PSEUDO) {
            return Err(Error::input(
                "compose_prompt: condition text may not contain the pseudo token",
            ));
        }
        ids.extend_from_slice(&cond.ids);
    }
    if ids.len() > MAX_LEN {
        return Err(Error::input(format!(
            "compose_prompt: prompt of {} tokens (scaffold 5 + condition {}) exceeds max length {}",
            ids.len(),
            cond.len(),
            MAX_LEN
        )));
    }
    let mut slots = BTreeMap::new();
    slots.insert(PSEUDO_SLOT, pseudo);
    Ok((TokenSeq { ids }, slots))
}

#[derive(Debug, Clone)]
pub struct PhiPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Run seed for batch order and initialization.
    pub seed: u64,
    /// World seed under which per-caption image embeddings are drawn
    /// (substream "image", indexed by caption position).
    pub image_seed: u64,
}

impl Default for PhiPretrainConfig {
    fn default() -> Self {
        PhiPretrainConfig {
            steps: 400,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.0,
            tau: 0.07,
            seed: 0,
            image_seed: 0,
        }
    }
}

/// Mean cosine between each image embedding and the frozen encoding of the
/// pseudo-token prompt built from it. The before/after movement of this
/// number is the pretraining's success measure.
pub fn mean_prompt_alignment(
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    phi: &PhiParams,
    image_embeds: &[Vec<f64>],
) -> Result<f64> {
    if image_embeds.is_empty() {
        return Err(Error::input("mean_prompt_alignment: no image embeddings"));
    }
    let mut total = 0.0;
    for img in image_embeds {
        let mut tape = Tape::new();
        let enc_vars = frozen.insert(&mut tape);
        let phi_vars = phi.insert(&mut tape);
        let latent = tape.constant_vector(img.clone());
        let pseudo = project(&mut tape, &phi_vars, latent)?;
        let (prompt, slots) = compose_prompt(pseudo, &TokenSeq { ids: vec![] }, vocab)?;
        let prompt_embed = encode(&mut tape, &enc_vars, &prompt, &slots)?;
        let cos = tape.cosine_similarity(prompt_embed, latent)?;
        total += tape.scalar_value(cos);
    }
    Ok(total / image_embeds.len() as f64)
}

/// Contrastive pretraining of the projection module against a fixed pool of
/// image embeddings, one per caption. Only the MLP moves; the encoder that
/// defines the embedding space is read-only throughout.
pub fn pretrain_phi(
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    captions: &[TokenSeq],
    surrogate: &crate::encoder::VisualSurrogate,
    cfg: &PhiPretrainConfig,
) -> Result<(PhiParams, Vec<f64>)> {
    if captions.len() < 2 {
        return Err(Error::input(format!(
            "pretrain_phi: need at least 2 captions, got {}",
            captions.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::input(
            "pretrain_phi: contrastive batches need at least 2 items",
        ));
    }
    let image_embeds: Vec<Vec<f64>> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            surrogate.synth_image_embed(frozen, c, &mut stream_at(cfg.image_seed, "image", i))
        })
        .collect::<Result<_>>()?;

    let mut phi = PhiParams::init(frozen.d, &mut stream(cfg.seed, "phi-init"))?;
    phi.set_requires_grad(true);
    let sizes: Vec<usize> = phi.fields().iter().map(|(_, t)| t.values.len()).collect();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, &sizes)?;
    let batch = cfg.batch_size.min(captions.len());
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut order: Vec<usize> = (0..captions.len()).collect();
        let mut rng = stream_at(cfg.seed, "phi-batch", step);
        for i in 0..batch {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(batch);

        let mut tape = Tape::new();
        let enc_vars = frozen.insert(&mut tape);
        let phi_vars = phi.insert(&mut tape);
        let mut queries = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for &idx in &order {
            let latent = tape.constant_vector(image_embeds[idx].clone());
            let pseudo = project(&mut tape, &phi_vars, latent)?;
            let (prompt, slots) = compose_prompt(pseudo, &TokenSeq { ids: vec![] }, vocab)?;
            queries.push(encode(&mut tape, &enc_vars, &prompt, &slots)?);
            targets.push(latent);
        }
        let root = symmetric_infonce(&mut tape, &queries, &targets, cfg.tau, false)?;
        let loss = tape.scalar_value(root);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "pretrain_phi: non-finite loss {loss} at step {step}"
            )));
        }
        history.push(loss);
        tape.backward(root)?;

        let ids = [phi_vars.w_1, phi_vars.b_1, phi_vars.w_2, phi_vars.b_2];
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).expect("phi grad").to_vec())
            .collect();
        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(4);
        let PhiParams {
            w_1, b_1, w_2, b_2, ..
        } = &mut phi;
        for (t, g) in [w_1, b_1, w_2, b_2].into_iter().zip(&grads) {
            pairs.push((&mut t.values, g));
        }
        opt.step(&mut pairs)?;
    }
    Ok((phi, history))
}
