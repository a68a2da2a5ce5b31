//! Target-anchored training over caption triplets.
//!
//! A batch pairs a query construction with a target caption: MODIFIED
//! pairs query toward the edited caption, REFERENCE pairs query toward the
//! unchanged one. With refined sampling both pairs of a triplet sit next
//! to each other in the batch and act as hard negatives; with refined
//! concatenation the query is built from the inference-style prompt around
//! a projected (and noise-perturbed) frozen reference latent. Targets come
//! from the frozen encoder and receive no gradient while anchoring is on.

use rand::Rng;

use crate::diff::{Tape, VarId};
use crate::encoder::{
    encode, encode_plain, DualEncoder, EncoderParams, EncoderVars, UpdateMask, PARAM_FIELDS,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cir, EvalMode, RetrievalReport, SyntheticBenchmark};
use crate::loss::symmetric_infonce;
use crate::optim::AdamW;
use crate::projection::{compose_prompt, inject_noise, project, NoiseConfig, PhiParams};
use crate::rng::stream_at;
use crate::text::{TokenSeq, Vocabulary};
use crate::triplets::TextTriplet;
use crate::encoder::VisualSurrogate;

// ── Batches ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Query is built from (T_r, T_c); target is T_t.
    Modified,
    /// Query is built from T_r alone; target is T_r.
    Reference,
}

#[derive(Debug, Clone)]
pub struct RtdPair {
    pub kind: PairKind,
    /// Index into the triplet list the batch was drawn from.
    pub triplet: usize,
    /// Target caption, pre-tokenized: T_t for MODIFIED, T_r for REFERENCE.
    pub target_seq: TokenSeq,
}

#[derive(Debug, Clone)]
pub struct RtdBatch {
    pub pairs: Vec<RtdPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// (T_{r+c}, T_t) pairs, optionally coupled with their reference pair.
    Triplet,
    /// (T_r, T_r) pairs only; isolates the effect of self-reconstruction.
    ReferenceOnly,
}

impl PairMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(PairMode::Triplet),
            "reference-only" => Ok(PairMode::ReferenceOnly),
            other => Err(Error::input(format!(
                "unknown pair mode {other:?} (expected triplet | reference-only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairMode::Triplet => "triplet",
            PairMode::ReferenceOnly => "reference-only",
        }
    }
}

/// How REFERENCE pairs build their query when refined concatenation is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceRc {
    /// `a photo of <pseudo>` with the pseudo token from the projected
    /// reference latent; applies the prompt scheme uniformly.
    Prompt,
    /// Plain T_r through the learnable encoder.
    Plain,
}

impl ReferenceRc {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(ReferenceRc::Prompt),
            "plain" => Ok(ReferenceRc::Plain),
            other => Err(Error::input(format!(
                "unknown reference-rc mode {other:?} (expected prompt | plain)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReferenceRc::Prompt => "prompt",
            ReferenceRc::Plain => "plain",
        }
    }
}

// ── Config ──

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub noise: NoiseConfig,
    pub use_rb: bool,
    pub use_rc: bool,
    pub use_anchor: bool,
    pub pair_mode: PairMode,
    pub reference_rc: ReferenceRc,
    pub update_mask: UpdateMask,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale defaults: the published recipe.
    pub fn paper_default() -> Self {
        TrainConfig {
            tau: 0.07,
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 512,
            steps: 2000,
            noise: NoiseConfig::default(),
            use_rb: true,
            use_rc: true,
            use_anchor: true,
            pair_mode: PairMode::Triplet,
            reference_rc: ReferenceRc::Prompt,
            update_mask: UpdateMask::Full,
            seed: 0,
        }
    }

    /// Desk-scale defaults: small batches, a learning rate raised to suit
    /// the toy encoder (1e-5 barely moves it in 2000 steps), and noise
    /// scaled down so its norm matches the text-image gap rather than
    /// swamping the unit-norm latent.
    pub fn desk_default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 2e-3,
            noise: NoiseConfig { scale: 0.1, ..NoiseConfig::default() },
            ..TrainConfig::paper_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::input(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::input("learning rate and weight decay must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::input(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.use_rb && self.pair_mode == PairMode::Triplet && self.batch_size % 2 != 0 {
            return Err(Error::input(format!(
                "refined batch sampling pairs couples, so the batch size must be even, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

// ── Batch construction ──

/// Draws distinct triplets and lays out the batch. With refined sampling
/// each drawn triplet contributes its MODIFIED and REFERENCE pair
/// adjacently; otherwise B MODIFIED pairs (or B REFERENCE pairs when
/// pair_mode is reference-only).
pub fn build_batch(
    triplets: &[TextTriplet],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RtdBatch> {
    cfg.validate()?;
    let coupled = cfg.use_rb && cfg.pair_mode == PairMode::Triplet;
    let needed = if coupled { cfg.batch_size / 2 } else { cfg.batch_size };
    if triplets.len() < needed {
        return Err(Error::input(format!(
            "not enough distinct triplets for a batch: need {needed}, have {}",
            triplets.len()
        )));
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    for i in 0..needed {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    order.truncate(needed);

    let reference_pair = |idx: usize| RtdPair {
        kind: PairKind::Reference,
        triplet: idx,
        target_seq: vocab.tokenize(&triplets[idx].t_r),
    };
    let modified_pair = |idx: usize| RtdPair {
        kind: PairKind::Modified,
        triplet: idx,
        target_seq: vocab.tokenize(&triplets[idx].t_t),
    };

    let mut pairs = Vec::with_capacity(cfg.batch_size);
    for idx in order {
        match cfg.pair_mode {
            PairMode::ReferenceOnly => pairs.push(reference_pair(idx)),
            PairMode::Triplet => {
                pairs.push(modified_pair(idx));
                if coupled {
                    pairs.push(reference_pair(idx));
                }
            }
        }
    }
    Ok(RtdBatch { pairs })
}

// ── Forward passes ──

/// Builds one pair's query embedding on the shared tape.
///
/// With refined concatenation the frozen reference latent is noised,
/// projected to a pseudo token and spliced into the inference prompt
/// (condition = T_c for MODIFIED pairs, empty for REFERENCE pairs unless
/// `reference_rc` says plain). Without it the query is the plain learnable
/// encoding of `T_r + " " + T_c` (or T_r alone).
#[allow(clippy::too_many_arguments)]
pub fn forward_query(
    tape: &mut Tape,
    learnable: &EncoderVars,
    phi: &crate::projection::PhiVars,
    vocab: &Vocabulary,
    pair: &RtdPair,
    triplet: &TextTriplet,
    frozen_ref_latent: &[f64],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<VarId> {
    let prompt_path = cfg.use_rc
        && (pair.kind == PairKind::Modified || cfg.reference_rc == ReferenceRc::Prompt);
    if prompt_path {
        let noised = inject_noise(frozen_ref_latent, &cfg.noise, rng)?;
        let latent = tape.constant_vector(noised);
        let pseudo = project(tape, phi, latent)?;
        let cond = match pair.kind {
            PairKind::Modified => vocab.tokenize(&triplet.t_c),
            PairKind::Reference => TokenSeq { ids: vec![] },
        };
        let (seq, slots) = compose_prompt(pseudo, &cond, vocab)?;
        encode(tape, learnable, &seq, &slots)
    } else {
        let text = match pair.kind {
            PairKind::Modified => format!("{} {}", triplet.t_r, triplet.t_c),
            PairKind::Reference => triplet.t_r.clone(),
        };
        encode(tape, learnable, &vocab.tokenize(&text), &Default::default())
    }
}

/// Frozen-encoder latents every training run needs: per triplet, the T_r
/// encoding (prompt input and REFERENCE target) and the T_t encoding
/// (MODIFIED target).
pub struct FrozenLatents {
    pub t_r: Vec<Vec<f64>>,
    pub t_t: Vec<Vec<f64>>,
}

pub fn precompute_frozen_latents(
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    triplets: &[TextTriplet],
) -> Result<FrozenLatents> {
    let mut t_r = Vec::with_capacity(triplets.len());
    let mut t_t = Vec::with_capacity(triplets.len());
    for t in triplets {
        t_r.push(encode_plain(frozen, &vocab.tokenize(&t.t_r))?);
        t_t.push(encode_plain(frozen, &vocab.tokenize(&t.t_t))?);
    }
    Ok(FrozenLatents { t_r, t_t })
}

// ── Optimizer plumbing ──

/// Mask fields in canonical parameter order, so optimizer slots and
/// per-step gradients always line up.
fn masked_fields(mask: UpdateMask) -> Vec<&'static str> {
    let wanted = mask.fields();
    PARAM_FIELDS.iter().copied().filter(|f| wanted.contains(f)).collect()
}

/// Optimizer sized for the masked subset of an encoder's parameters.
pub fn masked_optimizer(params: &EncoderParams, cfg: &TrainConfig) -> Result<AdamW> {
    let sizes: Vec<usize> = masked_fields(cfg.update_mask)
        .iter()
        .map(|name| params.field(name).expect("known field").values.len())
        .collect();
    AdamW::new(cfg.lr, cfg.weight_decay, &sizes)
}

fn apply_masked_update(
    params: &mut EncoderParams,
    tape: &Tape,
    vars: &EncoderVars,
    mask: UpdateMask,
    opt: &mut AdamW,
) -> Result<()> {
    let names = masked_fields(mask);
    let grads: Vec<Vec<f64>> = names
        .iter()
        .map(|name| {
            let id = vars.field(name).expect("known field");
            tape.grad(id).map(<[f64]>::to_vec).ok_or_else(|| {
                Error::numeric(format!("no gradient recorded for parameter {name}"))
            })
        })
        .collect::<Result<_>>()?;
    let mut slots: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(names.len());
    let mut fields = params.fields_mut();
    for (name, tensor) in fields.iter_mut() {
        if let Some(i) = names.iter().position(|n| n == name) {
            slots.push((&mut tensor.values, &grads[i]));
        }
    }
    opt.step(&mut slots)
}

// ── Training steps ──

/// One forward/backward/update on the learnable encoder. The frozen
/// encoder enters only through precomputed constants; φ participates in
/// the graph but is never updated.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    dual: &mut DualEncoder,
    phi: &PhiParams,
    vocab: &Vocabulary,
    triplets: &[TextTriplet],
    latents: &FrozenLatents,
    batch: &RtdBatch,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if batch.pairs.len() < 2 {
        return Err(Error::input("need at least 2 pairs per batch"));
    }
    let mut tape = Tape::new();
    let learnable_vars = dual.learnable.insert(&mut tape);
    let phi_vars = phi.insert(&mut tape);
    let mut noise_rng = stream_at(cfg.seed, "train-noise", step);

    let mut queries = Vec::with_capacity(batch.pairs.len());
    let mut targets = Vec::with_capacity(batch.pairs.len());
    for pair in &batch.pairs {
        let triplet = triplets.get(pair.triplet).ok_or_else(|| {
            Error::input(format!("batch references triplet {} of {}", pair.triplet, triplets.len()))
        })?;
        queries.push(forward_query(
            &mut tape,
            &learnable_vars,
            &phi_vars,
            vocab,
            pair,
            triplet,
            &latents.t_r[pair.triplet],
            cfg,
            &mut noise_rng,
        )?);
        let target = if cfg.use_anchor {
            let frozen = match pair.kind {
                PairKind::Modified => &latents.t_t[pair.triplet],
                PairKind::Reference => &latents.t_r[pair.triplet],
            };
            tape.constant_vector(frozen.clone())
        } else {
            encode(&mut tape, &learnable_vars, &pair.target_seq, &Default::default())?
        };
        targets.push(target);
    }

    let root = symmetric_infonce(&mut tape, &queries, &targets, cfg.tau, cfg.use_anchor)?;
    let loss = tape.scalar_value(root);
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "training diverged at step {step}: loss = {loss} on a batch of {} pairs \
             (lr {}, noise {} {})",
            batch.pairs.len(),
            cfg.lr,
            cfg.noise.kind.name(),
            cfg.noise.scale,
        )));
    }
    tape.backward(root)?;
    apply_masked_update(&mut dual.learnable, &tape, &learnable_vars, cfg.update_mask, opt)?;
    Ok(loss)
}

/// Runs the full loop and leaves the trained encoder in `dual.learnable`.
/// The model kept is simply the last step's. Returns the per-step losses.
pub fn train_rtd(
    dual: &mut DualEncoder,
    phi: &PhiParams,
    vocab: &Vocabulary,
    triplets: &[TextTriplet],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut phi = phi.clone();
    phi.set_requires_grad(false);
    let latents = precompute_frozen_latents(&dual.frozen, vocab, triplets)?;
    let mut opt = masked_optimizer(&dual.learnable, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch_rng = stream_at(cfg.seed, "train-batch", step);
        let batch = build_batch(triplets, vocab, cfg, &mut batch_rng)?;
        history.push(train_step(dual, &phi, vocab, triplets, &latents, &batch, &mut opt, cfg, step)?);
    }
    Ok(history)
}

/// The naive alternative: keep φ's pretraining objective (prompt embedding
/// vs. surrogate image, both directions, no anchoring) but push the
/// gradient into the text encoder while φ stays frozen.
pub fn train_naive(
    dual: &mut DualEncoder,
    phi: &PhiParams,
    vocab: &Vocabulary,
    captions: &[TokenSeq],
    surrogate: &VisualSurrogate,
    image_seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if captions.len() < cfg.batch_size {
        return Err(Error::input(format!(
            "not enough captions for a batch: need {}, have {}",
            cfg.batch_size,
            captions.len()
        )));
    }
    let mut phi = phi.clone();
    phi.set_requires_grad(false);
    let image_embeds: Vec<Vec<f64>> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| surrogate.synth_image_embed(&dual.frozen, c, &mut stream_at(image_seed, "image", i)))
        .collect::<Result<_>>()?;

    let mut opt = masked_optimizer(&dual.learnable, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream_at(cfg.seed, "naive-batch", step);
        let mut order: Vec<usize> = (0..captions.len()).collect();
        for i in 0..cfg.batch_size {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(cfg.batch_size);

        let mut tape = Tape::new();
        let learnable_vars = dual.learnable.insert(&mut tape);
        let phi_vars = phi.insert(&mut tape);
        let mut queries = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for &idx in &order {
            let latent = tape.constant_vector(image_embeds[idx].clone());
            let pseudo = project(&mut tape, &phi_vars, latent)?;
            let (prompt, slots) = compose_prompt(pseudo, &TokenSeq { ids: vec![] }, vocab)?;
            queries.push(encode(&mut tape, &learnable_vars, &prompt, &slots)?);
            targets.push(latent);
        }
        let root = symmetric_infonce(&mut tape, &queries, &targets, cfg.tau, false)?;
        let loss = tape.scalar_value(root);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "naive training diverged at step {step}: loss = {loss}"
            )));
        }
        history.push(loss);
        tape.backward(root)?;
        apply_masked_update(&mut dual.learnable, &tape, &learnable_vars, cfg.update_mask, &mut opt)?;
    }
    Ok(history)
}

// ── Ablation grid ──

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub pair_mode: PairMode,
    pub use_anchor: bool,
    pub use_rb: bool,
    pub use_rc: bool,
    pub report: RetrievalReport,
    pub metric_average: f64,
}

/// The six training variants of the component grid, in presentation order,
/// plus the naive row.
pub const ABLATION_LABELS: [&str; 7] =
    ["baseline", "reference-pairs", "tcl", "tcl+rb", "tcl+rb-noanchor", "full", "naive"];

/// Trains one model per grid row from the same frozen starting point and
/// evaluates each on the benchmark. Row flags override the base config;
/// everything else (steps, lr, noise, seed) is shared.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    frozen: &EncoderParams,
    phi: &PhiParams,
    vocab: &Vocabulary,
    triplets: &[TextTriplet],
    captions: &[TokenSeq],
    surrogate: &VisualSurrogate,
    image_seed: u64,
    bench: &SyntheticBenchmark,
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    // (label, pair_mode, anchor, rb, rc, trained, naive)
    let grid: [(&'static str, PairMode, bool, bool, bool, bool, bool); 7] = [
        ("baseline", PairMode::Triplet, false, false, false, false, false),
        ("reference-pairs", PairMode::ReferenceOnly, true, false, false, true, false),
        ("tcl", PairMode::Triplet, true, false, false, true, false),
        ("tcl+rb", PairMode::Triplet, true, true, false, true, false),
        ("tcl+rb-noanchor", PairMode::Triplet, false, true, false, true, false),
        ("full", PairMode::Triplet, true, true, true, true, false),
        ("naive", PairMode::Triplet, false, false, false, true, true),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (label, pair_mode, use_anchor, use_rb, use_rc, trained, naive) in grid {
        let cfg = TrainConfig { pair_mode, use_anchor, use_rb, use_rc, ..base.clone() };
        let mut dual = DualEncoder::new(frozen.clone());
        if naive {
            train_naive(&mut dual, phi, vocab, captions, surrogate, image_seed, &cfg)?;
        } else if trained {
            train_rtd(&mut dual, phi, vocab, triplets, &cfg)?;
        }
        let mut report = evaluate_cir(&dual, phi, vocab, bench, EvalMode::Rtd, ks)?;
        report.mode = label.to_string();
        let metric_average = report.metric_average();
        rows.push(AblationRow { label, pair_mode, use_anchor, use_rb, use_rc, report, metric_average });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::NoiseKind;
    use crate::rng::stream;
    use crate::text::Vocabulary;

    fn test_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 3,
            lr: 1e-3,
            noise: NoiseConfig::new(NoiseKind::Product, 0.1).unwrap(),
            ..TrainConfig::desk_default()
        }
    }

    fn tiny_triplets() -> Vec<TextTriplet> {
        let worlds = [
            ("a red dog near the park", "replace dog with cat", "a red cat near the park", "dog", "cat"),
            ("a blue car near the beach", "replace car with boat", "a blue boat near the beach", "car", "boat"),
            ("a small bird near the tower", "replace bird with kite", "a small kite near the tower", "bird", "kite"),
            ("a wooden chair near the garden", "replace chair with lamp", "a wooden lamp near the garden", "chair", "lamp"),
            ("a green tree near the river", "replace tree with flower", "a green flower near the river", "tree", "flower"),
            ("a red horse near the bridge", "replace horse with drum", "a red drum near the bridge", "horse", "drum"),
        ];
        worlds
            .iter()
            .map(|(r, c, t, s, g)| TextTriplet {
                t_r: r.to_string(),
                t_c: c.to_string(),
                t_t: t.to_string(),
                source_keyword: s.to_string(),
                target_keyword: g.to_string(),
                template_id: 0,
            })
            .collect()
    }

    fn tiny_world(seed: u64) -> (DualEncoder, PhiParams, Vocabulary, Vec<TextTriplet>) {
        let triplets = tiny_triplets();
        let mut corpus: Vec<String> = triplets
            .iter()
            .flat_map(|t| [t.t_r.clone(), t.t_c.clone(), t.t_t.clone()])
            .collect();
        corpus.push("a photo of something that exists".into());
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let mut rng = stream(seed, "train-test-init");
        let frozen = EncoderParams::init(vocab.len(), 16, &mut rng).unwrap();
        let phi = PhiParams::init(16, &mut rng).unwrap();
        (DualEncoder::new(frozen), phi, vocab, triplets)
    }

    // ── Config and batch layout ──

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = test_cfg();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg = test_cfg();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg = test_cfg();
        cfg.batch_size = 5;
        cfg.use_rb = true;
        assert!(cfg.validate().unwrap_err().to_string().contains("even"));
        // Odd batches are fine without coupling.
        cfg.use_rb = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn coupled_batches_interleave_modified_and_reference() {
        let (_, _, vocab, triplets) = tiny_world(0);
        let cfg = test_cfg();
        let batch = build_batch(&triplets, &vocab, &cfg, &mut stream(1, "b")).unwrap();
        assert_eq!(batch.pairs.len(), 4);
        assert_eq!(batch.pairs[0].kind, PairKind::Modified);
        assert_eq!(batch.pairs[1].kind, PairKind::Reference);
        assert_eq!(batch.pairs[2].kind, PairKind::Modified);
        assert_eq!(batch.pairs[3].kind, PairKind::Reference);
        assert_eq!(batch.pairs[0].triplet, batch.pairs[1].triplet);
        assert_eq!(batch.pairs[2].triplet, batch.pairs[3].triplet);
        assert_ne!(batch.pairs[0].triplet, batch.pairs[2].triplet);
        // The couple's targets: T_t for the modified pair, T_r for the
        // reference pair.
        let t = &triplets[batch.pairs[0].triplet];
        assert_eq!(batch.pairs[0].target_seq.ids, vocab.tokenize(&t.t_t).ids);
        assert_eq!(batch.pairs[1].target_seq.ids, vocab.tokenize(&t.t_r).ids);
    }

    #[test]
    fn uncoupled_and_reference_only_batches() {
        let (_, _, vocab, triplets) = tiny_world(0);
        let mut cfg = test_cfg();
        cfg.use_rb = false;
        let batch = build_batch(&triplets, &vocab, &cfg, &mut stream(1, "b")).unwrap();
        assert!(batch.pairs.iter().all(|p| p.kind == PairKind::Modified));
        let ids: std::collections::BTreeSet<usize> =
            batch.pairs.iter().map(|p| p.triplet).collect();
        assert_eq!(ids.len(), 4, "no triplet twice per batch");

        cfg.pair_mode = PairMode::ReferenceOnly;
        let batch = build_batch(&triplets, &vocab, &cfg, &mut stream(1, "b")).unwrap();
        assert_eq!(batch.pairs.len(), 4);
        assert!(batch.pairs.iter().all(|p| p.kind == PairKind::Reference));
    }

    #[test]
    fn starved_triplet_pool_is_rejected() {
        let (_, _, vocab, triplets) = tiny_world(0);
        let mut cfg = test_cfg();
        cfg.batch_size = 16;
        cfg.use_rb = false;
        let err = build_batch(&triplets, &vocab, &cfg, &mut stream(1, "b")).unwrap_err();
        assert!(err.to_string().contains("not enough distinct triplets"), "{err}");
    }

    // ── Query construction ──

    #[test]
    fn plain_path_matches_direct_encoding() {
        let (dual, phi, vocab, triplets) = tiny_world(2);
        let mut cfg = test_cfg();
        cfg.use_rc = false;
        let latents = precompute_frozen_latents(&dual.frozen, &vocab, &triplets).unwrap();
        let mut tape = Tape::new();
        let vars = dual.learnable.insert(&mut tape);
        let phi_vars = phi.insert(&mut tape);
        let pair = RtdPair {
            kind: PairKind::Modified,
            triplet: 0,
            target_seq: vocab.tokenize(&triplets[0].t_t),
        };
        let q = forward_query(
            &mut tape, &vars, &phi_vars, &vocab, &pair, &triplets[0], &latents.t_r[0], &cfg,
            &mut stream(0, "n"),
        )
        .unwrap();
        let concat = format!("{} {}", triplets[0].t_r, triplets[0].t_c);
        let direct = encode_plain(&dual.learnable, &vocab.tokenize(&concat)).unwrap();
        let got: Vec<u64> = tape.values(q).iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = direct.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn reference_rc_prompt_and_plain_disagree() {
        let (dual, phi, vocab, triplets) = tiny_world(3);
        let latents = precompute_frozen_latents(&dual.frozen, &vocab, &triplets).unwrap();
        let pair = RtdPair {
            kind: PairKind::Reference,
            triplet: 1,
            target_seq: vocab.tokenize(&triplets[1].t_r),
        };
        let embed_for = |reference_rc: ReferenceRc| {
            let mut cfg = test_cfg();
            cfg.noise = NoiseConfig::none();
            cfg.reference_rc = reference_rc;
            let mut tape = Tape::new();
            let vars = dual.learnable.insert(&mut tape);
            let phi_vars = phi.insert(&mut tape);
            let q = forward_query(
                &mut tape, &vars, &phi_vars, &vocab, &pair, &triplets[1], &latents.t_r[1], &cfg,
                &mut stream(0, "n"),
            )
            .unwrap();
            tape.values(q).to_vec()
        };
        let prompt = embed_for(ReferenceRc::Prompt);
        let plain = embed_for(ReferenceRc::Plain);
        let direct = encode_plain(&dual.learnable, &vocab.tokenize(&triplets[1].t_r)).unwrap();
        assert_eq!(
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let diff: f64 = prompt.iter().zip(&plain).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "prompt path should differ from plain T_r encoding");
    }

    #[test]
    fn noise_perturbs_the_prompt_query() {
        let (dual, phi, vocab, triplets) = tiny_world(4);
        let latents = precompute_frozen_latents(&dual.frozen, &vocab, &triplets).unwrap();
        let pair = RtdPair {
            kind: PairKind::Modified,
            triplet: 0,
            target_seq: vocab.tokenize(&triplets[0].t_t),
        };
        let cfg = test_cfg();
        let embed_with_stream = |tag: &str| {
            let mut tape = Tape::new();
            let vars = dual.learnable.insert(&mut tape);
            let phi_vars = phi.insert(&mut tape);
            let q = forward_query(
                &mut tape, &vars, &phi_vars, &vocab, &pair, &triplets[0], &latents.t_r[0], &cfg,
                &mut stream(7, tag),
            )
            .unwrap();
            tape.values(q).to_vec()
        };
        let a = embed_with_stream("n1");
        let b = embed_with_stream("n1");
        let c = embed_with_stream("n2");
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let diff: f64 = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "different noise draws should move the query");
    }

    // ── Steps ──

    fn one_step(dual: &mut DualEncoder, phi: &PhiParams, vocab: &Vocabulary, triplets: &[TextTriplet], cfg: &TrainConfig) -> Result<f64> {
        let latents = precompute_frozen_latents(&dual.frozen, vocab, triplets)?;
        let batch = build_batch(triplets, vocab, cfg, &mut stream_at(cfg.seed, "train-batch", 0))?;
        let mut opt = masked_optimizer(&dual.learnable, cfg)?;
        train_step(dual, phi, vocab, triplets, &latents, &batch, &mut opt, cfg, 0)
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (mut dual, phi, vocab, triplets) = tiny_world(5);
        let mut cfg = test_cfg();
        cfg.lr = 0.0;
        let before = dual.learnable.byte_hash();
        let loss = one_step(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
        assert!(loss.is_finite());
        assert_eq!(dual.learnable.byte_hash(), before);
    }

    #[test]
    fn single_batch_descent_holds_for_a_seed_majority() {
        // Re-running the same batch forward after one update should not
        // increase the loss; noise is off so the forward is repeatable.
        let mut descents = 0;
        for seed in 0..5u64 {
            let (mut dual, phi, vocab, triplets) = tiny_world(100 + seed);
            let mut cfg = test_cfg();
            cfg.noise = NoiseConfig::none();
            // First-step Adam moves every coordinate by about lr, so the
            // within-batch descent check wants a conservative rate.
            cfg.lr = 1e-5;
            cfg.seed = seed;
            let latents = precompute_frozen_latents(&dual.frozen, &vocab, &triplets).unwrap();
            let batch =
                build_batch(&triplets, &vocab, &cfg, &mut stream_at(cfg.seed, "train-batch", 0))
                    .unwrap();
            let mut opt = masked_optimizer(&dual.learnable, &cfg).unwrap();
            let before =
                train_step(&mut dual, &phi, &vocab, &triplets, &latents, &batch, &mut opt, &cfg, 0)
                    .unwrap();
            // Forward-only rerun: zero learning rate, fresh optimizer.
            let mut cfg2 = cfg.clone();
            cfg2.lr = 0.0;
            let mut opt2 = masked_optimizer(&dual.learnable, &cfg2).unwrap();
            let after = train_step(
                &mut dual, &phi, &vocab, &triplets, &latents, &batch, &mut opt2, &cfg2, 0,
            )
            .unwrap();
            if after <= before {
                descents += 1;
            }
        }
        assert!(descents >= 3, "descent held in only {descents} of 5 seeds");
    }

    #[test]
    fn fc_only_mask_leaves_attention_bit_unchanged() {
        let (mut dual, phi, vocab, triplets) = tiny_world(6);
        let mut cfg = test_cfg();
        cfg.update_mask = UpdateMask::FcOnly;
        let before: Vec<(String, Vec<u64>)> = ["e_w", "p", "w_q", "w_k", "w_v", "w_o", "w_out", "b_out"]
            .iter()
            .map(|n| {
                (n.to_string(), dual.learnable.field(n).unwrap().values.iter().map(|v| v.to_bits()).collect())
            })
            .collect();
        let changed_before: Vec<u64> =
            dual.learnable.field("w_1").unwrap().values.iter().map(|v| v.to_bits()).collect();
        one_step(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
        for (name, bits) in before {
            let now: Vec<u64> =
                dual.learnable.field(&name).unwrap().values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(now, bits, "{name} moved under fc_only");
        }
        let changed_after: Vec<u64> =
            dual.learnable.field("w_1").unwrap().values.iter().map(|v| v.to_bits()).collect();
        assert_ne!(changed_after, changed_before, "w_1 should move under fc_only");
    }

    #[test]
    fn poisoned_parameters_abort_with_numeric_error() {
        let (mut dual, phi, vocab, triplets) = tiny_world(7);
        let cfg = test_cfg();
        dual.learnable.field_mut("w_q").unwrap().values[0] = f64::NAN;
        let err = one_step(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    // ── Full runs ──

    #[test]
    fn zero_steps_is_the_identity() {
        let (mut dual, phi, vocab, triplets) = tiny_world(8);
        let mut cfg = test_cfg();
        cfg.steps = 0;
        let history = train_rtd(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(dual.learnable.byte_hash(), dual.frozen.byte_hash());
    }

    #[test]
    fn training_moves_learnable_but_never_frozen_or_phi() {
        let (mut dual, phi, vocab, triplets) = tiny_world(9);
        let cfg = test_cfg();
        let frozen_hash = dual.frozen.byte_hash();
        let phi_hash = phi.byte_hash();
        let history = train_rtd(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
        assert_eq!(history.len(), cfg.steps);
        assert!(history.iter().all(|l| l.is_finite()));
        assert_eq!(dual.frozen.byte_hash(), frozen_hash);
        assert_eq!(phi.byte_hash(), phi_hash);
        assert_ne!(dual.learnable.byte_hash(), frozen_hash);
    }

    #[test]
    fn same_seed_trains_to_identical_bytes() {
        let run = || {
            let (mut dual, phi, vocab, triplets) = tiny_world(10);
            let cfg = test_cfg();
            train_rtd(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
            dual.learnable.byte_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unanchored_training_also_runs() {
        let (mut dual, phi, vocab, triplets) = tiny_world(11);
        let mut cfg = test_cfg();
        cfg.use_anchor = false;
        let history = train_rtd(&mut dual, &phi, &vocab, &triplets, &cfg).unwrap();
        assert_eq!(history.len(), cfg.steps);
        assert_ne!(dual.learnable.byte_hash(), dual.frozen.byte_hash());
    }

    #[test]
    fn naive_training_updates_encoder_against_phi_objective() {
        let (mut dual, phi, vocab, triplets) = tiny_world(12);
        let captions: Vec<TokenSeq> =
            triplets.iter().map(|t| vocab.tokenize(&t.t_r)).collect();
        let mut rng = stream(12, "surrogate");
        let surrogate = VisualSurrogate::new(16, 0.3, 0.0, &mut rng).unwrap();
        let mut cfg = test_cfg();
        cfg.batch_size = 4;
        let phi_hash = phi.byte_hash();
        let history =
            train_naive(&mut dual, &phi, &vocab, &captions, &surrogate, 0, &cfg).unwrap();
        assert_eq!(history.len(), cfg.steps);
        assert_eq!(phi.byte_hash(), phi_hash);
        assert_ne!(dual.learnable.byte_hash(), dual.frozen.byte_hash());
    }
}
