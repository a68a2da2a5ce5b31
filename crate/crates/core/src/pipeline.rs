//! End-to-end orchestration: a run directory with checkpoints, triplets and
//! reports, driven by a flat key=value config.
//!
//! Stages run disk-to-disk so any suffix of the pipeline can be re-run
//! against an existing directory, and two runs with the same seed produce
//! byte-identical artifacts. Layout under the run directory:
//!
//! ```text
//! manifest.txt             run summary (config echo, counts, metrics)
//! vocab.txt                token vocabulary
//! checkpoints/frozen.ckpt      aligned encoder, the anchor space
//! checkpoints/surrogate.ckpt   image-embedding stand-in
//! checkpoints/phi.ckpt         latent-to-token projection
//! checkpoints/learnable.ckpt   trained encoder
//! triplets.tsv             generated and filtered caption triplets
//! reports/eval.tsv         retrieval metrics, one row per (mode, metric, K)
//! stats/<stage>.txt        per-stage counters feeding the manifest
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::{
    align_encoder, hex, AlignConfig, DualEncoder, EncoderParams, UpdateMask, VisualSurrogate,
};
use crate::error::{Error, Result};
use crate::eval::{
    avg_cosine_probe, build_synthetic_benchmark, evaluate_cir, EvalMode, GrammarConfig,
    SyntheticBenchmark,
};
use crate::projection::{NoiseConfig, NoiseKind, PhiParams, PhiPretrainConfig};
use crate::rng::stream;
use crate::text::{TokenSeq, Vocabulary};
use crate::train::{PairMode, ReferenceRc, TrainConfig};
use crate::triplets::{
    extract_keywords, filter_triplets, generate_triplets, keyword_embeddings, GenConfig,
    TemplateSet,
};
use crate::{checkpoint, train};

// ── Config ──

/// Every tunable of a run, parsed from `key = value` lines (`#` comments).
/// Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Encoder latent dimension.
    pub d: usize,
    /// Optional caption corpus path (one caption per line). Empty means the
    /// built-in grammar corpus; the benchmark always uses the grammar.
    pub corpus: String,
    pub gallery_size: usize,
    pub query_count: usize,
    pub align_steps: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    pub align_dropout: f64,
    /// Self-alignment temperature. Softer than the training temperature so
    /// the caption space spreads without driving word embeddings orthogonal;
    /// the replacement band presupposes moderately similar words.
    pub align_tau: f64,
    pub gap_norm: f64,
    pub sigma_img: f64,
    pub phi_steps: usize,
    pub phi_batch: usize,
    pub phi_lr: f64,
    pub min_freq: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub filter_threshold: f64,
    /// Noise strength for the triplet-filter probe. Milder than the training
    /// noise: at this latent width the full training perturbation would push
    /// every probe below threshold, and the filter should discriminate, not
    /// annihilate.
    pub filter_noise_scale: f64,
    pub triplet_count: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub noise: String,
    pub noise_scale: f64,
    pub use_rb: bool,
    pub use_rc: bool,
    pub use_anchor: bool,
    pub pair_mode: String,
    pub reference_rc: String,
    pub update_mask: String,
    /// Learning rate for the ablation grid. Gentler than the headline run:
    /// variant ordering is only legible while the plain-concatenation rows
    /// still have a working prompt path, which the headline rate destroys.
    pub ablate_lr: f64,
    /// Step budget for the ablation grid, matched across variants.
    pub ablate_steps: usize,
    /// Update mask for the ablation grid. Restricting updates to the MLP
    /// keeps the attention path shared across variants, so rows differ by
    /// their stated switch rather than by how far each one drifted.
    pub ablate_update_mask: String,
    pub eval_ks: String,
    /// Upper bound on worker threads. The current implementation is
    /// single-threaded; 1 is also what bit-reproducibility asks for.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d: 64,
            corpus: String::new(),
            gallery_size: 500,
            query_count: 200,
            align_steps: 300,
            align_batch: 32,
            align_lr: 1e-3,
            align_dropout: 0.3,
            align_tau: 0.03,
            gap_norm: 0.2,
            sigma_img: 0.05,
            phi_steps: 800,
            phi_batch: 32,
            phi_lr: 3e-3,
            min_freq: 3,
            band_lo: 0.5,
            band_hi: 0.7,
            filter_threshold: 0.75,
            filter_noise_scale: 0.12,
            triplet_count: 1500,
            tau: 0.07,
            lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 2000,
            noise: "product".into(),
            noise_scale: 0.1,
            use_rb: true,
            use_rc: true,
            use_anchor: true,
            pair_mode: "triplet".into(),
            reference_rc: "prompt".into(),
            update_mask: "full".into(),
            ablate_lr: 5e-4,
            ablate_steps: 1000,
            ablate_update_mask: "fc_only".into(),
            eval_ks: "1,5,10".into(),
            threads: 1,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::input(format!(
            "config key {key}: cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::input(format!(
            "config key {key}: expected true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "d" => self.d = parse_as(key, value)?,
            "corpus" => self.corpus = value.trim().to_string(),
            "gallery_size" => self.gallery_size = parse_as(key, value)?,
            "query_count" => self.query_count = parse_as(key, value)?,
            "align_steps" => self.align_steps = parse_as(key, value)?,
            "align_batch" => self.align_batch = parse_as(key, value)?,
            "align_lr" => self.align_lr = parse_as(key, value)?,
            "align_dropout" => self.align_dropout = parse_as(key, value)?,
            "align_tau" => self.align_tau = parse_as(key, value)?,
            "gap_norm" => self.gap_norm = parse_as(key, value)?,
            "sigma_img" => self.sigma_img = parse_as(key, value)?,
            "phi_steps" => self.phi_steps = parse_as(key, value)?,
            "phi_batch" => self.phi_batch = parse_as(key, value)?,
            "phi_lr" => self.phi_lr = parse_as(key, value)?,
            "min_freq" => self.min_freq = parse_as(key, value)?,
            "band_lo" => self.band_lo = parse_as(key, value)?,
            "band_hi" => self.band_hi = parse_as(key, value)?,
            "filter_threshold" => self.filter_threshold = parse_as(key, value)?,
            "filter_noise_scale" => self.filter_noise_scale = parse_as(key, value)?,
            "triplet_count" => self.triplet_count = parse_as(key, value)?,
            "tau" => self.tau = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "steps" => self.steps = parse_as(key, value)?,
            "noise" => self.noise = value.trim().to_string(),
            "noise_scale" => self.noise_scale = parse_as(key, value)?,
            "use_rb" => self.use_rb = parse_bool(key, value)?,
            "use_rc" => self.use_rc = parse_bool(key, value)?,
            "use_anchor" => self.use_anchor = parse_bool(key, value)?,
            "pair_mode" => self.pair_mode = value.trim().to_string(),
            "reference_rc" => self.reference_rc = value.trim().to_string(),
            "update_mask" => self.update_mask = value.trim().to_string(),
            "ablate_lr" => self.ablate_lr = parse_as(key, value)?,
            "ablate_steps" => self.ablate_steps = parse_as(key, value)?,
            "ablate_update_mask" => self.ablate_update_mask = value.trim().to_string(),
            "eval_ks" => self.eval_ks = value.trim().to_string(),
            "threads" => self.threads = parse_as(key, value)?,
            other => return Err(Error::input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, later assignments override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::input(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value)
                .map_err(|e| e.context(&format!("config line {}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Stable `key = value` listing of every field, for manifests.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("d", self.d.to_string());
        kv("corpus", self.corpus.clone());
        kv("gallery_size", self.gallery_size.to_string());
        kv("query_count", self.query_count.to_string());
        kv("align_steps", self.align_steps.to_string());
        kv("align_batch", self.align_batch.to_string());
        kv("align_lr", self.align_lr.to_string());
        kv("align_dropout", self.align_dropout.to_string());
        kv("align_tau", self.align_tau.to_string());
        kv("gap_norm", self.gap_norm.to_string());
        kv("sigma_img", self.sigma_img.to_string());
        kv("phi_steps", self.phi_steps.to_string());
        kv("phi_batch", self.phi_batch.to_string());
        kv("phi_lr", self.phi_lr.to_string());
        kv("min_freq", self.min_freq.to_string());
        kv("band_lo", self.band_lo.to_string());
        kv("band_hi", self.band_hi.to_string());
        kv("filter_threshold", self.filter_threshold.to_string());
        kv("filter_noise_scale", self.filter_noise_scale.to_string());
        kv("triplet_count", self.triplet_count.to_string());
        kv("tau", self.tau.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("noise", self.noise.clone());
        kv("noise_scale", self.noise_scale.to_string());
        kv("use_rb", self.use_rb.to_string());
        kv("use_rc", self.use_rc.to_string());
        kv("use_anchor", self.use_anchor.to_string());
        kv("pair_mode", self.pair_mode.clone());
        kv("reference_rc", self.reference_rc.clone());
        kv("update_mask", self.update_mask.clone());
        kv("ablate_lr", self.ablate_lr.to_string());
        kv("ablate_steps", self.ablate_steps.to_string());
        kv("ablate_update_mask", self.ablate_update_mask.clone());
        kv("eval_ks", self.eval_ks.clone());
        kv("threads", self.threads.to_string());
        s
    }

    // ── Derived sub-configs ──

    pub fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            gallery_size: self.gallery_size,
            query_count: self.query_count,
            ..GrammarConfig::default()
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            steps: self.align_steps,
            batch_size: self.align_batch,
            lr: self.align_lr,
            dropout: self.align_dropout,
            tau: self.align_tau,
            weight_decay: 0.0,
            seed: self.seed,
        }
    }

    pub fn phi_config(&self) -> PhiPretrainConfig {
        PhiPretrainConfig {
            steps: self.phi_steps,
            batch_size: self.phi_batch,
            lr: self.phi_lr,
            weight_decay: 0.0,
            tau: self.tau,
            seed: self.seed,
            image_seed: self.seed,
        }
    }

    pub fn noise_config(&self) -> Result<NoiseConfig> {
        NoiseConfig::new(NoiseKind::parse(&self.noise)?, self.noise_scale)
    }

    /// Probe noise for the triplet filter: training kind, filter strength.
    pub fn filter_noise_config(&self) -> Result<NoiseConfig> {
        NoiseConfig::new(NoiseKind::parse(&self.noise)?, self.filter_noise_scale)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            band_lo: self.band_lo,
            band_hi: self.band_hi,
            seed: self.seed,
            count: self.triplet_count,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            tau: self.tau,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            steps: self.steps,
            noise: self.noise_config()?,
            use_rb: self.use_rb,
            use_rc: self.use_rc,
            use_anchor: self.use_anchor,
            pair_mode: PairMode::parse(&self.pair_mode)?,
            reference_rc: ReferenceRc::parse(&self.reference_rc)?,
            update_mask: UpdateMask::parse(&self.update_mask)?,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training config for the ablation grid: same switches, gentler budget
    /// and a narrower update mask than the headline run.
    pub fn ablate_train_config(&self) -> Result<TrainConfig> {
        let mut cfg = self.train_config()?;
        cfg.lr = self.ablate_lr;
        cfg.steps = self.ablate_steps;
        cfg.update_mask = UpdateMask::parse(&self.ablate_update_mask)?;
        Ok(cfg)
    }

    pub fn ks(&self) -> Result<Vec<usize>> {
        let ks: Vec<usize> = self
            .eval_ks
            .split(',')
            .map(|s| parse_as::<usize>("eval_ks", s))
            .collect::<Result<_>>()?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::input("eval_ks must list ranking depths of at least 1"));
        }
        Ok(ks)
    }
}

// ── Stages ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Align,
    Phi,
    Triplets,
    Train,
    Eval,
}

pub const STAGES: [Stage; 5] = [Stage::Align, Stage::Phi, Stage::Triplets, Stage::Train, Stage::Eval];

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(Stage::Align),
            "phi" => Ok(Stage::Phi),
            "triplets" => Ok(Stage::Triplets),
            "train" => Ok(Stage::Train),
            "eval" => Ok(Stage::Eval),
            other => Err(Error::input(format!(
                "unknown stage {other:?} (expected align | phi | triplets | train | eval)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Phi => "phi",
            Stage::Triplets => "triplets",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

/// Artifact paths inside one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn frozen(&self) -> PathBuf {
        self.root.join("checkpoints/frozen.ckpt")
    }
    pub fn surrogate(&self) -> PathBuf {
        self.root.join("checkpoints/surrogate.ckpt")
    }
    pub fn phi(&self) -> PathBuf {
        self.root.join("checkpoints/phi.ckpt")
    }
    pub fn learnable(&self) -> PathBuf {
        self.root.join("checkpoints/learnable.ckpt")
    }
    pub fn triplets(&self) -> PathBuf {
        self.root.join("triplets.tsv")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("reports/eval.tsv")
    }
    pub fn ablation_report(&self) -> PathBuf {
        self.root.join("reports/ablation.tsv")
    }
    pub fn probe_report(&self) -> PathBuf {
        self.root.join("reports/probe.tsv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }
    fn stats(&self, stage: &str) -> PathBuf {
        self.root.join(format!("stats/{stage}.txt"))
    }

    fn ensure_layout(&self) -> Result<()> {
        for dir in [
            self.root.clone(),
            self.root.join("checkpoints"),
            self.root.join("reports"),
            self.root.join("stats"),
        ] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::missing(format!("{what} not found at {}", path.display())))
    }
}

fn load_vocab(dir: &RunDir) -> Result<Vocabulary> {
    require(&dir.vocab(), "vocabulary")?;
    Vocabulary::load(&dir.vocab())
}

/// The caption corpus a run trains and generates from: an external file if
/// configured, the full grammar enumeration otherwise.
pub fn corpus_captions(cfg: &RunConfig) -> Result<Vec<String>> {
    if cfg.corpus.is_empty() {
        return Ok(cfg.grammar().all_captions());
    }
    let path = Path::new(&cfg.corpus);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let captions: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if captions.is_empty() {
        return Err(Error::input(format!("corpus {} contains no captions", path.display())));
    }
    Ok(captions)
}

fn corpus_hash(captions: &[String]) -> String {
    let mut hasher = Sha256::new();
    for c in captions {
        hasher.update(c.as_bytes());
        hasher.update([0x0a]);
    }
    hex(&hasher.finalize())
}

/// Vocabulary corpus: captions plus the prompt scaffold and the template
/// wording, so conditioning texts tokenize without unknown-token collapse.
pub fn vocab_corpus(captions: &[String]) -> Vec<String> {
    let mut lines = captions.to_vec();
    lines.push("a photo of something that exists".to_string());
    lines.extend(TemplateSet::builtin().word_lines());
    lines
}

fn tokenize_all(vocab: &Vocabulary, captions: &[String]) -> Vec<TokenSeq> {
    captions.iter().map(|c| vocab.tokenize(c)).collect()
}

/// Builds the world the rest of the pipeline runs in: vocabulary, aligned
/// (frozen) encoder, and the image surrogate.
pub fn stage_align(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    dir.ensure_layout()?;
    let captions = corpus_captions(cfg)?;
    let corpus = vocab_corpus(&captions);
    let vocab = Vocabulary::build(&corpus, 1)?;
    vocab.save(&dir.vocab())?;

    let mut params = EncoderParams::init(vocab.len(), cfg.d, &mut stream(cfg.seed, "encoder-init"))?;
    let history = align_encoder(&mut params, &tokenize_all(&vocab, &captions), &cfg.align_config())?;
    checkpoint::save_encoder(&dir.frozen(), &params)?;

    let surrogate =
        VisualSurrogate::new(cfg.d, cfg.gap_norm, cfg.sigma_img, &mut stream(cfg.seed, "surrogate"))?;
    checkpoint::save_surrogate(&dir.surrogate(), &surrogate)?;

    let mut stats = String::new();
    let _ = writeln!(stats, "captions = {}", captions.len());
    let _ = writeln!(stats, "corpus_hash = {}", corpus_hash(&captions));
    let _ = writeln!(stats, "vocab_size = {}", vocab.len());
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        let _ = writeln!(stats, "align_loss_first = {first:.6}");
        let _ = writeln!(stats, "align_loss_last = {last:.6}");
    }
    write_file(&dir.stats("align"), &stats)
}

/// Pretrains the projection against surrogate image embeddings of the
/// corpus captions.
pub fn stage_phi(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    dir.ensure_layout()?;
    let vocab = load_vocab(dir)?;
    let frozen = checkpoint::load_encoder(&dir.frozen())?;
    let surrogate = checkpoint::load_surrogate(&dir.surrogate())?;
    let captions = tokenize_all(&vocab, &corpus_captions(cfg)?);
    let (phi, history) = crate::projection::pretrain_phi(&frozen, &vocab, &captions, &surrogate, &cfg.phi_config())?;
    checkpoint::save_phi(&dir.phi(), &phi)?;

    let mut stats = String::new();
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        let _ = writeln!(stats, "phi_loss_first = {first:.6}");
        let _ = writeln!(stats, "phi_loss_last = {last:.6}");
    }
    write_file(&dir.stats("phi"), &stats)
}

/// Generates caption triplets, filters them with the projection probe, and
/// writes the surviving ones.
pub fn stage_triplets(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    dir.ensure_layout()?;
    let vocab = load_vocab(dir)?;
    let frozen = checkpoint::load_encoder(&dir.frozen())?;
    let phi = checkpoint::load_phi(&dir.phi())?;
    let captions = corpus_captions(cfg)?;

    let stats = extract_keywords(&captions, &vocab, cfg.min_freq)?;
    let embeddings = keyword_embeddings(&frozen, &vocab, &stats)?;
    let generated = generate_triplets(
        &captions,
        &TemplateSet::builtin(),
        &stats,
        &embeddings,
        &cfg.gen_config(),
    )?;
    let noise = cfg.filter_noise_config()?;
    let kept = filter_triplets(&generated, &frozen, &vocab, &phi, &noise, cfg.filter_threshold, cfg.seed)?;
    crate::triplets::save_triplets(&kept, &dir.triplets())?;

    let mut out = String::new();
    let _ = writeln!(out, "eligible_keywords = {}", stats.eligible().len());
    let _ = writeln!(out, "triplets_generated = {}", generated.len());
    let _ = writeln!(out, "triplets_kept = {}", kept.len());
    let _ = writeln!(out, "filter_threshold = {}", cfg.filter_threshold);
    if !generated.is_empty() {
        let _ = writeln!(out, "filter_pass_rate = {:.6}", kept.len() as f64 / generated.len() as f64);
    }
    write_file(&dir.stats("triplets"), &out)
}

/// Trains the learnable encoder against the frozen anchor.
pub fn stage_train(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    dir.ensure_layout()?;
    let vocab = load_vocab(dir)?;
    let frozen = checkpoint::load_encoder(&dir.frozen())?;
    let phi = checkpoint::load_phi(&dir.phi())?;
    let triplets = crate::triplets::load_triplets(&dir.triplets())?;
    let tc = cfg.train_config()?;
    let mut dual = DualEncoder::new(frozen);
    let history = train::train_rtd(&mut dual, &phi, &vocab, &triplets, &tc)?;
    checkpoint::save_encoder(&dir.learnable(), &dual.learnable)?;

    let mut stats = String::new();
    let _ = writeln!(stats, "train_steps = {}", history.len());
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        let _ = writeln!(stats, "train_loss_first = {first:.6}");
        let _ = writeln!(stats, "train_loss_last = {last:.6}");
    }
    write_file(&dir.stats("train"), &stats)
}

/// Loads the world a benchmark evaluation needs.
pub fn load_eval_world(
    cfg: &RunConfig,
    dir: &RunDir,
) -> Result<(DualEncoder, PhiParams, Vocabulary, SyntheticBenchmark)> {
    let vocab = load_vocab(dir)?;
    let frozen = checkpoint::load_encoder(&dir.frozen())?;
    let learnable = checkpoint::load_encoder(&dir.learnable())?;
    let phi = checkpoint::load_phi(&dir.phi())?;
    let surrogate = checkpoint::load_surrogate(&dir.surrogate())?;
    let bench = build_synthetic_benchmark(&cfg.grammar(), &frozen, &vocab, &surrogate, cfg.seed)?;
    let mut dual = DualEncoder::new(frozen);
    dual.learnable = learnable;
    Ok((dual, phi, vocab, bench))
}

/// Benchmarks every query mode and writes the retrieval report.
pub fn stage_eval(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    dir.ensure_layout()?;
    let (dual, phi, vocab, bench) = load_eval_world(cfg, dir)?;
    let ks = cfg.ks()?;
    let mut report = String::new();
    for mode in [EvalMode::Frozen, EvalMode::Rtd, EvalMode::IdealCaption, EvalMode::ImageOnly] {
        report.push_str(&evaluate_cir(&dual, &phi, &vocab, &bench, mode, &ks)?.tsv());
    }
    write_file(&dir.eval_report(), &report)?;

    let (frozen_mean, rtd_mean) = avg_cosine_probe(&dual, &phi, &vocab, &bench)?;
    let mut stats = String::new();
    let _ = writeln!(stats, "avg_cosine_frozen = {frozen_mean:.6}");
    let _ = writeln!(stats, "avg_cosine_rtd = {rtd_mean:.6}");
    write_file(&dir.stats("eval"), &stats)
}

/// Rebuilds `manifest.txt` from the config echo and whatever stage stats
/// exist. Deterministic: no timestamps, stable ordering.
pub fn write_manifest(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let mut out = String::from("# run manifest\n\n[config]\n");
    out.push_str(&cfg.echo());
    for stage in STAGES {
        let path = dir.stats(stage.name());
        if path.exists() {
            let body = fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
            let _ = write!(out, "\n[{}]\n{}", stage.name(), body);
        }
    }
    if dir.eval_report().exists() {
        let body = fs::read_to_string(dir.eval_report()).map_err(|e| Error::io(dir.eval_report(), e))?;
        out.push_str("\n[metrics]\n");
        out.push_str(&body);
    }
    write_file(&dir.manifest(), &out)
}

pub fn run_stage(cfg: &RunConfig, dir: &RunDir, stage: Stage) -> Result<()> {
    let result = match stage {
        Stage::Align => stage_align(cfg, dir),
        Stage::Phi => stage_phi(cfg, dir),
        Stage::Triplets => stage_triplets(cfg, dir),
        Stage::Train => stage_train(cfg, dir),
        Stage::Eval => stage_eval(cfg, dir),
    };
    result.map_err(|e| e.context(&format!("stage {}", stage.name())))?;
    write_manifest(cfg, dir)
}

/// All five stages in order.
pub fn run_pipeline(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    for stage in STAGES {
        run_stage(cfg, dir, stage)?;
    }
    Ok(())
}

// ── Ablation and probe drivers ──

fn ensure_world(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    if !dir.vocab().exists() || !dir.frozen().exists() || !dir.surrogate().exists() {
        run_stage(cfg, dir, Stage::Align)?;
    }
    if !dir.phi().exists() {
        run_stage(cfg, dir, Stage::Phi)?;
    }
    if !dir.triplets().exists() {
        run_stage(cfg, dir, Stage::Triplets)?;
    }
    Ok(())
}

/// Runs the component grid plus the naive row, writing one tab-separated
/// line per variant. Prerequisite stages run on demand.
pub fn run_ablation_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    ensure_world(cfg, dir)?;
    let vocab = load_vocab(dir)?;
    let frozen = checkpoint::load_encoder(&dir.frozen())?;
    let phi = checkpoint::load_phi(&dir.phi())?;
    let surrogate = checkpoint::load_surrogate(&dir.surrogate())?;
    let triplets = crate::triplets::load_triplets(&dir.triplets())?;
    let captions = tokenize_all(&vocab, &corpus_captions(cfg)?);
    let bench = build_synthetic_benchmark(&cfg.grammar(), &frozen, &vocab, &surrogate, cfg.seed)?;
    let base = cfg.ablate_train_config()?;
    let ks = cfg.ks()?;

    let rows = train::run_ablation(
        &base, &frozen, &phi, &vocab, &triplets, &captions, &surrogate, cfg.seed, &bench, &ks,
    )?;
    let mut out = String::from("# variant\tpair_mode\tanchor\trb\trc\tmetric_average\tmap@5\n");
    for row in &rows {
        let map5 = row.report.map_at(5).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            row.label,
            row.pair_mode.name(),
            row.use_anchor,
            row.use_rb,
            row.use_rc,
            row.metric_average,
            map5
        );
    }
    write_file(&dir.ablation_report(), &out)?;
    write_manifest(cfg, dir)
}

/// Text-only retrieval probes: the frozen encoder, a reference-pair-updated
/// encoder (trained on demand), and the trained one, plus the average-cosine
/// comparison. Writes `reports/probe.tsv`.
pub fn run_probe_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (dual, phi, vocab, bench) = load_eval_world(cfg, dir)?;
    let ks = cfg.ks()?;
    let mut out = String::new();

    out.push_str(
        &crate::eval::discrepancy_probe_t2i(&dual, &vocab, &bench, crate::eval::ProbeVariant::Frozen, &ks)?
            .tsv(),
    );

    // The pair-updated variant trains its own encoder on (T_r, T_r) pairs.
    let triplets = crate::triplets::load_triplets(&dir.triplets())?;
    let mut ref_cfg = cfg.train_config()?;
    ref_cfg.pair_mode = PairMode::ReferenceOnly;
    let mut ref_dual = DualEncoder::new(dual.frozen.clone());
    train::train_rtd(&mut ref_dual, &phi, &vocab, &triplets, &ref_cfg)?;
    out.push_str(
        &crate::eval::discrepancy_probe_t2i(
            &ref_dual,
            &vocab,
            &bench,
            crate::eval::ProbeVariant::PairUpdated,
            &ks,
        )?
        .tsv(),
    );

    out.push_str(
        &crate::eval::discrepancy_probe_t2i(&dual, &vocab, &bench, crate::eval::ProbeVariant::Rtd, &ks)?
            .tsv(),
    );

    let (frozen_mean, rtd_mean) = avg_cosine_probe(&dual, &phi, &vocab, &bench)?;
    let _ = writeln!(out, "avg-cosine\tfrozen\t-\t{frozen_mean:.6}");
    let _ = writeln!(out, "avg-cosine\trtd\t-\t{rtd_mean:.6}");
    write_file(&dir.probe_report(), &out)?;
    write_manifest(cfg, dir)
}

/// Standalone triplet generation against an explicit corpus file: builds a
/// throwaway world (alignment + projection pretraining) in memory, then
/// generates, filters, and writes the TSV plus a small manifest next to it.
pub fn gen_triplets_cmd(cfg: &RunConfig, corpus_path: &Path, out_path: &Path) -> Result<usize> {
    let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let captions: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if captions.is_empty() {
        return Err(Error::input(format!(
            "corpus {} contains no captions",
            corpus_path.display()
        )));
    }

    let vocab = Vocabulary::build(&vocab_corpus(&captions), 1)?;
    let seqs = tokenize_all(&vocab, &captions);
    let mut frozen = EncoderParams::init(vocab.len(), cfg.d, &mut stream(cfg.seed, "encoder-init"))?;
    align_encoder(&mut frozen, &seqs, &cfg.align_config())?;
    let surrogate =
        VisualSurrogate::new(cfg.d, cfg.gap_norm, cfg.sigma_img, &mut stream(cfg.seed, "surrogate"))?;
    let (phi, _) = crate::projection::pretrain_phi(&frozen, &vocab, &seqs, &surrogate, &cfg.phi_config())?;

    let stats = extract_keywords(&captions, &vocab, cfg.min_freq)?;
    let embeddings = keyword_embeddings(&frozen, &vocab, &stats)?;
    let generated =
        generate_triplets(&captions, &TemplateSet::builtin(), &stats, &embeddings, &cfg.gen_config())?;
    let noise = cfg.filter_noise_config()?;
    let kept = filter_triplets(&generated, &frozen, &vocab, &phi, &noise, cfg.filter_threshold, cfg.seed)?;
    crate::triplets::save_triplets(&kept, out_path)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "corpus = {}", corpus_path.display());
    let _ = writeln!(manifest, "captions = {}", captions.len());
    let _ = writeln!(manifest, "corpus_hash = {}", corpus_hash(&captions));
    let _ = writeln!(manifest, "triplets_generated = {}", generated.len());
    let _ = writeln!(manifest, "triplets_kept = {}", kept.len());
    let _ = writeln!(manifest, "filter_threshold = {}", cfg.filter_threshold);
    if !generated.is_empty() {
        let _ = writeln!(
            manifest,
            "filter_pass_rate = {:.6}",
            kept.len() as f64 / generated.len() as f64
        );
    }
    let manifest_path = out_path.with_extension("manifest.txt");
    write_file(&manifest_path, &manifest)?;
    Ok(kept.len())
}
