//! Synthetic retrieval benchmark and ranking metrics.
//!
//! The benchmark is a closed world. Captions come from a small grammar
//! (attribute x subject x context), "images" are surrogate embeddings of
//! those captions, and each query edits exactly one slot of a reference
//! caption, so the true target caption is known by construction. Positives
//! are all gallery items that share the edited caption tuple; duplicated
//! tuples make multi-positive mAP meaningful.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::diff::Tape;
use crate::encoder::{encode, encode_plain, DualEncoder, EncoderParams, VisualSurrogate};
use crate::error::{Error, Result};
use crate::projection::{compose_prompt, project, PhiParams};
use crate::rng::{stream, stream_at};
use crate::text::{TokenSeq, Vocabulary};
use crate::triplets::{TemplateKind, TemplateSet};

/// Ranking depths reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// (subject index, attribute index, context index) into a `GrammarConfig`.
pub type CaptionTuple = (usize, usize, usize);

const SUBJECTS: [&str; 20] = [
    "dog", "cat", "car", "house", "tree", "bird", "boat", "chair", "horse", "flower", "truck",
    "plane", "lamp", "phone", "shirt", "clock", "robot", "piano", "kite", "drum",
];
const ATTRIBUTES: [&str; 5] = ["red", "blue", "green", "small", "wooden"];
const CONTEXTS: [&str; 10] = [
    "park", "beach", "river", "market", "bridge", "station", "garden", "harbor", "castle", "tower",
];

// ── Grammar ──

/// Closed caption world: `a {attribute} {subject} near the {context}`.
#[derive(Debug, Clone)]
pub struct GrammarConfig {
    pub subjects: Vec<String>,
    pub attributes: Vec<String>,
    pub contexts: Vec<String>,
    pub gallery_size: usize,
    pub query_count: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            subjects: SUBJECTS.iter().map(|s| s.to_string()).collect(),
            attributes: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            contexts: CONTEXTS.iter().map(|s| s.to_string()).collect(),
            gallery_size: 500,
            query_count: 200,
        }
    }
}

impl GrammarConfig {
    fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.attributes.is_empty() || self.contexts.is_empty() {
            return Err(Error::input("grammar: every word list needs at least one entry"));
        }
        if self.gallery_size == 0 {
            return Err(Error::input("grammar: gallery size must be at least 1"));
        }
        Ok(())
    }

    pub fn caption(&self, tuple: CaptionTuple) -> String {
        format!(
            "a {} {} near the {}",
            self.attributes[tuple.1], self.subjects[tuple.0], self.contexts[tuple.2]
        )
    }

    /// Every caption the grammar can produce, in (subject, attribute,
    /// context) index order. This is the corpus the rest of the pipeline
    /// builds its vocabulary and keyword statistics from.
    pub fn all_captions(&self) -> Vec<String> {
        let mut out =
            Vec::with_capacity(self.subjects.len() * self.attributes.len() * self.contexts.len());
        for s in 0..self.subjects.len() {
            for a in 0..self.attributes.len() {
                for c in 0..self.contexts.len() {
                    out.push(self.caption((s, a, c)));
                }
            }
        }
        out
    }
}

// ── Benchmark ──

#[derive(Debug, Clone)]
pub struct GalleryItem {
    pub image_id: usize,
    pub embedding: Vec<f64>,
    pub caption: String,
    pub tuple: CaptionTuple,
}

#[derive(Debug, Clone)]
pub struct BenchQuery {
    pub reference_id: usize,
    pub cond_text: String,
    /// Gallery ids sharing the target tuple, ascending.
    pub positives: Vec<usize>,
    pub target_caption: String,
    pub target_tuple: CaptionTuple,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub gallery: Vec<GalleryItem>,
    pub queries: Vec<BenchQuery>,
    pub seed: u64,
    pub config: GrammarConfig,
}

/// Samples a gallery of surrogate image embeddings (caption tuples drawn
/// with replacement, so duplicates exist) and builds queries as single-slot
/// caption edits whose target tuple is present in the gallery. The edit is
/// phrased with a replacement template, e.g. "replace dog with cat".
///
/// Fails when the grammar cannot be edited (every axis has one value) or
/// when too few sampled edits land on tuples the gallery contains.
pub fn build_synthetic_benchmark(
    cfg: &GrammarConfig,
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    surrogate: &VisualSurrogate,
    seed: u64,
) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let (ns, na, nc) = (cfg.subjects.len(), cfg.attributes.len(), cfg.contexts.len());

    let mut g_rng = stream(seed, "bench-gallery");
    let mut gallery = Vec::with_capacity(cfg.gallery_size);
    let mut by_tuple: BTreeMap<CaptionTuple, Vec<usize>> = BTreeMap::new();
    for image_id in 0..cfg.gallery_size {
        let tuple = (g_rng.gen_range(0..ns), g_rng.gen_range(0..na), g_rng.gen_range(0..nc));
        let caption = cfg.caption(tuple);
        let seq = vocab.tokenize(&caption);
        let mut i_rng = stream_at(seed, "bench-image", image_id);
        let embedding = surrogate.synth_image_embed(frozen, &seq, &mut i_rng)?;
        by_tuple.entry(tuple).or_default().push(image_id);
        gallery.push(GalleryItem { image_id, embedding, caption, tuple });
    }

    // Axes along which an edit is possible at all.
    let axes: Vec<usize> = [ns, na, nc]
        .iter()
        .enumerate()
        .filter(|(_, &n)| n >= 2)
        .map(|(axis, _)| axis)
        .collect();
    if cfg.query_count > 0 && axes.is_empty() {
        return Err(Error::input(
            "grammar too small: every axis has a single value, so no caption can be edited",
        ));
    }

    let templates = TemplateSet::builtin();
    let replacement_ids: Vec<usize> = (0..templates.len())
        .filter(|&i| templates.get(i).map(|t| t.kind) == Some(TemplateKind::Replacement))
        .collect();

    let mut q_rng = stream(seed, "bench-query");
    let mut queries = Vec::with_capacity(cfg.query_count);
    let max_attempts = cfg.query_count.saturating_mul(200).max(1000);
    let mut attempts = 0usize;
    while queries.len() < cfg.query_count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::input(format!(
                "grammar too small to produce {} queries: {} edits landed in the gallery \
                 after {} attempts",
                cfg.query_count,
                queries.len(),
                attempts - 1
            )));
        }
        let reference_id = q_rng.gen_range(0..gallery.len());
        let base = gallery[reference_id].tuple;
        let axis = axes[q_rng.gen_range(0..axes.len())];
        // Draw a new slot value distinct from the current one.
        let (n, old_idx) = match axis {
            0 => (ns, base.0),
            1 => (na, base.1),
            _ => (nc, base.2),
        };
        let mut new_idx = q_rng.gen_range(0..n - 1);
        if new_idx >= old_idx {
            new_idx += 1;
        }
        let (old_word, new_word, target_tuple) = match axis {
            0 => (&cfg.subjects[old_idx], &cfg.subjects[new_idx], (new_idx, base.1, base.2)),
            1 => (&cfg.attributes[old_idx], &cfg.attributes[new_idx], (base.0, new_idx, base.2)),
            _ => (&cfg.contexts[old_idx], &cfg.contexts[new_idx], (base.0, base.1, new_idx)),
        };
        let Some(positives) = by_tuple.get(&target_tuple) else {
            continue;
        };
        let tid = replacement_ids[q_rng.gen_range(0..replacement_ids.len())];
        let cond_text = templates.get(tid).expect("id from enumeration").instantiate(old_word, new_word);
        queries.push(BenchQuery {
            reference_id,
            cond_text,
            positives: positives.clone(),
            target_caption: cfg.caption(target_tuple),
            target_tuple,
        });
    }

    let multi = queries.iter().filter(|q| q.positives.len() >= 2).count();
    if (multi as f64) < 0.10 * cfg.query_count as f64 {
        return Err(Error::input(format!(
            "benchmark degenerate: only {multi} of {} queries have multiple positives \
             (need at least 10%); enlarge the gallery or shrink the grammar",
            cfg.query_count
        )));
    }

    Ok(SyntheticBenchmark { gallery, queries, seed, config: cfg.clone() })
}

// ── Ranking and metrics ──

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("cosine: length mismatch {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = dot / (na * nb);
    if !c.is_finite() {
        return Err(Error::numeric("cosine: zero-norm or non-finite vector"));
    }
    Ok(c)
}

/// Gallery ids ordered by cosine to the query, descending; ties broken by
/// ascending image id so duplicated embeddings rank deterministically.
pub fn rank_gallery(query: &[f64], gallery: &[GalleryItem]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::input("rank_gallery: empty gallery"));
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for item in gallery {
        scored.push((cosine(query, &item.embedding)?, item.image_id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

fn effective_k(k: usize, len: usize, what: &str) -> Result<usize> {
    if k == 0 {
        return Err(Error::input(format!("{what}: K must be at least 1")));
    }
    if k > len {
        eprintln!("warning: {what}: K={k} exceeds ranking length {len}; clamping");
        return Ok(len);
    }
    Ok(k)
}

/// 1.0 iff any positive appears in the top K of the ranking.
pub fn recall_at_k(ranking: &[usize], positives: &[usize], k: usize) -> Result<f64> {
    let k = effective_k(k, ranking.len(), "recall_at_k")?;
    let pos: BTreeSet<usize> = positives.iter().copied().collect();
    Ok(if ranking[..k].iter().any(|id| pos.contains(id)) { 1.0 } else { 0.0 })
}

/// Average precision truncated at rank K, normalized by min(|positives|, K):
/// the mean of precision@i over the relevant ranks i <= K.
pub fn map_at_k(ranking: &[usize], positives: &[usize], k: usize) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::input("map_at_k: positive set is empty"));
    }
    let k = effective_k(k, ranking.len(), "map_at_k")?;
    let pos: BTreeSet<usize> = positives.iter().copied().collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking[..k].iter().enumerate() {
        if pos.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / pos.len().min(k) as f64)
}

// ── Reports ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Composed prompt through the frozen encoder.
    Frozen,
    /// Composed prompt through the learnable encoder.
    Rtd,
    /// The true target caption through the frozen encoder (oracle text).
    IdealCaption,
    /// The raw reference image embedding, no text at all.
    ImageOnly,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(EvalMode::Frozen),
            "rtd" => Ok(EvalMode::Rtd),
            "ideal-caption" => Ok(EvalMode::IdealCaption),
            "image-only" => Ok(EvalMode::ImageOnly),
            other => Err(Error::input(format!(
                "unknown eval mode {other:?} (expected frozen | rtd | ideal-caption | image-only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Frozen => "frozen",
            EvalMode::Rtd => "rtd",
            EvalMode::IdealCaption => "ideal-caption",
            EvalMode::ImageOnly => "image-only",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub mode: String,
    pub query_count: usize,
    /// (K, mean recall@K), in the K order requested.
    pub recall: Vec<(usize, f64)>,
    /// (K, mean mAP@K), same order.
    pub map: Vec<(usize, f64)>,
}

impl RetrievalReport {
    /// One `mode \t metric \t K \t value` row per entry, recall rows first.
    pub fn tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall {
            out.push_str(&format!("{}\trecall\t{}\t{:.6}\n", self.mode, k, v));
        }
        for (k, v) in &self.map {
            out.push_str(&format!("{}\tmap\t{}\t{:.6}\n", self.mode, k, v));
        }
        out
    }

    /// Mean over every recall@K and mAP@K entry; the scalar the ablation
    /// grid is ordered by.
    pub fn metric_average(&self) -> f64 {
        let n = self.recall.len() + self.map.len();
        let sum: f64 =
            self.recall.iter().map(|(_, v)| v).sum::<f64>() + self.map.iter().map(|(_, v)| v).sum::<f64>();
        sum / n as f64
    }

    /// The mAP value recorded for depth `k`, if present.
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.map.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// The recall value recorded for depth `k`, if present.
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

fn aggregate(
    mode: String,
    rankings: &[Vec<usize>],
    positives: &[&[usize]],
    ks: &[usize],
    gallery_len: usize,
) -> Result<RetrievalReport> {
    if ks.is_empty() {
        return Err(Error::input("no ranking depths requested"));
    }
    let n = rankings.len();
    if n == 0 {
        return Err(Error::input("benchmark has no queries"));
    }
    let mut recall = Vec::with_capacity(ks.len());
    let mut map = Vec::with_capacity(ks.len());
    for &k in ks {
        let ek = effective_k(k, gallery_len, "evaluate")?;
        let mut r_sum = 0.0;
        let mut m_sum = 0.0;
        for (ranking, pos) in rankings.iter().zip(positives) {
            r_sum += recall_at_k(ranking, pos, ek)?;
            m_sum += map_at_k(ranking, pos, ek)?;
        }
        recall.push((k, r_sum / n as f64));
        map.push((k, m_sum / n as f64));
    }
    Ok(RetrievalReport { mode, query_count: n, recall, map })
}

/// Query embedding for the prompt path: the reference image latent is
/// projected to a pseudo token and spliced into `a photo of <pseudo> that
/// <cond>`. No noise at evaluation time.
fn prompt_embed(
    params: &EncoderParams,
    phi: &PhiParams,
    vocab: &Vocabulary,
    image_embed: &[f64],
    cond: &TokenSeq,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let phi_vars = phi.insert(&mut tape);
    let latent = tape.constant_vector(image_embed.to_vec());
    let pseudo = project(&mut tape, &phi_vars, latent)?;
    let (seq, slots) = compose_prompt(pseudo, cond, vocab)?;
    let vars = params.insert(&mut tape);
    let out = encode(&mut tape, &vars, &seq, &slots)?;
    Ok(tape.values(out).to_vec())
}

/// Ranks the gallery for every query under one query-construction mode and
/// reports mean recall@K / mAP@K.
pub fn evaluate_cir(
    dual: &DualEncoder,
    phi: &PhiParams,
    vocab: &Vocabulary,
    bench: &SyntheticBenchmark,
    mode: EvalMode,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut rankings = Vec::with_capacity(bench.queries.len());
    let mut positives: Vec<&[usize]> = Vec::with_capacity(bench.queries.len());
    for q in &bench.queries {
        let ref_embed = &bench.gallery[q.reference_id].embedding;
        let cond = vocab.tokenize(&q.cond_text);
        let query = match mode {
            EvalMode::Frozen => prompt_embed(&dual.frozen, phi, vocab, ref_embed, &cond)?,
            EvalMode::Rtd => prompt_embed(&dual.learnable, phi, vocab, ref_embed, &cond)?,
            EvalMode::IdealCaption => {
                encode_plain(&dual.frozen, &vocab.tokenize(&q.target_caption))?
            }
            EvalMode::ImageOnly => ref_embed.clone(),
        };
        rankings.push(rank_gallery(&query, &bench.gallery)?);
        positives.push(&q.positives);
    }
    aggregate(mode.name().to_string(), &rankings, &positives, ks, bench.gallery.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeVariant {
    /// The frozen encoder.
    Frozen,
    /// A learnable encoder trained on reference-only pairs.
    PairUpdated,
    /// A learnable encoder trained on the full objective.
    Rtd,
}

impl ProbeVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(ProbeVariant::Frozen),
            "pair-updated" => Ok(ProbeVariant::PairUpdated),
            "rtd" => Ok(ProbeVariant::Rtd),
            other => Err(Error::input(format!(
                "unknown probe variant {other:?} (expected frozen | pair-updated | rtd)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::Frozen => "frozen",
            ProbeVariant::PairUpdated => "pair-updated",
            ProbeVariant::Rtd => "rtd",
        }
    }
}

/// Text-to-image retrieval with the query built by plain concatenation of
/// the reference caption and the condition text. Every variant uses the
/// same concatenation scheme so the encoders are compared on equal footing;
/// pair-updated and rtd differ only in how `dual.learnable` was trained.
pub fn discrepancy_probe_t2i(
    dual: &DualEncoder,
    vocab: &Vocabulary,
    bench: &SyntheticBenchmark,
    variant: ProbeVariant,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let encoder = match variant {
        ProbeVariant::Frozen => &dual.frozen,
        ProbeVariant::PairUpdated | ProbeVariant::Rtd => &dual.learnable,
    };
    let mut rankings = Vec::with_capacity(bench.queries.len());
    let mut positives: Vec<&[usize]> = Vec::with_capacity(bench.queries.len());
    for q in &bench.queries {
        let text = format!("{} {}", bench.gallery[q.reference_id].caption, q.cond_text);
        let query = encode_plain(encoder, &vocab.tokenize(&text))?;
        rankings.push(rank_gallery(&query, &bench.gallery)?);
        positives.push(&q.positives);
    }
    aggregate(format!("t2i-{}", variant.name()), &rankings, &positives, ks, bench.gallery.len())
}

/// Mean cosine between the composed query embedding and the centroid of the
/// positive image embeddings, for the frozen and the learnable encoder.
/// With untrained (identical) encoders the two means are bit-equal.
pub fn avg_cosine_probe(
    dual: &DualEncoder,
    phi: &PhiParams,
    vocab: &Vocabulary,
    bench: &SyntheticBenchmark,
) -> Result<(f64, f64)> {
    if bench.queries.is_empty() {
        return Err(Error::input("benchmark has no queries"));
    }
    let d = bench.gallery[0].embedding.len();
    let mut frozen_sum = 0.0;
    let mut rtd_sum = 0.0;
    for q in &bench.queries {
        let mut centroid = vec![0.0; d];
        for &id in &q.positives {
            for (c, v) in centroid.iter_mut().zip(&bench.gallery[id].embedding) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= q.positives.len() as f64;
        }
        let ref_embed = &bench.gallery[q.reference_id].embedding;
        let cond = vocab.tokenize(&q.cond_text);
        let qf = prompt_embed(&dual.frozen, phi, vocab, ref_embed, &cond)?;
        let qr = prompt_embed(&dual.learnable, phi, vocab, ref_embed, &cond)?;
        frozen_sum += cosine(&qf, &centroid)?;
        rtd_sum += cosine(&qr, &centroid)?;
    }
    let n = bench.queries.len() as f64;
    Ok((frozen_sum / n, rtd_sum / n))
}
