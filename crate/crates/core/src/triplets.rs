//! Rule-based generation and filtering of edit triplets (reference caption,
//! modification text, target caption) from a caption corpus.
//!
//! Keywords are frequent non-stopword tokens. A replacement partner is drawn
//! from the keywords whose frozen-encoder similarity sits inside a band, the
//! modification text comes from a fixed template list, and the target
//! caption is derived mechanically from the reference caption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::encoder::{encode, encode_plain, EncoderParams};
use crate::error::{Error, Result};
use crate::projection::{compose_prompt, inject_noise, project, NoiseConfig, PhiParams};
use crate::rng::stream_at;
use crate::text::{normalize, TokenSeq, Vocabulary};

pub const TEMPLATE_COUNT: usize = 50;
pub const DEFAULT_BAND_LO: f64 = 0.5;
pub const DEFAULT_BAND_HI: f64 = 0.7;
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.75;

const SOURCE_SLOT: &str = "${source}";
const TARGET_SLOT: &str = "${target}";
const BUILTIN_TEMPLATES: &str = include_str!("../assets/templates.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    /// Substitutes the source keyword with the target keyword.
    Replacement,
    /// Mentions only the source; the target caption drops the keyword.
    Removal,
}

#[derive(Debug, Clone)]
pub struct Template {
    pub text: String,
    pub kind: TemplateKind,
}

impl Template {
    fn parse(text: &str) -> Result<Self> {
        let has_source = text.contains(SOURCE_SLOT);
        let has_target = text.contains(TARGET_SLOT);
        if !has_source && !has_target {
            return Err(Error::input(format!(
                "template {text:?} has no ${{source}} or ${{target}} placeholder"
            )));
        }
        let kind = if has_source && !has_target {
            TemplateKind::Removal
        } else {
            TemplateKind::Replacement
        };
        Ok(Template {
            text: text.to_string(),
            kind,
        })
    }

    pub fn instantiate(&self, source: &str, target: &str) -> String {
        self.text
            .replace(SOURCE_SLOT, source)
            .replace(TARGET_SLOT, target)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl TemplateSet {
    /// The fixed list shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("builtin template file is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&body)
    }

    fn parse(body: &str) -> Result<Self> {
        let templates: Vec<Template> = body
            .lines()
            .map(Template::parse)
            .collect::<Result<_>>()?;
        if templates.len() != TEMPLATE_COUNT {
            return Err(Error::input(format!(
                "template list has {} entries, expected exactly {TEMPLATE_COUNT}",
                templates.len()
            )));
        }
        Ok(TemplateSet { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Template> {
        self.templates.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.iter()
    }

    /// Template texts with the keyword slots blanked out. Feeding these
    /// into vocabulary construction keeps conditioning-text words like
    /// "replace" in-vocabulary instead of collapsing to the unknown token.
    pub fn word_lines(&self) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.text.replace(SOURCE_SLOT, " ").replace(TARGET_SLOT, " "))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTriplet {
    pub t_r: String,
    pub t_c: String,
    pub t_t: String,
    pub source_keyword: String,
    /// Empty for removal templates.
    pub target_keyword: String,
    pub template_id: usize,
}

#[derive(Debug, Clone)]
pub struct KeywordStats {
    counts: BTreeMap<String, usize>,
    pub min_freq: usize,
}

impl KeywordStats {
    pub fn count(&self, keyword: &str) -> usize {
        self.counts.get(keyword).copied().unwrap_or(0)
    }

    pub fn is_eligible(&self, keyword: &str) -> bool {
        self.count(keyword) > self.min_freq
    }

    /// Eligible keywords in lexicographic order.
    pub fn eligible(&self) -> Vec<&str> {
        self.counts
            .iter()
            .filter(|(_, &c)| c > self.min_freq)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Count non-stopword tokens; a keyword is eligible when its count strictly
/// exceeds `min_freq`.
pub fn extract_keywords<S: AsRef<str>>(
    corpus: &[S],
    vocab: &Vocabulary,
    min_freq: usize,
) -> Result<KeywordStats> {
    if corpus.is_empty() {
        return Err(Error::input("extract_keywords: empty corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for tok in normalize(text.as_ref()) {
            if vocab.is_stopword(&tok) || tok.starts_with('<') {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    Ok(KeywordStats { counts, min_freq })
}

/// Frozen-encoder embedding of each eligible keyword as a single-token text.
/// Keywords missing from the vocabulary cannot be embedded and are skipped.
pub fn keyword_embeddings(
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    stats: &KeywordStats,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for kw in stats.eligible() {
        let Some(id) = vocab.id(kw) else { continue };
        let embed = encode_plain(frozen, &TokenSeq { ids: vec![id] })?;
        out.insert(kw.to_string(), embed);
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Other keywords whose similarity to `keyword` lies in [lo, hi], sorted by
/// similarity descending, ties lexicographic.
pub fn find_replacements(
    keyword: &str,
    embeddings: &BTreeMap<String, Vec<f64>>,
    lo: f64,
    hi: f64,
) -> Result<Vec<(String, f64)>> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::input(format!(
            "find_replacements: band [{lo}, {hi}] is not within 0 <= lo < hi <= 1"
        )));
    }
    let anchor = embeddings.get(keyword).ok_or_else(|| {
        Error::input(format!(
            "find_replacements: keyword {keyword:?} has no embedding"
        ))
    })?;
    let mut out: Vec<(String, f64)> = embeddings
        .iter()
        .filter(|(k, _)| k.as_str() != keyword)
        .map(|(k, e)| (k.clone(), cosine(anchor, e)))
        .filter(|(_, s)| lo <= *s && *s <= hi)
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Rewrite a caption token-wise: occurrences of `source` become `target`
/// (replacement) or disappear (removal, `target` = None). Whitespace
/// collapses to single spaces.
pub fn derive_target_caption(t_r: &str, source: &str, target: Option<&str>) -> String {
    let kept: Vec<&str> = t_r
        .split_whitespace()
        .filter_map(|tok| {
            let norm = normalize(tok);
            let is_kw = norm.len() == 1 && norm[0] == source;
            match (is_kw, target) {
                (true, Some(t)) => Some(t),
                (true, None) => None,
                (false, _) => Some(tok),
            }
        })
        .collect();
    kept.join(" ")
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub seed: u64,
    /// Number of generation attempts; output may be shorter.
    pub count: usize,
}

/// Draw up to `cfg.count` triplets. Each attempt, under its own derived rng
/// stream, picks a caption with at least one eligible keyword, one of its
/// keywords, a template, and (for replacement templates) a partner keyword
/// from the similarity band.
pub fn generate_triplets<S: AsRef<str>>(
    corpus: &[S],
    templates: &TemplateSet,
    stats: &KeywordStats,
    embeddings: &BTreeMap<String, Vec<f64>>,
    cfg: &GenConfig,
) -> Result<Vec<TextTriplet>> {
    if cfg.count == 0 {
        return Ok(Vec::new());
    }
    // Captions usable at all, with their eligible keywords in order of
    // appearance.
    let mut candidates: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, text) in corpus.iter().enumerate() {
        let mut kws: Vec<String> = Vec::new();
        for tok in normalize(text.as_ref()) {
            if stats.is_eligible(&tok) && !kws.contains(&tok) {
                kws.push(tok);
            }
        }
        if !kws.is_empty() {
            candidates.push((i, kws));
        }
    }
    if candidates.is_empty() {
        return Err(Error::input(
            "generate_triplets: no caption contains an eligible keyword \
             (min_freq too high for this corpus?)",
        ));
    }

    let mut out = Vec::new();
    let mut band_misses = 0usize;
    for item in 0..cfg.count {
        let mut rng = stream_at(cfg.seed, "triplet", item);
        let (cap_idx, kws) = &candidates[rng.gen_range(0..candidates.len())];
        let t_r = corpus[*cap_idx].as_ref().to_string();
        let source = kws[rng.gen_range(0..kws.len())].clone();
        let template_id = rng.gen_range(0..templates.len());
        let template = templates.get(template_id).unwrap();

        let (target, t_t) = match template.kind {
            TemplateKind::Removal => {
                (String::new(), derive_target_caption(&t_r, &source, None))
            }
            TemplateKind::Replacement => {
                // A keyword the embedding map cannot place (not in vocab)
                // behaves like one with an empty band.
                if !embeddings.contains_key(&source) {
                    band_misses += 1;
                    continue;
                }
                let cands = find_replacements(&source, embeddings, cfg.band_lo, cfg.band_hi)?;
                if cands.is_empty() {
                    band_misses += 1;
                    continue;
                }
                let target = cands[rng.gen_range(0..cands.len())].0.clone();
                let t_t = derive_target_caption(&t_r, &source, Some(&target));
                (target, t_t)
            }
        };
        if t_t == t_r || t_t.is_empty() {
            // Degenerate edit (keyword failed to match or caption was only
            // the keyword); not a usable training pair.
            continue;
        }
        let t_c = template.instantiate(&source, &target);
        out.push(TextTriplet {
            t_r,
            t_c,
            t_t,
            source_keyword: source,
            target_keyword: target,
            template_id,
        });
    }

    if out.is_empty() {
        let reason = if band_misses > 0 {
            "every chosen keyword had an empty similarity band"
        } else {
            "all attempts produced degenerate edits"
        };
        return Err(Error::input(format!(
            "generate_triplets: produced 0 of {} requested triplets ({reason})",
            cfg.count
        )));
    }
    Ok(out)
}

/// Cosine between a caption's frozen embedding and the frozen embedding of
/// the pseudo-token prompt built from its noised latent. This is the probe
/// both filtering sides use.
fn probe_one(
    caption: &str,
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    phi: &PhiParams,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let seq = vocab.tokenize(caption);
    let clean = encode_plain(frozen, &seq)?;
    let noised = inject_noise(&clean, noise, rng)?;

    let mut tape = crate::diff::Tape::new();
    let enc_vars = frozen.insert(&mut tape);
    let phi_vars = phi.insert(&mut tape);
    let latent = tape.constant_vector(noised);
    let pseudo = project(&mut tape, &phi_vars, latent)?;
    let (prompt, slots) = compose_prompt(pseudo, &TokenSeq { ids: vec![] }, vocab)?;
    let prompt_embed = encode(&mut tape, &enc_vars, &prompt, &slots)?;
    let clean_id = tape.constant_vector(clean);
    let cos = tape.cosine_similarity(prompt_embed, clean_id)?;
    Ok(tape.scalar_value(cos))
}

/// Probe scores (reference side, target side) for every triplet, under
/// per-triplet derived noise streams.
pub fn probe_scores(
    triplets: &[TextTriplet],
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    phi: &PhiParams,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = stream_at(seed, "filter", i);
            let r = probe_one(&t.t_r, frozen, vocab, phi, noise, &mut rng)?;
            let tt = probe_one(&t.t_t, frozen, vocab, phi, noise, &mut rng)?;
            Ok((r, tt))
        })
        .collect()
}

/// Keep the triplets whose reference AND target probes both reach
/// `threshold`. Order-preserving subset of the input.
pub fn filter_triplets(
    triplets: &[TextTriplet],
    frozen: &EncoderParams,
    vocab: &Vocabulary,
    phi: &PhiParams,
    noise: &NoiseConfig,
    threshold: f64,
    seed: u64,
) -> Result<Vec<TextTriplet>> {
    let scores = probe_scores(triplets, frozen, vocab, phi, noise, seed)?;
    Ok(triplets
        .iter()
        .zip(scores)
        .filter(|(_, (r, t))| *r >= threshold && *t >= threshold)
        .map(|(t, _)| t.clone())
        .collect())
}

const ARROW: char = '\u{2192}';

pub fn save_triplets(triplets: &[TextTriplet], path: &Path) -> Result<()> {
    let mut body = String::new();
    for (i, t) in triplets.iter().enumerate() {
        for (field, value) in [
            ("t_r", &t.t_r),
            ("t_c", &t.t_c),
            ("t_t", &t.t_t),
            ("source_keyword", &t.source_keyword),
            ("target_keyword", &t.target_keyword),
        ] {
            if value.contains(['\t', '\n']) || value.contains(ARROW) {
                return Err(Error::input(format!(
                    "save_triplets: triplet {i} field {field} contains a tab, newline, \
                     or arrow character"
                )));
            }
        }
        let _ = writeln!(
            body,
            "{}\t{}\t{}\t{}\t{}{ARROW}{}",
            t.t_r, t.t_c, t.t_t, t.template_id, t.source_keyword, t.target_keyword
        );
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_triplets(path: &Path) -> Result<Vec<TextTriplet>> {
    if !path.exists() {
        return Err(Error::missing(format!(
            "triplet file {} does not exist",
            path.display()
        )));
    }
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::input(format!(
                "{} line {}: expected 5 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                cols.len()
            )));
        }
        let template_id: usize = cols[3].parse().map_err(|_| {
            Error::input(format!(
                "{} line {}: template id {:?} is not an integer",
                path.display(),
                lineno + 1,
                cols[3]
            ))
        })?;
        if template_id >= TEMPLATE_COUNT {
            return Err(Error::input(format!(
                "{} line {}: template id {template_id} out of range",
                path.display(),
                lineno + 1
            )));
        }
        let (source, target) = cols[4].split_once(ARROW).ok_or_else(|| {
            Error::input(format!(
                "{} line {}: keyword column lacks the arrow separator",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(TextTriplet {
            t_r: cols[0].to_string(),
            t_c: cols[1].to_string(),
            t_t: cols[2].to_string(),
            source_keyword: source.to_string(),
            target_keyword: target.to_string(),
            template_id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn builtin_template_set_is_complete() {
        let set = TemplateSet::builtin();
        assert_eq!(set.len(), TEMPLATE_COUNT);
        let removals = set
            .iter()
            .filter(|t| t.kind == TemplateKind::Removal)
            .count();
        assert_eq!(removals, 9);
        for t in set.iter() {
            assert!(t.text.contains(SOURCE_SLOT) || t.text.contains(TARGET_SLOT));
        }
    }

    #[test]
    fn word_lines_blank_the_slots_but_keep_every_template_word() {
        let set = TemplateSet::builtin();
        let lines = set.word_lines();
        assert_eq!(lines.len(), set.len());
        for (line, template) in lines.iter().zip(set.iter()) {
            assert!(!line.contains(SOURCE_SLOT) && !line.contains(TARGET_SLOT));
            let stripped = template.text.replace(SOURCE_SLOT, " ").replace(TARGET_SLOT, " ");
            for word in stripped.split_whitespace() {
                assert!(line.split_whitespace().any(|w| w == word), "{word:?} lost from {line:?}");
            }
        }
    }

    #[test]
    fn template_instantiation_fills_both_slots() {
        let set = TemplateSet::builtin();
        let t = set.get(0).unwrap();
        assert_eq!(t.instantiate("wall", "bedroom"), "replace wall with bedroom");
        let removal = set.get(45).unwrap();
        assert_eq!(removal.kind, TemplateKind::Removal);
        assert_eq!(removal.instantiate("wall", ""), "remove wall");
    }

    #[test]
    fn worked_example_from_the_template_table() {
        // "another wall at my home" + (wall -> bedroom) + template 13
        // ("${target} is added in place of ${source}").
        let set = TemplateSet::builtin();
        let template = set.get(13).unwrap();
        let t_c = template.instantiate("wall", "bedroom");
        assert_eq!(t_c, "bedroom is added in place of wall");
        let t_t = derive_target_caption("another wall at my home", "wall", Some("bedroom"));
        assert_eq!(t_t, "another bedroom at my home");
    }

    #[test]
    fn removal_derivation_deletes_and_collapses() {
        assert_eq!(
            derive_target_caption("a red dog near the park", "dog", None),
            "a red near the park"
        );
        assert_eq!(
            derive_target_caption("dog dog dog", "dog", None),
            ""
        );
        assert_eq!(
            derive_target_caption("a red dog near the dog", "dog", Some("cat")),
            "a red cat near the cat"
        );
    }

    fn stats_vocab(corpus: &[&str], min_freq: usize) -> (KeywordStats, Vocabulary) {
        let vocab = Vocabulary::build(corpus, 1).unwrap();
        let stats = extract_keywords(corpus, &vocab, min_freq).unwrap();
        (stats, vocab)
    }

    #[test]
    fn keyword_threshold_is_strictly_greater() {
        let mut corpus: Vec<String> = (0..101).map(|_| "a dog".to_string()).collect();
        corpus.push("a cat and a cat".to_string());
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let stats = extract_keywords(&corpus, &vocab, 100).unwrap();
        assert!(stats.is_eligible("dog"));
        assert!(!stats.is_eligible("cat"));
        assert_eq!(stats.count("dog"), 101);
        assert!(!stats.is_eligible("the"));
    }

    #[test]
    fn stopwords_never_become_keywords() {
        let (stats, _) = stats_vocab(&["the the the the dog"], 0);
        assert!(!stats.is_eligible("the"));
        assert!(stats.is_eligible("dog"));
    }

    #[test]
    fn min_freq_zero_admits_single_occurrences() {
        let (stats, _) = stats_vocab(&["a dog and a cat"], 0);
        assert_eq!(stats.eligible(), vec!["cat", "dog"]);
    }

    fn toy_embeddings() -> BTreeMap<String, Vec<f64>> {
        // Angles chosen so cat/dog sit inside [0.5, 0.7] of each other and
        // rock is orthogonal to both.
        let deg: &[(&str, f64)] = &[("cat", 0.0), ("dog", 53.0), ("rock", 90.0)];
        deg.iter()
            .map(|(k, d)| {
                let r = d.to_radians();
                (k.to_string(), vec![r.cos(), r.sin()])
            })
            .collect()
    }

    #[test]
    fn replacement_band_is_inclusive_and_sorted() {
        let emb = toy_embeddings();
        let got = find_replacements("cat", &emb, 0.5, 0.7).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, "dog");
        assert!((got[0].1 - 53f64.to_radians().cos()).abs() < 1e-12);
        // rock at cos 0 is outside; cat itself excluded.
        let wide = find_replacements("cat", &emb, 0.0, 1.0).unwrap();
        assert_eq!(
            wide.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>(),
            vec!["dog", "rock"]
        );
    }

    #[test]
    fn replacement_band_is_symmetric() {
        let emb = toy_embeddings();
        for a in emb.keys() {
            for b in emb.keys() {
                if a == b {
                    continue;
                }
                let a_has_b = find_replacements(a, &emb, 0.5, 0.7)
                    .unwrap()
                    .iter()
                    .any(|(k, _)| k == b);
                let b_has_a = find_replacements(b, &emb, 0.5, 0.7)
                    .unwrap()
                    .iter()
                    .any(|(k, _)| k == a);
                assert_eq!(a_has_b, b_has_a, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn replacement_rejects_bad_bands_and_unknown_keyword() {
        let emb = toy_embeddings();
        assert!(find_replacements("cat", &emb, 0.7, 0.5).is_err());
        assert!(find_replacements("cat", &emb, -0.1, 0.5).is_err());
        assert!(find_replacements("cat", &emb, 0.5, 1.1).is_err());
        assert!(find_replacements("zebra", &emb, 0.5, 0.7).is_err());
    }

    fn gen_fixture() -> (Vec<String>, KeywordStats, BTreeMap<String, Vec<f64>>) {
        let corpus: Vec<String> = vec![
            "a cat near the park".into(),
            "a dog near the river".into(),
            "a rock near the tower".into(),
            "the cat and the dog".into(),
        ];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let stats = extract_keywords(&corpus, &vocab, 0).unwrap();
        (corpus, stats, toy_embeddings())
    }

    #[test]
    fn generation_is_deterministic_and_satisfies_invariants() {
        let (corpus, stats, emb) = gen_fixture();
        let templates = TemplateSet::builtin();
        let cfg = GenConfig {
            band_lo: 0.5,
            band_hi: 0.7,
            seed: 11,
            count: 60,
        };
        let a = generate_triplets(&corpus, &templates, &stats, &emb, &cfg).unwrap();
        let b = generate_triplets(&corpus, &templates, &stats, &emb, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for t in &a {
            let kind = templates.get(t.template_id).unwrap().kind;
            let expect_tt = match kind {
                TemplateKind::Removal => {
                    assert!(t.target_keyword.is_empty());
                    derive_target_caption(&t.t_r, &t.source_keyword, None)
                }
                TemplateKind::Replacement => {
                    assert!(!t.target_keyword.is_empty());
                    derive_target_caption(&t.t_r, &t.source_keyword, Some(&t.target_keyword))
                }
            };
            assert_eq!(t.t_t, expect_tt);
            assert_ne!(t.t_t, t.t_r);
            let expect_tc = templates
                .get(t.template_id)
                .unwrap()
                .instantiate(&t.source_keyword, &t.target_keyword);
            assert_eq!(t.t_c, expect_tc);
        }
    }

    #[test]
    fn generation_errors_name_the_bottleneck() {
        let (corpus, _, emb) = gen_fixture();
        let templates = TemplateSet::builtin();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        // Threshold far above every count: no eligible keywords.
        let starved = extract_keywords(&corpus, &vocab, 1000).unwrap();
        let cfg = GenConfig {
            band_lo: 0.5,
            band_hi: 0.7,
            seed: 1,
            count: 10,
        };
        let err = generate_triplets(&corpus, &templates, &starved, &emb, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("eligible keyword"), "{err}");

        // Keywords exist but no pair sits inside the band. With a
        // replacement-only template list every attempt needs a partner, so
        // generation must fail and blame the band.
        let stats = extract_keywords(&corpus, &vocab, 0).unwrap();
        let all_replacement =
            TemplateSet::parse(&"replace ${source} with ${target}\n".repeat(TEMPLATE_COUNT))
                .unwrap();
        let narrow = GenConfig {
            band_lo: 0.98,
            band_hi: 0.99,
            ..cfg
        };
        let err = generate_triplets(&corpus, &all_replacement, &stats, &emb, &narrow)
            .unwrap_err()
            .to_string();
        assert!(err.contains("band"), "{err}");
    }

    #[test]
    fn generation_count_zero_is_empty() {
        let (corpus, stats, emb) = gen_fixture();
        let templates = TemplateSet::builtin();
        let cfg = GenConfig {
            band_lo: 0.5,
            band_hi: 0.7,
            seed: 1,
            count: 0,
        };
        assert!(generate_triplets(&corpus, &templates, &stats, &emb, &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn filter_keeps_exactly_the_above_threshold_subset() {
        let corpus = [
            "a red dog near the park",
            "a blue cat near the river",
            "a green bird near the tower",
            "a photo of that",
        ];
        let vocab = Vocabulary::build(corpus, 1).unwrap();
        let frozen = EncoderParams::init(vocab.len(), 8, &mut stream(3, "enc")).unwrap();
        let phi = PhiParams::init(8, &mut stream(3, "phi")).unwrap();
        let noise = NoiseConfig::none();
        let triplets: Vec<TextTriplet> = [
            ("a red dog near the park", "a red cat near the park"),
            ("a blue cat near the river", "a blue dog near the river"),
            ("a green bird near the tower", "a green dog near the tower"),
        ]
        .iter()
        .map(|(r, t)| TextTriplet {
            t_r: r.to_string(),
            t_c: "change it".to_string(),
            t_t: t.to_string(),
            source_keyword: "x".to_string(),
            target_keyword: "y".to_string(),
            template_id: 0,
        })
        .collect();

        let scores = probe_scores(&triplets, &frozen, &vocab, &phi, &noise, 7).unwrap();
        // Pick a threshold between the observed min and max so the filter
        // provably splits the set.
        let mins: Vec<f64> = scores.iter().map(|(a, b)| a.min(*b)).collect();
        let lo = mins.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let th = (lo + hi) / 2.0;
        let kept = filter_triplets(&triplets, &frozen, &vocab, &phi, &noise, th, 7).unwrap();
        let expect: Vec<&TextTriplet> = triplets
            .iter()
            .zip(&mins)
            .filter(|(_, m)| **m >= th)
            .map(|(t, _)| t)
            .collect();
        assert_eq!(kept.iter().collect::<Vec<_>>(), expect);

        // Identity and empty extremes.
        assert_eq!(
            filter_triplets(&triplets, &frozen, &vocab, &phi, &noise, -1.0, 7)
                .unwrap()
                .len(),
            3
        );
        assert!(
            filter_triplets(&triplets, &frozen, &vocab, &phi, &noise, 1.0 + 1e-9, 7)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn tsv_round_trip_and_malformed_lines() {
        let triplets = vec![
            TextTriplet {
                t_r: "a dog".into(),
                t_c: "remove dog".into(),
                t_t: "a".into(),
                source_keyword: "dog".into(),
                target_keyword: "".into(),
                template_id: 45,
            },
            TextTriplet {
                t_r: "a cat here".into(),
                t_c: "replace cat with dog".into(),
                t_t: "a dog here".into(),
                source_keyword: "cat".into(),
                target_keyword: "dog".into(),
                template_id: 0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.tsv");
        save_triplets(&triplets, &path).unwrap();
        assert_eq!(load_triplets(&path).unwrap(), triplets);

        std::fs::write(&path, "only\tthree\tcols\n").unwrap();
        let err = load_triplets(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        std::fs::write(&path, "").unwrap();
        assert!(load_triplets(&path).unwrap().is_empty());

        let bad = vec![TextTriplet {
            t_r: "tab\there".into(),
            ..triplets[1].clone()
        }];
        assert!(save_triplets(&bad, &path).is_err());
    }

    #[test]
    fn loading_missing_file_is_a_missing_artifact() {
        let err = load_triplets(Path::new("/nonexistent/t.tsv")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    proptest! {
        #[test]
        fn tsv_round_trips_arbitrary_safe_captions(
            t_r in "[a-z ]{1,30}",
            t_c in "[a-z ]{1,30}",
            t_t in "[a-z ]{0,30}",
            source in "[a-z]{1,8}",
            target in "[a-z]{0,8}",
            template_id in 0usize..TEMPLATE_COUNT,
        ) {
            let t = TextTriplet { t_r, t_c, t_t, source_keyword: source, target_keyword: target, template_id };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.tsv");
            save_triplets(std::slice::from_ref(&t), &path).unwrap();
            prop_assert_eq!(load_triplets(&path).unwrap(), vec![t]);
        }
    }
}
