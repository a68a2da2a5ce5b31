//! Twin text encoders (one frozen, one learnable) and the surrogate image
//! embedder that stands in for a visual backbone.
//!
//! The encoder is a single self-attention block with residual, a tanh
//! feed-forward block with residual, mean pooling, an affine head, and L2
//! normalization. Small on purpose: order-sensitive, fully differentiable,
//! cheap enough to finite-difference every parameter group.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::text::{TokenSeq, MAX_LEN, PSEUDO};

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.02;

/// Field names in checkpoint and initialization order.
pub const PARAM_FIELDS: [&str; 12] = [
    "e_w", "p", "w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2", "w_out", "b_out",
];

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub d: usize,
    pub e_w: Tensor,
    pub p: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

pub(crate) fn sample(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = crate::diff::numel(&shape);
    let values = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, values).expect("shape matches count")
}

impl EncoderParams {
    /// Fresh parameters, every entry i.i.d. normal(0, 0.02), drawn in field
    /// order so the same rng state always yields the same bytes.
    pub fn init(vocab: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if vocab < 3 {
            return Err(Error::input(format!(
                "encoder init: vocabulary of {vocab} lacks the reserved ids"
            )));
        }
        if d == 0 {
            return Err(Error::input("encoder init: d must be positive"));
        }
        Ok(EncoderParams {
            d,
            e_w: sample(vec![vocab, d], rng),
            p: sample(vec![MAX_LEN, d], rng),
            w_q: sample(vec![d, d], rng),
            w_k: sample(vec![d, d], rng),
            w_v: sample(vec![d, d], rng),
            w_o: sample(vec![d, d], rng),
            w_1: sample(vec![d, 4 * d], rng),
            b_1: sample(vec![4 * d], rng),
            w_2: sample(vec![4 * d, d], rng),
            b_2: sample(vec![d], rng),
            w_out: sample(vec![d, d], rng),
            b_out: sample(vec![d], rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.e_w.shape[0]
    }

    pub fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("e_w", &self.e_w),
            ("p", &self.p),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn field(&self, name: &str) -> Option<&Tensor> {
        self.fields()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "e_w" => Some(&mut self.e_w),
            "p" => Some(&mut self.p),
            "w_q" => Some(&mut self.w_q),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            "w_o" => Some(&mut self.w_o),
            "w_1" => Some(&mut self.w_1),
            "b_1" => Some(&mut self.b_1),
            "w_2" => Some(&mut self.w_2),
            "b_2" => Some(&mut self.b_2),
            "w_out" => Some(&mut self.w_out),
            "b_out" => Some(&mut self.b_out),
            _ => None,
        }
    }

    /// Simultaneous mutable handles to every field, in [`PARAM_FIELDS`]
    /// order, so an optimizer can update a masked subset in one pass.
    pub fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        let EncoderParams {
            e_w, p, w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2, w_out, b_out, ..
        } = self;
        [
            ("e_w", e_w),
            ("p", p),
            ("w_q", w_q),
            ("w_k", w_k),
            ("w_v", w_v),
            ("w_o", w_o),
            ("w_1", w_1),
            ("b_1", b_1),
            ("w_2", w_2),
            ("b_2", b_2),
            ("w_out", w_out),
            ("b_out", b_out),
        ]
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for name in PARAM_FIELDS {
            self.field_mut(name).unwrap().requires_grad = flag;
        }
    }

    /// SHA-256 over the binary dumps of all fields in declaration order.
    /// Values and shapes only; gradient state does not participate.
    pub fn byte_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.fields() {
            h.update(t.to_bytes());
        }
        hex(&h.finalize())
    }

    /// Insert every field into `tape`; requires_grad carries over per field.
    pub fn insert(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            d: self.d,
            e_w: tape.leaf(&self.e_w),
            p: tape.leaf(&self.p),
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
            w_o: tape.leaf(&self.w_o),
            w_1: tape.leaf(&self.w_1),
            b_1: tape.leaf(&self.b_1),
            w_2: tape.leaf(&self.w_2),
            b_2: tape.leaf(&self.b_2),
            w_out: tape.leaf(&self.w_out),
            b_out: tape.leaf(&self.b_out),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Tape handles to one parameter set, in the same field order.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub d: usize,
    pub e_w: VarId,
    pub p: VarId,
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
    pub w_1: VarId,
    pub b_1: VarId,
    pub w_2: VarId,
    pub b_2: VarId,
    pub w_out: VarId,
    pub b_out: VarId,
}

impl EncoderVars {
    pub fn field(&self, name: &str) -> Option<VarId> {
        match name {
            "e_w" => Some(self.e_w),
            "p" => Some(self.p),
            "w_q" => Some(self.w_q),
            "w_k" => Some(self.w_k),
            "w_v" => Some(self.w_v),
            "w_o" => Some(self.w_o),
            "w_1" => Some(self.w_1),
            "b_1" => Some(self.b_1),
            "w_2" => Some(self.w_2),
            "b_2" => Some(self.b_2),
            "w_out" => Some(self.w_out),
            "b_out" => Some(self.b_out),
            _ => None,
        }
    }

    /// Rebuild from ids laid out in [`PARAM_FIELDS`] order.
    pub fn from_slice(d: usize, ids: &[VarId]) -> Self {
        assert_eq!(ids.len(), 12, "expected 12 parameter ids");
        EncoderVars {
            d,
            e_w: ids[0],
            p: ids[1],
            w_q: ids[2],
            w_k: ids[3],
            w_v: ids[4],
            w_o: ids[5],
            w_1: ids[6],
            b_1: ids[7],
            w_2: ids[8],
            b_2: ids[9],
            w_out: ids[10],
            b_out: ids[11],
        }
    }
}

/// Parameter groups an optimizer may restrict itself to. The encoder's
/// affine stack reads, in forward order: the three attention projections,
/// the attention output, the two feed-forward layers, and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMask {
    Full,
    /// Feed-forward block only; attention and embeddings stay fixed.
    FcOnly,
    Front3,
    Middle3,
    Last3,
    Interleave3,
}

impl UpdateMask {
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            UpdateMask::Full => &PARAM_FIELDS,
            UpdateMask::FcOnly => &["w_1", "b_1", "w_2", "b_2"],
            UpdateMask::Front3 => &["w_q", "w_k", "w_v"],
            UpdateMask::Middle3 => &["w_v", "w_o", "w_1", "b_1"],
            UpdateMask::Last3 => &["w_1", "b_1", "w_2", "b_2", "w_out", "b_out"],
            UpdateMask::Interleave3 => &["w_q", "w_o", "w_out", "b_out"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(UpdateMask::Full),
            "fc_only" => Ok(UpdateMask::FcOnly),
            "front3" => Ok(UpdateMask::Front3),
            "middle3" => Ok(UpdateMask::Middle3),
            "last3" => Ok(UpdateMask::Last3),
            "interleave3" => Ok(UpdateMask::Interleave3),
            _ => Err(Error::input(format!(
                "unknown update mask {s:?}; expected full|fc_only|front3|middle3|last3|interleave3"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UpdateMask::Full => "full",
            UpdateMask::FcOnly => "fc_only",
            UpdateMask::Front3 => "front3",
            UpdateMask::Middle3 => "middle3",
            UpdateMask::Last3 => "last3",
            UpdateMask::Interleave3 => "interleave3",
        }
    }
}

/// Token rows: E_w[id] + P[i], with pseudo slots taking their row vector
/// from the tape node in `pseudo_vectors` instead of the embedding table.
pub fn embed_tokens(
    tape: &mut Tape,
    vars: &EncoderVars,
    seq: &TokenSeq,
    pseudo_vectors: &BTreeMap<usize, VarId>,
) -> Result<VarId> {
    if seq.is_empty() {
        return Err(Error::input("embed_tokens: empty token sequence"));
    }
    for (i, &id) in seq.ids.iter().enumerate() {
        if id == PSEUDO && !pseudo_vectors.contains_key(&i) {
            return Err(Error::input(format!(
                "embed_tokens: pseudo token at slot {i} has no vector supplied"
            )));
        }
    }
    for &slot in pseudo_vectors.keys() {
        if seq.ids.get(slot).copied() != Some(PSEUDO) {
            return Err(Error::input(format!(
                "embed_tokens: pseudo vector supplied for slot {slot}, which is not a pseudo token"
            )));
        }
    }
    let pseudo: Vec<(usize, VarId)> = pseudo_vectors.iter().map(|(&k, &v)| (k, v)).collect();
    tape.embed_rows(vars.e_w, vars.p, &seq.ids, &pseudo)
}

/// Attention block, feed-forward block, mean pool, head, normalize.
pub fn encode_rows(tape: &mut Tape, vars: &EncoderVars, rows: VarId) -> Result<VarId> {
    let d = vars.d;
    let q = tape.matmul(rows, vars.w_q)?;
    let k = tape.matmul(rows, vars.w_k)?;
    let v = tape.matmul(rows, vars.w_v)?;
    let scores_raw = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores_raw, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scores)?;
    let ctx = tape.matmul(attn, v)?;
    let proj = tape.matmul(ctx, vars.w_o)?;
    let h1 = tape.add(rows, proj)?;

    let f1 = tape.affine(h1, vars.w_1, vars.b_1)?;
    let t = tape.tanh(f1);
    let f2 = tape.affine(t, vars.w_2, vars.b_2)?;
    let h2 = tape.add(h1, f2)?;

    let pooled = tape.mean_rows(h2)?;
    let head = tape.affine(pooled, vars.w_out, vars.b_out)?;
    tape.l2_normalize(head)
}

pub fn encode(
    tape: &mut Tape,
    vars: &EncoderVars,
    seq: &TokenSeq,
    pseudo_vectors: &BTreeMap<usize, VarId>,
) -> Result<VarId> {
    let rows = embed_tokens(tape, vars, seq, pseudo_vectors)?;
    encode_rows(tape, vars, rows)
}

/// Encode on a throwaway tape; for callers that only need the vector.
pub fn encode_plain(params: &EncoderParams, seq: &TokenSeq) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.insert(&mut tape);
    let out = encode(&mut tape, &vars, seq, &BTreeMap::new())?;
    Ok(tape.values(out).to_vec())
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub frozen: EncoderParams,
    pub learnable: EncoderParams,
}

impl DualEncoder {
    /// The learnable copy starts as an exact clone; only grad flags differ.
    pub fn new(base: EncoderParams) -> Self {
        let mut frozen = base.clone();
        frozen.set_requires_grad(false);
        let mut learnable = base;
        learnable.set_requires_grad(true);
        DualEncoder { frozen, learnable }
    }
}

#[derive(Debug, Clone)]
pub struct VisualSurrogate {
    /// Fixed offset between the text and image sides of the embedding space.
    pub gap: Vec<f64>,
    pub sigma_img: f64,
}

impl VisualSurrogate {
    /// Gap direction drawn once from `rng`, scaled to `gap_norm`.
    pub fn new(d: usize, gap_norm: f64, sigma_img: f64, rng: &mut impl Rng) -> Result<Self> {
        if gap_norm < 0.0 || sigma_img < 0.0 {
            return Err(Error::input(
                "visual surrogate: gap_norm and sigma_img must be non-negative",
            ));
        }
        let gap = if gap_norm == 0.0 {
            vec![0.0; d]
        } else {
            let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::numeric("visual surrogate: degenerate gap draw"));
            }
            raw.into_iter().map(|v| v * gap_norm / norm).collect()
        };
        Ok(VisualSurrogate { gap, sigma_img })
    }

    /// normalize(encode(frozen, caption) + gap + eps), eps ~ N(0, sigma_img^2 I).
    pub fn synth_image_embed(
        &self,
        frozen: &EncoderParams,
        caption: &TokenSeq,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let text = encode_plain(frozen, caption)?;
        if text.len() != self.gap.len() {
            return Err(Error::input(format!(
                "visual surrogate: gap dim {} does not match encoder dim {}",
                self.gap.len(),
                text.len()
            )));
        }
        let mut out: Vec<f64> = text
            .iter()
            .zip(&self.gap)
            .map(|(t, g)| {
                let eps: f64 = if self.sigma_img > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    n * self.sigma_img
                } else {
                    0.0
                };
                t + g + eps
            })
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric("visual surrogate: zero-norm image embedding"));
        }
        for v in out.iter_mut() {
            *v /= norm;
        }
        Ok(out)
    }
}

// ── Self-alignment pretraining ──

/// Settings for the light pretraining that gives a fresh encoder usable
/// structure before any experiment runs on top of it.
#[derive(Debug, Clone)]
pub struct AlignConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Per-token drop probability when building the two views.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            tau: 0.07,
            dropout: 0.3,
            seed: 0,
        }
    }
}

/// Drops each token independently; a draw that would empty the sequence
/// keeps one surviving token instead.
fn dropout_view(seq: &TokenSeq, p: f64, rng: &mut impl Rng) -> TokenSeq {
    let mut ids = Vec::with_capacity(seq.ids.len());
    for &id in &seq.ids {
        if rng.gen::<f64>() >= p {
            ids.push(id);
        }
    }
    if ids.is_empty() && !seq.ids.is_empty() {
        ids.push(seq.ids[rng.gen_range(0..seq.ids.len())]);
    }
    TokenSeq { ids }
}

/// Contrastive self-alignment: two token-dropout views of the same caption
/// are pulled together, other captions in the batch pushed apart. Updates
/// every parameter group and leaves `params` with gradients disabled,
/// ready to serve as the frozen encoder. Returns the per-step losses.
pub fn align_encoder(
    params: &mut EncoderParams,
    captions: &[TokenSeq],
    cfg: &AlignConfig,
) -> Result<Vec<f64>> {
    if captions.len() < 2 {
        return Err(Error::input(format!(
            "self-alignment needs at least 2 captions, got {}",
            captions.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::input("self-alignment batches need at least 2 captions"));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::input(format!("temperature must be positive, got {}", cfg.tau)));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::input(format!(
            "dropout must lie in [0, 1), got {}",
            cfg.dropout
        )));
    }
    if captions.iter().any(|c| c.is_empty()) {
        return Err(Error::input("self-alignment corpus contains an empty caption"));
    }

    params.set_requires_grad(true);
    let sizes: Vec<usize> = params.fields().iter().map(|(_, t)| t.values.len()).collect();
    let mut opt = crate::optim::AdamW::new(cfg.lr, cfg.weight_decay, &sizes)?;
    let batch = cfg.batch_size.min(captions.len());
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut rng = crate::rng::stream_at(cfg.seed, "align-batch", step);
        let mut order: Vec<usize> = (0..captions.len()).collect();
        for i in 0..batch {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(batch);

        let mut tape = Tape::new();
        let vars = params.insert(&mut tape);
        let empty = BTreeMap::new();
        let mut queries = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for &idx in &order {
            let view_a = dropout_view(&captions[idx], cfg.dropout, &mut rng);
            let view_b = dropout_view(&captions[idx], cfg.dropout, &mut rng);
            queries.push(encode(&mut tape, &vars, &view_a, &empty)?);
            targets.push(encode(&mut tape, &vars, &view_b, &empty)?);
        }
        let root = crate::loss::symmetric_infonce(&mut tape, &queries, &targets, cfg.tau, false)?;
        let loss = tape.scalar_value(root);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "self-alignment diverged at step {step}: loss = {loss}"
            )));
        }
        history.push(loss);
        tape.backward(root)?;

        let grads: Vec<Vec<f64>> = PARAM_FIELDS
            .iter()
            .map(|name| {
                let id = vars.field(name).expect("known field");
                tape.grad(id).map(<[f64]>::to_vec).ok_or_else(|| {
                    Error::numeric(format!("no gradient recorded for parameter {name}"))
                })
            })
            .collect::<Result<_>>()?;
        let mut fields = params.fields_mut();
        let mut slots: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(fields.len());
        for ((_, tensor), grad) in fields.iter_mut().zip(&grads) {
            slots.push((&mut tensor.values, grad));
        }
        opt.step(&mut slots)?;
    }

    params.set_requires_grad(false);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradients;
    use crate::rng::stream;
    use crate::text::Vocabulary;

    fn tiny_params(seed: u64) -> EncoderParams {
        EncoderParams::init(8, 6, &mut stream(seed, "enc-test")).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(tiny_params(3).byte_hash(), tiny_params(3).byte_hash());
        assert_ne!(tiny_params(3).byte_hash(), tiny_params(4).byte_hash());
    }

    #[test]
    fn output_is_unit_norm() {
        let params = tiny_params(1);
        let seq = TokenSeq { ids: vec![3, 4, 5] };
        let e = encode_plain(&params, &seq).unwrap();
        let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn token_order_changes_output() {
        let params = tiny_params(1);
        let a = encode_plain(&params, &TokenSeq { ids: vec![3, 4] }).unwrap();
        let b = encode_plain(&params, &TokenSeq { ids: vec![4, 3] }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_token_sequence_is_finite() {
        let params = tiny_params(2);
        let e = encode_plain(&params, &TokenSeq { ids: vec![5] }).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let params = tiny_params(2);
        assert!(encode_plain(&params, &TokenSeq { ids: vec![] }).is_err());
    }

    #[test]
    fn pseudo_slot_takes_supplied_vector() {
        let params = tiny_params(5);
        let mut tape = Tape::new();
        let vars = params.insert(&mut tape);
        let v = tape.constant_vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let seq = TokenSeq { ids: vec![PSEUDO] };
        let mut pseudo = BTreeMap::new();
        pseudo.insert(0usize, v);
        let rows = embed_tokens(&mut tape, &vars, &seq, &pseudo).unwrap();
        let expect: Vec<f64> = (0..6)
            .map(|j| tape.values(v)[j] + params.p.values[j])
            .collect();
        assert_eq!(tape.values(rows), expect.as_slice());
    }

    #[test]
    fn pseudo_slot_without_vector_is_rejected() {
        let params = tiny_params(5);
        let mut tape = Tape::new();
        let vars = params.insert(&mut tape);
        let seq = TokenSeq { ids: vec![3, PSEUDO] };
        assert!(embed_tokens(&mut tape, &vars, &seq, &BTreeMap::new()).is_err());
    }

    #[test]
    fn pseudo_vector_at_ordinary_slot_is_rejected() {
        let params = tiny_params(5);
        let mut tape = Tape::new();
        let vars = params.insert(&mut tape);
        let v = tape.constant_vector(vec![0.0; 6]);
        let seq = TokenSeq { ids: vec![3, 4] };
        let mut pseudo = BTreeMap::new();
        pseudo.insert(0usize, v);
        assert!(embed_tokens(&mut tape, &vars, &seq, &pseudo).is_err());
    }

    #[test]
    fn dual_encoder_copies_start_identical() {
        let dual = DualEncoder::new(tiny_params(9));
        assert_eq!(dual.frozen.byte_hash(), dual.learnable.byte_hash());
        assert!(!dual.frozen.e_w.requires_grad);
        assert!(dual.learnable.e_w.requires_grad);
    }

    #[test]
    fn gradients_match_finite_differences_across_lengths() {
        for len in [1usize, 4, 12] {
            let params = tiny_params(11 + len as u64);
            let seq = TokenSeq {
                ids: (0..len).map(|i| 3 + (i % 5)).collect(),
            };
            let tensors: Vec<Tensor> =
                params.fields().into_iter().map(|(_, t)| t.clone()).collect();
            let d = params.d;
            let f = move |tape: &mut Tape, ids: &[VarId]| {
                let vars = EncoderVars::from_slice(d, ids);
                let e = encode(tape, &vars, &seq, &BTreeMap::new())?;
                tape.sum_vec(e)
            };
            let report = check_gradients(f, &tensors, 1e-4, 1e-4).unwrap();
            assert!(
                report.pass(),
                "len={len}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn surrogate_with_zero_gap_and_noise_matches_text() {
        let params = tiny_params(7);
        let sur = VisualSurrogate::new(6, 0.0, 0.0, &mut stream(7, "gap")).unwrap();
        let seq = TokenSeq { ids: vec![3, 4] };
        let img = sur
            .synth_image_embed(&params, &seq, &mut stream(7, "img"))
            .unwrap();
        let text = encode_plain(&params, &seq).unwrap();
        // Renormalizing a unit vector only shuffles the last bit.
        for (a, b) in img.iter().zip(&text) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn surrogate_gap_lowers_cosine_uniformly() {
        let params = tiny_params(7);
        let sur = VisualSurrogate::new(6, 0.8, 0.0, &mut stream(9, "gap")).unwrap();
        let mut cosines = Vec::new();
        for ids in [vec![3, 4], vec![5, 6, 7], vec![4]] {
            let seq = TokenSeq { ids };
            let text = encode_plain(&params, &seq).unwrap();
            let img = sur
                .synth_image_embed(&params, &seq, &mut stream(1, "img"))
                .unwrap();
            let cos: f64 = text.iter().zip(&img).map(|(a, b)| a * b).sum::<f64>()
                / img.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(cos < 1.0 - 1e-6);
            cosines.push(cos);
        }
        assert!(cosines.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn surrogate_same_seed_same_embedding() {
        let params = tiny_params(7);
        let sur = VisualSurrogate::new(6, 0.5, 0.3, &mut stream(2, "gap")).unwrap();
        let seq = TokenSeq { ids: vec![3, 4, 5] };
        let a = sur
            .synth_image_embed(&params, &seq, &mut stream(5, "img"))
            .unwrap();
        let b = sur
            .synth_image_embed(&params, &seq, &mut stream(5, "img"))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn update_masks_name_real_fields() {
        for mask in [
            UpdateMask::Full,
            UpdateMask::FcOnly,
            UpdateMask::Front3,
            UpdateMask::Middle3,
            UpdateMask::Last3,
            UpdateMask::Interleave3,
        ] {
            for f in mask.fields() {
                assert!(PARAM_FIELDS.contains(f), "mask field {f} unknown");
            }
            assert_eq!(UpdateMask::parse(mask.name()).unwrap(), mask);
        }
        assert!(UpdateMask::parse("everything").is_err());
    }

    #[test]
    fn fc_only_mask_excludes_attention_and_embeddings() {
        let fields = UpdateMask::FcOnly.fields();
        for f in ["w_q", "w_k", "w_v", "w_o", "e_w", "p"] {
            assert!(!fields.contains(&f));
        }
    }

    // ── Self-alignment ──

    fn align_corpus() -> (Vocabulary, Vec<TokenSeq>) {
        let captions = [
            "a red dog near the park",
            "a blue cat near the beach",
            "a green car near the river",
            "a small bird near the tower",
            "a wooden boat near the harbor",
            "a red horse near the bridge",
            "a blue lamp near the garden",
            "a green kite near the castle",
        ];
        let vocab = Vocabulary::build(&captions, 1).unwrap();
        let seqs = captions.iter().map(|c| vocab.tokenize(c)).collect();
        (vocab, seqs)
    }

    #[test]
    fn dropout_views_shrink_but_never_empty() {
        let seq = TokenSeq { ids: vec![3, 4, 5, 6] };
        let mut rng = stream(0, "dropout");
        for _ in 0..200 {
            let view = dropout_view(&seq, 0.9, &mut rng);
            assert!(!view.is_empty());
            assert!(view.len() <= seq.len());
            assert!(view.ids.iter().all(|id| seq.ids.contains(id)));
        }
    }

    #[test]
    fn alignment_reduces_the_contrastive_loss() {
        let (_, seqs) = align_corpus();
        let mut params =
            EncoderParams::init(32, 12, &mut stream(1, "align-init")).unwrap();
        let cfg = AlignConfig { steps: 60, batch_size: 8, ..AlignConfig::default() };
        let history = align_encoder(&mut params, &seqs, &cfg).unwrap();
        assert_eq!(history.len(), 60);
        let head: f64 = history[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = history[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
        assert!(!params.e_w.requires_grad, "alignment should hand back a frozen-ready encoder");
    }

    #[test]
    fn alignment_is_seed_deterministic() {
        let (_, seqs) = align_corpus();
        let run = || {
            let mut p = EncoderParams::init(32, 12, &mut stream(2, "align-init")).unwrap();
            let cfg = AlignConfig { steps: 15, batch_size: 4, ..AlignConfig::default() };
            align_encoder(&mut p, &seqs, &cfg).unwrap();
            p.byte_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alignment_rejects_degenerate_inputs() {
        let (_, seqs) = align_corpus();
        let mut params = EncoderParams::init(32, 8, &mut stream(3, "align-init")).unwrap();
        let one = vec![seqs[0].clone()];
        assert!(align_encoder(&mut params, &one, &AlignConfig::default()).is_err());
        let mut cfg = AlignConfig { dropout: 1.0, ..AlignConfig::default() };
        assert!(align_encoder(&mut params, &seqs, &cfg).is_err());
        cfg = AlignConfig { batch_size: 1, ..AlignConfig::default() };
        assert!(align_encoder(&mut params, &seqs, &cfg).is_err());
    }
}
