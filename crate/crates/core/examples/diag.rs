//! Diagnostic driver: runs the pipeline stages in memory at desk scale and
//! prints the distributions the defaults were tuned against. Not part of the
//! test suite; run with `cargo run --release --example diag [seed]`.

use std::time::Instant;

use tcl_core::encoder::{align_encoder, encode_plain, DualEncoder, EncoderParams, VisualSurrogate};
use tcl_core::eval::{
    avg_cosine_probe, build_synthetic_benchmark, evaluate_cir, EvalMode,
};
use tcl_core::pipeline::{corpus_captions, vocab_corpus, RunConfig};
use tcl_core::projection::pretrain_phi;
use tcl_core::rng::stream;
use tcl_core::text::Vocabulary;
use tcl_core::train::{run_ablation, train_rtd};
use tcl_core::triplets::{
    extract_keywords, filter_triplets, generate_triplets, keyword_embeddings, probe_scores,
    TemplateSet,
};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn summarize(label: &str, xs: &[f64]) {
    if xs.is_empty() {
        println!("{label}: (empty)");
        return;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    println!(
        "{label}: n={} mean={:.4} min={:.4} p25={:.4} p50={:.4} p75={:.4} max={:.4}",
        xs.len(),
        mean,
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0)
    );
}

fn arg_value(flag: &str) -> Option<String> {
    let args: Vec<String> = std::env::args().collect();
    args.iter().position(|a| a == flag).and_then(|i| args.get(i + 1).cloned())
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    if let Some(lr) = arg_value("--lr") {
        cfg.set("lr", &lr).unwrap();
        println!("[cfg] lr = {}", cfg.lr);
    }
    if let Some(steps) = arg_value("--steps") {
        cfg.set("steps", &steps).unwrap();
        println!("[cfg] steps = {}", cfg.steps);
    }
    let t0 = Instant::now();

    // ── Stage 1: world + alignment ──
    let captions = corpus_captions(&cfg).unwrap();
    let vocab = Vocabulary::build(&vocab_corpus(&captions), 1).unwrap();
    println!("[world] captions={} vocab={}", captions.len(), vocab.len());
    let seqs: Vec<_> = captions.iter().map(|c| vocab.tokenize(c)).collect();

    let mut frozen =
        EncoderParams::init(vocab.len(), cfg.d, &mut stream(cfg.seed, "encoder-init")).unwrap();

    // Pre-alignment caption geometry.
    let embeds_before: Vec<Vec<f64>> =
        seqs.iter().take(60).map(|s| encode_plain(&frozen, s).unwrap()).collect();
    let mut pair_cos = Vec::new();
    for i in 0..embeds_before.len() {
        for j in (i + 1)..embeds_before.len() {
            pair_cos.push(cosine(&embeds_before[i], &embeds_before[j]));
        }
    }
    summarize("[align] caption-pair cosine BEFORE", &pair_cos);

    let hist = align_encoder(&mut frozen, &seqs, &cfg.align_config()).unwrap();
    println!(
        "[align] steps={} loss {:.4} -> {:.4} ({:.1}s)",
        hist.len(),
        hist.first().unwrap(),
        hist.last().unwrap(),
        t0.elapsed().as_secs_f64()
    );

    let embeds_after: Vec<Vec<f64>> =
        seqs.iter().take(60).map(|s| encode_plain(&frozen, s).unwrap()).collect();
    let mut pair_cos = Vec::new();
    for i in 0..embeds_after.len() {
        for j in (i + 1)..embeds_after.len() {
            pair_cos.push(cosine(&embeds_after[i], &embeds_after[j]));
        }
    }
    summarize("[align] caption-pair cosine AFTER", &pair_cos);

    let surrogate =
        VisualSurrogate::new(cfg.d, cfg.gap_norm, cfg.sigma_img, &mut stream(cfg.seed, "surrogate"))
            .unwrap();

    // ── Stage 2: phi ──
    let t1 = Instant::now();
    let (phi, phist) =
        pretrain_phi(&frozen, &vocab, &seqs, &surrogate, &cfg.phi_config()).unwrap();
    println!(
        "[phi] steps={} loss {:.4} -> {:.4} ({:.1}s)",
        phist.len(),
        phist.first().unwrap(),
        phist.last().unwrap(),
        t1.elapsed().as_secs_f64()
    );

    // ── Stage 3: triplets ──
    let t2 = Instant::now();
    let stats = extract_keywords(&captions, &vocab, cfg.min_freq).unwrap();
    let embeddings = keyword_embeddings(&frozen, &vocab, &stats).unwrap();
    println!("[triplets] eligible keywords={}", stats.eligible().len());

    // Keyword-pair cosine spread vs the replacement band.
    let kws: Vec<&String> = embeddings.keys().collect();
    let mut kw_cos = Vec::new();
    for i in 0..kws.len() {
        for j in (i + 1)..kws.len() {
            kw_cos.push(cosine(&embeddings[kws[i]], &embeddings[kws[j]]));
        }
    }
    summarize("[triplets] keyword-pair cosine", &kw_cos);
    let in_band = kw_cos
        .iter()
        .filter(|c| **c >= cfg.band_lo && **c <= cfg.band_hi)
        .count();
    println!(
        "[triplets] pairs in [{}, {}]: {}/{}",
        cfg.band_lo,
        cfg.band_hi,
        in_band,
        kw_cos.len()
    );

    let generated = generate_triplets(
        &captions,
        &TemplateSet::builtin(),
        &stats,
        &embeddings,
        &cfg.gen_config(),
    )
    .unwrap();
    println!("[triplets] generated={}", generated.len());

    for scale in [0.25, 0.15, 0.1] {
        let probe_noise =
            tcl_core::projection::NoiseConfig::new(tcl_core::projection::NoiseKind::Product, scale)
                .unwrap();
        let scores =
            probe_scores(&generated, &frozen, &vocab, &phi, &probe_noise, cfg.seed).unwrap();
        let both_min: Vec<f64> = scores.iter().map(|(r, t)| r.min(*t)).collect();
        summarize(&format!("[filter] min-probe @ scale {scale}"), &both_min);
        let pass = both_min.iter().filter(|s| **s >= cfg.filter_threshold).count();
        println!(
            "[filter] scale {scale}: pass rate {}/{} = {:.3}",
            pass,
            both_min.len(),
            pass as f64 / both_min.len() as f64
        );
    }
    let noise = cfg.filter_noise_config().unwrap();
    let kept = filter_triplets(
        &generated,
        &frozen,
        &vocab,
        &phi,
        &noise,
        cfg.filter_threshold,
        cfg.seed,
    )
    .unwrap();
    println!(
        "[filter] kept {}/{} at {} ({:.1}s)",
        kept.len(),
        generated.len(),
        cfg.filter_threshold,
        t2.elapsed().as_secs_f64()
    );
    if kept.len() < cfg.batch_size {
        println!("[filter] !! too few triplets to fill a batch, aborting");
        return;
    }

    // ── Benchmark + frozen/ideal gap ──
    let t3 = Instant::now();
    let bench =
        build_synthetic_benchmark(&cfg.grammar(), &frozen, &vocab, &surrogate, cfg.seed).unwrap();
    println!(
        "[bench] gallery={} queries={} ({:.1}s)",
        bench.gallery.len(),
        bench.queries.len(),
        t3.elapsed().as_secs_f64()
    );
    let dual0 = DualEncoder::new(frozen.clone());
    let ks = vec![1usize, 5, 10];
    let frozen_rep = evaluate_cir(&dual0, &phi, &vocab, &bench, EvalMode::Frozen, &ks).unwrap();
    let ideal_rep =
        evaluate_cir(&dual0, &phi, &vocab, &bench, EvalMode::IdealCaption, &ks).unwrap();
    let image_rep = evaluate_cir(&dual0, &phi, &vocab, &bench, EvalMode::ImageOnly, &ks).unwrap();
    println!(
        "[eval] frozen   mAP@5={:.4} R@1={:.4} R@10={:.4}",
        frozen_rep.map_at(5).unwrap(),
        frozen_rep.recall_at(1).unwrap(),
        frozen_rep.recall_at(10).unwrap()
    );
    println!(
        "[eval] ideal    mAP@5={:.4} R@1={:.4} R@10={:.4}",
        ideal_rep.map_at(5).unwrap(),
        ideal_rep.recall_at(1).unwrap(),
        ideal_rep.recall_at(10).unwrap()
    );
    println!(
        "[eval] img-only mAP@5={:.4} R@1={:.4} R@10={:.4}",
        image_rep.map_at(5).unwrap(),
        image_rep.recall_at(1).unwrap(),
        image_rep.recall_at(10).unwrap()
    );
    let gap = ideal_rep.map_at(5).unwrap() - frozen_rep.map_at(5).unwrap();
    println!("[eval] ideal-frozen mAP@5 gap = {:.4} (need >= 0.05)", gap);

    // ── Stage 4: train ──
    let t4 = Instant::now();
    let tc = cfg.train_config().unwrap();
    let mut dual = DualEncoder::new(frozen.clone());
    let hist = train_rtd(&mut dual, &phi, &vocab, &kept, &tc).unwrap();
    println!(
        "[train] steps={} loss {:.4} -> {:.4} ({:.1}s)",
        hist.len(),
        hist.first().unwrap(),
        hist.last().unwrap(),
        t4.elapsed().as_secs_f64()
    );

    let rtd_rep = evaluate_cir(&dual, &phi, &vocab, &bench, EvalMode::Rtd, &ks).unwrap();
    println!(
        "[eval] rtd      mAP@5={:.4} R@1={:.4} R@10={:.4}",
        rtd_rep.map_at(5).unwrap(),
        rtd_rep.recall_at(1).unwrap(),
        rtd_rep.recall_at(10).unwrap()
    );
    let lift = rtd_rep.map_at(5).unwrap() - frozen_rep.map_at(5).unwrap();
    let closed = if gap > 0.0 { lift / gap } else { f64::NAN };
    println!(
        "[eval] rtd-frozen lift = {:.4} (need >= 0.05), gap closed = {:.1}% (need >= 30%)",
        lift,
        closed * 100.0
    );
    let (cf, cr) = avg_cosine_probe(&dual, &phi, &vocab, &bench).unwrap();
    println!("[probe] avg-cosine frozen={:.4} rtd={:.4} (need rtd > frozen)", cf, cr);

    // ── Optional: ablation grid (at the gentler grid budget) ──
    if std::env::args().any(|a| a == "--ablate") {
        let t5 = Instant::now();
        let grid_cfg = cfg.ablate_train_config().unwrap();
        let rows = run_ablation(
            &grid_cfg, &frozen, &phi, &vocab, &kept, &seqs, &surrogate, cfg.seed, &bench, &ks,
        )
        .unwrap();
        for row in &rows {
            println!(
                "[ablate] {:<16} metric_avg={:.4} mAP@5={:.4}",
                row.label,
                row.metric_average,
                row.report.map_at(5).unwrap_or(f64::NAN)
            );
        }
        println!("[ablate] ({:.1}s)", t5.elapsed().as_secs_f64());
    }

    println!("[total] {:.1}s", t0.elapsed().as_secs_f64());
}
