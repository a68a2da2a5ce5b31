//! Reference implementations the acceptance suite verifies the library
//! against, written as directly as possible (plain exp sums, linear scans),
//! plus parsers for the binary's report artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Two-term contrastive loss, transcribed symbol by symbol: for each pair k,
/// -log of the matched-pair share among exponentiated similarities, once with
/// the query as anchor (denominator: all query-target pairs plus the other
/// targets against target k) and once with the target as anchor.
pub fn brute_force_loss(queries: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> f64 {
    let b = queries.len();
    let mut total = 0.0;
    for k in 0..b {
        let num = (cosine(&queries[k], &targets[k]) / tau).exp();

        let mut den1 = 0.0;
        for j in 0..b {
            den1 += (cosine(&queries[k], &targets[j]) / tau).exp();
        }
        for j in 0..b {
            if j != k {
                den1 += (cosine(&targets[k], &targets[j]) / tau).exp();
            }
        }
        total += -(num / den1).ln();

        let mut den2 = 0.0;
        for j in 0..b {
            den2 += (cosine(&targets[k], &queries[j]) / tau).exp();
        }
        for j in 0..b {
            if j != k {
                den2 += (cosine(&queries[k], &queries[j]) / tau).exp();
            }
        }
        total += -(num / den2).ln();
    }
    total / b as f64
}

pub fn brute_force_recall(ranking: &[usize], positives: &[usize], k: usize) -> f64 {
    let k = k.min(ranking.len());
    for id in &ranking[..k] {
        if positives.contains(id) {
            return 1.0;
        }
    }
    0.0
}

/// Truncated average precision, normalized by min(K, |positives|): sum of
/// precision-at-rank over the relevant ranks within the top K.
pub fn brute_force_map(ranking: &[usize], positives: &[usize], k: usize) -> f64 {
    let k = k.min(ranking.len());
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, id) in ranking[..k].iter().enumerate() {
        if positives.contains(id) {
            hits += 1.0;
            sum += hits / (i as f64 + 1.0);
        }
    }
    sum / (positives.len().min(k) as f64)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ── Binary and artifact helpers ──

pub fn tcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn tcl_ok(args: &[&str]) {
    let out = tcl(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// `mode \t metric \t K \t value` rows keyed by (mode, metric, K).
pub fn parse_eval_tsv(path: &Path) -> BTreeMap<(String, String, usize), f64> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    let mut rows = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 4, "bad eval row {line:?}");
        rows.insert(
            (cols[0].to_string(), cols[1].to_string(), cols[2].parse().unwrap()),
            cols[3].parse().unwrap(),
        );
    }
    rows
}

/// Ablation rows as (label, metric_average), in file order.
pub fn parse_ablation_tsv(path: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 7, "bad ablation row {line:?}");
            (cols[0].to_string(), cols[5].parse().unwrap())
        })
        .collect()
}

/// `key = value` stats files.
pub fn parse_stats(path: &Path) -> BTreeMap<String, f64> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().parse().unwrap()))
        .collect()
}
