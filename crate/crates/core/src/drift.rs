//! Per-class representation drift between two snapshots: mean drift,
//! variance change and covariance drift.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::{align, AlignedPairSet, ClassPairs, EmbeddingSnapshot, BACKGROUND};
use crate::stats::{covariance, ClassStats, DEFAULT_LAMBDA};

/// How many token pairs covariance drift looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairBudget {
    /// Enumerate every pair when `C(n,2)` is at most this.
    pub full_threshold: u64,
    /// Otherwise sample this many distinct pairs.
    pub samples: u64,
}

impl Default for PairBudget {
    fn default() -> Self {
        Self {
            full_threshold: 250_000,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub lambda: f64,
    pub budget: PairBudget,
    pub seed: u64,
    /// Restricts the report to these classes; `"O"` is always kept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            budget: PairBudget::default(),
            seed: 0,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftFlag {
    CovarianceBefore,
    CovarianceAfter,
    TooFewPairs,
}

impl DriftFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            DriftFlag::CovarianceBefore => "covariance_before",
            DriftFlag::CovarianceAfter => "covariance_after",
            DriftFlag::TooFewPairs => "too_few_pairs",
        }
    }
}

/// One row of a drift report. Metrics whose preconditions failed are
/// `None` and the reason is listed in `flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDrift {
    pub class: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_change: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_drift: Option<f64>,
    pub n_before: usize,
    pub n_after: usize,
    pub n_aligned: usize,
    /// Token pairs behind `cov_drift`.
    pub cov_pairs: u64,
    pub cov_sampled: bool,
    pub flags: Vec<DriftFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub lambda: f64,
    pub budget: PairBudget,
    pub seed: u64,
    pub covariance_divisor: String,
    pub mean_weighting: String,
    pub variance_change_lambda: f64,
}

impl MetricConfig {
    fn from_config(config: &DriftConfig) -> Self {
        Self {
            lambda: config.lambda,
            budget: config.budget,
            seed: config.seed,
            covariance_divisor: "population".into(),
            mean_weighting: "token_count".into(),
            variance_change_lambda: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub pair_name: String,
    pub before_stage: String,
    pub after_stage: String,
    pub classes: Vec<ClassDrift>,
    pub metric_config: MetricConfig,
    pub dropped_before: usize,
    pub dropped_after: usize,
}

impl DriftReport {
    pub fn class(&self, name: &str) -> Option<&ClassDrift> {
        self.classes.iter().find(|c| c.class == name)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W, with_header: bool) -> Result<()> {
        if with_header {
            writeln!(out, "{CSV_HEADER}")?;
        }
        for row in &self.classes {
            let flags: Vec<&str> = row.flags.iter().map(|f| f.as_str()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.pair_name,
                row.class,
                fmt_opt(row.mean_drift),
                fmt_opt(row.var_change),
                fmt_opt(row.cov_drift),
                row.n_aligned,
                flags.join("|"),
            )?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "pair,class,mean_drift,var_change,cov_drift,n_aligned,flags";

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `‖ mean_i (after_i − before_i) ‖₂` over the aligned tokens of one class.
pub fn mean_drift(pairs: &ClassPairs) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyClass);
    }
    let d = pairs.before.dim();
    let mut sum = vec![0.0f64; d];
    for (b, a) in pairs.before.iter_rows().zip(pairs.after.iter_rows()) {
        for k in 0..d {
            sum[k] += a[k] as f64 - b[k] as f64;
        }
    }
    let n = pairs.len() as f64;
    Ok(sum.iter().map(|s| (s / n).powi(2)).sum::<f64>().sqrt())
}

/// `trace(Σ_after) − trace(Σ_before)`; positive means the class spread out.
pub fn variance_change(before: &ClassStats, after: &ClassStats) -> Result<f64> {
    if before.degenerate || after.degenerate {
        return Err(Error::DegenerateCovariance);
    }
    Ok(after.trace() - before.trace())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovDrift {
    pub value: f64,
    pub pairs: u64,
    pub sampled: bool,
}

/// Maps a linear index over `{(i, j) : i < j}` (ordered by `j`, then `i`)
/// back to the pair.
fn unrank_pair(k: u64) -> (usize, usize) {
    let mut j = ((1.0 + (1.0 + 8.0 * k as f64).sqrt()) / 2.0).floor() as u64;
    while j * (j - 1) / 2 > k {
        j -= 1;
    }
    while (j + 1) * j / 2 <= k {
        j += 1;
    }
    let i = k - j * (j - 1) / 2;
    (i as usize, j as usize)
}

/// Mean absolute change of within-class pairwise Mahalanobis distances,
/// each side measured under its own class covariance.
///
/// `stream` selects an independent RNG stream for the sampled regime.
pub fn covariance_drift(
    pairs: &ClassPairs,
    before_stats: &ClassStats,
    after_stats: &ClassStats,
    budget: PairBudget,
    seed: u64,
    stream: u64,
) -> Result<CovDrift> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::EmptyClass);
    }
    let zb = before_stats.whiten(&pairs.before)?;
    let za = after_stats.whiten(&pairs.after)?;
    let delta = |i: usize, j: usize| (za.distance(i, j) - zb.distance(i, j)).abs();

    let total = (n as u64) * (n as u64 - 1) / 2;
    if total <= budget.full_threshold || budget.samples >= total {
        let mut sum = 0.0;
        for j in 1..n {
            for i in 0..j {
                sum += delta(i, j);
            }
        }
        return Ok(CovDrift {
            value: sum / total as f64,
            pairs: total,
            sampled: false,
        });
    }
    if budget.samples == 0 {
        return Err(Error::InvalidConfig("pair budget of zero samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let amount = budget.samples as usize;
    let picks = index::sample(&mut rng, total as usize, amount);
    let mut sum = 0.0;
    for k in picks.iter() {
        let (i, j) = unrank_pair(k as u64);
        sum += delta(i, j);
    }
    Ok(CovDrift {
        value: sum / amount as f64,
        pairs: budget.samples,
        sampled: true,
    })
}

fn class_drift(
    name: &str,
    stream: u64,
    pairs: &AlignedPairSet,
    before: &EmbeddingSnapshot,
    after: &EmbeddingSnapshot,
    config: &DriftConfig,
) -> ClassDrift {
    let count = |s: &EmbeddingSnapshot| {
        s.class_index(name).map_or(0, |id| {
            s.records.iter().filter(|r| r.class_id == id).count()
        })
    };
    let mut row = ClassDrift {
        class: name.to_owned(),
        mean_drift: None,
        var_change: None,
        cov_drift: None,
        n_before: count(before),
        n_after: count(after),
        n_aligned: pairs.n_aligned(name),
        cov_pairs: 0,
        cov_sampled: false,
        flags: Vec::new(),
    };
    let Some(cp) = pairs.classes.get(name).filter(|cp| !cp.is_empty()) else {
        row.flags = vec![
            DriftFlag::CovarianceBefore,
            DriftFlag::CovarianceAfter,
            DriftFlag::TooFewPairs,
        ];
        return row;
    };
    row.mean_drift = mean_drift(cp).ok();

    // Both covariance() calls are infallible here: the matrices are
    // non-empty and finite by construction.
    let raw_before = covariance(&cp.before, 0.0).expect("aligned rows are valid");
    let raw_after = covariance(&cp.after, 0.0).expect("aligned rows are valid");
    row.var_change = variance_change(&raw_before, &raw_after).ok();

    let shrunk_before = raw_before
        .shrunk(config.lambda)
        .ok()
        .filter(ClassStats::is_factorized);
    let shrunk_after = raw_after
        .shrunk(config.lambda)
        .ok()
        .filter(ClassStats::is_factorized);
    if shrunk_before.is_none() {
        row.flags.push(DriftFlag::CovarianceBefore);
    }
    if shrunk_after.is_none() {
        row.flags.push(DriftFlag::CovarianceAfter);
    }
    if cp.len() < 2 {
        row.flags.push(DriftFlag::TooFewPairs);
    }
    if let (Some(sb), Some(sa), true) = (&shrunk_before, &shrunk_after, cp.len() >= 2) {
        match covariance_drift(cp, sb, sa, config.budget, config.seed, stream) {
            Ok(cd) => {
                row.cov_drift = Some(cd.value);
                row.cov_pairs = cd.pairs;
                row.cov_sampled = cd.sampled;
            }
            Err(_) => row
                .flags
                .extend([DriftFlag::CovarianceBefore, DriftFlag::CovarianceAfter]),
        }
    }
    row.flags.sort();
    row.flags.dedup();
    row
}

/// Aligns the two snapshots and computes every metric for each class
/// present in both class tables. Per-class failures become flags.
pub fn compute_drift_report(
    before: &EmbeddingSnapshot,
    after: &EmbeddingSnapshot,
    config: &DriftConfig,
) -> Result<DriftReport> {
    if !(config.lambda.is_finite() && config.lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be >= 0, got {}",
            config.lambda
        )));
    }
    let pairs = align(before, after)?;
    let shared: Vec<(u64, &String)> = before
        .class_table
        .iter()
        .enumerate()
        .filter(|(_, c)| after.class_table.contains(c))
        .filter(|(_, c)| match &config.classes {
            Some(keep) => c.as_str() == BACKGROUND || keep.contains(c),
            None => true,
        })
        .map(|(i, c)| (i as u64, c))
        .collect();
    if let Some(keep) = &config.classes {
        for k in keep {
            if !before.class_table.contains(k) {
                return Err(Error::UnknownClass(k.clone()));
            }
        }
    }

    let classes = shared
        .par_iter()
        .map(|&(stream, name)| class_drift(name, stream, &pairs, before, after, config))
        .collect();

    Ok(DriftReport {
        pair_name: format!("{}_vs_{}", before.stage_name, after.stage_name),
        before_stage: before.stage_name.clone(),
        after_stage: after.stage_name.clone(),
        classes,
        metric_config: MetricConfig::from_config(config),
        dropped_before: pairs.dropped_before,
        dropped_after: pairs.dropped_after,
    })
}
