//! Training regimes, the full ablation suite, and report emission.
//!
//! A suite run generates a corpus, holds out a test split, splits the rest
//! into a large corpus A (new classes masked to `"O"` for the baseline)
//! and a small corpus B rich in new classes, trains every regime, scores
//! each on the test split and measures drift between the final states on
//! a fixed probe subset of the test split.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{compute_drift_report, fmt_opt, DriftConfig, DriftReport};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{
    checkpoint_hash, extract_embeddings, predict_corpus, train_stage, write_checkpoint,
    write_loss_curve, FreezeMask, ProbeSet, ToyModelParams, TrainConfig, DEFAULT_HIDDEN,
};
use crate::snapshot::{write_snapshot, EmbeddingSnapshot, BACKGROUND};
use crate::synth::{
    generate_corpus, mask_labels, span_density, split_ab, split_holdout, Corpus, CorpusConfig,
    SplitConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BaselineBertTags,
    Joint,
    NaiveIncremental,
    FreezeExceptO,
    FreezeAllHeads,
    FreezeBackbone,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::BaselineBertTags,
        Regime::Joint,
        Regime::NaiveIncremental,
        Regime::FreezeExceptO,
        Regime::FreezeAllHeads,
        Regime::FreezeBackbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::BaselineBertTags => "baseline_bert_tags",
            Regime::Joint => "joint",
            Regime::NaiveIncremental => "naive_incremental",
            Regime::FreezeExceptO => "freeze_except_o",
            Regime::FreezeAllHeads => "freeze_all_heads",
            Regime::FreezeBackbone => "freeze_backbone",
        }
    }

    /// Stage name carried by the final snapshot of this regime.
    pub fn snapshot_name(self) -> &'static str {
        match self {
            Regime::BaselineBertTags => "original",
            Regime::NaiveIncremental => "naive",
            other => other.name(),
        }
    }

    pub fn is_incremental(self) -> bool {
        !matches!(self, Regime::BaselineBertTags | Regime::Joint)
    }

    pub fn stage_plan(self) -> Vec<StagePlan> {
        use HeadGroup::*;
        let baseline = StagePlan {
            corpus: CorpusSelector::A,
            labels: LabelSelector::OldOnly,
            start: StageStart::Fresh,
            frozen_heads: vec![],
            backbone_frozen: false,
        };
        let incremental = |frozen_heads: Vec<HeadGroup>, backbone_frozen| StagePlan {
            corpus: CorpusSelector::B,
            labels: LabelSelector::All,
            start: StageStart::ResumeWithNewHeads,
            frozen_heads,
            backbone_frozen,
        };
        match self {
            Regime::BaselineBertTags => vec![baseline],
            Regime::Joint => vec![StagePlan {
                corpus: CorpusSelector::AB,
                labels: LabelSelector::All,
                start: StageStart::Fresh,
                frozen_heads: vec![],
                backbone_frozen: false,
            }],
            Regime::NaiveIncremental => vec![baseline, incremental(vec![], false)],
            Regime::FreezeExceptO => vec![baseline, incremental(vec![Old], false)],
            Regime::FreezeAllHeads => vec![baseline, incremental(vec![Background, Old], false)],
            Regime::FreezeBackbone => vec![baseline, incremental(vec![Background, Old], true)],
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusSelector {
    A,
    B,
    AB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSelector {
    /// New classes masked to `"O"`.
    OldOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadGroup {
    Background,
    Old,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStart {
    /// Fresh parameters; heads exist for every class the stage's labels use.
    Fresh,
    /// Baseline parameters with zeroed heads for the new classes.
    ResumeWithNewHeads,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub corpus: CorpusSelector,
    pub labels: LabelSelector,
    pub start: StageStart,
    pub frozen_heads: Vec<HeadGroup>,
    pub backbone_frozen: bool,
}

/// Everything regimes share: the data splits, the probe set and the model
/// and training settings.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub class_table: Vec<String>,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub corpus_a: Corpus,
    pub corpus_b: Corpus,
    pub test: Corpus,
    pub probe: ProbeSet,
    pub hidden: usize,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl ExperimentContext {
    fn heads(&self, group: HeadGroup) -> Vec<String> {
        match group {
            HeadGroup::Background => vec![BACKGROUND.to_owned()],
            HeadGroup::Old => self.old_classes.clone(),
            HeadGroup::New => self.new_classes.clone(),
        }
    }

    fn stage_corpus(&self, plan: &StagePlan) -> Result<Corpus> {
        let corpus = match plan.corpus {
            CorpusSelector::A => self.corpus_a.clone(),
            CorpusSelector::B => self.corpus_b.clone(),
            CorpusSelector::AB => self.corpus_a.concat(&self.corpus_b),
        };
        match plan.labels {
            LabelSelector::All => Ok(corpus),
            LabelSelector::OldOnly => mask_labels(&corpus, &self.old_classes),
        }
    }

    fn fresh_params(&self, labels: LabelSelector) -> Result<ToyModelParams> {
        let active = self
            .class_table
            .iter()
            .map(|c| {
                c == BACKGROUND || labels == LabelSelector::All || self.old_classes.contains(c)
            })
            .collect();
        ToyModelParams::init(
            self.test.config.dim(),
            self.hidden,
            self.class_table.clone(),
            active,
            self.init_seed,
        )
    }
}

/// Output of one regime.
#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub regime: Regime,
    pub params: ToyModelParams,
    /// One snapshot per stage.
    pub snapshots: Vec<EmbeddingSnapshot>,
    pub loss_curves: Vec<Vec<f64>>,
    pub eval: EvalReport,
    /// Hash of the baseline checkpoint an incremental regime resumed from.
    pub resumed_from: Option<String>,
}

impl RegimeRun {
    pub fn final_snapshot(&self) -> &EmbeddingSnapshot {
        self.snapshots
            .last()
            .expect("every regime has at least one stage")
    }
}

/// Executes the stage plan of `regime`. Incremental regimes resume from
/// `baseline` when given (its parameters are cloned, never modified) and
/// train their own baseline otherwise.
pub fn run_regime(
    ctx: &ExperimentContext,
    regime: Regime,
    baseline: Option<&RegimeRun>,
) -> Result<RegimeRun> {
    for corpus in [&ctx.corpus_a, &ctx.corpus_b, &ctx.test] {
        if corpus.class_table() != ctx.class_table {
            return Err(Error::SchemaMismatch(
                "corpora do not share one class table".into(),
            ));
        }
    }
    if let Some(b) = baseline {
        if b.regime != Regime::BaselineBertTags {
            return Err(Error::InvalidConfig(format!(
                "cannot resume from {}",
                b.regime
            )));
        }
    }

    let mut params: Option<ToyModelParams> = None;
    let mut snapshots = Vec::new();
    let mut loss_curves = Vec::new();
    let mut resumed_from = None;
    let plan = regime.stage_plan();
    let last = plan.len() - 1;

    for (i, stage) in plan.iter().enumerate() {
        let stage_name = if i == last {
            regime.snapshot_name()
        } else {
            Regime::BaselineBertTags.snapshot_name()
        };
        if stage.start == StageStart::Fresh && i == 0 {
            if let (Some(b), Regime::BaselineBertTags) = (baseline, regime) {
                return Ok(b.clone());
            }
            if let (Some(b), true) = (baseline, regime.is_incremental()) {
                // reuse the shared baseline stage verbatim
                params = Some(b.params.clone());
                snapshots.push(b.final_snapshot().clone());
                loss_curves.push(b.loss_curves[0].clone());
                continue;
            }
        }
        let mut current = match stage.start {
            StageStart::Fresh => ctx.fresh_params(stage.labels)?,
            StageStart::ResumeWithNewHeads => {
                let mut p = params
                    .take()
                    .expect("resume stages follow a baseline stage");
                resumed_from = Some(checkpoint_hash(&p));
                p.activate_heads(&ctx.new_classes)?;
                p
            }
        };
        let frozen: Vec<String> = stage
            .frozen_heads
            .iter()
            .flat_map(|g| ctx.heads(*g))
            .collect();
        let mask = FreezeMask::freezing(&current, &frozen, stage.backbone_frozen)?;
        let corpus = ctx.stage_corpus(stage)?;
        let config = TrainConfig {
            seed: ctx.train.seed.wrapping_add(i as u64),
            ..ctx.train.clone()
        };
        let curve = train_stage(&mut current, &corpus, &mask, &config)?;
        info!(
            "{regime} stage {}: final loss {:.4}",
            i + 1,
            curve.last().copied().unwrap_or(f64::NAN)
        );
        loss_curves.push(curve);
        snapshots.push(extract_embeddings(&current, &ctx.probe, stage_name)?);
        params = Some(current);
    }

    let params = params.expect("non-empty stage plan");
    let eval = evaluate_params(&params, &ctx.test)?;
    Ok(RegimeRun {
        regime,
        params,
        snapshots,
        loss_curves,
        eval,
        resumed_from,
    })
}

/// Scores the model on `test` over the entity classes it has heads for.
pub fn evaluate_params(params: &ToyModelParams, test: &Corpus) -> Result<EvalReport> {
    let predictions = predict_corpus(params, test)?;
    let scored: Vec<String> = params
        .classes
        .iter()
        .zip(&params.active)
        .filter(|(c, &a)| a && c.as_str() != BACKGROUND)
        .map(|(c, _)| c.clone())
        .collect();
    let covers_all = params.active.iter().all(|&a| a);
    EvalReport::evaluate(&predictions, &test.sequences, &scored, covers_all)
}

/// The six before/after comparisons, by snapshot stage name.
pub const DRIFT_PAIRS: [(&str, &str); 6] = [
    ("original", "joint"),
    ("original", "naive"),
    ("original", "freeze_except_o"),
    ("joint", "naive"),
    ("joint", "freeze_except_o"),
    ("naive", "freeze_except_o"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    /// Share of generated sequences held out for evaluation and probing.
    pub holdout_fraction: f64,
    pub hidden: usize,
    pub train: TrainConfig,
    pub drift: DriftConfig,
    pub probe_size: usize,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub regimes: Vec<Regime>,
    /// Adds an `original_vs_original` comparison.
    pub self_pair: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            holdout_fraction: 0.4,
            hidden: DEFAULT_HIDDEN,
            train: TrainConfig::default(),
            drift: DriftConfig::default(),
            probe_size: 5000,
            seed: 0,
            regimes: Regime::ALL.to_vec(),
            self_pair: false,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub corpus: u64,
    pub holdout: u64,
    pub init: u64,
    pub train: u64,
    pub probe: u64,
    pub drift: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            corpus: derive_seed(master, 1),
            holdout: derive_seed(master, 2),
            init: derive_seed(master, 3),
            train: derive_seed(master, 4),
            probe: derive_seed(master, 5),
            drift: derive_seed(master, 6),
        }
    }
}

impl SuiteConfig {
    /// The config with every sub-seed replaced by one derived from `seed`.
    pub fn resolved(&self) -> (SuiteConfig, SeedPlan) {
        let seeds = SeedPlan::from_master(self.seed);
        let mut config = self.clone();
        config.corpus.seed = seeds.corpus;
        config.train.seed = seeds.train;
        config.drift.seed = seeds.drift;
        (config, seeds)
    }

    /// Builds the data splits and probe set.
    pub fn context(&self) -> Result<ExperimentContext> {
        let (config, seeds) = self.resolved();
        let corpus = generate_corpus(&config.corpus)?;
        let (train, test) = split_holdout(&corpus, config.holdout_fraction, seeds.holdout)?;
        let (corpus_a, corpus_b) = split_ab(&train, &config.split)?;
        ExperimentContext::from_corpora(self, corpus_a, corpus_b, test)
    }
}

impl ExperimentContext {
    /// Context over caller-supplied corpora. New classes are those the
    /// split configuration names (pattern classes by default).
    pub fn from_corpora(
        config: &SuiteConfig,
        corpus_a: Corpus,
        corpus_b: Corpus,
        test: Corpus,
    ) -> Result<Self> {
        let (config, seeds) = config.resolved();
        if config.probe_size == 0 {
            return Err(Error::InvalidConfig("probe_size must be at least 1".into()));
        }
        let class_table = test.class_table();
        for c in [&corpus_a, &corpus_b] {
            if c.class_table() != class_table {
                return Err(Error::SchemaMismatch(
                    "corpora do not share one class table".into(),
                ));
            }
        }
        let new_classes = config.split.new_classes(&test.config);
        let old_classes = class_table
            .iter()
            .filter(|c| c.as_str() != BACKGROUND && !new_classes.contains(c))
            .cloned()
            .collect();
        let probe = ProbeSet::stratified(&test, config.probe_size, seeds.probe);
        Ok(Self {
            class_table,
            old_classes,
            new_classes,
            corpus_a,
            corpus_b,
            test,
            probe,
            hidden: config.hidden,
            train: config.train.clone(),
            init_seed: seeds.init,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    pub eval: EvalReport,
    pub final_losses: Vec<f64>,
    pub checkpoint_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub item: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub seeds: SeedPlan,
    pub config: SuiteConfig,
    pub class_table: Vec<String>,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub tokens_a: usize,
    pub tokens_b: usize,
    pub tokens_test: usize,
    pub probe_tokens: usize,
    pub new_span_density_a: f64,
    pub new_span_density_b: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub metadata: RunMetadata,
    pub regimes: Vec<RegimeResult>,
    pub drift: Vec<DriftReport>,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeResult> {
        self.regimes.iter().find(|r| r.regime == regime)
    }

    pub fn drift_pair(&self, before: &str, after: &str) -> Option<&DriftReport> {
        self.drift
            .iter()
            .find(|d| d.before_stage == before && d.after_stage == after)
    }
}

/// A suite report plus the in-memory artifacts behind it.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub report: SuiteReport,
    pub runs: Vec<RegimeRun>,
}

impl SuiteOutcome {
    pub fn snapshot(&self, stage: &str) -> Option<&EmbeddingSnapshot> {
        self.runs
            .iter()
            .map(RegimeRun::final_snapshot)
            .find(|s| s.stage_name == stage)
    }
}

/// Runs the configured regimes, sharing one baseline between all
/// incremental ones, then the drift comparisons. Failures of single
/// regimes or pairs are recorded and the rest still runs.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteOutcome> {
    let ctx = config.context()?;
    let (resolved, seeds) = config.resolved();
    let mut failures = Vec::new();

    let needs_baseline = config
        .regimes
        .iter()
        .any(|r| *r == Regime::BaselineBertTags || r.is_incremental());
    let baseline = if needs_baseline {
        match run_regime(&ctx, Regime::BaselineBertTags, None) {
            Ok(run) => Some(run),
            Err(e) => {
                failures.push(Failure {
                    item: Regime::BaselineBertTags.name().into(),
                    error: e.to_string(),
                });
                None
            }
        }
    } else {
        None
    };
    let baseline_hash = baseline.as_ref().map(|b| checkpoint_hash(&b.params));

    let others: Vec<Regime> = config
        .regimes
        .iter()
        .copied()
        .filter(|r| *r != Regime::BaselineBertTags)
        .collect();
    let outcomes: Vec<(Regime, Result<RegimeRun>)> = others
        .par_iter()
        .map(|&r| {
            let res = if r.is_incremental() && baseline.is_none() {
                Err(Error::InvalidConfig("baseline failed".into()))
            } else {
                run_regime(&ctx, r, baseline.as_ref())
            };
            (r, res)
        })
        .collect();

    let mut runs = Vec::new();
    if let (Some(b), true) = (
        &baseline,
        config.regimes.contains(&Regime::BaselineBertTags),
    ) {
        runs.push(b.clone());
    }
    for (r, res) in outcomes {
        match res {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(Failure {
                item: r.name().into(),
                error: e.to_string(),
            }),
        }
    }
    runs.sort_by_key(|r| r.regime);

    let mut snapshots: BTreeMap<&str, &EmbeddingSnapshot> = BTreeMap::new();
    if let Some(b) = &baseline {
        snapshots.insert("original", b.final_snapshot());
    }
    for run in &runs {
        snapshots.insert(run.regime.snapshot_name(), run.final_snapshot());
    }
    let mut pairs: Vec<(&str, &str)> = DRIFT_PAIRS.to_vec();
    if config.self_pair {
        pairs.insert(0, ("original", "original"));
    }
    let mut drift_config = resolved.drift.clone();
    if drift_config.classes.is_none() {
        drift_config.classes = Some(ctx.old_classes.clone());
    }
    let drift_results: Vec<_> = pairs
        .par_iter()
        .filter_map(|&(b, a)| {
            let (sb, sa) = (snapshots.get(b)?, snapshots.get(a)?);
            Some((b, a, compute_drift_report(sb, sa, &drift_config)))
        })
        .collect();
    let mut drift = Vec::new();
    for (b, a, res) in drift_results {
        match res {
            Ok(report) => drift.push(report),
            Err(e) => failures.push(Failure {
                item: format!("{b}_vs_{a}"),
                error: e.to_string(),
            }),
        }
    }

    let new_classes = ctx.new_classes.clone();
    let metadata = RunMetadata {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds,
        config: resolved,
        class_table: ctx.class_table.clone(),
        old_classes: ctx.old_classes.clone(),
        new_classes: new_classes.clone(),
        tokens_a: ctx.corpus_a.token_count(),
        tokens_b: ctx.corpus_b.token_count(),
        tokens_test: ctx.test.token_count(),
        probe_tokens: ctx.probe.len(),
        new_span_density_a: span_density(&ctx.corpus_a, &new_classes),
        new_span_density_b: span_density(&ctx.corpus_b, &new_classes),
        baseline_checkpoint_sha256: baseline_hash,
    };
    let regimes = runs
        .iter()
        .map(|run| RegimeResult {
            regime: run.regime,
            eval: run.eval.clone(),
            final_losses: run
                .loss_curves
                .iter()
                .filter_map(|c| c.last().copied())
                .collect(),
            checkpoint_sha256: checkpoint_hash(&run.params),
            resumed_from: run.resumed_from.clone(),
        })
        .collect();
    Ok(SuiteOutcome {
        report: SuiteReport {
            metadata,
            regimes,
            drift,
            failures,
        },
        runs,
    })
}

/// `experiment,f1_overall,f1_<class>...` over the entity classes in table
/// order. Unscored cells are blank.
pub fn table1_csv(report: &SuiteReport) -> String {
    let entities: Vec<&String> = report
        .metadata
        .class_table
        .iter()
        .filter(|c| c.as_str() != BACKGROUND)
        .collect();
    let mut out = String::from("experiment,f1_overall");
    for c in &entities {
        out.push_str(&format!(",f1_{}", c.to_lowercase()));
    }
    out.push('\n');
    for r in &report.regimes {
        out.push_str(r.regime.name());
        out.push(',');
        out.push_str(&fmt_opt(r.eval.micro_f1));
        for c in &entities {
            out.push(',');
            out.push_str(&fmt_opt(r.eval.f1(c)));
        }
        out.push('\n');
    }
    out
}

pub fn table2_csv(report: &SuiteReport) -> Result<String> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", crate::drift::CSV_HEADER)?;
    for d in &report.drift {
        d.write_csv(&mut buf, false)?;
    }
    Ok(String::from_utf8(buf).expect("CSV is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<String>,
    pub failures: Vec<Failure>,
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    files.push(rel.to_owned());
    Ok(())
}

/// Writes `suite.json`, `table1.csv`, `table2.csv`, per-stage snapshots,
/// final checkpoints, loss curves and `manifest.json` under `dir`.
pub fn emit_reports(outcome: &SuiteOutcome, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let report = &outcome.report;
    let mut files = Vec::new();

    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_file(dir, "suite.json", &json, &mut files)?;
    write_file(dir, "table1.csv", table1_csv(report).as_bytes(), &mut files)?;
    write_file(
        dir,
        "table2.csv",
        table2_csv(report)?.as_bytes(),
        &mut files,
    )?;

    let mut written_stages = Vec::new();
    for run in &outcome.runs {
        for snap in &run.snapshots {
            if written_stages.contains(&snap.stage_name) {
                continue;
            }
            let mut bytes = Vec::new();
            write_snapshot(snap, &mut bytes)?;
            write_file(
                dir,
                &format!("snapshots/{}.edrf", snap.stage_name),
                &bytes,
                &mut files,
            )?;
            written_stages.push(snap.stage_name.clone());
        }
        let mut ckpt = Vec::new();
        write_checkpoint(&run.params, &mut ckpt)?;
        write_file(
            dir,
            &format!("checkpoints/{}.tmpk", run.regime),
            &ckpt,
            &mut files,
        )?;
        for (i, curve) in run.loss_curves.iter().enumerate() {
            let mut csv = Vec::new();
            write_loss_curve(curve, &mut csv)?;
            write_file(
                dir,
                &format!("curves/{}_stage{}.csv", run.regime, i + 1),
                &csv,
                &mut files,
            )?;
        }
    }

    let manifest = Manifest {
        files,
        failures: report.failures.clone(),
    };
    let mut mjson = serde_json::to_vec_pretty(&manifest)?;
    mjson.push(b'\n');
    fs::write(dir.join("manifest.json"), mjson)?;
    Ok(manifest)
}

/// Re-emits the two CSV tables from a saved `suite.json`.
pub fn emit_tables(report: &SuiteReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let t1 = dir.join("table1.csv");
    let t2 = dir.join("table2.csv");
    fs::write(&t1, table1_csv(report))?;
    fs::write(&t2, table2_csv(report)?)?;
    Ok(vec![t1, t2])
}

pub fn load_suite_report(path: &Path) -> Result<SuiteReport> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// Mean and spread of one quantity across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl SeedStat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<SeedStat>,
    /// Span F1 per scored class.
    pub class_f1: BTreeMap<String, SeedStat>,
    /// Pooled span F1 over the new classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_class_f1: Option<SeedStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub pair: String,
    pub class: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_drift: Option<SeedStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_change: Option<SeedStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_drift: Option<SeedStat>,
}

/// Seed-averaged view of several suite runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub seeds: Vec<u64>,
    pub regimes: Vec<RegimeSummary>,
    pub drift: Vec<DriftSummary>,
    pub failures: Vec<Failure>,
}

impl MultiSeedSummary {
    pub fn from_reports(reports: &[SuiteReport]) -> Self {
        let seeds = reports.iter().map(|r| r.metadata.seeds.master).collect();
        let mut regimes = Vec::new();
        for regime in Regime::ALL {
            let results: Vec<&RegimeResult> =
                reports.iter().filter_map(|r| r.regime(regime)).collect();
            if results.is_empty() {
                continue;
            }
            let micro: Vec<f64> = results.iter().filter_map(|r| r.eval.micro_f1).collect();
            let mut class_f1 = BTreeMap::new();
            for c in results[0]
                .eval
                .span
                .per_class
                .iter()
                .map(|c| c.class.clone())
            {
                let vals: Vec<f64> = results.iter().filter_map(|r| r.eval.f1(&c)).collect();
                if let Some(s) = SeedStat::of(&vals) {
                    class_f1.insert(c, s);
                }
            }
            let new_vals: Vec<f64> = reports
                .iter()
                .filter_map(|rep| {
                    let r = rep.regime(regime)?;
                    let new = &rep.metadata.new_classes;
                    r.eval
                        .span
                        .per_class
                        .iter()
                        .any(|c| new.contains(&c.class))
                        .then(|| r.eval.span.pooled(new).f1)
                })
                .collect();
            regimes.push(RegimeSummary {
                regime,
                micro_f1: SeedStat::of(&micro),
                class_f1,
                new_class_f1: SeedStat::of(&new_vals),
            });
        }

        let mut drift = Vec::new();
        if let Some(first) = reports.first() {
            for d in &first.drift {
                for row in &d.classes {
                    let collect =
                        |f: fn(&crate::drift::ClassDrift) -> Option<f64>| -> Option<SeedStat> {
                            let vals: Vec<f64> = reports
                                .iter()
                                .filter_map(|r| r.drift.iter().find(|x| x.pair_name == d.pair_name))
                                .filter_map(|x| x.class(&row.class))
                                .filter_map(f)
                                .collect();
                            SeedStat::of(&vals)
                        };
                    drift.push(DriftSummary {
                        pair: d.pair_name.clone(),
                        class: row.class.clone(),
                        mean_drift: collect(|c| c.mean_drift),
                        var_change: collect(|c| c.var_change),
                        cov_drift: collect(|c| c.cov_drift),
                    });
                }
            }
        }
        let failures = reports
            .iter()
            .flat_map(|r| {
                r.failures.iter().map(|f| Failure {
                    item: format!("seed {}: {}", r.metadata.seeds.master, f.item),
                    error: f.error.clone(),
                })
            })
            .collect();
        Self {
            seeds,
            regimes,
            drift,
            failures,
        }
    }

    pub fn regime(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.regimes.iter().find(|r| r.regime == regime)
    }

    pub fn drift(&self, pair: &str, class: &str) -> Option<&DriftSummary> {
        self.drift
            .iter()
            .find(|d| d.pair == pair && d.class == class)
    }
}

/// Runs the suite once per seed `base.seed, base.seed + 1, ...` in parallel.
pub fn run_seeds(base: &SuiteConfig, seeds: usize) -> Vec<Result<SuiteOutcome>> {
    (0..seeds as u64)
        .into_par_iter()
        .map(|k| {
            run_suite(&SuiteConfig {
                seed: base.seed.wrapping_add(k),
                ..base.clone()
            })
        })
        .collect()
}

/// Writes each seed under `dir/seed_<n>/` and the seed-averaged summary
/// as `dir/summary.json`.
pub fn emit_multi_seed(outcomes: &[SuiteOutcome], dir: &Path) -> Result<MultiSeedSummary> {
    for o in outcomes {
        emit_reports(
            o,
            &dir.join(format!("seed_{}", o.report.metadata.seeds.master)),
        )?;
    }
    let reports: Vec<SuiteReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let summary = MultiSeedSummary::from_reports(&reports);
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    fs::create_dir_all(dir)?;
    File::create(dir.join("summary.json"))?.write_all(&json)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
            assert_eq!(
                serde_json::to_string(&r).unwrap(),
                format!("\"{}\"", r.name())
            );
        }
        assert!("nope".parse::<Regime>().is_err());
    }

    #[test]
    fn regime_isolation() {
        // baseline never reads B, joint never reads masked labels
        for stage in Regime::BaselineBertTags.stage_plan() {
            assert_eq!(stage.corpus, CorpusSelector::A);
            assert_eq!(stage.labels, LabelSelector::OldOnly);
        }
        for stage in Regime::Joint.stage_plan() {
            assert_eq!(stage.labels, LabelSelector::All);
            assert_eq!(stage.start, StageStart::Fresh);
        }
        for r in Regime::ALL.into_iter().filter(|r| r.is_incremental()) {
            let plan = r.stage_plan();
            assert_eq!(plan.len(), 2);
            assert_eq!(plan[0], Regime::BaselineBertTags.stage_plan()[0]);
            assert_eq!(plan[1].corpus, CorpusSelector::B);
            assert_eq!(plan[1].start, StageStart::ResumeWithNewHeads);
        }
    }

    #[test]
    fn freeze_plans_match_regime_definitions() {
        use HeadGroup::*;
        let second = |r: Regime| r.stage_plan().pop().unwrap();
        assert!(second(Regime::NaiveIncremental).frozen_heads.is_empty());
        assert_eq!(second(Regime::FreezeExceptO).frozen_heads, vec![Old]);
        assert!(!second(Regime::FreezeExceptO).backbone_frozen);
        assert_eq!(
            second(Regime::FreezeAllHeads).frozen_heads,
            vec![Background, Old]
        );
        assert!(!second(Regime::FreezeAllHeads).backbone_frozen);
        assert_eq!(
            second(Regime::FreezeBackbone).frozen_heads,
            vec![Background, Old]
        );
        assert!(second(Regime::FreezeBackbone).backbone_frozen);
    }

    #[test]
    fn derived_seeds_differ() {
        let s = SeedPlan::from_master(0);
        let all = [s.corpus, s.holdout, s.init, s.train, s.probe, s.drift];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(SeedPlan::from_master(1).corpus, s.corpus);
    }

    #[test]
    fn seed_stat() {
        let s = SeedStat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
        assert!(SeedStat::of(&[]).is_none());
    }
}
