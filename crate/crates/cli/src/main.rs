use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use drift_lens::drift::{compute_drift_report, DriftConfig, PairBudget};
use drift_lens::experiment::{
    emit_multi_seed, emit_reports, emit_tables, load_suite_report, run_regime, run_seeds,
    table1_csv, table2_csv, ExperimentContext, Regime, SuiteConfig,
};
use drift_lens::model::{write_checkpoint, write_loss_curve};
use drift_lens::snapshot::{load_snapshot, write_snapshot};
use drift_lens::synth::{generate_corpus, split_ab, split_holdout, Corpus, CorpusConfig};
use drift_lens::{Error, Result};

#[derive(Parser)]
#[command(
    name = "drift-lens",
    version,
    about = "Representation drift diagnostics and incremental-learning ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth {
        /// Corpus config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL corpus.
        #[arg(long)]
        out: PathBuf,
        /// Also write a.jsonl, b.jsonl and test.jsonl splits here, using
        /// the split settings of a suite config given with --suite.
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[arg(long, requires = "split_dir")]
        suite: Option<PathBuf>,
    },
    /// Run one regime on existing corpora.
    Train {
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        corpus_a: PathBuf,
        #[arg(long)]
        corpus_b: PathBuf,
        /// Evaluation and probe corpus; A and B concatenated when omitted.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Suite config supplying model, training and probe settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two embedding snapshots (EDRF or JSONL).
    Drift {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value_t = drift_lens::stats::DEFAULT_LAMBDA)]
        lambda: f64,
        /// Pairs sampled per class when full enumeration is too large.
        #[arg(long, default_value_t = PairBudget::default().samples)]
        budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these classes (comma separated); "O" is always kept.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// JSON report; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-class rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every regime and all drift comparisons.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of consecutive master seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Print (and optionally rewrite) the tables of a saved suite.json.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_reader(io::BufReader::new(File::open(p)?))?),
        None => Ok(T::default()),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn synth(
    config: Option<&Path>,
    out: &Path,
    split_dir: Option<&Path>,
    suite: Option<&Path>,
) -> Result<()> {
    let config: CorpusConfig = read_json(config)?;
    let corpus = generate_corpus(&config)?;
    corpus.save(out)?;
    info!(
        "wrote {} sequences, {} tokens to {}",
        corpus.sequences.len(),
        corpus.token_count(),
        out.display()
    );
    if let Some(dir) = split_dir {
        let suite: SuiteConfig = read_json(suite)?;
        let (_, seeds) = suite.resolved();
        let (train, test) = split_holdout(&corpus, suite.holdout_fraction, seeds.holdout)?;
        let (a, b) = split_ab(&train, &suite.split)?;
        std::fs::create_dir_all(dir)?;
        a.save(&dir.join("a.jsonl"))?;
        b.save(&dir.join("b.jsonl"))?;
        test.save(&dir.join("test.jsonl"))?;
    }
    Ok(())
}

fn train(
    regime: Regime,
    corpus_a: &Path,
    corpus_b: &Path,
    test: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let config: SuiteConfig = read_json(config)?;
    let a = Corpus::load(corpus_a)?;
    let b = Corpus::load(corpus_b)?;
    let test = match test {
        Some(p) => Corpus::load(p)?,
        None => a.concat(&b),
    };
    let ctx = ExperimentContext::from_corpora(&config, a, b, test)?;
    let run = run_regime(&ctx, regime, None)?;

    std::fs::create_dir_all(out)?;
    for snap in &run.snapshots {
        write_snapshot(
            snap,
            BufWriter::new(File::create(out.join(format!("{}.edrf", snap.stage_name)))?),
        )?;
    }
    write_checkpoint(
        &run.params,
        BufWriter::new(File::create(out.join(format!("{regime}.tmpk")))?),
    )?;
    for (i, curve) in run.loss_curves.iter().enumerate() {
        write_loss_curve(
            curve,
            BufWriter::new(File::create(out.join(format!("loss_stage{}.csv", i + 1)))?),
        )?;
    }
    write_json(&run.eval, &out.join("eval.json"))?;
    println!("{}", serde_json::to_string_pretty(&run.eval)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn drift(
    before: &Path,
    after: &Path,
    lambda: f64,
    budget: u64,
    seed: u64,
    classes: Option<Vec<String>>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let sb = load_snapshot(before)?;
    let sa = load_snapshot(after)?;
    let config = DriftConfig {
        lambda,
        budget: PairBudget {
            samples: budget,
            ..PairBudget::default()
        },
        seed,
        classes,
    };
    let report = compute_drift_report(&sb, &sa, &config)?;
    match out {
        Some(p) => write_json(&report, p)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = csv {
        let mut w = BufWriter::new(File::create(p)?);
        report.write_csv(&mut w, true)?;
        w.flush()?;
    }
    Ok(())
}

fn suite(config: Option<&Path>, out: &Path, seeds: usize) -> Result<()> {
    if seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    let config: SuiteConfig = read_json(config)?;
    let mut outcomes = Vec::new();
    for res in run_seeds(&config, seeds) {
        outcomes.push(res?);
    }
    if seeds == 1 {
        let manifest = emit_reports(&outcomes[0], out)?;
        for f in &manifest.failures {
            warn!("{}: {}", f.item, f.error);
        }
        print!("{}", table1_csv(&outcomes[0].report));
    } else {
        let summary = emit_multi_seed(&outcomes, out)?;
        for f in &summary.failures {
            warn!("{}: {}", f.item, f.error);
        }
        println!("{}", serde_json::to_string_pretty(&summary.regimes)?);
    }
    Ok(())
}

fn report(input: &Path, out: Option<&Path>) -> Result<()> {
    let report = load_suite_report(input)?;
    print!("{}\n{}", table1_csv(&report), table2_csv(&report)?);
    if let Some(dir) = out {
        emit_tables(&report, dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            split_dir,
            suite,
        } => synth(
            config.as_deref(),
            &out,
            split_dir.as_deref(),
            suite.as_deref(),
        ),
        Command::Train {
            regime,
            corpus_a,
            corpus_b,
            test,
            config,
            out,
        } => train(
            regime,
            &corpus_a,
            &corpus_b,
            test.as_deref(),
            config.as_deref(),
            &out,
        ),
        Command::Drift {
            before,
            after,
            lambda,
            budget,
            seed,
            classes,
            out,
            csv,
        } => drift(
            &before,
            &after,
            lambda,
            budget,
            seed,
            classes,
            out.as_deref(),
            csv.as_deref(),
        ),
        Command::Suite { config, out, seeds } => suite(config.as_deref(), &out, seeds),
        Command::Report { input, out } => report(&input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
