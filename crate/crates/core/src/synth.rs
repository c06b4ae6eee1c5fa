//! Synthetic labeled token sequences.
//!
//! Every token is a feature vector over two channel groups: "semantic"
//! channels followed by "pattern" channels. Semantic classes put their
//! signal on the semantic channels, pattern classes on the pattern
//! channels, and hybrid classes split it, with the pattern share pointing
//! along the direction that all pattern prototypes have in common.
//! Background tokens are pure noise. This is a geometric simulation, not
//! text.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::BACKGROUND;

/// Spans are drawn uniformly from `1..=MAX_SPAN_LEN` tokens.
pub const MAX_SPAN_LEN: usize = 4;

/// RNG stream reserved for the shared pattern direction.
const SHARED_PATTERN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Semantic,
    Pattern,
    Hybrid,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ClassKind,
    pub prototype_seed: u64,
    /// Fraction of the signal placed on the shared pattern direction
    /// (hybrid classes only).
    #[serde(default)]
    pub overlap_alpha: f64,
    /// Expected share of tokens.
    pub base_rate: f64,
}

impl ClassSpec {
    pub fn new(name: &str, kind: ClassKind, prototype_seed: u64, base_rate: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            prototype_seed,
            overlap_alpha: 0.0,
            base_rate,
        }
    }

    pub fn hybrid(name: &str, prototype_seed: u64, base_rate: f64, alpha: f64) -> Self {
        Self {
            overlap_alpha: alpha,
            ..Self::new(name, ClassKind::Hybrid, prototype_seed, base_rate)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub dim_semantic: usize,
    pub dim_pattern: usize,
    pub noise_sigma: f64,
    pub signal_strength: f64,
    /// Weight of the shared direction inside each pattern prototype; the
    /// rest is class-specific.
    pub pattern_share: f64,
    pub sequences: usize,
    pub seq_len_range: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

/// Default hybrid overlap of the LOC class.
pub const DEFAULT_LOC_ALPHA: f64 = 0.8;

/// Length of every entity prototype before `signal_strength` is applied.
/// With unit prototypes and the default noise the hybrid class is barely
/// recognisable even when trained on everything.
pub const PROTOTYPE_NORM: f64 = 2.5;

impl Default for CorpusConfig {
    fn default() -> Self {
        use ClassKind::*;
        Self {
            dim_semantic: 16,
            dim_pattern: 16,
            noise_sigma: 0.35,
            signal_strength: 1.0,
            pattern_share: 0.8,
            sequences: 2400,
            seq_len_range: (6, 18),
            classes: vec![
                ClassSpec::new("O", Background, 0, 0.70),
                ClassSpec::hybrid("LOC", 11, 0.06, DEFAULT_LOC_ALPHA),
                ClassSpec::new("PER", Semantic, 12, 0.06),
                ClassSpec::new("ORG", Semantic, 13, 0.06),
                ClassSpec::new("PHONE", Pattern, 21, 0.03),
                ClassSpec::new("EMAIL", Pattern, 22, 0.03),
                ClassSpec::new("IBAN", Pattern, 23, 0.03),
                ClassSpec::new("PDL", Pattern, 24, 0.03),
            ],
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn dim(&self) -> usize {
        self.dim_semantic + self.dim_pattern
    }

    pub fn class_table(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Names of classes of one kind, in table order.
    pub fn classes_of(&self, kind: ClassKind) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn set_alpha(&mut self, name: &str, alpha: f64) -> Result<()> {
        let spec = self
            .classes
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.into()))?;
        spec.overlap_alpha = alpha;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim_semantic == 0 || self.dim_pattern == 0 {
            return bad("channel counts must be at least 1".into());
        }
        let (lo, hi) = self.seq_len_range;
        if lo == 0 || lo > hi {
            return bad(format!("bad seq_len_range ({lo}, {hi})"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if !self.signal_strength.is_finite() {
            return bad("signal_strength must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.pattern_share) {
            return bad("pattern_share must be in [0, 1]".into());
        }
        match self.classes.first() {
            Some(c) if c.name == BACKGROUND && c.kind == ClassKind::Background => {}
            _ => return bad("first class must be the background class \"O\"".into()),
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate class {:?}", c.name));
            }
            if c.kind == ClassKind::Background && c.name != BACKGROUND {
                return bad(format!("only \"O\" may be background, got {:?}", c.name));
            }
            if !(c.base_rate > 0.0 && c.base_rate < 1.0) {
                return bad(format!("base_rate of {} must be in (0, 1)", c.name));
            }
            if !(0.0..=1.0).contains(&c.overlap_alpha) {
                return bad(format!("overlap_alpha of {} must be in [0, 1]", c.name));
            }
            if c.kind != ClassKind::Hybrid && c.overlap_alpha != 0.0 {
                return bad(format!("{} is not hybrid but has overlap_alpha", c.name));
            }
        }
        let total: f64 = self.classes.iter().map(|c| c.base_rate).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("base rates sum to {total}, expected 1"));
        }
        let semantic = self
            .classes
            .iter()
            .filter(|c| matches!(c.kind, ClassKind::Semantic | ClassKind::Hybrid))
            .count();
        if semantic > self.dim_semantic {
            return bad(format!(
                "{semantic} semantic prototypes do not fit in {} channels",
                self.dim_semantic
            ));
        }
        let pattern = self
            .classes
            .iter()
            .filter(|c| c.kind == ClassKind::Pattern)
            .count();
        if pattern + 1 > self.dim_pattern {
            return bad(format!(
                "{pattern} pattern prototypes do not fit in {} channels",
                self.dim_pattern
            ));
        }
        if self.event_weights().0 < 0.0 {
            return bad("background rate too low to separate entity spans".into());
        }
        Ok(())
    }

    /// Per-position event weights: `(background, per-class)`. Each entity
    /// span is followed by one background separator token, so the
    /// background weight is reduced by the separators it will get for free.
    fn event_weights(&self) -> (f64, Vec<f64>) {
        let mean_span = (1 + MAX_SPAN_LEN) as f64 / 2.0;
        let weights: Vec<f64> = self
            .classes
            .iter()
            .map(|c| {
                if c.kind == ClassKind::Background {
                    0.0
                } else {
                    c.base_rate / mean_span
                }
            })
            .collect();
        let background = self.classes[0].base_rate - weights.iter().sum::<f64>();
        (background, weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub vec: Vec<f32>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    /// Index in the generated corpus; survives splits and masking.
    pub id: u64,
    pub tokens: Vec<Token>,
}

impl LabeledSequence {
    /// Gold spans as `(class, start, end)` with `end` exclusive.
    pub fn spans(&self) -> Vec<(String, usize, usize)> {
        let mut spans: Vec<(String, usize, usize)> = Vec::new();
        let mut prev: Option<u32> = None;
        for (i, t) in self.tokens.iter().enumerate() {
            match t.span {
                Some(id) if prev == Some(id) => spans.last_mut().unwrap().2 = i + 1,
                Some(_) => spans.push((t.label.clone(), i, i + 1)),
                None => {}
            }
            prev = t.span;
        }
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub sequences: Vec<LabeledSequence>,
}

impl Corpus {
    pub fn class_table(&self) -> Vec<String> {
        self.config.class_table()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn label_counts(&self) -> Vec<(String, usize)> {
        let table = self.class_table();
        let mut counts = vec![0usize; table.len()];
        for t in self.sequences.iter().flat_map(|s| &s.tokens) {
            if let Some(i) = table.iter().position(|c| *c == t.label) {
                counts[i] += 1;
            }
        }
        table.into_iter().zip(counts).collect()
    }

    /// Number of gold spans whose class is in `classes`.
    pub fn span_count(&self, classes: &[String]) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.spans())
            .filter(|(c, _, _)| classes.contains(c))
            .count()
    }

    pub fn concat(&self, other: &Corpus) -> Corpus {
        let mut sequences = self.sequences.clone();
        sequences.extend(other.sequences.iter().cloned());
        Corpus {
            config: self.config.clone(),
            sequences,
        }
    }

    pub fn write_jsonl<W: Write>(&self, sink: W) -> Result<()> {
        let mut out = BufWriter::new(sink);
        serde_json::to_writer(
            &mut out,
            &CorpusHeader {
                config: self.config.clone(),
            },
        )?;
        out.write_all(b"\n")?;
        for s in &self.sequences {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(source: R) -> Result<Corpus> {
        let mut lines = BufReader::new(source).lines();
        let header: CorpusHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::EmptyCorpus),
        };
        let mut sequences = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                sequences.push(serde_json::from_str(&line)?);
            }
        }
        let corpus = Corpus {
            config: header.config,
            sequences,
        };
        corpus.check_labels()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        Corpus::read_jsonl(File::open(path)?)
    }

    fn check_labels(&self) -> Result<()> {
        let table = self.class_table();
        let dim = self.config.dim();
        for s in &self.sequences {
            for t in &s.tokens {
                if !table.contains(&t.label) {
                    return Err(Error::UnknownClass(t.label.clone()));
                }
                if t.vec.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        actual: t.vec.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Removes from `v` its components along each of `basis` (orthonormal),
/// then renormalizes.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
    normalize(v);
}

/// Mean feature vector of each class (noise excluded), full width.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub means: Vec<Vec<f64>>,
    /// Unit direction on the pattern channels shared by pattern classes.
    pub shared_pattern: Vec<f64>,
}

pub fn prototypes(config: &CorpusConfig) -> Result<Prototypes> {
    config.validate()?;
    let ds = config.dim_semantic;
    let dp = config.dim_pattern;

    let mut shared_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shared_rng.set_stream(SHARED_PATTERN_STREAM);
    let shared = random_unit(&mut shared_rng, dp);

    let mut semantic_basis: Vec<Vec<f64>> = Vec::new();
    let mut pattern_basis: Vec<Vec<f64>> = vec![shared.clone()];
    let s = PROTOTYPE_NORM * config.signal_strength;
    let share = config.pattern_share;

    let mut means = Vec::with_capacity(config.classes.len());
    for spec in &config.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let mut mean = vec![0.0; ds + dp];
        match spec.kind {
            ClassKind::Background => {}
            ClassKind::Semantic | ClassKind::Hybrid => {
                let mut sem = random_unit(&mut rng, ds);
                orthogonalize(&mut sem, &semantic_basis);
                semantic_basis.push(sem.clone());
                let alpha = spec.overlap_alpha;
                for k in 0..ds {
                    mean[k] = s * (1.0 - alpha) * sem[k];
                }
                for k in 0..dp {
                    mean[ds + k] = s * alpha * shared[k];
                }
            }
            ClassKind::Pattern => {
                let mut specific = random_unit(&mut rng, dp);
                orthogonalize(&mut specific, &pattern_basis);
                pattern_basis.push(specific.clone());
                let rest = (1.0 - share * share).sqrt();
                for k in 0..dp {
                    mean[ds + k] = s * (share * shared[k] + rest * specific[k]);
                }
            }
        }
        means.push(mean);
    }
    Ok(Prototypes {
        means,
        shared_pattern: shared,
    })
}

fn generate_sequence(
    config: &CorpusConfig,
    protos: &Prototypes,
    weights: &[f64],
    noise: &Normal<f64>,
    id: u64,
) -> LabeledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id);
    let (lo, hi) = config.seq_len_range;
    let len = rng.random_range(lo..=hi);
    let total: f64 = weights.iter().sum();

    let token = |class: usize, span: Option<u32>, rng: &mut ChaCha8Rng| Token {
        vec: protos.means[class]
            .iter()
            .map(|m| (m + noise.sample(rng)) as f32)
            .collect(),
        label: config.classes[class].name.clone(),
        span,
    };

    let mut tokens = Vec::with_capacity(len);
    let mut next_span = 0u32;
    while tokens.len() < len {
        let mut u = rng.random::<f64>() * total;
        let mut class = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                class = i;
                break;
            }
            u -= w;
        }
        if config.classes[class].kind == ClassKind::Background {
            tokens.push(token(class, None, &mut rng));
            continue;
        }
        let span_len = rng.random_range(1..=MAX_SPAN_LEN).min(len - tokens.len());
        for _ in 0..span_len {
            tokens.push(token(class, Some(next_span), &mut rng));
        }
        next_span += 1;
        if tokens.len() < len {
            tokens.push(token(0, None, &mut rng));
        }
    }
    LabeledSequence { id, tokens }
}

/// Generates `config.sequences` sequences; each sequence draws from its own
/// RNG stream, so the result does not depend on scheduling.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let protos = prototypes(config)?;
    let (background, mut weights) = config.event_weights();
    weights[0] = background;
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let sequences = (0..config.sequences as u64)
        .into_par_iter()
        .map(|id| generate_sequence(config, &protos, &weights, &noise, id))
        .collect();
    Ok(Corpus {
        config: config.clone(),
        sequences,
    })
}

/// Rewrites every label outside `keep` to `"O"` and drops its span id.
/// Features are untouched.
pub fn mask_labels(corpus: &Corpus, keep: &[String]) -> Result<Corpus> {
    let table = corpus.class_table();
    for k in keep {
        if !table.contains(k) {
            return Err(Error::UnknownClass(k.clone()));
        }
    }
    let mut masked = corpus.clone();
    for t in masked
        .sequences
        .iter_mut()
        .flat_map(|s| s.tokens.iter_mut())
    {
        if t.label != BACKGROUND && !keep.contains(&t.label) {
            t.label = BACKGROUND.to_owned();
            t.span = None;
        }
    }
    Ok(masked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Share of sequences going to corpus B.
    pub b_share: f64,
    /// Minimum ratio of new-class span density, B over A.
    pub min_density_ratio: f64,
    /// Classes introduced in B. Empty means every pattern class.
    pub new_classes: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            b_share: 0.15,
            min_density_ratio: 3.0,
            new_classes: Vec::new(),
        }
    }
}

impl SplitConfig {
    pub fn new_classes(&self, config: &CorpusConfig) -> Vec<String> {
        if self.new_classes.is_empty() {
            config.classes_of(ClassKind::Pattern)
        } else {
            self.new_classes.clone()
        }
    }
}

/// Spans of `classes` per token.
pub fn span_density(corpus: &Corpus, classes: &[String]) -> f64 {
    let tokens = corpus.token_count();
    if tokens == 0 {
        return 0.0;
    }
    corpus.span_count(classes) as f64 / tokens as f64
}

/// Splits into a large corpus A and a small corpus B enriched in new-class
/// spans. Sequences are ranked by new-class span density and the densest
/// `b_share` go to B; both halves keep their original order and labels.
pub fn split_ab(corpus: &Corpus, split: &SplitConfig) -> Result<(Corpus, Corpus)> {
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(split.b_share > 0.0 && split.b_share < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "b_share must be in (0, 1), got {}",
            split.b_share
        )));
    }
    let new_classes = split.new_classes(&corpus.config);
    let table = corpus.class_table();
    for c in &new_classes {
        if !table.contains(c) {
            return Err(Error::UnknownClass(c.clone()));
        }
    }

    let n = corpus.sequences.len();
    let n_b = (split.b_share * n as f64).round() as usize;
    if n_b == 0 || n_b == n {
        return Err(Error::SplitInfeasible(format!(
            "{n} sequences cannot be split at b_share {}",
            split.b_share
        )));
    }

    let density = |s: &LabeledSequence| {
        let spans = s
            .spans()
            .iter()
            .filter(|(c, _, _)| new_classes.contains(c))
            .count();
        spans as f64 / s.tokens.len().max(1) as f64
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        density(&corpus.sequences[b])
            .total_cmp(&density(&corpus.sequences[a]))
            .then(a.cmp(&b))
    });
    let mut in_b = vec![false; n];
    for &i in &order[..n_b] {
        in_b[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (s, to_b) in corpus.sequences.iter().zip(in_b) {
        if to_b {
            b.push(s.clone())
        } else {
            a.push(s.clone())
        }
    }
    let corpus_a = Corpus {
        config: corpus.config.clone(),
        sequences: a,
    };
    let corpus_b = Corpus {
        config: corpus.config.clone(),
        sequences: b,
    };

    let da = span_density(&corpus_a, &new_classes);
    let db = span_density(&corpus_b, &new_classes);
    if db == 0.0 || db < split.min_density_ratio * da {
        return Err(Error::SplitInfeasible(format!(
            "new-class span density {db:.4} in B vs {da:.4} in A is below ratio {}",
            split.min_density_ratio
        )));
    }
    let old: Vec<String> = table
        .iter()
        .filter(|c| c.as_str() != BACKGROUND && !new_classes.contains(c))
        .cloned()
        .collect();
    if !old.is_empty() && corpus_b.span_count(&old) == 0 {
        return Err(Error::SplitInfeasible(
            "B holds no span of an original class".into(),
        ));
    }
    Ok((corpus_a, corpus_b))
}

/// Moves a seeded random `fraction` of sequences into a held-out set.
pub fn split_holdout(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.sequences.len();
    let n_test = (fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::SplitInfeasible(format!(
            "{n} sequences cannot hold out {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; n];
    for &i in &order[..n_test] {
        held[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, h) in corpus.sequences.iter().zip(held) {
        if h {
            test.push(s.clone())
        } else {
            train.push(s.clone())
        }
    }
    Ok((
        Corpus {
            config: corpus.config.clone(),
            sequences: train,
        },
        Corpus {
            config: corpus.config.clone(),
            sequences: test,
        },
    ))
}
