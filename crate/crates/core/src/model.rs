//! A small token classifier: one `tanh` hidden layer shared by all classes
//! (the backbone) and one logit row per class (the heads). Every head and
//! the backbone can be frozen independently.
//!
//! Heads can also be inactive, meaning the class does not exist yet for
//! this model: inactive logits are left out of the softmax and out of
//! prediction, and their rows are never updated.

use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::snapshot::{EmbeddingSnapshot, TokenRecord};
use crate::synth::Corpus;

pub const DEFAULT_HIDDEN: usize = 64;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TMPK";
const CHECKPOINT_VERSION: u16 = 1;

/// The four parameter blocks. Also used for gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// `hidden x d_in`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Tensors {
    fn zeros(d_in: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            head_w: vec![0.0; classes * hidden],
            head_b: vec![0.0; classes],
        }
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.head_w, &self.head_b]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view in declared order: `w1, b1, head_w, head_b`.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn get(&self, flat: usize) -> f64 {
        let mut k = flat;
        for b in self.blocks() {
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let mut k = flat;
        for b in self.blocks_mut() {
            if k < b.len() {
                b[k] = value;
                return;
            }
            k -= b.len();
        }
        panic!("flat index {flat} out of range");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub d_in: usize,
    pub hidden: usize,
    /// Class table, `"O"` first.
    pub classes: Vec<String>,
    pub active: Vec<bool>,
    pub tensors: Tensors,
}

impl ToyModelParams {
    /// Backbone drawn from `N(0, 1/d_in)`, biases and heads zero.
    pub fn init(
        d_in: usize,
        hidden: usize,
        classes: Vec<String>,
        active: Vec<bool>,
        seed: u64,
    ) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("model dims must be at least 1".into()));
        }
        if classes.len() != active.len() {
            return Err(Error::LengthMismatch(format!(
                "{} classes but {} activity flags",
                classes.len(),
                active.len()
            )));
        }
        let mut tensors = Tensors::zeros(d_in, hidden, classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        for w in &mut tensors.w1 {
            *w = normal.sample(&mut rng);
        }
        Ok(Self {
            d_in,
            hidden,
            classes,
            active,
            tensors,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Activates the named heads with zeroed rows.
    pub fn activate_heads(&mut self, names: &[String]) -> Result<()> {
        for name in names {
            let c = self
                .class_index(name)
                .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            self.active[c] = true;
            let h = self.hidden;
            self.tensors.head_w[c * h..(c + 1) * h].fill(0.0);
            self.tensors.head_b[c] = 0.0;
        }
        Ok(())
    }

    pub fn head_row(&self, c: usize) -> &[f64] {
        &self.tensors.head_w[c * self.hidden..(c + 1) * self.hidden]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn hidden_into(&self, x: &[f64], h: &mut [f64]) {
        let d = self.d_in;
        for (j, out) in h.iter_mut().enumerate() {
            let row = &self.tensors.w1[j * d..(j + 1) * d];
            let pre: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.tensors.b1[j];
            *out = pre.tanh();
        }
    }

    fn logits_into(&self, h: &[f64], logits: &mut [f64]) {
        for (c, out) in logits.iter_mut().enumerate() {
            *out = self
                .head_row(c)
                .iter()
                .zip(h)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + self.tensors.head_b[c];
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::DimMismatch {
                expected: self.d_in,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `hidden = tanh(W1·x + b1)`, `logit_c = w_c·hidden + β_c`. Logits of
    /// inactive heads are included as computed.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut h = vec![0.0; self.hidden];
        self.hidden_into(x, &mut h);
        let mut logits = vec![0.0; self.num_classes()];
        self.logits_into(&h, &mut logits);
        Ok((h, logits))
    }

    /// Index of the highest active logit; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let (_, logits) = self.forward(x)?;
        Ok(argmax_active(&logits, &self.active))
    }

    /// Mean softmax cross-entropy over the batch plus
    /// `l2_decay/2 · (‖W1‖² + Σ_active ‖w_c‖²)`, with gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[(&[f64], usize)],
        l2_decay: f64,
    ) -> Result<(f64, Tensors)> {
        if batch.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let k = self.num_classes();
        let (d, hdim) = (self.d_in, self.hidden);
        let mut grads = Tensors::zeros(d, hdim, k);
        let mut h = vec![0.0; hdim];
        let mut logits = vec![0.0; k];
        let mut dh = vec![0.0; hdim];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;

        for &(x, gold) in batch {
            self.check_input(x)?;
            if gold >= k || !self.active[gold] {
                let name = self
                    .classes
                    .get(gold)
                    .cloned()
                    .unwrap_or_else(|| format!("#{gold}"));
                return Err(Error::UnknownClass(name));
            }
            self.hidden_into(x, &mut h);
            self.logits_into(&h, &mut logits);

            let max = logits
                .iter()
                .zip(&self.active)
                .filter(|(_, &a)| a)
                .map(|(&z, _)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (z, &a) in logits.iter_mut().zip(&self.active) {
                *z = if a { (*z - max).exp() } else { 0.0 };
                denom += *z;
            }
            // logits now hold unnormalized probabilities
            loss -= (logits[gold] / denom).ln();

            dh.fill(0.0);
            for c in 0..k {
                if !self.active[c] {
                    continue;
                }
                let p = logits[c] / denom;
                let dz = (p - if c == gold { 1.0 } else { 0.0 }) * scale;
                grads.head_b[c] += dz;
                let row = &self.tensors.head_w[c * hdim..(c + 1) * hdim];
                let grow = &mut grads.head_w[c * hdim..(c + 1) * hdim];
                for j in 0..hdim {
                    grow[j] += dz * h[j];
                    dh[j] += dz * row[j];
                }
            }
            for j in 0..hdim {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                grads.b1[j] += da;
                let grow = &mut grads.w1[j * d..(j + 1) * d];
                for (g, v) in grow.iter_mut().zip(x) {
                    *g += da * v;
                }
            }
        }
        loss *= scale;

        if l2_decay != 0.0 {
            let mut sq = 0.0;
            for (g, w) in grads.w1.iter_mut().zip(&self.tensors.w1) {
                *g += l2_decay * w;
                sq += w * w;
            }
            for c in (0..k).filter(|&c| self.active[c]) {
                let row = &self.tensors.head_w[c * hdim..(c + 1) * hdim];
                let grow = &mut grads.head_w[c * hdim..(c + 1) * hdim];
                for (g, w) in grow.iter_mut().zip(row) {
                    *g += l2_decay * w;
                    sq += w * w;
                }
            }
            loss += 0.5 * l2_decay * sq;
        }
        Ok((loss, grads))
    }
}

pub fn argmax_active(logits: &[f64], active: &[bool]) -> usize {
    let mut best = None;
    for (c, (&z, &a)) in logits.iter().zip(active).enumerate() {
        if a && best.is_none_or(|(_, bz)| z > bz) {
            best = Some((c, z));
        }
    }
    best.map_or(0, |(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub backbone_frozen: bool,
    pub head_frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(classes: usize) -> Self {
        Self {
            backbone_frozen: false,
            head_frozen: vec![false; classes],
        }
    }

    pub fn all(classes: usize) -> Self {
        Self {
            backbone_frozen: true,
            head_frozen: vec![true; classes],
        }
    }

    /// Freezes the named heads, plus the backbone if asked.
    pub fn freezing(params: &ToyModelParams, heads: &[String], backbone: bool) -> Result<Self> {
        let mut mask = Self::none(params.num_classes());
        mask.backbone_frozen = backbone;
        for name in heads {
            let c = params
                .class_index(name)
                .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            mask.head_frozen[c] = true;
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            l2_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.l2_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "momentum must be in [0, 1) and l2_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum SGD that leaves frozen (and inactive) parameters and their
/// velocity untouched.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Tensors,
}

impl SgdMomentum {
    pub fn new(params: &ToyModelParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Tensors::zeros(params.d_in, params.hidden, params.num_classes()),
        }
    }

    pub fn velocity(&self) -> &Tensors {
        &self.velocity
    }

    pub fn step(
        &mut self,
        params: &mut ToyModelParams,
        grads: &Tensors,
        mask: &FreezeMask,
    ) -> Result<()> {
        if mask.head_frozen.len() != params.num_classes() {
            return Err(Error::LengthMismatch(format!(
                "freeze mask covers {} heads, model has {}",
                mask.head_frozen.len(),
                params.num_classes()
            )));
        }
        if grads.len() != params.tensors.len() || self.velocity.len() != params.tensors.len() {
            return Err(Error::LengthMismatch(
                "gradient shape does not match parameters".into(),
            ));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        let update = |theta: &mut [f64], vel: &mut [f64], g: &[f64]| {
            for ((t, v), g) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *t -= lr * *v;
            }
        };
        let p = &mut params.tensors;
        let v = &mut self.velocity;
        if !mask.backbone_frozen {
            update(&mut p.w1, &mut v.w1, &grads.w1);
            update(&mut p.b1, &mut v.b1, &grads.b1);
        }
        let h = params.hidden;
        for c in 0..params.classes.len() {
            if mask.head_frozen[c] || !params.active[c] {
                continue;
            }
            let rows = c * h..(c + 1) * h;
            update(
                &mut p.head_w[rows.clone()],
                &mut v.head_w[rows.clone()],
                &grads.head_w[rows],
            );
            update(
                &mut p.head_b[c..=c],
                &mut v.head_b[c..=c],
                &grads.head_b[c..=c],
            );
        }
        Ok(())
    }
}

/// Tokens of a corpus as `(features, class index)`.
pub fn token_dataset(params: &ToyModelParams, corpus: &Corpus) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut data = Vec::with_capacity(corpus.token_count());
    for t in corpus.sequences.iter().flat_map(|s| &s.tokens) {
        let c = params
            .class_index(&t.label)
            .ok_or_else(|| Error::UnknownClass(t.label.clone()))?;
        if !params.active[c] {
            return Err(Error::SchemaMismatch(format!(
                "label {:?} has no active head",
                t.label
            )));
        }
        if t.vec.len() != params.d_in {
            return Err(Error::DimMismatch {
                expected: params.d_in,
                actual: t.vec.len(),
            });
        }
        data.push((t.vec.iter().map(|&v| v as f64).collect(), c));
    }
    Ok(data)
}

/// Trains for `config.epochs` passes of shuffled token mini-batches and
/// returns the mean loss of each epoch.
pub fn train_stage(
    params: &mut ToyModelParams,
    corpus: &Corpus,
    mask: &FreezeMask,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if corpus.class_table() != params.classes {
        return Err(Error::SchemaMismatch(
            "corpus class table differs from the model's".into(),
        ));
    }
    let data = token_dataset(params, corpus)?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = SgdMomentum::new(params, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (data[i].0.as_slice(), data[i].1))
                .collect();
            let (loss, grads) = params.loss_and_grads(&batch, config.l2_decay)?;
            opt.step(params, &grads, mask)?;
            total += loss * chunk.len() as f64;
        }
        if !params.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite parameters after epoch {}",
                epoch + 1
            )));
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}

pub fn write_loss_curve<W: Write>(curve: &[f64], mut out: W) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(text, "{},{l}", i + 1).expect("writing to a String");
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// `(sequence id, token index)` packed into one stable identifier.
pub fn token_uid(sequence_id: u64, token_index: usize) -> u64 {
    (sequence_id << 32) | token_index as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeToken {
    pub uid: u64,
    pub label: String,
    pub features: Vec<f32>,
}

/// Fixed set of tokens whose hidden activations are snapshotted.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub class_table: Vec<String>,
    pub tokens: Vec<ProbeToken>,
}

impl ProbeSet {
    /// Every token of the corpus, with the corpus' own labels.
    pub fn all(corpus: &Corpus) -> Self {
        let tokens = corpus
            .sequences
            .iter()
            .flat_map(|s| {
                s.tokens.iter().enumerate().map(move |(i, t)| ProbeToken {
                    uid: token_uid(s.id, i),
                    label: t.label.clone(),
                    features: t.vec.clone(),
                })
            })
            .collect();
        Self {
            class_table: corpus.class_table(),
            tokens,
        }
    }

    /// At most `size` tokens, split as evenly as possible across classes
    /// (short classes give their leftover quota to the others), drawn
    /// with a seeded shuffle and returned in corpus order.
    pub fn stratified(corpus: &Corpus, size: usize, seed: u64) -> Self {
        let all = Self::all(corpus);
        let k = all.class_table.len();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, t) in all.tokens.iter().enumerate() {
            if let Some(c) = all.class_table.iter().position(|n| *n == t.label) {
                by_class[c].push(i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in &mut by_class {
            idx.shuffle(&mut rng);
        }

        let mut quota = vec![0usize; k];
        let mut remaining = size;
        loop {
            let open: Vec<usize> = (0..k).filter(|&c| quota[c] < by_class[c].len()).collect();
            if remaining == 0 || open.is_empty() {
                break;
            }
            let share = (remaining / open.len()).max(1);
            for c in open {
                let take = share.min(by_class[c].len() - quota[c]).min(remaining);
                quota[c] += take;
                remaining -= take;
            }
        }
        let mut chosen: Vec<usize> = by_class
            .iter()
            .zip(&quota)
            .flat_map(|(idx, &q)| idx[..q].to_vec())
            .collect();
        chosen.sort_unstable();
        let tokens = chosen.into_iter().map(|i| all.tokens[i].clone()).collect();
        Self {
            class_table: all.class_table,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Hidden-layer activations of every probe token, cast to `f32`, labeled
/// with the probe's gold class.
pub fn extract_embeddings(
    params: &ToyModelParams,
    probe: &ProbeSet,
    stage_name: &str,
) -> Result<EmbeddingSnapshot> {
    let mut snapshot = EmbeddingSnapshot::new(stage_name, params.hidden, probe.class_table.clone());
    let mut x = vec![0.0; params.d_in];
    let mut h = vec![0.0; params.hidden];
    for t in &probe.tokens {
        if t.features.len() != params.d_in {
            return Err(Error::DimMismatch {
                expected: params.d_in,
                actual: t.features.len(),
            });
        }
        let class_id = snapshot
            .class_index(&t.label)
            .ok_or_else(|| Error::UnknownClass(t.label.clone()))?;
        for (dst, &v) in x.iter_mut().zip(&t.features) {
            *dst = v as f64;
        }
        params.hidden_into(&x, &mut h);
        snapshot.records.push(TokenRecord {
            token_uid: t.uid,
            class_id,
            embedding: h.iter().map(|&v| v as f32).collect(),
        });
    }
    snapshot.validate()?;
    Ok(snapshot)
}

/// Per-sequence predicted class names.
pub fn predict_corpus(params: &ToyModelParams, corpus: &Corpus) -> Result<Vec<Vec<String>>> {
    let mut x = vec![0.0; params.d_in];
    let mut h = vec![0.0; params.hidden];
    let mut logits = vec![0.0; params.num_classes()];
    corpus
        .sequences
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| {
                    if t.vec.len() != params.d_in {
                        return Err(Error::DimMismatch {
                            expected: params.d_in,
                            actual: t.vec.len(),
                        });
                    }
                    for (dst, &v) in x.iter_mut().zip(&t.vec) {
                        *dst = v as f64;
                    }
                    params.hidden_into(&x, &mut h);
                    params.logits_into(&h, &mut logits);
                    Ok(params.classes[argmax_active(&logits, &params.active)].clone())
                })
                .collect()
        })
        .collect()
}

/// TMPK checkpoint: magic, u16 version, u32 `d_in`, u32 `hidden`, u16 class
/// count, class names (u16 length + UTF-8), one activity byte per class,
/// then every parameter as little-endian `f64` in declared order.
pub fn write_checkpoint<W: Write>(params: &ToyModelParams, sink: W) -> Result<()> {
    let mut out = BufWriter::new(sink);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.d_in as u32).to_le_bytes())?;
    out.write_all(&(params.hidden as u32).to_le_bytes())?;
    out.write_all(&(params.classes.len() as u16).to_le_bytes())?;
    for c in &params.classes {
        out.write_all(&(c.len() as u16).to_le_bytes())?;
        out.write_all(c.as_bytes())?;
    }
    for &a in &params.active {
        out.write_all(&[a as u8])?;
    }
    for v in params.tensors.blocks().iter().flat_map(|b| b.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<ToyModelParams> {
    let mut rd = BufReader::new(source);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        rd.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated checkpoint".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile("not a TMPK checkpoint".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d_in = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let k = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let mut classes = Vec::with_capacity(k);
    for _ in 0..k {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        classes.push(
            String::from_utf8(take(len)?)
                .map_err(|_| Error::CorruptFile("class name is not UTF-8".into()))?,
        );
    }
    let active = take(k)?.into_iter().map(|b| b != 0).collect();
    let mut tensors = Tensors::zeros(d_in, hidden, k);
    for block in tensors.blocks_mut() {
        let raw = take(8 * block.len())?;
        for (dst, b) in block.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(ToyModelParams {
        d_in,
        hidden,
        classes,
        active,
        tensors,
    })
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn checkpoint_hash(params: &ToyModelParams) -> String {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes).expect("writing to memory");
    hex::encode(Sha256::digest(&bytes))
}
