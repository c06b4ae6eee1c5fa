#![allow(dead_code)]

use drift_lens::model::ToyModelParams;
use drift_lens::snapshot::{EmbeddingSnapshot, TokenRecord};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn classes(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random snapshot with `per_class` records for every class, uids `0..n`.
pub fn random_snapshot(
    stage: &str,
    dim: usize,
    table: &[&str],
    per_class: usize,
    seed: u64,
) -> EmbeddingSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snap = EmbeddingSnapshot::new(stage, dim, classes(table));
    let mut uid = 0;
    for c in 0..table.len() {
        // class-specific offset and anisotropic scale
        let offset: Vec<f64> = (0..dim).map(|_| 2.0 * gaussian(&mut rng)).collect();
        let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
        for _ in 0..per_class {
            let embedding = (0..dim)
                .map(|k| (offset[k] + scale[k] * gaussian(&mut rng)) as f32)
                .collect();
            snap.records.push(TokenRecord {
                token_uid: uid,
                class_id: c as u16,
                embedding,
            });
            uid += 1;
        }
    }
    snap
}

/// The same records with every embedding replaced by `f(embedding)`.
pub fn map_embeddings(
    snap: &EmbeddingSnapshot,
    stage: &str,
    f: impl Fn(&[f32]) -> Vec<f32>,
) -> EmbeddingSnapshot {
    let mut out = snap.clone();
    out.stage_name = stage.to_owned();
    for r in &mut out.records {
        r.embedding = f(&r.embedding);
    }
    out
}

/// Small, mostly non-linear perturbation of a snapshot.
pub fn perturbed(
    snap: &EmbeddingSnapshot,
    stage: &str,
    strength: f64,
    seed: u64,
) -> EmbeddingSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = snap.clone();
    out.stage_name = stage.to_owned();
    for r in &mut out.records {
        for v in &mut r.embedding {
            let x = *v as f64;
            *v = (x + strength * (x.sin() + 0.5 * gaussian(&mut rng))) as f32;
        }
    }
    out
}

pub fn apply(m: &DMatrix<f64>, shift: &[f64], v: &[f32]) -> Vec<f32> {
    (0..m.nrows())
        .map(|i| ((0..m.ncols()).map(|j| m[(i, j)] * v[j] as f64).sum::<f64>() + shift[i]) as f32)
        .collect()
}

/// Haar-ish random orthogonal matrix via QR of a Gaussian matrix.
pub fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| gaussian(&mut rng));
    g.qr().q()
}

/// Random well-conditioned invertible matrix: orthogonal x diag(0.5..2) x orthogonal.
pub fn random_well_conditioned(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| {
        rng.random_range(0.5..2.0)
    }));
    random_orthogonal(dim, seed) * d * random_orthogonal(dim, seed.wrapping_add(1))
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Small model with every parameter drawn at random; the last head is
/// inactive.
pub fn random_params(d_in: usize, hidden: usize, classes: usize, seed: u64) -> ToyModelParams {
    let names: Vec<String> = std::iter::once("O".to_string())
        .chain((1..classes).map(|c| format!("C{c}")))
        .collect();
    let mut active = vec![true; classes];
    active[classes - 1] = false;
    let mut p = ToyModelParams::init(d_in, hidden, names, active, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..p.tensors.len() {
        if i >= hidden * d_in {
            p.tensors.set(i, 0.7 * gaussian(&mut rng));
        }
    }
    p
}

pub fn random_batch(params: &ToyModelParams, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live: Vec<usize> = (0..params.num_classes())
        .filter(|&c| params.active[c])
        .collect();
    (0..n)
        .map(|_| {
            let x = (0..params.d_in).map(|_| gaussian(&mut rng)).collect();
            (x, live[rng.random_range(0..live.len())])
        })
        .collect()
}

pub fn as_batch(data: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
    data.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
}

/// Largest relative error between analytic gradients and central
/// differences, with the denominator floored at `floor`.
pub fn gradient_check(
    params: &ToyModelParams,
    data: &[(Vec<f64>, usize)],
    decay: f64,
    step: f64,
    floor: f64,
) -> f64 {
    let batch = as_batch(data);
    let (_, grads) = params.loss_and_grads(&batch, decay).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..params.tensors.len() {
        let mut plus = params.clone();
        plus.tensors.set(i, params.tensors.get(i) + step);
        let mut minus = params.clone();
        minus.tensors.set(i, params.tensors.get(i) - step);
        let lp = plus.loss_and_grads(&batch, decay).unwrap().0;
        let lm = minus.loss_and_grads(&batch, decay).unwrap().0;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = grads.get(i);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
