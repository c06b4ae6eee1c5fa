//! Dense statistical primitives shared by the drift metrics: centroids,
//! shrinkage-regularized population covariance, and Mahalanobis distance.
//!
//! Embeddings are stored as `f32` and every reduction accumulates in `f64`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Added to the shrinkage target so that an all-zero covariance still
/// becomes positive-definite once `lambda > 0`.
pub const EPS_FLOOR: f64 = 1e-8;

/// Default scale-relative shrinkage strength.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Row-major `rows x dim` block of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue(
                "embedding dim must be at least 1".into(),
            ));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidValue(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            rows: values.len() / dim,
            dim,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-class first and second moments.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: String,
    pub count: usize,
    pub centroid: Vec<f64>,
    /// Symmetric `d x d` population covariance after shrinkage.
    pub covariance: DMatrix<f64>,
    pub shrinkage_lambda: f64,
    /// Set when fewer than two rows were available.
    pub degenerate: bool,
    /// Lower Cholesky factor of `covariance`, when it factorizes.
    chol_lower: Option<DMatrix<f64>>,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn with_class(mut self, class: impl Into<String>) -> Self {
        self.class = class.into();
        self
    }

    pub fn is_factorized(&self) -> bool {
        self.chol_lower.is_some()
    }

    /// Returns a copy regularized as `Σ + lambda·(trace(Σ)/d + EPS_FLOOR)·I`.
    ///
    /// Only meaningful on unshrunk statistics; shrinkage does not compose.
    pub fn shrunk(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let d = self.dim();
        let covariance = if self.degenerate {
            DMatrix::identity(d, d) * (EPS_FLOOR * lambda)
        } else {
            let bump = lambda * (self.covariance.trace() / d as f64 + EPS_FLOOR);
            let mut cov = self.covariance.clone();
            for k in 0..d {
                cov[(k, k)] += bump;
            }
            cov
        };
        Ok(Self::assemble(
            self.class.clone(),
            self.count,
            self.centroid.clone(),
            covariance,
            lambda,
            self.degenerate,
        ))
    }

    fn assemble(
        class: String,
        count: usize,
        centroid: Vec<f64>,
        covariance: DMatrix<f64>,
        shrinkage_lambda: f64,
        degenerate: bool,
    ) -> Self {
        let chol_lower = if degenerate {
            None
        } else {
            covariance.clone().cholesky().map(|c| c.l())
        };
        Self {
            class,
            count,
            centroid,
            covariance,
            shrinkage_lambda,
            degenerate,
            chol_lower,
        }
    }

    fn factor(&self) -> Result<&DMatrix<f64>> {
        if self.degenerate {
            return Err(Error::DegenerateCovariance);
        }
        self.chol_lower
            .as_ref()
            .ok_or_else(|| Error::NumericalFailure("covariance is not positive-definite".into()))
    }

    /// Maps every row `e` to `L⁻¹ e`, where `Σ = L Lᵀ`. Euclidean distances
    /// between whitened rows are Mahalanobis distances under `Σ`.
    pub fn whiten(&self, emb: &EmbeddingMatrix) -> Result<Whitened> {
        let lower = self.factor()?;
        let d = self.dim();
        if emb.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: emb.dim(),
            });
        }
        let mut values = vec![0.0f64; emb.rows() * d];
        for (row, z) in emb.iter_rows().zip(values.chunks_exact_mut(d)) {
            // forward substitution
            for i in 0..d {
                let mut acc = row[i] as f64;
                for k in 0..i {
                    acc -= lower[(i, k)] * z[k];
                }
                z[i] = acc / lower[(i, i)];
            }
        }
        Ok(Whitened { dim: d, values })
    }
}

/// Rows mapped through `L⁻¹`.
#[derive(Debug, Clone)]
pub struct Whitened {
    dim: usize,
    values: Vec<f64>,
}

impl Whitened {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Mahalanobis distance between rows `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "shrinkage lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// Arithmetic mean of the rows.
pub fn centroid(emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if emb.rows() == 0 {
        return Err(Error::EmptyClass);
    }
    let mut sum = vec![0.0f64; emb.dim()];
    for row in emb.iter_rows() {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let n = emb.rows() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// Population covariance (divisor `n`) with scale-relative shrinkage.
///
/// With fewer than two rows the result is flagged degenerate and the
/// covariance is `EPS_FLOOR·lambda·I`.
pub fn covariance(emb: &EmbeddingMatrix, lambda: f64) -> Result<ClassStats> {
    check_lambda(lambda)?;
    let mu = centroid(emb)?;
    let d = emb.dim();
    let n = emb.rows();
    if n < 2 {
        return Ok(ClassStats::assemble(
            String::new(),
            n,
            mu,
            DMatrix::identity(d, d) * (EPS_FLOOR * lambda),
            lambda,
            true,
        ));
    }

    let mut upper = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in emb.iter_rows() {
        for (c, (&v, &m)) in centered.iter_mut().zip(row.iter().zip(&mu)) {
            *c = v as f64 - m;
        }
        for a in 0..d {
            let ca = centered[a];
            let dst = &mut upper[a * d..(a + 1) * d];
            for b in a..d {
                dst[b] += ca * centered[b];
            }
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = upper[a * d + b] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let raw = ClassStats::assemble(String::new(), n, mu, cov, 0.0, false);
    if lambda == 0.0 {
        Ok(raw)
    } else {
        raw.shrunk(lambda)
    }
}

/// `sqrt((x−y)ᵀ Σ⁻¹ (x−y))` via a triangular solve against the Cholesky factor.
pub fn mahalanobis(x: &[f64], y: &[f64], stats: &ClassStats) -> Result<f64> {
    let lower = stats.factor()?;
    let d = stats.dim();
    for v in [x, y] {
        if v.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: v.len(),
            });
        }
    }
    let diff = DVector::from_iterator(d, x.iter().zip(y).map(|(a, b)| a - b));
    let z = lower
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
    Ok(z.norm())
}
