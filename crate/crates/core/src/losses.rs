//! Contrastive objectives over batches of unit-norm embeddings.
//!
//! Every loss returns its value together with the exact gradient with respect
//! to each embedding entry (dot products treated as free bilinear forms) and
//! to its temperature. Reduction is the mean over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// `N×D` row-major matrix whose rows have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    /// Validates shape and unit norm of every row.
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(rows, dim, data.len())?;
        for (row, v) in data.chunks_exact(dim).enumerate() {
            let norm = l2(v);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NotUnitNorm { row, norm, tolerance: UNIT_NORM_TOLERANCE });
            }
        }
        Ok(Self { rows, dim, data })
    }

    /// Normalizes each row; zero or non-finite rows are rejected.
    pub fn from_unnormalized(rows: usize, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        check_shape(rows, dim, data.len())?;
        for (row, v) in data.chunks_exact_mut(dim).enumerate() {
            let norm = l2(v);
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::NonFinite(format!("cannot normalize row {row} with norm {norm}")));
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("embedding rows have different lengths"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Output row `i` is input row `order[i]`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: order.len(), dim: self.dim, data }
    }
}

fn check_shape(rows: usize, dim: usize, len: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::invalid("embedding batch needs at least one row"));
    }
    if dim < 2 {
        return Err(Error::invalid(format!("embedding dimension must be at least 2, got {dim}")));
    }
    if len != rows * dim {
        return Err(Error::shape(format!("{rows}x{dim}"), format!("{len} values")));
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which candidates count as positives for each anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositiveAssignment {
    /// Exactly one positive per anchor.
    Index(Vec<usize>),
    /// One or more positives per anchor (many-to-one or semi-positive setups).
    Multi(Vec<Vec<usize>>),
}

impl PositiveAssignment {
    /// Anchor `i` is paired with candidate `i`.
    pub fn diagonal(n: usize) -> Self {
        PositiveAssignment::Index((0..n).collect())
    }

    pub fn anchors(&self) -> usize {
        match self {
            PositiveAssignment::Index(v) => v.len(),
            PositiveAssignment::Multi(v) => v.len(),
        }
    }

    fn positives(&self, anchor: usize) -> &[usize] {
        match self {
            PositiveAssignment::Index(v) => std::slice::from_ref(&v[anchor]),
            PositiveAssignment::Multi(v) => &v[anchor],
        }
    }

    fn validate(&self, n_anchors: usize, n_candidates: usize) -> Result<()> {
        if self.anchors() != n_anchors {
            return Err(Error::shape(
                format!("{n_anchors} positive assignments"),
                self.anchors(),
            ));
        }
        for anchor in 0..n_anchors {
            let pos = self.positives(anchor);
            if pos.is_empty() {
                return Err(Error::invalid(format!("anchor {anchor} has no positive")));
            }
            for &index in pos {
                if index >= n_candidates {
                    return Err(Error::IndexOutOfRange { anchor, index, len: n_candidates });
                }
            }
        }
        Ok(())
    }
}

/// Loss value with gradients for both embedding matrices and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub d_anchors: Vec<f64>,
    pub d_candidates: Vec<f64>,
    pub d_tau: f64,
}

/// Mean over anchors of `−log(Σ_{p∈P} exp(a·c_p/τ) / Σ_j exp(a·c_j/τ))`.
pub fn info_nce(
    anchors: &EmbeddingBatch,
    candidates: &EmbeddingBatch,
    pos: &PositiveAssignment,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if anchors.dim() != candidates.dim() {
        return Err(Error::shape(anchors.dim(), candidates.dim()));
    }
    info_nce_raw(anchors.data(), candidates.data(), anchors.dim(), pos, tau)
}

/// Same objective on plain row-major matrices; no unit-norm check. The
/// gradient treats every entry as a free variable.
pub fn info_nce_raw(
    anchors: &[f64],
    candidates: &[f64],
    dim: usize,
    pos: &PositiveAssignment,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if dim == 0 || !anchors.len().is_multiple_of(dim) || !candidates.len().is_multiple_of(dim) {
        return Err(Error::shape(format!("multiples of {dim}"), format!("{}/{}", anchors.len(), candidates.len())));
    }
    let n_a = anchors.len() / dim;
    let n_c = candidates.len() / dim;
    if n_a == 0 || n_c == 0 {
        return Err(Error::invalid("empty anchor or candidate set"));
    }
    pos.validate(n_a, n_c)?;

    let scale = 1.0 / n_a as f64;
    let mut value = 0.0;
    let mut d_anchors = vec![0.0; anchors.len()];
    let mut d_candidates = vec![0.0; candidates.len()];
    let mut d_tau = 0.0;
    let mut sims = vec![0.0; n_c];
    let mut coef = vec![0.0; n_c];

    for i in 0..n_a {
        let a = &anchors[i * dim..(i + 1) * dim];
        for (j, s) in sims.iter_mut().enumerate() {
            *s = dot(a, &candidates[j * dim..(j + 1) * dim]);
        }
        let max = sims.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
        let mut total = 0.0;
        for (c, s) in coef.iter_mut().zip(&sims) {
            *c = (s / tau - max).exp();
            total += *c;
        }
        let positives = pos.positives(i);
        let pos_total: f64 = positives.iter().map(|&p| coef[p]).sum();
        value += total.ln() - pos_total.ln();

        // dL_i/dlogit_j = softmax_j − [j ∈ P] · exp(l_j)/Σ_P exp(l_p)
        let pos_weights: Vec<(usize, f64)> =
            positives.iter().map(|&p| (p, coef[p] / pos_total)).collect();
        for c in coef.iter_mut() {
            *c /= total;
        }
        for (p, w) in pos_weights {
            coef[p] -= w;
        }

        let da = &mut d_anchors[i * dim..(i + 1) * dim];
        for j in 0..n_c {
            let g = coef[j] * scale;
            if g == 0.0 {
                continue;
            }
            let cj = &candidates[j * dim..(j + 1) * dim];
            let dc = &mut d_candidates[j * dim..(j + 1) * dim];
            for k in 0..dim {
                da[k] += g * cj[k] / tau;
                dc[k] += g * a[k] / tau;
            }
            d_tau -= g * sims[j] / (tau * tau);
        }
    }

    Ok(ContrastiveLoss { value: value * scale, d_anchors, d_candidates, d_tau })
}

/// Average of the two directions (anchors→candidates and back) with a
/// diagonal pairing.
pub fn symmetric_info_nce(
    anchors: &EmbeddingBatch,
    candidates: &EmbeddingBatch,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if anchors.rows() != candidates.rows() {
        return Err(Error::shape(anchors.rows(), candidates.rows()));
    }
    let pos = PositiveAssignment::diagonal(anchors.rows());
    let fwd = info_nce(anchors, candidates, &pos, tau)?;
    let bwd = info_nce(candidates, anchors, &pos, tau)?;
    Ok(ContrastiveLoss {
        value: 0.5 * (fwd.value + bwd.value),
        d_anchors: fwd.d_anchors.iter().zip(&bwd.d_candidates).map(|(x, y)| 0.5 * (x + y)).collect(),
        d_candidates: fwd.d_candidates.iter().zip(&bwd.d_anchors).map(|(x, y)| 0.5 * (x + y)).collect(),
        d_tau: 0.5 * (fwd.d_tau + bwd.d_tau),
    })
}

fn paired(anchors: &EmbeddingBatch, candidates: &EmbeddingBatch, tau: f64, symmetric: bool) -> Result<ContrastiveLoss> {
    if anchors.rows() != candidates.rows() {
        return Err(Error::shape(
            format!("{} paired rows", anchors.rows()),
            candidates.rows(),
        ));
    }
    if symmetric {
        symmetric_info_nce(anchors, candidates, tau)
    } else {
        info_nce(anchors, candidates, &PositiveAssignment::diagonal(anchors.rows()), tau)
    }
}

/// Transformed ground views against the batch of original ground views.
/// Only the originals appear in the denominator.
pub fn single_modal_ground_loss(q_star: &EmbeddingBatch, q: &EmbeddingBatch, tau_q: f64) -> Result<ContrastiveLoss> {
    paired(q_star, q, tau_q, false)
}

/// Re-oriented aerial views against the batch of original aerial views.
pub fn single_modal_aerial_loss(r_star: &EmbeddingBatch, r: &EmbeddingBatch, tau_r: f64) -> Result<ContrastiveLoss> {
    paired(r_star, r, tau_r, false)
}

/// Ground queries against their aerial references.
pub fn vanilla_cross_loss(q: &EmbeddingBatch, r: &EmbeddingBatch, tau_v: f64) -> Result<ContrastiveLoss> {
    paired(q, r, tau_v, false)
}

/// Transformed ground queries against the aerial references.
pub fn cross_modal_loss(q_star: &EmbeddingBatch, r: &EmbeddingBatch, tau_c: f64) -> Result<ContrastiveLoss> {
    paired(q_star, r, tau_c, false)
}

/// Two-directional variant of any of the four pairwise losses above.
pub fn paired_loss(anchors: &EmbeddingBatch, candidates: &EmbeddingBatch, tau: f64, symmetric: bool) -> Result<ContrastiveLoss> {
    paired(anchors, candidates, tau, symmetric)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Initial temperatures; training optimizes them in log space.
    pub tau_q: f64,
    pub tau_r: f64,
    pub tau_v: f64,
    pub tau_c: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Average each objective over both directions.
    pub symmetric: bool,
    /// Objective used for the plain query/reference term.
    pub base: BaseLoss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    #[default]
    InfoNce,
    SoftTriplet,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_q: DEFAULT_TEMPERATURE,
            tau_r: DEFAULT_TEMPERATURE,
            tau_v: DEFAULT_TEMPERATURE,
            tau_c: DEFAULT_TEMPERATURE,
            w1: 0.5,
            w2: 0.5,
            w3: 0.25,
            symmetric: false,
            base: BaseLoss::InfoNce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_q", self.tau_q), ("tau_r", self.tau_r), ("tau_v", self.tau_v), ("tau_c", self.tau_c)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config { key: format!("loss.{name}"), message: format!("temperature must be positive, got {t}") });
            }
        }
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config { key: format!("loss.{name}"), message: format!("weight must be finite and nonnegative, got {w}") });
            }
        }
        Ok(())
    }
}

/// Per-component values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub vanilla: f64,
    pub single_q: f64,
    pub single_r: f64,
    pub cross: f64,
}

/// `vanilla + w1·single_q + w2·single_r + w3·cross`.
pub fn total_loss(components: &LossComponents, cfg: &LossConfig) -> f64 {
    components.vanilla + cfg.w1 * components.single_q + cfg.w2 * components.single_r + cfg.w3 * components.cross
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub d_queries: Vec<f64>,
    pub d_references: Vec<f64>,
}

/// Soft-margin triplet loss over every in-batch triplet `(q_i, r_i, r_j)`,
/// `j ≠ i`, with Euclidean distances: mean of `log(1 + exp(d_pos − d_neg))`.
pub fn soft_triplet_loss(q: &EmbeddingBatch, r: &EmbeddingBatch) -> Result<TripletLoss> {
    if q.rows() != r.rows() || q.dim() != r.dim() {
        return Err(Error::shape(format!("{}x{}", q.rows(), q.dim()), format!("{}x{}", r.rows(), r.dim())));
    }
    soft_triplet_raw(q.data(), r.data(), q.dim())
}

pub fn soft_triplet_raw(q: &[f64], r: &[f64], dim: usize) -> Result<TripletLoss> {
    if dim == 0 || q.len() != r.len() || !q.len().is_multiple_of(dim) {
        return Err(Error::shape(q.len(), r.len()));
    }
    let n = q.len() / dim;
    if n < 2 {
        return Err(Error::invalid("soft triplet loss needs at least two pairs to form negatives"));
    }
    // distance and unit direction (x − y)/‖x − y‖, zero at coincidence
    let dist = |x: &[f64], y: &[f64]| -> (f64, Vec<f64>) {
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let d = l2(&diff);
        let dir = if d > 0.0 { diff.iter().map(|v| v / d).collect() } else { vec![0.0; dim] };
        (d, dir)
    };
    let triplets = (n * (n - 1)) as f64;
    let mut value = 0.0;
    let mut d_queries = vec![0.0; q.len()];
    let mut d_references = vec![0.0; r.len()];
    for i in 0..n {
        let qi = &q[i * dim..(i + 1) * dim];
        let (d_pos, dir_pos) = dist(qi, &r[i * dim..(i + 1) * dim]);
        for j in (0..n).filter(|&j| j != i) {
            let (d_neg, dir_neg) = dist(qi, &r[j * dim..(j + 1) * dim]);
            let m = d_pos - d_neg;
            // log(1 + e^m), stable for large |m|
            value += m.max(0.0) + (-m.abs()).exp().ln_1p();
            let g = 1.0 / (1.0 + (-m).exp()) / triplets;
            for k in 0..dim {
                d_queries[i * dim + k] += g * (dir_pos[k] - dir_neg[k]);
                d_references[i * dim + k] -= g * dir_pos[k];
                d_references[j * dim + k] += g * dir_neg[k];
            }
        }
    }
    Ok(TripletLoss { value: value / triplets, d_queries, d_references })
}
