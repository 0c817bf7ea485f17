//! The d-SNE loss: cross-domain squared distances, SNE neighbour
//! probabilities, the log-likelihood-ratio objective and its modified-Hausdorff
//! min-max relaxation, with exact gradients back to both embedding matrices.
//!
//! All distances are target-by-source: row `j` is a target sample, column `i`
//! a source sample. Losses are means over the target rows that have at least
//! one same-class and one different-class source column; other rows are
//! skipped and counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Hausdorff,
    Likelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsneLossConfig {
    pub mode: LossMode,
    /// Hinge margin, Hausdorff mode only.
    pub margin: f64,
    /// L2-normalise embedding rows before measuring distances.
    pub normalize: bool,
}

impl Default for DsneLossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Hausdorff,
            margin: 1.0,
            normalize: false,
        }
    }
}

impl DsneLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be a finite value >= 0", self.margin)));
        }
        Ok(())
    }
}

/// Squared distances between target rows and source rows, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Matrix,
    pub labels_t: Vec<usize>,
    pub labels_s: Vec<usize>,
}

impl DistanceMatrix {
    pub fn new(values: Matrix, labels_t: Vec<usize>, labels_s: Vec<usize>) -> Result<Self> {
        if values.rows() != labels_t.len() || values.cols() != labels_s.len() {
            return Err(Error::Shape(format!(
                "{}x{} distances with {} target and {} source labels",
                values.rows(),
                values.cols(),
                labels_t.len(),
                labels_s.len()
            )));
        }
        Ok(Self {
            values,
            labels_t,
            labels_s,
        })
    }

    pub fn from_embeddings(
        e_t: &Matrix,
        labels_t: &[usize],
        e_s: &Matrix,
        labels_s: &[usize],
    ) -> Result<Self> {
        Self::new(pairwise_sq_dist(e_t, e_s)?, labels_t.to_vec(), labels_s.to_vec())
    }
}

/// Loss value and its gradient with respect to the distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceLoss {
    pub loss: f64,
    pub grad_distances: Matrix,
    pub skipped_targets: usize,
}

/// Loss value and its gradient with respect to both embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DsneLossResult {
    pub loss: f64,
    pub grad_t: Matrix,
    pub grad_s: Matrix,
    pub skipped_targets: usize,
}

/// `values[j][i] = Σ_k (E_t[j][k] − E_s[i][k])²`, accumulated in `k` order.
pub fn pairwise_sq_dist(e_t: &Matrix, e_s: &Matrix) -> Result<Matrix> {
    if e_t.cols() != e_s.cols() {
        return Err(Error::Shape(format!(
            "target embeddings have dimension {}, source {}",
            e_t.cols(),
            e_s.cols()
        )));
    }
    let mut out = Matrix::zeros(e_t.rows(), e_s.rows());
    for (j, t) in e_t.iter_rows().enumerate() {
        let row = out.row_mut(j);
        for (i, s) in e_s.iter_rows().enumerate() {
            let mut acc = 0.0;
            for (a, b) in t.iter().zip(s) {
                let diff = a - b;
                acc += diff * diff;
            }
            row[i] = acc;
        }
    }
    Ok(out)
}

/// Back-propagates `∂L/∂D` through the squared distances.
pub fn pairwise_sq_dist_backward(e_t: &Matrix, e_s: &Matrix, grad_d: &Matrix) -> (Matrix, Matrix) {
    let d = e_t.cols();
    let mut grad_t = Matrix::zeros(e_t.rows(), d);
    let mut grad_s = Matrix::zeros(e_s.rows(), d);
    for j in 0..e_t.rows() {
        let t = e_t.row(j);
        for i in 0..e_s.rows() {
            let g = grad_d.get(j, i);
            if g == 0.0 {
                continue;
            }
            let s = e_s.row(i);
            for k in 0..d {
                let v = 2.0 * g * (t[k] - s[k]);
                grad_t.row_mut(j)[k] += v;
                grad_s.row_mut(i)[k] -= v;
            }
        }
    }
    (grad_t, grad_s)
}

/// Row-wise softmax of `−D`: the probability that source `i` is the
/// neighbour of target `j`.
pub fn sne_probabilities(d: &Matrix) -> Result<Matrix> {
    if d.cols() == 0 {
        return Err(Error::Domain("no source samples to normalise over".into()));
    }
    if !d.is_finite() {
        return Err(Error::Numeric("distance matrix contains non-finite values".into()));
    }
    let mut p = Matrix::zeros(d.rows(), d.cols());
    for j in 0..d.rows() {
        let row = d.row(j);
        let nearest = row.iter().copied().fold(f64::INFINITY, f64::min);
        let out = p.row_mut(j);
        let mut total = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (nearest - v).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
    Ok(p)
}

/// Vector-Jacobian product of [`sne_probabilities`]:
/// `∂L/∂D[j][k] = −p[j][k]·(g[j][k] − Σ_i g[j][i]·p[j][i])`.
pub fn sne_probabilities_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for j in 0..p.rows() {
        let (pr, gr) = (p.row(j), grad_p.row(j));
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (pk, gk)) in out.row_mut(j).iter_mut().zip(pr.iter().zip(gr)) {
            *o = -pk * (gk - dot);
        }
    }
    out
}

/// `log Σ exp(−D[i])` over `cols`, plus the softmax weights of those columns.
fn neg_log_sum_exp(row: &[f64], cols: &[usize]) -> (f64, Vec<f64>) {
    let nearest = cols.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = cols.iter().map(|&i| (nearest - row[i]).exp()).collect();
    let total: f64 = w.iter().sum();
    (-nearest + total.ln(), w.into_iter().map(|x| x / total).collect())
}

fn partition(labels_s: &[usize], label: usize) -> (Vec<usize>, Vec<usize>) {
    (0..labels_s.len()).partition(|&i| labels_s[i] == label)
}

/// Per target: `log Σ_{diff} exp(−D) − log Σ_{same} exp(−D)`, averaged.
pub fn likelihood_loss(d: &DistanceMatrix) -> Result<DistanceLoss> {
    let (bt, bs) = d.values.shape();
    let mut grad = Matrix::zeros(bt, bs);
    let mut per_target = Vec::with_capacity(bt);
    for j in 0..bt {
        let (same, diff) = partition(&d.labels_s, d.labels_t[j]);
        if same.is_empty() || diff.is_empty() {
            continue;
        }
        let row = d.values.row(j);
        let (lse_same, w_same) = neg_log_sum_exp(row, &same);
        let (lse_diff, w_diff) = neg_log_sum_exp(row, &diff);
        per_target.push((j, lse_diff - lse_same, w_same, w_diff, same, diff));
    }
    let kept = per_target.len();
    if kept == 0 {
        return Err(Error::DegenerateBatch(bt));
    }
    let scale = 1.0 / kept as f64;
    let mut loss = 0.0;
    for (j, l, w_same, w_diff, same, diff) in per_target {
        loss += l;
        let g = grad.row_mut(j);
        for (&i, w) in same.iter().zip(w_same) {
            g[i] += scale * w;
        }
        for (&i, w) in diff.iter().zip(w_diff) {
            g[i] -= scale * w;
        }
    }
    Ok(DistanceLoss {
        loss: loss / kept as f64,
        grad_distances: grad,
        skipped_targets: bt - kept,
    })
}

/// Per target: `max(0, max_{same} D − min_{diff} D + margin)`, averaged.
/// Arg-max and arg-min ties resolve to the lowest source index.
pub fn hausdorff_loss(d: &DistanceMatrix, margin: f64) -> Result<DistanceLoss> {
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin {margin} must be >= 0")));
    }
    let (bt, bs) = d.values.shape();
    let mut active = Vec::new();
    let mut kept = 0usize;
    let mut loss = 0.0;
    for j in 0..bt {
        let row = d.values.row(j);
        let label = d.labels_t[j];
        let mut farthest_same: Option<usize> = None;
        let mut nearest_diff: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if d.labels_s[i] == label {
                if farthest_same.is_none_or(|a| v > row[a]) {
                    farthest_same = Some(i);
                }
            } else if nearest_diff.is_none_or(|b| v < row[b]) {
                nearest_diff = Some(i);
            }
        }
        let (Some(a), Some(b)) = (farthest_same, nearest_diff) else {
            continue;
        };
        kept += 1;
        let l = row[a] - row[b] + margin;
        if l > 0.0 {
            loss += l;
            active.push((j, a, b));
        }
    }
    if kept == 0 {
        return Err(Error::DegenerateBatch(bt));
    }
    let scale = 1.0 / kept as f64;
    let mut grad = Matrix::zeros(bt, bs);
    for (j, a, b) in active {
        let g = grad.row_mut(j);
        g[a] += scale;
        g[b] -= scale;
    }
    Ok(DistanceLoss {
        loss: loss / kept as f64,
        grad_distances: grad,
        skipped_targets: bt - kept,
    })
}

/// Row-wise L2 normalisation; returns the normalised rows and the norms.
pub fn l2_normalize_rows(e: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = e.clone();
    let mut norms = Vec::with_capacity(e.rows());
    for r in 0..e.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through [`l2_normalize_rows`]: `(g − ê·(ê·g)) / ‖e‖`.
pub fn l2_normalize_rows_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (r, &n) in norms.iter().enumerate() {
        let u = normalized.row(r);
        let dot: f64 = u.iter().zip(grad.row(r)).map(|(a, b)| a * b).sum();
        for (o, ui) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - ui * dot) / n;
        }
    }
    out
}

/// Full d-SNE term on raw embeddings, with gradients for both domains.
pub fn dsne_loss(
    e_t: &Matrix,
    labels_t: &[usize],
    e_s: &Matrix,
    labels_s: &[usize],
    cfg: &DsneLossConfig,
) -> Result<DsneLossResult> {
    cfg.validate()?;
    let normalized = cfg
        .normalize
        .then(|| (l2_normalize_rows(e_t), l2_normalize_rows(e_s)));
    let (zt, zs) = match &normalized {
        Some(((t, _), (s, _))) => (t, s),
        None => (e_t, e_s),
    };
    let d = DistanceMatrix::from_embeddings(zt, labels_t, zs, labels_s)?;
    let dl = match cfg.mode {
        LossMode::Hausdorff => hausdorff_loss(&d, cfg.margin)?,
        LossMode::Likelihood => likelihood_loss(&d)?,
    };
    let (mut grad_t, mut grad_s) = pairwise_sq_dist_backward(zt, zs, &dl.grad_distances);
    if let Some(((t, nt), (s, ns))) = &normalized {
        grad_t = l2_normalize_rows_backward(t, nt, &grad_t);
        grad_s = l2_normalize_rows_backward(s, ns, &grad_s);
    }
    if !dl.loss.is_finite() || !grad_t.is_finite() || !grad_s.is_finite() {
        return Err(Error::Numeric("d-SNE loss or gradient is not finite".into()));
    }
    Ok(DsneLossResult {
        loss: dl.loss,
        grad_t,
        grad_s,
        skipped_targets: dl.skipped_targets,
    })
}
