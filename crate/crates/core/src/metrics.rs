//! Scalar regression metrics and the embedding extensivity diagnostic.
//!
//! Correlations return `None` instead of NaN when either side has zero
//! variance, so degenerate datasets surface as a flagged value rather than a
//! poisoned report.

use serde::Serialize;

pub fn mae(pred: &[f64], label: &[f64]) -> f64 {
    assert_eq!(pred.len(), label.len());
    assert!(!pred.is_empty());
    pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], label: &[f64]) -> f64 {
    assert_eq!(pred.len(), label.len());
    assert!(!pred.is_empty());
    (pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / pred.len() as f64)
        .sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` if either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    assert!(!x.is_empty());
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fractional ranks (1-based), ties sharing the average of their positions.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-NaN metric input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Standard evaluation bundle, reported in original label units.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

pub fn eval_report(pred: &[f64], label: &[f64]) -> EvalReport {
    EvalReport {
        n: pred.len(),
        mae: mae(pred, label),
        rmse: rmse(pred, label),
        pearson: pearson(pred, label),
        spearman: spearman(pred, label),
    }
}

// ---------------------------------------------------------------------------
// Extensivity
// ---------------------------------------------------------------------------

/// How strongly structure embeddings scale with atom count: Pearson of N
/// against the embedding norm and against the projection onto the first
/// principal direction of the centered embedding cloud.
#[derive(Debug, Clone, Serialize)]
pub struct ExtensivityReport {
    pub n_structures: usize,
    pub norm_pearson: Option<f64>,
    pub pc1_pearson: Option<f64>,
}

/// Dominant eigenvector of the covariance of `rows` (power iteration,
/// matrix-free, deterministic start). Returns `None` when the cloud has no
/// variance at all.
fn principal_direction(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut center = vec![0.0; d];
    for row in rows {
        for (c, v) in center.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in center.iter_mut() {
        *c /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&center).map(|(v, c)| v - c).collect())
        .collect();
    let total: f64 = centered.iter().flatten().map(|v| v * v).sum();
    if total <= 0.0 {
        return None;
    }
    // Start along the axis with the largest variance: deterministic and
    // never orthogonal to the dominant eigenvector by accident.
    let mut axis_var = vec![0.0; d];
    for row in &centered {
        for (a, v) in axis_var.iter_mut().zip(row) {
            *a += v * v;
        }
    }
    let start = axis_var
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite variance"))
        .map(|(i, _)| i)
        .unwrap();
    let mut v = vec![0.0; d];
    v[start] = 1.0;
    for _ in 0..500 {
        // w = Σ_i x_i (x_i · v), i.e. (XᵀX)·v without forming the matrix.
        let mut w = vec![0.0; d];
        for row in &centered {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wk, rk) in w.iter_mut().zip(row) {
                *wk += dot * rk;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return None;
        }
        let mut next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        // Canonical sign: first nonzero component positive.
        if let Some(first) = next.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                for x in next.iter_mut() {
                    *x = -*x;
                }
            }
        }
        let delta: f64 =
            next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    Some(v)
}

pub fn extensivity_report(atom_counts: &[usize], embeddings: &[Vec<f64>]) -> ExtensivityReport {
    assert_eq!(atom_counts.len(), embeddings.len());
    assert!(!embeddings.is_empty());
    let counts: Vec<f64> = atom_counts.iter().map(|&n| n as f64).collect();
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let pc1 = principal_direction(embeddings).map(|v| {
        let proj: Vec<f64> = embeddings
            .iter()
            .map(|e| e.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        pearson(&counts, &proj)
    });
    ExtensivityReport {
        n_structures: embeddings.len(),
        norm_pearson: pearson(&counts, &norms),
        pc1_pearson: pc1.flatten(),
    }
}
