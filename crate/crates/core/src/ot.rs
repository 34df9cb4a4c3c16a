//! Entropic optimal transport between embedding sets.
//!
//! Costs are cosine distances between unit vectors, so every entry lies in
//! `[0, 2]`. [`sinkhorn`] alternates row and column scalings of the Gibbs
//! kernel `exp(-C / eps)` with uniform marginals. When the kernel underflows,
//! a scaling stops being finite, or the iterations stall short of the
//! tolerance, it restarts in the log domain with epsilon halved from the cost
//! scale down to the target, warm-starting each stage. The final
//! iterate is projected onto the transport polytope (row-then-column mass
//! rounding with a rank-one correction) so the returned plan is exactly
//! feasible, which keeps `Tr[M C^T]` from dipping below the exact
//! transport cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm contract of embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Unit-norm embeddings of one domain's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    data: Vec<f64>,
    domain: usize,
}

impl EmbeddingBatch {
    pub fn new(vectors: Vec<Vec<f64>>, domain: usize) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::domain("embedding batch is empty"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::domain("embedding dimension must be positive"));
        }
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::domain("embeddings differ in dimension"));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::domain(format!("embedding norm {norm} is not 1")));
            }
            data.extend_from_slice(v);
        }
        Ok(Self { dim, data, domain })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Dense row-major cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::domain("cost matrix shape mismatch"));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> Self {
        let mut entries = Vec::with_capacity(self.entries.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                entries.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            entries,
        }
    }
}

/// Soft matching between two uniform empirical measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
    /// Largest marginal violation of the Sinkhorn iterate before rounding.
    pub marginal_error: f64,
    /// Whether `marginal_error` fell below the requested tolerance.
    pub converged: bool,
    pub iterations: usize,
    /// Whether the log-domain solver was used.
    pub log_domain: bool,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    /// Largest deviation of the plan's marginals from uniform.
    pub fn max_marginal_violation(&self) -> f64 {
        marginal_violation(&self.entries, self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// `C[i][j] = 1 - <a_i, b_j>`, clamped to `[0, 2]`.
pub fn cosine_cost(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<CostMatrix> {
    if a.dim != b.dim {
        return Err(Error::domain(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let mut entries = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let u = a.vector(i);
        for j in 0..b.len() {
            let dot: f64 = u.iter().zip(b.vector(j)).map(|(x, y)| x * y).sum();
            entries.push((1.0 - dot).clamp(0.0, 2.0));
        }
    }
    CostMatrix::new(a.len(), b.len(), entries)
}

fn marginal_violation(plan: &[f64], rows: usize, cols: usize) -> f64 {
    let (r, c) = (1.0 / rows as f64, 1.0 / cols as f64);
    let mut worst = 0.0f64;
    for i in 0..rows {
        let s: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        worst = worst.max((s - r).abs());
    }
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        worst = worst.max((s - c).abs());
    }
    worst
}

struct RawPlan {
    entries: Vec<f64>,
    iterations: usize,
    marginal_error: f64,
}

/// Scaling-form iterations; `None` when the kernel or a scaling degenerates.
fn sinkhorn_scaling(c: &CostMatrix, params: &SinkhornParams) -> Option<RawPlan> {
    let (m, n) = (c.rows, c.cols);
    let kernel: Vec<f64> = c.entries.iter().map(|&x| (-x / params.epsilon).exp()).collect();
    if kernel.iter().any(|&k| k < f64::MIN_POSITIVE) {
        return None;
    }
    let (a, b) = (1.0 / m as f64, 1.0 / n as f64);
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let build = |u: &[f64], v: &[f64]| -> Vec<f64> {
        let mut p = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                p.push(u[i] * kernel[i * n + j] * v[j]);
            }
        }
        p
    };
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < params.max_iters {
        for i in 0..m {
            let s: f64 = (0..n).map(|j| kernel[i * n + j] * v[j]).sum();
            u[i] = a / s;
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| kernel[i * n + j] * u[i]).sum();
            v[j] = b / s;
        }
        iterations += 1;
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return None;
        }
        err = marginal_violation(&build(&u, &v), m, n);
        if err < params.tol {
            break;
        }
    }
    Some(RawPlan {
        entries: build(&u, &v),
        iterations,
        marginal_error: err,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn gibbs_plan(c: &CostMatrix, f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(c.rows * c.cols);
    for (i, fi) in f.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            p.push(((fi + gj - c.get(i, j)) / eps).exp());
        }
    }
    p
}

/// Dual-potential iterations in the log domain, warm-started by halving
/// epsilon from the cost scale down to the target, then polished with
/// Newton steps on the dual.
fn sinkhorn_log(c: &CostMatrix, params: &SinkhornParams) -> RawPlan {
    let (m, n) = (c.rows, c.cols);
    let (log_a, log_b) = (-(m as f64).ln(), -(n as f64).ln());
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let scale = c.entries.iter().copied().fold(0.0f64, f64::max).max(params.epsilon);
    let mut schedule = Vec::new();
    let mut eps = scale;
    while eps > params.epsilon {
        schedule.push(eps);
        eps *= 0.5;
    }
    schedule.push(params.epsilon);
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let last = schedule.len() - 1;
    for (stage, &eps) in schedule.iter().enumerate() {
        err = f64::INFINITY;
        while iterations < params.max_iters {
            for i in 0..m {
                let lse = log_sum_exp((0..n).map(|j| (g[j] - c.get(i, j)) / eps));
                f[i] = eps * (log_a - lse);
            }
            for j in 0..n {
                let lse = log_sum_exp((0..m).map(|i| (f[i] - c.get(i, j)) / eps));
                g[j] = eps * (log_b - lse);
            }
            iterations += 1;
            err = marginal_violation(&gibbs_plan(c, &f, &g, eps), m, n);
            if err < params.tol || (stage < last && err < params.tol.max(1e-3)) {
                break;
            }
        }
    }
    if err >= params.tol {
        let (steps, polished) = newton_polish(c, params, &mut f, &mut g, err);
        iterations += steps;
        err = polished;
    }
    RawPlan {
        entries: gibbs_plan(c, &f, &g, params.epsilon),
        iterations,
        marginal_error: err,
    }
}

const NEWTON_MAX_STEPS: usize = 50;

/// Newton iterations on the entropic dual with the last column potential
/// pinned. Only steps that shrink the marginal violation are kept.
fn newton_polish(
    c: &CostMatrix,
    params: &SinkhornParams,
    f: &mut [f64],
    g: &mut [f64],
    mut err: f64,
) -> (usize, f64) {
    let (m, n) = (c.rows, c.cols);
    let eps = params.epsilon;
    let dim = m + n - 1;
    if dim == 0 {
        return (0, err);
    }
    let (a, b) = (1.0 / m as f64, 1.0 / n as f64);
    let mut steps = 0;
    while steps < NEWTON_MAX_STEPS && err >= params.tol {
        steps += 1;
        let plan = gibbs_plan(c, f, g, eps);
        let rows: Vec<f64> = (0..m).map(|i| plan[i * n..(i + 1) * n].iter().sum()).collect();
        let cols: Vec<f64> = (0..n).map(|j| (0..m).map(|i| plan[i * n + j]).sum()).collect();
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..m {
            hess[(i, i)] = rows[i] / eps;
            rhs[i] = a - rows[i];
            for j in 0..n - 1 {
                hess[(i, m + j)] = plan[i * n + j] / eps;
                hess[(m + j, i)] = plan[i * n + j] / eps;
            }
        }
        for j in 0..n - 1 {
            hess[(m + j, m + j)] = cols[j] / eps;
            rhs[m + j] = b - cols[j];
        }
        let Some(chol) = hess.cholesky() else {
            break;
        };
        let delta = chol.solve(&rhs);
        if delta.iter().any(|x| !x.is_finite()) {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-4 {
            let f_new: Vec<f64> = (0..m).map(|i| f[i] + step * delta[i]).collect();
            let g_new: Vec<f64> = (0..n)
                .map(|j| if j + 1 < n { g[j] + step * delta[m + j] } else { g[j] })
                .collect();
            let e = marginal_violation(&gibbs_plan(c, &f_new, &g_new, eps), m, n);
            if e < err {
                f.copy_from_slice(&f_new);
                g.copy_from_slice(&g_new);
                err = e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (steps, err)
}

/// Projects a nonnegative matrix onto the uniform-marginal transport polytope.
fn round_to_polytope(plan: &mut [f64], rows: usize, cols: usize) {
    let (r, c) = (1.0 / rows as f64, 1.0 / cols as f64);
    for i in 0..rows {
        let row = &mut plan[i * cols..(i + 1) * cols];
        let s: f64 = row.iter().sum();
        if s > r {
            let k = r / s;
            row.iter_mut().for_each(|x| *x *= k);
        }
    }
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        if s > c {
            let k = c / s;
            (0..rows).for_each(|i| plan[i * cols + j] *= k);
        }
    }
    let row_def: Vec<f64> = (0..rows)
        .map(|i| (r - plan[i * cols..(i + 1) * cols].iter().sum::<f64>()).max(0.0))
        .collect();
    let col_def: Vec<f64> = (0..cols)
        .map(|j| (c - (0..rows).map(|i| plan[i * cols + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = row_def.iter().sum();
    if total > 0.0 {
        for i in 0..rows {
            for j in 0..cols {
                plan[i * cols + j] += row_def[i] * col_def[j] / total;
            }
        }
    }
}

/// Entropic transport cost `Tr[M C^T]` with uniform marginals.
///
/// Non-convergence within `max_iters` is reported on the plan, not as an error.
pub fn sinkhorn(c: &CostMatrix, params: &SinkhornParams) -> Result<(f64, TransportPlan)> {
    if !(params.epsilon > 0.0 && params.epsilon.is_finite()) {
        return Err(Error::domain(format!(
            "epsilon must be positive, got {}",
            params.epsilon
        )));
    }
    if c.entries.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("cost matrix has non-finite entries"));
    }
    if c.entries.iter().any(|&x| x < 0.0) {
        return Err(Error::domain("cost matrix has negative entries"));
    }
    let (raw, log_domain) = match sinkhorn_scaling(c, params) {
        Some(raw) if raw.marginal_error < params.tol => (raw, false),
        Some(raw) => {
            let log = sinkhorn_log(c, params);
            if log.marginal_error < raw.marginal_error {
                (log, true)
            } else {
                (raw, false)
            }
        }
        None => (sinkhorn_log(c, params), true),
    };
    let mut entries = raw.entries;
    round_to_polytope(&mut entries, c.rows, c.cols);
    let distance = entries.iter().zip(&c.entries).map(|(p, x)| p * x).sum::<f64>();
    let plan = TransportPlan {
        rows: c.rows,
        cols: c.cols,
        entries,
        marginal_error: raw.marginal_error,
        converged: raw.marginal_error < params.tol,
        iterations: raw.iterations,
        log_domain,
    };
    Ok((distance.max(0.0), plan))
}

/// Largest instance [`exact_ot`] accepts.
pub const EXACT_OT_MAX: usize = 8;

/// Exact transport cost between two uniform measures of equal size.
///
/// With equal uniform marginals an optimal vertex is a permutation, so the
/// cost is the minimum-cost perfect matching divided by `m`, found here by
/// enumerating all `m!` permutations.
pub fn exact_ot(c: &CostMatrix) -> Result<f64> {
    if c.rows != c.cols {
        return Err(Error::Unsupported(format!(
            "exact transport needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    if c.rows > EXACT_OT_MAX {
        return Err(Error::Unsupported(format!(
            "exact transport supports at most {EXACT_OT_MAX} points, got {}",
            c.rows
        )));
    }
    let m = c.rows;
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm, iterative form.
    let mut counters = vec![0usize; m];
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();
    best = best.min(cost(&perm));
    let mut i = 0;
    while i < m {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(cost(&perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / m as f64)
}

/// Sum of Sinkhorn distances over ordered pairs of distinct domains.
///
/// Each unordered pair is solved once and counted twice. Pairs are visited in
/// `(i, j), i < j` order so the sum is deterministic.
pub fn diversity_loss(batches: &[EmbeddingBatch], params: &SinkhornParams) -> Result<f64> {
    Ok(pairwise_distances(batches, params)?
        .into_iter()
        .map(|(_, _, d)| 2.0 * d)
        .sum())
}

/// Sinkhorn distance for every unordered domain pair `(i, j), i < j`.
pub fn pairwise_distances(
    batches: &[EmbeddingBatch],
    params: &SinkhornParams,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut domains: Vec<usize> = batches.iter().map(|b| b.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    if domains.len() < 2 || domains.len() != batches.len() {
        return Err(Error::domain(
            "diversity needs one batch per domain and at least two domains",
        ));
    }
    let mut out = Vec::new();
    for i in 0..batches.len() {
        for j in i + 1..batches.len() {
            let cost = cosine_cost(&batches[i], &batches[j])?;
            let (d, _) = sinkhorn(&cost, params)?;
            out.push((batches[i].domain, batches[j].domain, d));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    fn tight() -> SinkhornParams {
        SinkhornParams {
            epsilon: 1e-3,
            max_iters: 5000,
            tol: 1e-9,
        }
    }

    #[test]
    fn cosine_cost_extremes() {
        let a = EmbeddingBatch::new(vec![basis(3, 0)], 0).unwrap();
        let b = EmbeddingBatch::new(vec![basis(3, 0), basis(3, 1), vec![-1.0, 0.0, 0.0]], 1).unwrap();
        let c = cosine_cost(&a, &b).unwrap();
        assert_eq!(c.entries(), &[0.0, 1.0, 2.0]);
        let d = EmbeddingBatch::new(vec![basis(4, 0)], 1).unwrap();
        assert!(matches!(cosine_cost(&a, &d), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_rejects_non_unit_vectors() {
        assert!(EmbeddingBatch::new(vec![vec![1.0, 1.0]], 0).is_err());
        assert!(EmbeddingBatch::new(vec![], 0).is_err());
    }

    #[test]
    fn zero_cost_gives_zero_distance() {
        let c = CostMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        let (d, plan) = sinkhorn(&c, &SinkhornParams::default()).unwrap();
        assert_eq!(d, 0.0);
        assert!(plan.converged);
    }

    #[test]
    fn identity_matching_small_epsilon() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (d, plan) = sinkhorn(&c, &tight()).unwrap();
        assert!(d <= 1e-2, "{d}");
        assert!(plan.log_domain);
        assert!(plan.max_marginal_violation() < 1e-12);
    }

    #[test]
    fn exact_ot_small_cases() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(exact_ot(&c).unwrap(), 0.0);
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(exact_ot(&c).unwrap(), 0.0);
        let c = CostMatrix::from_rows(&[vec![0.2, 0.9], vec![0.8, 0.4]]).unwrap();
        assert!((exact_ot(&c).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn exact_ot_rejects_unsupported() {
        let c = CostMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(exact_ot(&c), Err(Error::Unsupported(_))));
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(exact_ot(&c), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sinkhorn_rejects_bad_inputs() {
        let c = CostMatrix::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(sinkhorn(&c, &tight()), Err(Error::Domain(_))));
        let c = CostMatrix::new(1, 1, vec![0.0]).unwrap();
        let p = SinkhornParams {
            epsilon: 0.0,
            ..tight()
        };
        assert!(sinkhorn(&c, &p).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let c = CostMatrix::from_rows(&[vec![0.0, 0.3, 0.7], vec![0.5, 0.0, 0.2]]).unwrap();
        let p = SinkhornParams {
            epsilon: 1e-3,
            max_iters: 1,
            tol: 1e-12,
        };
        let (_, plan) = sinkhorn(&c, &p).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 1);
        assert!(plan.max_marginal_violation() < 1e-12);
    }

    #[test]
    fn diversity_of_orthogonal_singletons() {
        let a = EmbeddingBatch::new(vec![basis(2, 0)], 0).unwrap();
        let b = EmbeddingBatch::new(vec![basis(2, 1)], 1).unwrap();
        let d = diversity_loss(&[a.clone(), b], &SinkhornParams::default()).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let same = EmbeddingBatch::new(vec![basis(2, 0)], 1).unwrap();
        assert!(diversity_loss(&[a.clone(), same], &SinkhornParams::default()).unwrap() < 1e-12);
        assert!(diversity_loss(&[a], &SinkhornParams::default()).is_err());
    }
}
