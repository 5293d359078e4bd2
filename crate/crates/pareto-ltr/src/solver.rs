//! Min-norm preference weights over the probability simplex.
//!
//! Given one flattened parameter gradient per objective, find simplex
//! weights `alpha` minimizing `||sum_i alpha_i * g_i||^2`. A zero minimum
//! certifies a stationary trade-off point (the KKT system for simplex
//! weights has a solution); a nonzero minimum is a common descent
//! direction that improves every objective at once.
//!
//! The search runs entirely in Gram space: after the `O(t^2 d)` precompute
//! of pairwise inner products, each Frank-Wolfe iteration costs `O(t^2)`
//! regardless of the gradient dimension. The line search between the
//! current point and the chosen vertex is a one-dimensional quadratic and
//! is solved in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// One flattened gradient vector per objective.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Vec<f64>>,
}

impl GradientSet {
    /// Validates that all vectors share one dimension and are finite.
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.is_empty() {
            return Err(Error::InvalidInput("gradient set is empty".into()));
        }
        let d = grads[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("gradient vectors are empty".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != d {
                return Err(Error::InvalidInput(format!(
                    "gradient {i} has length {} but gradient 0 has length {d}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {i} contains NaN/Inf")));
            }
        }
        Ok(Self { grads })
    }

    /// Number of objectives `t`.
    pub fn objectives(&self) -> usize {
        self.grads.len()
    }

    /// Shared gradient dimension `d`.
    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.grads
    }
}

/// Pairwise inner products of the objective gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramMatrix {
    m: Vec<Vec<f64>>,
}

impl GramMatrix {
    /// Inner products of every gradient pair. The upper triangle is
    /// computed and mirrored, so symmetry is exact.
    pub fn from_gradients(grads: &GradientSet) -> Self {
        let t = grads.objectives();
        let mut m = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in i..t {
                let v = dot(&grads.grads[i], &grads.grads[j]);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        Self { m }
    }

    /// Builds from explicit rows, validating the Gram invariants:
    /// square, finite, exactly symmetric, nonnegative diagonal, and
    /// positive semidefinite up to `1e-8 * max|M|`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        if t == 0 {
            return Err(Error::InvalidInput("matrix has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::InvalidInput(format!(
                    "row {i} has length {}, expected {t}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("row {i} contains NaN/Inf")));
            }
        }
        for i in 0..t {
            if rows[i][i] < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "diagonal entry {i} is negative: {}",
                    rows[i][i]
                )));
            }
            for j in (i + 1)..t {
                if rows[i][j] != rows[j][i] {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        rows[i][j], rows[j][i]
                    )));
                }
            }
        }
        let scale = rows
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let min_eig = symmetric_eigenvalues(&rows)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-8 * scale.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self { m: rows })
    }

    /// Number of objectives `t`.
    pub fn objectives(&self) -> usize {
        self.m.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.m
    }

    /// `(M alpha)_r`.
    pub fn row_dot(&self, r: usize, alpha: &[f64]) -> f64 {
        dot(&self.m[r], alpha)
    }

    /// `alpha' M alpha`.
    pub fn quadratic_form(&self, alpha: &[f64]) -> f64 {
        alpha
            .iter()
            .enumerate()
            .map(|(r, &a)| a * self.row_dot(r, alpha))
            .sum()
    }
}

/// Simplex weights, one per objective: nonnegative and summing to one
/// within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceWeights {
    alpha: Vec<f64>,
}

impl PreferenceWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weights contain NaN/Inf".into()));
        }
        if alpha.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("negative weight in {alpha:?}")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidInput("cannot build weights for t=0".into()));
        }
        Ok(Self {
            alpha: vec![1.0 / t as f64; t],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// How the iterate is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// `alpha_i = 1/t`. The default: reruns are reproducible without a seed.
    Uniform,
    /// A seeded Dirichlet(1) draw on the simplex.
    RandomSimplex { seed: u64 },
}

/// Solver knobs. The stopping rule accepts an iterate once the line-search
/// step `|w*|` or the objective decrease falls below `conv_tol`, or after
/// `max_iter` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub conv_tol: f64,
    pub stat_tol: f64,
    pub init: Initialization,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            conv_tol: 1e-6,
            stat_tol: 1e-8,
            init: Initialization::Uniform,
        }
    }
}

/// Solver output: the weights, the attained objective, and whether the
/// combination certifies stationarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverResult {
    pub alpha: PreferenceWeights,
    /// `alpha' M alpha`, the squared norm of the combined gradient.
    pub combined_norm_sq: f64,
    pub iterations: usize,
    /// True iff `combined_norm_sq <= stat_tol`.
    pub stationary: bool,
    /// Objective value before the first iteration and after each of the
    /// first [`TRACE_CAP`] iterations.
    pub objective_trace: Vec<f64>,
}

/// Iterations beyond this many are not recorded in the objective trace.
pub const TRACE_CAP: usize = 10_000;

/// Pairwise inner products of a gradient set.
pub fn gram_matrix(grads: &GradientSet) -> GramMatrix {
    GramMatrix::from_gradients(grads)
}

/// Closed-form minimizer of `||w*x1 + (1-w)*x2||^2` over `w in [0,1]`,
/// where `x1` is the `a`-th gradient and `x2` the `alpha`-combination,
/// both expressed through the Gram matrix:
///
/// `w* = (alpha'M alpha - e_a'M alpha) / (e_a'M e_a - 2 e_a'M alpha + alpha'M alpha)`
///
/// A degenerate denominator (the two points coincide, `< 1e-12`) returns
/// `w* = 1` so progress is deterministic.
pub fn line_search_wstar(a: usize, alpha: &PreferenceWeights, m: &GramMatrix) -> Result<f64> {
    let t = m.objectives();
    if a >= t {
        return Err(Error::InvalidInput(format!(
            "vertex index {a} out of range for {t} objectives"
        )));
    }
    if alpha.len() != t {
        return Err(Error::InvalidInput(format!(
            "weights have {} entries, matrix has {t}",
            alpha.len()
        )));
    }
    Ok(line_search_unchecked(a, alpha.as_slice(), m))
}

fn line_search_unchecked(a: usize, alpha: &[f64], m: &GramMatrix) -> f64 {
    wstar_from_scalars(m.get(a, a), m.row_dot(a, alpha), m.quadratic_form(alpha))
}

/// Alg.-2 step from the three Gram scalars `e'Me`, `e'M alpha`,
/// `alpha'M alpha`.
fn wstar_from_scalars(e_m_e: f64, e_m_alpha: f64, a_m_a: f64) -> f64 {
    let denom = e_m_e - 2.0 * e_m_alpha + a_m_a; // ||x1 - x2||^2
    if denom < 1e-12 {
        return 1.0;
    }
    ((a_m_a - e_m_alpha) / denom).clamp(0.0, 1.0)
}

/// Frank-Wolfe minimization of `alpha' M alpha` over the simplex.
///
/// Each iteration picks the vertex `i* = argmin_r (M alpha)_r` (lowest
/// index on ties), line-searches between it and the current iterate, and
/// takes the convex combination, so the iterate stays on the simplex by
/// construction and the objective never increases.
pub fn frank_wolfe_solve(m: &GramMatrix, opts: &SolverOptions) -> Result<SolverResult> {
    let t = m.objectives();
    if opts.max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
    }
    let mut alpha = match opts.init {
        Initialization::Uniform => vec![1.0 / t as f64; t],
        Initialization::RandomSimplex { seed } => random_simplex(seed, t),
    };

    let mut objective = m.quadratic_form(&alpha);
    let mut trace = Vec::with_capacity(opts.max_iter.min(1024) + 1);
    trace.push(objective);
    let mut iterations = 0;
    let mut m_alpha = vec![0.0; t];

    for _ in 0..opts.max_iter {
        iterations += 1;

        for (r, v) in m_alpha.iter_mut().enumerate() {
            *v = m.row_dot(r, &alpha);
        }
        let mut vertex = 0;
        for r in 1..t {
            if m_alpha[r] < m_alpha[vertex] {
                vertex = r;
            }
        }

        let a_m_a = dot(&alpha, &m_alpha);
        let e_m_alpha = m_alpha[vertex];
        let w = wstar_from_scalars(m.get(vertex, vertex), e_m_alpha, a_m_a);

        for a in alpha.iter_mut() {
            *a *= 1.0 - w;
        }
        alpha[vertex] += w;

        // The convex combination makes the next objective a known quadratic
        // in w; no second pass over M needed.
        let next = w * w * m.get(vertex, vertex)
            + 2.0 * w * (1.0 - w) * e_m_alpha
            + (1.0 - w) * (1.0 - w) * a_m_a;
        let delta = (objective - next).abs();
        objective = next;
        if trace.len() <= TRACE_CAP {
            trace.push(objective);
        }

        // w* == 0 exactly means the linearized gap is nonpositive, i.e. the
        // iterate is optimal; delta == 0 means no representable progress.
        if w == 0.0 || delta == 0.0 {
            break;
        }
        if w.abs() < opts.conv_tol || delta < opts.conv_tol {
            break;
        }
    }

    let combined_norm_sq = m.quadratic_form(&alpha).max(0.0);
    Ok(SolverResult {
        alpha: PreferenceWeights::new(alpha)?,
        combined_norm_sq,
        iterations,
        stationary: combined_norm_sq <= opts.stat_tol,
        objective_trace: trace,
    })
}

/// Convenience entry point: Gram precompute plus Frank-Wolfe.
pub fn solve_gradients(grads: &GradientSet, opts: &SolverOptions) -> Result<SolverResult> {
    frank_wolfe_solve(&gram_matrix(grads), opts)
}

/// `sum_i alpha_i * g_i`, the combined update direction.
pub fn combined_direction(grads: &GradientSet, alpha: &PreferenceWeights) -> Result<Vec<f64>> {
    if alpha.len() != grads.objectives() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} gradients",
            alpha.len(),
            grads.objectives()
        )));
    }
    let mut out = vec![0.0; grads.dim()];
    for (a, g) in alpha.as_slice().iter().zip(grads.vectors()) {
        for (o, v) in out.iter_mut().zip(g) {
            *o += a * v;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_simplex(seed: u64, t: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng_for(seed, "solver-init");
    // Dirichlet(1): normalized unit-rate exponentials.
    let mut draws: Vec<f64> = (0..t)
        .map(|_| (-(1.0 - rng.gen::<f64>()).ln()).max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Only used
/// to validate user-supplied Gram matrices; `t` is the objective count, so
/// the cost is negligible.
fn symmetric_eigenvalues(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let scale = rows
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let tan = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (tan * tan + 1.0).sqrt();
                let sin = tan * cos;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = cos * akp - sin * akq;
                    a[k][q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = cos * apk - sin * aqk;
                    a[q][k] = sin * apk + cos * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}
