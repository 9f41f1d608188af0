//! Numerical checks of the linear-attention view of in-context learning.
//!
//! A prompt is the token sequence `[X'; Y'; X]` (demo inputs, demo labels,
//! test tokens, one token per row) read by a query vector `q`. Projections
//! `W_V`, `W_K`, `W_Q` are `d' x d`. Dropping the softmax turns attention
//! into a sum over the three blocks, each of the form
//! `W_V T^T (W_K T^T)^T W_Q q`; the test-token block is the zero-shot part
//! and the demo blocks form an additive weight update. The hard-margin
//! solver recovers the dual coefficients whose support restricts that
//! update to the boundary demos.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::seed::{self, SeededRng};

/// Largest point count [`solve_hard_margin`] accepts.
pub const MAX_MARGIN_POINTS: usize = 64;
const MAX_ACTIVE_SETS: u64 = 5_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("at least one demonstration is required")]
    NoDemos,
    #[error("attention over an empty sequence")]
    EmptySequence,
    #[error("points are not linearly separable")]
    NotSeparable,
    #[error("instance too large for exhaustive active-set search ({0})")]
    TooLarge(String),
    #[error("labels must be -1 or +1")]
    InvalidLabel,
}

type Result<T> = std::result::Result<T, TheoryError>;

/// Value, key and query projections, each `d' x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub value: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub query: DMatrix<f64>,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self {
            value: DMatrix::identity(d, d),
            key: DMatrix::identity(d, d),
            query: DMatrix::identity(d, d),
        }
    }

    pub fn random(rng: &mut SeededRng, d: usize, d_out: usize) -> Self {
        Self {
            value: uniform_matrix(rng, d_out, d),
            key: uniform_matrix(rng, d_out, d),
            query: uniform_matrix(rng, d_out, d),
        }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let shape = self.value.shape();
        if self.key.shape() != shape || self.query.shape() != shape {
            return Err(TheoryError::ShapeMismatch("W_V, W_K, W_Q must share a shape".into()));
        }
        if self.value.iter().chain(self.key.iter()).chain(self.query.iter()).any(|x| !x.is_finite()) {
            return Err(TheoryError::ShapeMismatch("non-finite projection entry".into()));
        }
        Ok((shape.1, shape.0))
    }
}

/// Query vector plus the three token blocks, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensors {
    pub query: DVector<f64>,
    /// `M x d` test-input tokens.
    pub test_tokens: DMatrix<f64>,
    /// `N x d` demonstration inputs.
    pub demo_inputs: DMatrix<f64>,
    /// `N x d` demonstration labels.
    pub demo_labels: DMatrix<f64>,
}

impl PromptTensors {
    pub fn random(rng: &mut SeededRng, d: usize, m: usize, n: usize) -> Self {
        Self {
            query: DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..=1.0))),
            test_tokens: uniform_matrix(rng, m, d),
            demo_inputs: uniform_matrix(rng, n, d),
            demo_labels: uniform_matrix(rng, n, d),
        }
    }

    pub fn demo_count(&self) -> usize {
        self.demo_inputs.nrows()
    }

    /// `[X'; Y'; X]`.
    pub fn sequence(&self) -> DMatrix<f64> {
        let d = self.query.len();
        let rows = self.demo_inputs.nrows() + self.demo_labels.nrows() + self.test_tokens.nrows();
        let mut z = DMatrix::zeros(rows, d);
        let mut r = 0;
        for block in [&self.demo_inputs, &self.demo_labels, &self.test_tokens] {
            z.rows_mut(r, block.nrows()).copy_from(block);
            r += block.nrows();
        }
        z
    }

    /// Same tensors keeping only the listed demonstrations.
    pub fn select_demos(&self, keep: &[usize]) -> Self {
        Self {
            query: self.query.clone(),
            test_tokens: self.test_tokens.clone(),
            demo_inputs: self.demo_inputs.select_rows(keep),
            demo_labels: self.demo_labels.select_rows(keep),
        }
    }
}

fn uniform_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

fn check(params: &AttentionParams, t: &PromptTensors) -> Result<(usize, usize)> {
    let (d, d_out) = params.dims()?;
    if t.query.len() != d {
        return Err(TheoryError::ShapeMismatch(format!("q has length {}, expected {d}", t.query.len())));
    }
    for (name, m) in [("X", &t.test_tokens), ("X'", &t.demo_inputs), ("Y'", &t.demo_labels)] {
        if m.ncols() != d && m.nrows() > 0 {
            return Err(TheoryError::ShapeMismatch(format!("{name} has {} columns, expected {d}", m.ncols())));
        }
    }
    if t.demo_inputs.nrows() != t.demo_labels.nrows() {
        return Err(TheoryError::ShapeMismatch("X' and Y' need the same number of rows".into()));
    }
    Ok((d, d_out))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.max();
    let exp = scores.map(|s| (s - max).exp());
    let total = exp.sum();
    exp / total
}

/// `W_V Z^T softmax((W_K Z^T)^T W_Q q / sqrt(d))` with `Z = [X'; Y'; X]`.
pub fn softmax_attention(params: &AttentionParams, t: &PromptTensors) -> Result<DVector<f64>> {
    let (d, _) = check(params, t)?;
    let z = t.sequence();
    if z.nrows() == 0 {
        return Err(TheoryError::EmptySequence);
    }
    let values = &params.value * z.transpose();
    let keys = &params.key * z.transpose();
    let scores = keys.transpose() * (&params.query * &t.query) / (d as f64).sqrt();
    Ok(values * softmax(&scores))
}

/// `W_V Z^T (W_K Z^T)^T W_Q q`.
pub fn linear_attention(params: &AttentionParams, t: &PromptTensors) -> Result<DVector<f64>> {
    let (_, d_out) = check(params, t)?;
    let z = t.sequence();
    if z.nrows() == 0 {
        return Ok(DVector::zeros(d_out));
    }
    let values = &params.value * z.transpose();
    let keys = &params.key * z.transpose();
    Ok(values * (keys.transpose() * (&params.query * &t.query)))
}

/// Effective weight `W_V T^T (W_K T^T)^T W_Q` of one token block.
pub fn block_weights(params: &AttentionParams, block: &DMatrix<f64>) -> DMatrix<f64> {
    let (d_out, d) = params.value.shape();
    if block.nrows() == 0 {
        return DMatrix::zeros(d_out, d);
    }
    let v = &params.value * block.transpose();
    let k = &params.key * block.transpose();
    v * k.transpose() * &params.query
}

/// The three additive contributions to linear attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `W_ZSL q`, from the test tokens.
    pub test: DVector<f64>,
    /// `W'_ZSL q`, from the demonstration inputs.
    pub demo_inputs: DVector<f64>,
    /// `W_L q`, from the demonstration labels.
    pub demo_labels: DVector<f64>,
}

impl Decomposition {
    pub fn sum(&self) -> DVector<f64> {
        &self.test + &self.demo_inputs + &self.demo_labels
    }
}

pub fn decompose(params: &AttentionParams, t: &PromptTensors) -> Result<Decomposition> {
    check(params, t)?;
    Ok(Decomposition {
        test: block_weights(params, &t.test_tokens) * &t.query,
        demo_inputs: block_weights(params, &t.demo_inputs) * &t.query,
        demo_labels: block_weights(params, &t.demo_labels) * &t.query,
    })
}

/// Zero-shot weight `W_ZSL` built from the test tokens alone.
pub fn zero_shot_weights(params: &AttentionParams, t: &PromptTensors) -> Result<DMatrix<f64>> {
    check(params, t)?;
    Ok(block_weights(params, &t.test_tokens))
}

/// Weight update contributed by the demonstrations.
///
/// The full form sums, per demonstration `k`, the projected outer products
/// of its input and label tokens, `W_V (x_k x_k^T + y_k y_k^T) W_K^T W_Q`,
/// so that `(W_ZSL + dW) q` equals linear attention exactly. The simplified
/// form is the projection-free `sum_k y_k x_k^T`; it coincides with the full
/// form only when each demonstration is one concatenated `[x; y]` token
/// whose value projection reads the label half and whose key and query
/// projections read the input half.
pub fn delta_w_icl(params: &AttentionParams, t: &PromptTensors, simplified: bool) -> Result<DMatrix<f64>> {
    let (d, d_out) = check(params, t)?;
    if t.demo_count() == 0 {
        return Err(TheoryError::NoDemos);
    }
    if simplified {
        let mut dw = DMatrix::zeros(d, d);
        for k in 0..t.demo_count() {
            let x = t.demo_inputs.row(k).transpose();
            let y = t.demo_labels.row(k).transpose();
            dw += y * x.transpose();
        }
        return Ok(dw);
    }
    let mut dw = DMatrix::zeros(d_out, d);
    for k in 0..t.demo_count() {
        for token in [t.demo_inputs.row(k).transpose(), t.demo_labels.row(k).transpose()] {
            let v = &params.value * &token;
            let kv = &params.key * &token;
            dw += v * (kv.transpose() * &params.query);
        }
    }
    Ok(dw)
}

/// Pieces of the support-vector form of linear attention:
/// `W_ZSL q + W_L q + sum_k beta_k y_k (x_k^T q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportVectorSplit {
    pub zero_shot: DVector<f64>,
    /// `W_L q`, the margin problem's bias term.
    pub label_bias: DVector<f64>,
    pub update: DVector<f64>,
}

impl SupportVectorSplit {
    pub fn output(&self) -> DVector<f64> {
        &self.zero_shot + &self.label_bias + &self.update
    }
}

/// `sum_k beta_k y_k (x_k^T q)`.
pub fn support_vector_update(
    demo_inputs: &DMatrix<f64>,
    demo_labels: &DMatrix<f64>,
    beta: &[f64],
    query: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = demo_inputs.nrows();
    if demo_labels.nrows() != n || beta.len() != n {
        return Err(TheoryError::ShapeMismatch(format!(
            "beta has {} entries for {n} demonstrations",
            beta.len()
        )));
    }
    if beta.iter().any(|b| !(*b >= 0.0)) {
        return Err(TheoryError::ShapeMismatch("beta entries must be >= 0".into()));
    }
    let mut out = DVector::zeros(demo_labels.ncols().max(query.len()));
    for k in 0..n {
        if beta[k] == 0.0 {
            continue;
        }
        let score = demo_inputs.row(k).dot(&query.transpose());
        out += demo_labels.row(k).transpose() * (beta[k] * score);
    }
    Ok(out)
}

pub fn support_vector_split(
    params: &AttentionParams,
    t: &PromptTensors,
    beta: &[f64],
) -> Result<SupportVectorSplit> {
    let (d, d_out) = check(params, t)?;
    if d != d_out {
        return Err(TheoryError::ShapeMismatch(
            "the support-vector form adds d'- and d-vectors, so it needs d' = d".into(),
        ));
    }
    Ok(SupportVectorSplit {
        zero_shot: block_weights(params, &t.test_tokens) * &t.query,
        label_bias: block_weights(params, &t.demo_labels) * &t.query,
        update: support_vector_update(&t.demo_inputs, &t.demo_labels, beta, &t.query)?,
    })
}

/// Maximum-margin separator normalised to functional margin 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginSolution {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Dual coefficients, exactly zero off the active set.
    pub beta: Vec<f64>,
    pub geometric_margin: f64,
    pub functional_margin: f64,
    /// Indices of points with non-zero `beta`.
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `max(0, 1 - min_k y_k (w.x_k + b))`.
    pub primal: f64,
    /// `max(0, -min_k beta_k)`.
    pub dual: f64,
    /// `|w - sum_k beta_k y_k x_k|_inf`.
    pub stationarity: f64,
    /// `max_k |beta_k (y_k (w.x_k + b) - 1)|`.
    pub complementary_slackness: f64,
    /// `|sum_k beta_k y_k|`.
    pub balance: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [self.primal, self.dual, self.stationarity, self.complementary_slackness, self.balance]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn validate_margin_input(points: &[Vec<f64>], labels: &[f64]) -> Result<usize> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(TheoryError::ShapeMismatch("one label per point required".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
        return Err(TheoryError::ShapeMismatch("points must share a positive dimension".into()));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(TheoryError::InvalidLabel);
    }
    Ok(d)
}

pub fn kkt_residuals(points: &[Vec<f64>], labels: &[f64], sol: &MarginSolution) -> KktResiduals {
    let margin = |k: usize| labels[k] * (dot(&sol.weights, &points[k]) + sol.bias);
    let mut recon = vec![0.0; sol.weights.len()];
    for (k, p) in points.iter().enumerate() {
        for (r, x) in recon.iter_mut().zip(p) {
            *r += sol.beta[k] * labels[k] * x;
        }
    }
    let n = points.len();
    KktResiduals {
        primal: (0..n).map(|k| (1.0 - margin(k)).max(0.0)).fold(0.0, f64::max),
        dual: sol.beta.iter().map(|b| (-b).max(0.0)).fold(0.0, f64::max),
        stationarity: recon
            .iter()
            .zip(&sol.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        complementary_slackness: (0..n)
            .map(|k| (sol.beta[k] * (margin(k) - 1.0)).abs())
            .fold(0.0, f64::max),
        balance: (0..n).map(|k| sol.beta[k] * labels[k]).sum::<f64>().abs(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Solve the equality-constrained KKT system for one candidate active set.
fn solve_active_set(points: &[Vec<f64>], labels: &[f64], active: &[usize]) -> Option<MarginSolution> {
    const TOL: f64 = 1e-9;
    let a = active.len();
    // [ Q  y ] [beta]   [1]
    // [ y' 0 ] [ b  ] = [0],  Q_ij = y_i y_j x_i.x_j
    let mut system = DMatrix::zeros(a + 1, a + 1);
    let mut rhs = DVector::zeros(a + 1);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            system[(r, c)] = labels[i] * labels[j] * dot(&points[i], &points[j]);
        }
        system[(r, a)] = labels[i];
        system[(a, r)] = labels[i];
        rhs[r] = 1.0;
    }
    let solution = system.clone().lu().solve(&rhs)?;
    if (&system * &solution - &rhs).amax() > TOL || solution.iter().any(|x| !x.is_finite()) {
        return None;
    }
    if solution.rows(0, a).iter().any(|&b| b < -TOL) {
        return None;
    }
    let d = points[0].len();
    let mut beta = vec![0.0; points.len()];
    let mut weights = vec![0.0; d];
    for (r, &i) in active.iter().enumerate() {
        let b = solution[r].max(0.0);
        beta[i] = b;
        for (w, x) in weights.iter_mut().zip(&points[i]) {
            *w += b * labels[i] * x;
        }
    }
    let bias = solution[a];
    let feasible = points
        .iter()
        .zip(labels)
        .all(|(p, y)| y * (dot(&weights, p) + bias) >= 1.0 - TOL);
    if !feasible {
        return None;
    }
    let norm = dot(&weights, &weights).sqrt();
    if norm == 0.0 {
        return None;
    }
    let support = (0..points.len()).filter(|&i| beta[i] > 0.0).collect();
    Some(MarginSolution {
        weights,
        bias,
        beta,
        geometric_margin: 1.0 / norm,
        functional_margin: 1.0,
        support,
    })
}

/// Hard-margin SVM by exhaustive active-set enumeration.
///
/// Candidate active sets of size 2 to `d + 1` containing both classes are
/// tried in increasing size and lexicographic order; the first whose KKT
/// system solves with `beta >= 0` and satisfies every margin constraint is
/// optimal, since the KKT conditions are sufficient for this convex problem.
pub fn solve_hard_margin(points: &[Vec<f64>], labels: &[f64]) -> Result<MarginSolution> {
    let d = validate_margin_input(points, labels)?;
    let n = points.len();
    if n > MAX_MARGIN_POINTS {
        return Err(TheoryError::TooLarge(format!("{n} points > {MAX_MARGIN_POINTS}")));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(TheoryError::NotSeparable);
    }
    let max_size = (d + 1).min(n);
    let budget: u64 = (2..=max_size as u64).map(|k| binomial(n as u64, k)).fold(0, u64::saturating_add);
    if budget > MAX_ACTIVE_SETS {
        return Err(TheoryError::TooLarge(format!("{budget} candidate active sets")));
    }
    for size in 2..=max_size {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let has_pos = combo.iter().any(|&i| labels[i] > 0.0);
            let has_neg = combo.iter().any(|&i| labels[i] < 0.0);
            if has_pos && has_neg {
                if let Some(sol) = solve_active_set(points, labels, &combo) {
                    return Ok(sol);
                }
            }
            if !next_combination(&mut combo, n) {
                break;
            }
        }
    }
    Err(TheoryError::NotSeparable)
}

/// Advance to the next k-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Random linearly separable instance: labels from a random hyperplane,
/// points within `gap` of it discarded.
pub fn random_separable(rng: &mut SeededRng, d: usize, n: usize, gap: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    loop {
        let normal: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm = dot(&normal, &normal).sqrt();
        if norm < 1e-3 {
            continue;
        }
        let offset = rng.random_range(-0.3..=0.3);
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut tries = 0;
        while points.len() < n && tries < 100 * n {
            tries += 1;
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let s = (dot(&normal, &p) + offset) / norm;
            if s.abs() < gap {
                continue;
            }
            labels.push(if s > 0.0 { 1.0 } else { -1.0 });
            points.push(p);
        }
        if points.len() == n && labels.contains(&1.0) && labels.contains(&-1.0) {
            return (points, labels);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub instances: usize,
    /// max |decompose().sum() - linear_attention()|.
    pub decomposition_max_error: f64,
    /// max |(W_ZSL + dW) q - linear_attention()|.
    pub affine_update_max_error: f64,
    /// max |softmax(s + c) - softmax(s)| over shifted score vectors.
    pub softmax_shift_max_error: f64,
    pub margin_instances: usize,
    pub kkt_max_residual: f64,
    pub analytic_1d_max_error: f64,
    pub support_restriction_max_deviation: f64,
    /// Fraction of separated-label instances where softmax and linear
    /// attention pick the same nearest label direction. Reported only.
    pub softmax_linear_label_agreement: f64,
}

impl TheoryReport {
    pub fn passes(&self, identity_tol: f64, kkt_tol: f64) -> bool {
        self.decomposition_max_error < identity_tol
            && self.affine_update_max_error < identity_tol
            && self.softmax_shift_max_error < identity_tol
            && self.kkt_max_residual < kkt_tol
            && self.analytic_1d_max_error < 1e-12
            && self.support_restriction_max_deviation < 1e-12
    }
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Analytic 1-D case: points 1, -2 (class -1) and 3, 6 (class +1) have the
/// separator x = 2 with `w = 1`, `b = -2` and `beta = 0.5` on the two inner
/// points.
pub fn analytic_1d_error() -> Result<f64> {
    let points = vec![vec![1.0], vec![-2.0], vec![3.0], vec![6.0]];
    let labels = [-1.0, -1.0, 1.0, 1.0];
    let sol = solve_hard_margin(&points, &labels)?;
    let expected_beta = [0.5, 0.0, 0.5, 0.0];
    let mut err = (sol.weights[0] - 1.0).abs().max((sol.bias + 2.0).abs());
    for (b, e) in sol.beta.iter().zip(expected_beta) {
        err = err.max((b - e).abs());
    }
    Ok(err)
}

/// Embed a solved margin problem as demonstrations (inputs = points, labels
/// = `y_k * u` for a random direction `u`) and compare the full
/// support-vector split with one computed from the support demos only,
/// holding the label bias fixed.
pub fn support_restriction_deviation(rng: &mut SeededRng, points: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    let sol = solve_hard_margin(points, labels)?;
    let d = points[0].len();
    let n = points.len();
    let params = AttentionParams::random(rng, d, d);
    let direction: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let m = rng.random_range(1..=4);
    let tensors = PromptTensors {
        query: DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..=1.0))),
        test_tokens: uniform_matrix(rng, m, d),
        demo_inputs: DMatrix::from_fn(n, d, |r, c| points[r][c]),
        demo_labels: DMatrix::from_fn(n, d, |r, c| labels[r] * direction[c]),
    };
    let full = support_vector_split(&params, &tensors, &sol.beta)?;
    let reduced = tensors.select_demos(&sol.support);
    let reduced_beta: Vec<f64> = sol.support.iter().map(|&i| sol.beta[i]).collect();
    let update = support_vector_update(&reduced.demo_inputs, &reduced.demo_labels, &reduced_beta, &reduced.query)?;
    let restricted = SupportVectorSplit {
        zero_shot: full.zero_shot.clone(),
        label_bias: full.label_bias.clone(),
        update,
    };
    Ok(max_abs_diff(&full.output(), &restricted.output()))
}

/// Well-separated two-label prompt: demos near `+e0` carry label `+e1`,
/// demos near `-e0` carry `-e1`, and the query sits on the `+e0` side.
/// Returns whether softmax and linear attention both lean towards `+e1`.
fn label_direction_agreement(rng: &mut SeededRng, d: usize) -> bool {
    let n = 4;
    let mut inputs = DMatrix::zeros(n, d);
    let mut label_rows = DMatrix::zeros(n, d);
    for k in 0..n {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        inputs[(k, 0)] = sign * 2.0;
        for c in 2..d {
            inputs[(k, c)] = rng.random_range(-0.1..=0.1);
        }
        label_rows[(k, 1)] = sign;
    }
    let mut q = DVector::zeros(d);
    q[0] = 1.0;
    let tensors = PromptTensors {
        query: q.clone(),
        test_tokens: DMatrix::from_fn(1, d, |_, c| q[c]),
        demo_inputs: inputs,
        demo_labels: label_rows,
    };
    let params = AttentionParams::identity(d);
    let soft = softmax_attention(&params, &tensors).expect("shapes are consistent");
    let lin = linear_attention(&params, &tensors).expect("shapes are consistent");
    (soft[1] > 0.0) == (lin[1] > 0.0)
}

/// Run every identity and KKT check on seeded random instances.
pub fn theory_check(seed: u64, instances: usize, margin_instances: usize) -> Result<TheoryReport> {
    let mut rng = seed::rng(seed);
    let mut decomposition = 0.0f64;
    let mut affine = 0.0f64;
    let mut shift = 0.0f64;
    for _ in 0..instances {
        let d = rng.random_range(1..=16);
        let d_out = rng.random_range(1..=16);
        let m = rng.random_range(0..=8);
        let n = rng.random_range(1..=8);
        let params = AttentionParams::random(&mut rng, d, d_out);
        let tensors = PromptTensors::random(&mut rng, d, m, n);
        let linear = linear_attention(&params, &tensors)?;
        decomposition = decomposition.max(max_abs_diff(&decompose(&params, &tensors)?.sum(), &linear));
        let w = zero_shot_weights(&params, &tensors)? + delta_w_icl(&params, &tensors, false)?;
        affine = affine.max(max_abs_diff(&(w * &tensors.query), &linear));

        let scores = DVector::from_iterator(n + 2, (0..n + 2).map(|_| rng.random_range(-5.0..=5.0)));
        let c = rng.random_range(-50.0..=50.0);
        shift = shift.max(max_abs_diff(&softmax(&scores.add_scalar(c)), &softmax(&scores)));
    }

    let mut kkt = 0.0f64;
    let mut restriction = 0.0f64;
    for _ in 0..margin_instances {
        let d = rng.random_range(1..=3);
        let n = rng.random_range(4..=12);
        let (points, labels) = random_separable(&mut rng, d, n, 0.05);
        let sol = solve_hard_margin(&points, &labels)?;
        kkt = kkt.max(kkt_residuals(&points, &labels, &sol).max());
        restriction = restriction.max(support_restriction_deviation(&mut rng, &points, &labels)?);
    }

    let trials = 50;
    let agree = (0..trials)
        .filter(|_| label_direction_agreement(&mut rng, 4))
        .count();

    Ok(TheoryReport {
        seed,
        instances,
        decomposition_max_error: decomposition,
        affine_update_max_error: affine,
        softmax_shift_max_error: shift,
        margin_instances,
        kkt_max_residual: kkt,
        analytic_1d_max_error: analytic_1d_error()?,
        support_restriction_max_deviation: restriction,
        softmax_linear_label_agreement: agree as f64 / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    fn empty(d: usize) -> DMatrix<f64> {
        DMatrix::zeros(0, d)
    }

    #[test]
    fn singleton_softmax_returns_its_value() {
        let mut rng = seed::rng(1);
        let params = AttentionParams::random(&mut rng, 3, 2);
        let x = row(&[0.3, -0.7, 0.2]);
        let t = PromptTensors {
            query: DVector::from_vec(vec![5.0, 1.0, -2.0]),
            test_tokens: x.clone(),
            demo_inputs: empty(3),
            demo_labels: empty(3),
        };
        let out = softmax_attention(&params, &t).unwrap();
        let expected = &params.value * x.transpose();
        assert!(max_abs_diff(&out, &expected.column(0).into_owned()) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        // W_K reads only the first coordinate, W_V the second
        let params = AttentionParams {
            value: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            key: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            query: DMatrix::identity(2, 2),
        };
        let t = PromptTensors {
            query: DVector::from_vec(vec![1.0, 0.0]),
            test_tokens: DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 1.0, -2.0]),
            demo_inputs: empty(2),
            demo_labels: empty(2),
        };
        let out = softmax_attention(&params, &t).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let s = DVector::from_vec(vec![1.0, -3.0, 0.5, 700.0]);
        let shifted = s.add_scalar(-1234.5);
        assert!(max_abs_diff(&softmax(&s), &softmax(&shifted)) < 1e-12);
        assert!((softmax(&s).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_single_term() {
        let x = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let q = DVector::from_vec(vec![0.5, 0.25, 1.0]);
        let t = PromptTensors {
            query: q.clone(),
            test_tokens: DMatrix::from_row_slice(1, 3, x.as_slice()),
            demo_inputs: empty(3),
            demo_labels: empty(3),
        };
        let out = linear_attention(&AttentionParams::identity(3), &t).unwrap();
        let expected = &x * x.dot(&q);
        assert!(max_abs_diff(&out, &expected) < 1e-15);
    }

    #[test]
    fn zero_query_gives_zero() {
        let mut rng = seed::rng(2);
        let params = AttentionParams::random(&mut rng, 4, 3);
        let mut t = PromptTensors::random(&mut rng, 4, 2, 3);
        t.query = DVector::zeros(4);
        assert_eq!(linear_attention(&params, &t).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn decomposition_matches_linear_attention() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let (d, dp) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let params = AttentionParams::random(&mut rng, d, dp);
            let (m, n) = (rng.random_range(0..=8), rng.random_range(0..=8));
            let t = PromptTensors::random(&mut rng, d, m, n);
            let lin = linear_attention(&params, &t).unwrap();
            assert!(max_abs_diff(&decompose(&params, &t).unwrap().sum(), &lin) < 1e-10);
        }
    }

    #[test]
    fn no_demos_zero_demo_terms() {
        let mut rng = seed::rng(4);
        let params = AttentionParams::random(&mut rng, 3, 3);
        let t = PromptTensors::random(&mut rng, 3, 2, 0);
        let dec = decompose(&params, &t).unwrap();
        assert_eq!(dec.demo_inputs, DVector::zeros(3));
        assert_eq!(dec.demo_labels, DVector::zeros(3));
        assert_eq!(delta_w_icl(&params, &t, false), Err(TheoryError::NoDemos));
    }

    #[test]
    fn equal_demo_blocks_give_equal_terms() {
        let mut rng = seed::rng(5);
        let params = AttentionParams::random(&mut rng, 3, 2);
        let mut t = PromptTensors::random(&mut rng, 3, 2, 3);
        t.demo_labels = t.demo_inputs.clone();
        let dec = decompose(&params, &t).unwrap();
        assert_eq!(dec.demo_inputs, dec.demo_labels);
    }

    #[test]
    fn affine_update_identity() {
        let mut rng = seed::rng(6);
        for _ in 0..200 {
            let (d, dp) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let params = AttentionParams::random(&mut rng, d, dp);
            let (m, n) = (rng.random_range(0..=8), rng.random_range(1..=8));
            let t = PromptTensors::random(&mut rng, d, m, n);
            let w = zero_shot_weights(&params, &t).unwrap() + delta_w_icl(&params, &t, false).unwrap();
            assert!(max_abs_diff(&(w * &t.query), &linear_attention(&params, &t).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn simplified_single_demo_is_outer_product() {
        let t = PromptTensors {
            query: DVector::zeros(2),
            test_tokens: empty(2),
            demo_inputs: row(&[1.0, 2.0]),
            demo_labels: row(&[3.0, -1.0]),
        };
        let dw = delta_w_icl(&AttentionParams::identity(2), &t, true).unwrap();
        assert_eq!(dw, DMatrix::from_row_slice(2, 2, &[3.0, 6.0, -1.0, -2.0]));
        assert_eq!(dw.rank(1e-12), 1);
    }

    #[test]
    fn delta_w_is_additive_over_demos() {
        let mut rng = seed::rng(7);
        let params = AttentionParams::random(&mut rng, 4, 3);
        let t = PromptTensors::random(&mut rng, 4, 2, 5);
        for simplified in [false, true] {
            let all = delta_w_icl(&params, &t, simplified).unwrap();
            let a = delta_w_icl(&params, &t.select_demos(&[0, 1]), simplified).unwrap();
            let b = delta_w_icl(&params, &t.select_demos(&[2, 3, 4]), simplified).unwrap();
            assert!((all - (a + b)).amax() < 1e-12);
        }
    }

    #[test]
    fn simplified_form_from_concatenated_tokens() {
        // one [x; y] token per demo, W_V reads y, W_K and W_Q read x
        let mut rng = seed::rng(8);
        let d0 = 3;
        let n = 4;
        let x = uniform_matrix(&mut rng, n, d0);
        let y = uniform_matrix(&mut rng, n, d0);
        let mut concat = DMatrix::zeros(n, 2 * d0);
        concat.columns_mut(0, d0).copy_from(&x);
        concat.columns_mut(d0, d0).copy_from(&y);
        let mut read_x = DMatrix::zeros(d0, 2 * d0);
        let mut read_y = DMatrix::zeros(d0, 2 * d0);
        for i in 0..d0 {
            read_x[(i, i)] = 1.0;
            read_y[(i, d0 + i)] = 1.0;
        }
        let params = AttentionParams {
            value: read_y,
            key: read_x.clone(),
            query: read_x,
        };
        let t = PromptTensors {
            query: DVector::zeros(2 * d0),
            test_tokens: empty(2 * d0),
            demo_inputs: concat,
            demo_labels: empty(2 * d0).resize_vertically(n, 0.0),
        };
        let full = delta_w_icl(&params, &t, false).unwrap();
        let split = PromptTensors {
            query: DVector::zeros(d0),
            test_tokens: empty(d0),
            demo_inputs: x,
            demo_labels: y,
        };
        let simple = delta_w_icl(&AttentionParams::identity(d0), &split, true).unwrap();
        assert!((full.columns(0, d0) - &simple).amax() < 1e-14);
        assert!(full.columns(d0, d0).amax() < 1e-14);
    }

    #[test]
    fn support_vector_split_cases() {
        let mut rng = seed::rng(9);
        let params = AttentionParams::random(&mut rng, 3, 3);
        let t = PromptTensors::random(&mut rng, 3, 2, 4);
        let zero = support_vector_split(&params, &t, &[0.0; 4]).unwrap();
        let dec = decompose(&params, &t).unwrap();
        assert!(max_abs_diff(&zero.output(), &(&dec.test + &dec.demo_labels)) < 1e-14);

        let ones = support_vector_split(&params, &t, &[1.0; 4]).unwrap();
        let dw = delta_w_icl(&params, &t, true).unwrap();
        let expected = &dec.test + &dec.demo_labels + dw * &t.query;
        assert!(max_abs_diff(&ones.output(), &expected) < 1e-12);

        let bad = AttentionParams::random(&mut rng, 3, 2);
        assert!(matches!(support_vector_split(&bad, &t, &[0.0; 4]), Err(TheoryError::ShapeMismatch(_))));
        assert!(support_vector_split(&params, &t, &[0.0; 3]).is_err());
        assert!(support_vector_split(&params, &t, &[-1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut rng = seed::rng(10);
        let params = AttentionParams::random(&mut rng, 3, 2);
        let t = PromptTensors::random(&mut rng, 4, 1, 1);
        assert!(matches!(linear_attention(&params, &t), Err(TheoryError::ShapeMismatch(_))));
        let mut t = PromptTensors::random(&mut rng, 3, 1, 2);
        t.demo_labels = uniform_matrix(&mut rng, 1, 3);
        assert!(matches!(decompose(&params, &t), Err(TheoryError::ShapeMismatch(_))));
        let t = PromptTensors::random(&mut rng, 3, 0, 0);
        assert_eq!(softmax_attention(&params, &t), Err(TheoryError::EmptySequence));
    }

    #[test]
    fn analytic_one_dimensional_margin() {
        let points = vec![vec![1.0], vec![-2.0], vec![3.0], vec![6.0]];
        let labels = [-1.0, -1.0, 1.0, 1.0];
        let sol = solve_hard_margin(&points, &labels).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-12);
        assert!((sol.bias + 2.0).abs() < 1e-12);
        assert!((sol.beta[0] - 0.5).abs() < 1e-12 && (sol.beta[2] - 0.5).abs() < 1e-12);
        assert_eq!((sol.beta[1], sol.beta[3]), (0.0, 0.0));
        assert_eq!(sol.support, vec![0, 2]);
        assert!((sol.geometric_margin - 1.0).abs() < 1e-12);
        assert!(analytic_1d_error().unwrap() < 1e-12);
    }

    #[test]
    fn symmetric_pair() {
        let points = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let sol = solve_hard_margin(&points, &[-1.0, 1.0]).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-12 && sol.weights[1].abs() < 1e-12);
        assert!(sol.bias.abs() < 1e-12);
        assert!((sol.geometric_margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_duplicate_does_not_move_the_separator() {
        let points = vec![vec![1.0], vec![-2.0], vec![3.0], vec![6.0]];
        let labels = vec![-1.0, -1.0, 1.0, 1.0];
        let base = solve_hard_margin(&points, &labels).unwrap();
        let mut more = points.clone();
        more.push(vec![6.0]);
        let mut more_labels = labels.clone();
        more_labels.push(1.0);
        let sol = solve_hard_margin(&more, &more_labels).unwrap();
        assert_eq!((sol.weights.clone(), sol.bias), (base.weights.clone(), base.bias));
        assert_eq!(sol.geometric_margin, base.geometric_margin);
        assert_eq!(sol.beta[4], 0.0);
    }

    #[test]
    fn margin_errors() {
        assert_eq!(
            solve_hard_margin(&[vec![0.0], vec![1.0], vec![2.0]], &[1.0, -1.0, 1.0]),
            Err(TheoryError::NotSeparable)
        );
        assert_eq!(solve_hard_margin(&[vec![0.0], vec![1.0]], &[1.0, 1.0]), Err(TheoryError::NotSeparable));
        assert_eq!(solve_hard_margin(&[vec![0.0], vec![1.0]], &[1.0, 0.5]), Err(TheoryError::InvalidLabel));
        let many: Vec<Vec<f64>> = (0..65).map(|i| vec![i as f64]).collect();
        let labels: Vec<f64> = (0..65).map(|i| if i < 30 { -1.0 } else { 1.0 }).collect();
        assert!(matches!(solve_hard_margin(&many, &labels), Err(TheoryError::TooLarge(_))));
    }

    #[test]
    fn kkt_on_random_instances() {
        let mut rng = seed::rng(11);
        for _ in 0..50 {
            let d = rng.random_range(1..=3);
            let n = rng.random_range(4..=12);
            let (points, labels) = random_separable(&mut rng, d, n, 0.05);
            let sol = solve_hard_margin(&points, &labels).unwrap();
            let r = kkt_residuals(&points, &labels, &sol);
            assert!(r.max() < 1e-8, "{r:?}");
            assert!(sol.support.len() <= d + 1);
        }
    }

    #[test]
    fn softmax_and_linear_agree_on_separated_instance() {
        let mut rng = seed::rng(12);
        assert!(label_direction_agreement(&mut rng, 4));
    }

    #[test]
    fn report_is_deterministic() {
        let a = theory_check(5, 20, 5).unwrap();
        let b = theory_check(5, 20, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.passes(1e-10, 1e-8));
    }
}
