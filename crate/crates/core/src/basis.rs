//! Hierarchical shape functions on the reference hypercube `[-1, 1]^d` and
//! Gauss–Legendre quadrature.
//!
//! The 1D family is
//!
//! ```text
//! psi_0(t) = (1 - t) / 2,   psi_1(t) = (1 + t) / 2,
//! psi_j(t) = (L_j(t) - L_{j-2}(t)) / (2j - 1),   j >= 2,
//! ```
//!
//! i.e. the nodal hats followed by the integrated Legendre polynomials, which
//! vanish at both endpoints. Tensor products of these give the element basis
//! in `d` dimensions.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Highest polynomial degree accepted anywhere in the library.
pub const MAX_DEGREE: usize = 30;

/// Largest supported Gauss–Legendre rule.
pub const MAX_GAUSS_POINTS: usize = 64;

/// Legendre polynomial `L_j(t)` via the Bonnet recursion.
pub fn legendre(j: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    match j {
        0 => 1.0,
        1 => t,
        _ => {
            for k in 2..=j {
                let kf = k as f64;
                let next = ((2.0 * kf - 1.0) * t * cur - (kf - 1.0) * prev) / kf;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Fills `out[0..=p]` with `L_0(t), ..., L_p(t)`.
pub fn legendre_all(p: usize, t: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if p >= 1 {
        out[1] = t;
    }
    for k in 2..=p {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * t * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// The 1D hierarchical shape function `psi_j(t)`.
pub fn psi(j: usize, t: f64) -> f64 {
    match j {
        0 => 0.5 * (1.0 - t),
        1 => 0.5 * (1.0 + t),
        _ => (legendre(j, t) - legendre(j - 2, t)) / (2.0 * j as f64 - 1.0),
    }
}

/// Derivative `psi_j'(t)`; equals `L_{j-1}(t)` for `j >= 2`.
pub fn psi_deriv(j: usize, t: f64) -> f64 {
    match j {
        0 => -0.5,
        1 => 0.5,
        _ => legendre(j - 1, t),
    }
}

/// Values and derivatives of `psi_0..=psi_p` at `t`.
///
/// `vals` and `ders` must hold at least `p + 1` entries.
pub fn psi_all(p: usize, t: f64, vals: &mut [f64], ders: &mut [f64]) {
    let mut leg = [0.0; MAX_DEGREE + 2];
    legendre_all(p.max(1), t, &mut leg);
    vals[0] = 0.5 * (1.0 - t);
    ders[0] = -0.5;
    if p >= 1 {
        vals[1] = 0.5 * (1.0 + t);
        ders[1] = 0.5;
    }
    for j in 2..=p {
        vals[j] = (leg[j] - leg[j - 2]) / (2.0 * j as f64 - 1.0);
        ders[j] = leg[j - 1];
    }
}

/// A multi-index `(j_1, ..., j_d)` of nonnegative integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn new(entries: impl Into<Vec<usize>>) -> Self {
        MultiIndex(entries.into())
    }

    pub fn zeros(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|j| = j_1 + ... + j_d`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max_entry(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, j) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, ")")
    }
}

/// Tensor-product function `psi_j(x) = prod_k psi_{j_k}(x_k)` and its gradient.
pub fn psi_tensor(j: &MultiIndex, x: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(j.dim(), x.len(), "multi-index and point dimension differ");
    let d = x.len();
    let vals: Vec<f64> = (0..d).map(|k| psi(j.0[k], x[k])).collect();
    let ders: Vec<f64> = (0..d).map(|k| psi_deriv(j.0[k], x[k])).collect();
    let value = vals.iter().product();
    let grad = (0..d)
        .map(|k| {
            (0..d)
                .map(|m| if m == k { ders[m] } else { vals[m] })
                .product()
        })
        .collect();
    (value, grad)
}

/// Local enumeration of the tensor functions `psi_j`, `j in {0..=degree}^d`.
///
/// Position `pos(j) = sum_k (degree + 1)^k j_k` (0-based, first axis fastest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    pub dim: usize,
    pub degree: usize,
}

impl Frame {
    pub fn new(dim: usize, degree: usize) -> Self {
        Frame { dim, degree }
    }

    /// Number of local functions `M = (degree + 1)^dim`.
    pub fn size(&self) -> usize {
        (self.degree + 1).pow(self.dim as u32)
    }

    pub fn pos(&self, j: &[usize]) -> usize {
        debug_assert_eq!(j.len(), self.dim);
        let base = self.degree + 1;
        j.iter().rev().fold(0, |acc, &jk| acc * base + jk)
    }

    pub fn multi(&self, mut pos: usize) -> Vec<usize> {
        let base = self.degree + 1;
        (0..self.dim)
            .map(|_| {
                let jk = pos % base;
                pos /= base;
                jk
            })
            .collect()
    }

    /// All multi-indices of the frame in position order.
    pub fn indices(&self) -> Vec<Vec<usize>> {
        (0..self.size()).map(|p| self.multi(p)).collect()
    }
}

/// Evaluates every tensor function of `frame` at the reference point `x`.
///
/// Returns values (length `M`) and gradients (row-major `M x d`).
pub fn frame_eval(frame: Frame, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = frame.dim;
    let p = frame.degree;
    let mut vals1 = vec![[0.0; MAX_DEGREE + 2]; d];
    let mut ders1 = vec![[0.0; MAX_DEGREE + 2]; d];
    for k in 0..d {
        psi_all(p, x[k], &mut vals1[k], &mut ders1[k]);
    }
    let m = frame.size();
    let mut vals = vec![0.0; m];
    let mut grads = vec![0.0; m * d];
    for (pos, v) in vals.iter_mut().enumerate() {
        let j = frame.multi(pos);
        *v = (0..d).map(|k| vals1[k][j[k]]).product();
        for k in 0..d {
            grads[pos * d + k] = (0..d)
                .map(|q| {
                    if q == k {
                        ders1[q][j[q]]
                    } else {
                        vals1[q][j[q]]
                    }
                })
                .product();
        }
    }
    (vals, grads)
}

/// A 1D quadrature rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The rule transported to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        (
            self.nodes.iter().map(|t| mid + half * t).collect(),
            self.weights.iter().map(|w| w * half).collect(),
        )
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }

    /// `∫_a^b f`.
    pub fn integrate_on(&self, f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(mid + half * t))
            .sum::<f64>()
    }
}

/// Gauss–Legendre rule with `n` points on `[-1, 1]`.
pub fn gauss_rule(n: usize) -> Result<QuadRule> {
    if n == 0 || n > MAX_GAUSS_POINTS {
        return invalid(format!(
            "gauss rule needs 1..={MAX_GAUSS_POINTS} points, got {n}"
        ));
    }
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi-type initial guess for the i-th largest root
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, p_prev) = legendre_pair(n, x);
            dp = nf * (x * p - p_prev) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (p, p_prev) = legendre_pair(n, x);
        dp = if p.is_finite() {
            nf * (x * p - p_prev) / (x * x - 1.0)
        } else {
            dp
        };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadRule { nodes, weights })
}

fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * cur - (kf - 1.0) * prev) / kf;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Composite Gauss rule on `[a, b]` with panels graded geometrically toward `a`.
///
/// Breakpoints are `a + (b - a) * ratio^k`, `k = 0..panels-1`, plus `a` itself,
/// so the innermost panel has width `(b - a) * ratio^(panels - 1)`.
pub fn graded_rule(
    a: f64,
    b: f64,
    ratio: f64,
    panels: usize,
    points: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(ratio > 0.0 && ratio < 1.0) || panels == 0 || b <= a {
        return invalid("graded rule needs 0 < ratio < 1, panels >= 1 and a < b");
    }
    let base = gauss_rule(points)?;
    let mut breaks = vec![a];
    for k in (0..panels - 1).rev() {
        breaks.push(a + (b - a) * ratio.powi(k as i32 + 1));
    }
    breaks.push(b);
    let mut nodes = Vec::with_capacity(panels * points);
    let mut weights = Vec::with_capacity(panels * points);
    for w in breaks.windows(2) {
        let (x, wt) = base.mapped(w[0], w[1]);
        nodes.extend(x);
        weights.extend(wt);
    }
    Ok((nodes, weights))
}
