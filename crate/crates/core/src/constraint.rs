//! Constraint coefficients: expansion of a shape function restricted to a
//! sub-box in the sub-box's own hierarchical basis.
//!
//! In 1D, for `I = [a, b] ⊆ [-1, 1]` and `F_I(t) = alpha t + beta`,
//!
//! ```text
//! psi_i|_I = sum_{j <= i} b_{i,j} (psi_j ∘ F_I^{-1})
//! ```
//!
//! (the 2x2 block of the nodal functions is full). Tensor coefficients are
//! products of the 1D ones.

use crate::basis::Frame;
use crate::error::{invalid, Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Lower-triangular table of 1D constraint coefficients for one subinterval.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTable1D {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_degree: usize,
    // row i holds entries j = 0..=max(i, 1)
    rows: Vec<Vec<f64>>,
}

impl CoeffTable1D {
    /// `b_{i,j}`; zero outside the stored pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows
            .get(i)
            .and_then(|r| r.get(j))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Dense `(p+1) x (p+1)` view.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.max_degree + 1;
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }
}

/// Fills the constraint-coefficient table of `[a, b]` up to degree `p`.
pub fn coeffs_1d(a: f64, b: f64, p: usize) -> Result<CoeffTable1D> {
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return invalid(format!("degenerate interval [{a}, {b}]"));
    }
    if a < -1.0 || b > 1.0 {
        return invalid(format!("interval [{a}, {b}] leaves [-1, 1]"));
    }
    if p > crate::basis::MAX_DEGREE {
        return invalid(format!("degree {p} exceeds {}", crate::basis::MAX_DEGREE));
    }
    let alpha = 0.5 * (b - a);
    let beta = 0.5 * (a + b);
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    t.push(vec![0.5 * (1.0 + alpha - beta), 0.5 * (1.0 - alpha - beta)]);
    t.push(vec![0.5 * (1.0 - alpha + beta), 0.5 * (1.0 + alpha + beta)]);
    if p >= 2 {
        t.push(vec![
            0.5 * ((alpha - beta).powi(2) - 1.0),
            0.5 * ((alpha + beta).powi(2) - 1.0),
            alpha * alpha,
        ]);
    }
    for i in 3..=p {
        let fi = i as f64;
        let c1 = (2.0 * fi - 3.0) / fi;
        let c2 = (fi - 3.0) / fi;
        let prev = &t[i - 1];
        let prev2 = &t[i - 2];
        let g = |r: &Vec<f64>, j: usize| r.get(j).copied().unwrap_or(0.0);
        let mut row = vec![0.0; i + 1];
        row[0] = c1 * (beta - alpha) * prev[0] - c2 * prev2[0];
        row[1] = c1 * (alpha + beta) * prev[1] - c2 * prev2[1];
        row[2] = c1 * (alpha * (g(prev, 3) / 5.0 - (prev[0] - prev[1])) + beta * prev[2])
            - c2 * g(prev2, 2);
        for j in 3..i.saturating_sub(1) {
            let fj = j as f64;
            row[j] = c1
                * (alpha
                    * (fj / (2.0 * fj - 3.0) * prev[j - 1]
                        + (fj - 1.0) / (2.0 * fj + 1.0) * g(prev, j + 1))
                    + beta * prev[j])
                - c2 * g(prev2, j);
        }
        if i >= 4 {
            row[i - 1] =
                c1 * ((fi - 1.0) / (2.0 * fi - 5.0) * alpha * prev[i - 2] + beta * prev[i - 1]);
        }
        row[i] = alpha * prev[i - 1];
        t.push(row);
    }
    t.truncate(p + 1);
    Ok(CoeffTable1D {
        a,
        b,
        alpha,
        beta,
        max_degree: p,
        rows: t,
    })
}

/// `prod_k b^{I_k}_{i_k, j_k}`.
pub fn coeff_tensor(i: &[usize], j: &[usize], tables: &[&CoeffTable1D]) -> Result<f64> {
    if i.len() != j.len() || i.len() != tables.len() {
        return invalid(format!(
            "dimension mismatch: |i| = {}, |j| = {}, tables = {}",
            i.len(),
            j.len(),
            tables.len()
        ));
    }
    let mut v = 1.0;
    for k in 0..i.len() {
        if i[k] > tables[k].max_degree {
            return invalid(format!(
                "table covers degree {} but i_k = {}",
                tables[k].max_degree, i[k]
            ));
        }
        v *= tables[k].get(i[k], j[k]);
    }
    Ok(v)
}

type CacheKey = (u64, u64, usize);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<CoeffTable1D>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<CoeffTable1D>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached variant of [`coeffs_1d`].
pub fn cached_coeffs_1d(a: f64, b: f64, p: usize) -> Result<Arc<CoeffTable1D>> {
    let key = (a.to_bits(), b.to_bits(), p);
    if let Some(t) = cache().lock().map_err(|_| poisoned())?.get(&key) {
        return Ok(t.clone());
    }
    let t = Arc::new(coeffs_1d(a, b, p)?);
    cache()
        .lock()
        .map_err(|_| poisoned())?
        .insert(key, t.clone());
    Ok(t)
}

fn poisoned() -> Error {
    Error::Internal("constraint table cache poisoned".into())
}

/// Reference sub-box `T_i` of the refinement of `[-1,1]^d` at `z`.
pub fn child_box(child: &[usize], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if child.len() != z.len() {
        return invalid("child index and refinement point differ in dimension");
    }
    let mut lo = Vec::with_capacity(z.len());
    let mut hi = Vec::with_capacity(z.len());
    for (&ik, &zk) in child.iter().zip(z) {
        if ik > 1 {
            return invalid(format!("child index entries must be 0 or 1, got {ik}"));
        }
        if !(zk > -1.0 && zk < 1.0) {
            return invalid(format!("refinement point {zk} not strictly interior"));
        }
        let corner = 2.0 * ik as f64 - 1.0;
        lo.push(corner.min(zk));
        hi.push(corner.max(zk));
    }
    Ok((lo, hi))
}

/// Matrix `B_i` with entries `b^{T_i}_{k,l}` for one child of a refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildBMatrix {
    pub child: Vec<usize>,
    pub frame: Frame,
    pub matrix: DMatrix<f64>,
}

impl ChildBMatrix {
    /// Nonzero entries of row `k` as `(l, value)`.
    pub fn row_nonzeros(&self, k: usize) -> Vec<(usize, f64)> {
        (0..self.matrix.ncols())
            .filter_map(|l| {
                let v = self.matrix[(k, l)];
                (v != 0.0).then_some((l, v))
            })
            .collect()
    }
}

/// Builds `B_i` for child `child` of the refinement of `[-1,1]^d` at `z`.
pub fn child_b_matrix(child: &[usize], p_max: usize, z: &[f64]) -> Result<ChildBMatrix> {
    let (lo, hi) = child_box(child, z)?;
    let d = child.len();
    let tables = (0..d)
        .map(|k| cached_coeffs_1d(lo[k], hi[k], p_max))
        .collect::<Result<Vec<_>>>()?;
    let frame = Frame::new(d, p_max);
    let m = frame.size();
    let idx = frame.indices();
    let mut matrix = DMatrix::zeros(m, m);
    for (r, kk) in idx.iter().enumerate() {
        for (c, ll) in idx.iter().enumerate() {
            let mut v = 1.0;
            for q in 0..d {
                v *= tables[q].get(kk[q], ll[q]);
                if v == 0.0 {
                    break;
                }
            }
            matrix[(r, c)] = v;
        }
    }
    Ok(ChildBMatrix {
        child: child.to_vec(),
        frame,
        matrix,
    })
}
