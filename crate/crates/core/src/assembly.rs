//! Local and global assembly of `a(v, w) = int eps grad v . grad w + kappa v w`
//! and `b(v) = int f v`, plus the SPD solvers used for global and local
//! systems.

use crate::basis::{frame_eval, gauss_rule, psi_all, Frame, MAX_DEGREE};
use crate::error::{invalid, Error, Result};
use crate::mesh::ElementMap;
use crate::space::HpSpace;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Optional replacement quadrature for the load integral on a cell
/// `[lo, hi]`: physical points and weights.
pub type LoadRule = Arc<dyn Fn(&[f64], &[f64]) -> Option<(Vec<Vec<f64>>, Vec<f64>)> + Send + Sync>;

#[derive(Clone)]
pub enum Source {
    Constant(f64),
    Field(ScalarField),
}

impl Source {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Field(f) => f(x),
        }
    }
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Field(_) => write!(f, "Field(..)"),
        }
    }
}

#[derive(Clone)]
pub struct ProblemForms {
    pub diffusion: f64,
    pub reaction: f64,
    pub source: Source,
    pub load_rule: Option<LoadRule>,
}

impl fmt::Debug for ProblemForms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemForms")
            .field("diffusion", &self.diffusion)
            .field("reaction", &self.reaction)
            .field("source", &self.source)
            .field("load_rule", &self.load_rule.is_some())
            .finish()
    }
}

impl ProblemForms {
    pub fn new(diffusion: f64, reaction: f64, source: Source) -> Result<Self> {
        if !(diffusion > 0.0) || !(reaction >= 0.0) {
            return invalid(format!(
                "need diffusion > 0 and reaction >= 0, got {diffusion}, {reaction}"
            ));
        }
        Ok(ProblemForms {
            diffusion,
            reaction,
            source,
            load_rule: None,
        })
    }

    pub fn with_load_rule(mut self, rule: LoadRule) -> Self {
        self.load_rule = Some(rule);
        self
    }
}

/// `A_K` and `b_K` of one cell in the frame of degree `frame.degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCellMatrices {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub frame: Frame,
}

/// Reference 1D stiffness and mass matrices of `psi_0..=psi_p` on `[-1, 1]`.
fn reference_1d(p: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rule = gauss_rule(p + 3)?;
    let n = p + 1;
    let mut k = DMatrix::zeros(n, n);
    let mut m = DMatrix::zeros(n, n);
    let mut v = [0.0; MAX_DEGREE + 2];
    let mut dv = [0.0; MAX_DEGREE + 2];
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        psi_all(p, t, &mut v, &mut dv);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] += w * dv[i] * dv[j];
                m[(i, j)] += w * v[i] * v[j];
            }
        }
    }
    Ok((k, m))
}

fn load_points(
    forms: &ProblemForms,
    lo: &[f64],
    hi: &[f64],
    p: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if let Some(rule) = &forms.load_rule {
        if let Some(pw) = rule(lo, hi) {
            return Ok(pw);
        }
    }
    let d = lo.len();
    let r = gauss_rule(p + 3)?;
    let q = r.len();
    let mut pts = Vec::with_capacity(q.pow(d as u32));
    let mut wts = Vec::with_capacity(q.pow(d as u32));
    for c in 0..q.pow(d as u32) {
        let mut rest = c;
        let mut x = vec![0.0; d];
        let mut w = 1.0;
        for k in 0..d {
            let i = rest % q;
            rest /= q;
            let h = 0.5 * (hi[k] - lo[k]);
            x[k] = 0.5 * (lo[k] + hi[k]) + h * r.nodes[i];
            w *= h * r.weights[i];
        }
        pts.push(x);
        wts.push(w);
    }
    Ok((pts, wts))
}

/// Local matrices on the axis-parallel box `[lo, hi]` for the frame of degree `p`.
pub fn local_matrices(
    forms: &ProblemForms,
    lo: &[f64],
    hi: &[f64],
    p: usize,
) -> Result<LocalCellMatrices> {
    let d = lo.len();
    if p > MAX_DEGREE {
        return invalid(format!("degree {p} exceeds {MAX_DEGREE}"));
    }
    if (0..d).any(|k| !(hi[k] > lo[k])) {
        return invalid("cell must have positive extent in every direction");
    }
    let (k1, m1) = reference_1d(p)?;
    let frame = Frame::new(d, p);
    let idx = frame.indices();
    let h: Vec<f64> = (0..d).map(|k| hi[k] - lo[k]).collect();
    let det: f64 = h.iter().map(|hk| 0.5 * hk).product();
    let scale: Vec<f64> = h.iter().map(|hk| 4.0 / (hk * hk)).collect();
    let n = frame.size();
    let mut a = DMatrix::zeros(n, n);
    for (r, ir) in idx.iter().enumerate() {
        for (c, ic) in idx.iter().enumerate().skip(r) {
            let mass: Vec<f64> = (0..d).map(|q| m1[(ir[q], ic[q])]).collect();
            let mut v = forms.reaction * mass.iter().product::<f64>();
            for k in 0..d {
                let mut t = forms.diffusion * scale[k] * k1[(ir[k], ic[k])];
                for q in (0..d).filter(|&q| q != k) {
                    t *= mass[q];
                }
                v += t;
            }
            a[(r, c)] = det * v;
            a[(c, r)] = det * v;
        }
    }
    let (pts, wts) = load_points(forms, lo, hi, p)?;
    let mut b = DVector::zeros(n);
    for (x, w) in pts.iter().zip(&wts) {
        let f = forms.source.value(x);
        if f == 0.0 {
            continue;
        }
        let xr: Vec<f64> = (0..d)
            .map(|k| (2.0 * x[k] - lo[k] - hi[k]) / h[k])
            .collect();
        let (vals, _) = frame_eval(frame, &xr);
        for i in 0..n {
            b[i] += w * f * vals[i];
        }
    }
    Ok(LocalCellMatrices { a, b, frame })
}

/// Local matrices for a general multilinear cell, by full tensor Gauss
/// quadrature with the Jacobian evaluated pointwise.
pub fn local_matrices_mapped(
    forms: &ProblemForms,
    map: &ElementMap,
    p: usize,
) -> Result<LocalCellMatrices> {
    let d = map.dim;
    let frame = Frame::new(d, p);
    let n = frame.size();
    let r = gauss_rule(p + 3)?;
    let q = r.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for c in 0..q.pow(d as u32) {
        let mut rest = c;
        let mut xr = vec![0.0; d];
        let mut w = 1.0;
        for k in 0..d {
            let i = rest % q;
            rest /= q;
            xr[k] = r.nodes[i];
            w *= r.weights[i];
        }
        let (x, jac) = map.apply(&xr);
        let det = jac.determinant();
        if !(det > 0.0) {
            return invalid(format!("non-positive Jacobian determinant {det} at {xr:?}"));
        }
        let jinv_t = jac
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular element map".into()))?
            .transpose();
        let (vals, grads) = frame_eval(frame, &xr);
        let phys: Vec<DVector<f64>> = (0..n)
            .map(|i| &jinv_t * DVector::from_column_slice(&grads[i * d..(i + 1) * d]))
            .collect();
        let wd = w * det;
        let f = forms.source.value(&x);
        for i in 0..n {
            b[i] += wd * f * vals[i];
            for j in 0..n {
                a[(i, j)] += wd
                    * (forms.diffusion * phys[i].dot(&phys[j])
                        + forms.reaction * vals[i] * vals[j]);
            }
        }
    }
    Ok(LocalCellMatrices { a, b, frame })
}

/// Compressed-row sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(n: usize, rows: Vec<HashMap<usize, f64>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut entries: Vec<(usize, f64)> = row.into_iter().collect();
            entries.sort_unstable_by_key(|e| e.0);
            for (c, v) in entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)]))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(m.nrows(), rows)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.get(i, i))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|k| self.vals[k] * x[self.cols[k]])
                .sum()
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[k])] = self.vals[k];
            }
        }
        m
    }
}

/// Contribution of one leaf: local dof list and the dense block on it.
fn leaf_contribution(
    space: &HpSpace,
    forms: &ProblemForms,
    leaf: usize,
) -> Result<(Vec<usize>, DMatrix<f64>, DVector<f64>)> {
    let e = space.mesh.element(leaf);
    let loc = space.local(leaf)?;
    let cell = local_matrices(forms, &e.lo, &e.hi, loc.degree)?;
    let dofs = loc.dofs();
    let index: HashMap<usize, usize> = dofs.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let m = cell.frame.size();
    let mut c = DMatrix::zeros(dofs.len(), m);
    for &(i, pos, v) in &loc.terms {
        c[(index[&i], pos)] += v;
    }
    let a = &c * &cell.a * c.transpose();
    let b = &c * &cell.b;
    Ok((dofs, a, b))
}

/// Global stiffness matrix and load vector over the free DOFs of `space`.
pub fn assemble_global(space: &HpSpace, forms: &ProblemForms) -> Result<(CsrMatrix, DVector<f64>)> {
    let n = space.n_dofs();
    let parts = space
        .leaves()
        .par_iter()
        .map(|&l| leaf_contribution(space, forms, l))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
    let mut b = DVector::zeros(n);
    for (dofs, a, bl) in parts {
        for (r, &i) in dofs.iter().enumerate() {
            b[i] += bl[r];
            for (c, &j) in dofs.iter().enumerate() {
                let v = a[(r, c)];
                if v != 0.0 {
                    *rows[i].entry(j).or_insert(0.0) += v;
                }
            }
        }
    }
    Ok((CsrMatrix::from_rows(n, rows), b))
}

/// Cholesky factor-and-solve for a small dense SPD matrix.
///
/// A pivot is rejected when it falls below `1e-13` times the original
/// diagonal entry of its row.
pub fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return invalid("cholesky_solve needs a square matrix and a matching right-hand side");
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 1e-13 * a[(j, j)].abs()) || !(s > 0.0) {
            return Err(Error::SingularSystem {
                row: j,
                pivot: s,
                diagonal: a[(j, j)],
            });
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    Ok(y)
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients.
pub fn pcg(
    a: &CsrMatrix,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, CgReport)> {
    let n = a.n;
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((
            DVector::zeros(n),
            CgReport {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::SingularSystem {
            row: i,
            pivot: diag[i],
            diagonal: diag[i],
        });
    }
    let inv: DVector<f64> = diag.map(|v| 1.0 / v);
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = r.component_mul(&inv);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut res = 1.0;
    for it in 0..max_iter {
        let ap = a.mul_vec(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::Internal(format!(
                "CG breakdown: p^T A p = {pap:e} at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        res = r.norm() / bnorm;
        if res <= tol {
            // confirm against the true residual to guard against drift
            let true_res = (b - a.mul_vec(&x)).norm() / bnorm;
            if true_res <= tol * 10.0 {
                return Ok((
                    x,
                    CgReport {
                        iterations: it + 1,
                        relative_residual: true_res,
                    },
                ));
            }
            r = b - a.mul_vec(&x);
            z = r.component_mul(&inv);
            p = z.clone();
            rz = r.dot(&z);
            continue;
        }
        z = r.component_mul(&inv);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual: res,
    })
}

/// Reverse Cuthill-McKee ordering of the sparsity graph; `perm[new] = old`.
pub fn rcm_order(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n;
    let deg: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&i| (deg[i], i));
    for s in starts {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut head = order.len();
        order.push(s);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut nb: Vec<usize> = a.cols[a.row_ptr[v]..a.row_ptr[v + 1]]
                .iter()
                .copied()
                .filter(|&w| !seen[w])
                .collect();
            nb.sort_by_key(|&w| (deg[w], w));
            for w in nb {
                seen[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky after reverse Cuthill-McKee reordering. Pivots are
/// checked as in [`cholesky_solve`]; reported rows refer to the original
/// numbering.
pub fn skyline_solve(a: &CsrMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.n;
    if b.len() != n {
        return invalid("right-hand side length does not match the matrix");
    }
    let perm = rcm_order(a);
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut first = vec![0usize; n];
    for (i, f) in first.iter_mut().enumerate() {
        let old = perm[i];
        *f = a.cols[a.row_ptr[old]..a.row_ptr[old + 1]]
            .iter()
            .map(|&c| inv[c])
            .filter(|&c| c <= i)
            .min()
            .unwrap_or(i);
    }
    let mut start = vec![0usize; n + 1];
    for i in 0..n {
        start[i + 1] = start[i] + (i - first[i] + 1);
    }
    // row i holds columns first[i]..=i at start[i]..start[i+1]
    let mut l = vec![0.0; start[n]];
    for (i, &old) in perm.iter().enumerate() {
        for k in a.row_ptr[old]..a.row_ptr[old + 1] {
            let j = inv[a.cols[k]];
            if j <= i {
                l[start[i] + j - first[i]] = a.vals[k];
            }
        }
    }
    for i in 0..n {
        for j in first[i]..=i {
            let k0 = first[i].max(first[j]);
            let mut s = l[start[i] + j - first[i]];
            for k in k0..j {
                s -= l[start[i] + k - first[i]] * l[start[j] + k - first[j]];
            }
            if j < i {
                l[start[i] + j - first[i]] = s / l[start[j] + j - first[j]];
            } else {
                let diag = a.get(perm[i], perm[i]);
                if !(s > 1e-13 * diag.abs()) || !(s > 0.0) {
                    return Err(Error::SingularSystem {
                        row: perm[i],
                        pivot: s,
                        diagonal: diag,
                    });
                }
                l[start[i] + i - first[i]] = s.sqrt();
            }
        }
    }
    let mut y: Vec<f64> = perm.iter().map(|&o| b[o]).collect();
    for i in 0..n {
        let mut s = y[i];
        for k in first[i]..i {
            s -= l[start[i] + k - first[i]] * y[k];
        }
        y[i] = s / l[start[i] + i - first[i]];
    }
    for i in (0..n).rev() {
        y[i] /= l[start[i] + i - first[i]];
        let yi = y[i];
        for k in first[i]..i {
            y[k] -= l[start[i] + k - first[i]] * yi;
        }
    }
    let mut x = DVector::zeros(n);
    for (i, &o) in perm.iter().enumerate() {
        x[o] = y[i];
    }
    Ok(x)
}

/// Direct envelope Cholesky; see [`skyline_solve`].
pub fn solve_spd(a: &CsrMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    skyline_solve(a, b)
}

/// `u^T A u`.
pub fn energy_norm_sq(a: &CsrMatrix, u: &DVector<f64>) -> f64 {
    u.dot(&a.mul_vec(u))
}
