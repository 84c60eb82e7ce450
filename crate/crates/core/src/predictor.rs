//! Enrichment catalogs, local systems and predicted error reductions.
//!
//! For a leaf `Q` the current solution splits as `u_W = u_loc + u_tilde`
//! with `u_loc` the interior part on `Q`. A catalog of functions
//! `xi_1..xi_L` supported in `Q` defines `Y = span{u_tilde, xi_1..xi_L}`;
//! the bordered system
//!
//! ```text
//! [ a00  c^T ] [eps]   [ delta ]
//! [ c    A   ] [ y ] = [ b - c ]
//! ```
//!
//! yields `de2 = y^T (b - c) - |u_loc|^2 + eps delta`, the exact decrease of
//! the squared energy error when `u_W` is replaced by the Galerkin solution
//! on `Y`. All quantities are assembled over the children of the midpoint
//! refinement of `Q` in a frame of degree `p_Q + 1`.

use crate::assembly::{cholesky_solve, local_matrices, ProblemForms};
use crate::basis::Frame;
use crate::constraint::{child_b_matrix, ChildBMatrix};
use crate::error::{invalid, Error, Result};
use crate::mesh::{incident_children, internal_nodes, refine_box, InternalNode};
use crate::space::HpSpace;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

/// Index set of a p-catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PVariant {
    /// `{2..p_Q+1}^d`.
    #[default]
    Full,
    /// `{ j in {2..p_Q+1}^d : |j| >= p_Q + d }`.
    Surplus,
}

/// A candidate modification of one element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Candidate {
    /// Raise `p_Q` to `p_Q + 1`.
    P,
    /// Split at the midpoint; children (ordered by `sum_k i_k 2^k`) get these degrees.
    Hp(Vec<usize>),
}

impl Candidate {
    pub fn label(&self) -> String {
        match self {
            Candidate::P => "p".to_string(),
            Candidate::Hp(p) => {
                let parts: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                format!("hp({})", parts.join(","))
            }
        }
    }
}

/// One enrichment function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnrichmentFunction {
    /// `psi_j ∘ F_Q^{-1}` on `Q`.
    Bubble(Vec<usize>),
    /// Function attached to an internal node of the refinement.
    Node {
        node: InternalNode,
        degrees: Vec<usize>,
    },
}

/// Enrichment functions of one element with their per-child `D` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentCatalog {
    pub candidate: Candidate,
    pub frame: Frame,
    pub z: Vec<f64>,
    pub functions: Vec<EnrichmentFunction>,
    /// `D_i` (`L x M`) per child `i`, children ordered by `sum_k i_k 2^k`.
    pub d: Vec<DMatrix<f64>>,
}

impl EnrichmentCatalog {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

fn child_tuple(c: usize, d: usize) -> Vec<usize> {
    (0..d).map(|k| c >> k & 1).collect()
}

/// All tuples in `{lo..=hi}^r`, first component fastest.
fn box_tuples(r: usize, lo: usize, hi: usize) -> Vec<Vec<usize>> {
    if hi < lo {
        return if r == 0 { vec![Vec::new()] } else { Vec::new() };
    }
    let w = hi - lo + 1;
    (0..w.pow(r as u32))
        .map(|c| (0..r).map(|k| lo + c / w.pow(k as u32) % w).collect())
        .collect()
}

type BKey = (usize, usize, usize, Vec<u64>);

fn b_cache() -> &'static Mutex<HashMap<BKey, Arc<ChildBMatrix>>> {
    static C: OnceLock<Mutex<HashMap<BKey, Arc<ChildBMatrix>>>> = OnceLock::new();
    C.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached `B_i` for child `c` (linear index) of the refinement at `z`.
pub fn cached_child_b(dim: usize, c: usize, p_max: usize, z: &[f64]) -> Result<Arc<ChildBMatrix>> {
    let key = (
        dim,
        c,
        p_max,
        z.iter().map(|v| (v + 0.0).to_bits()).collect(),
    );
    let poisoned = || Error::Internal("B-matrix cache poisoned".into());
    if let Some(b) = b_cache().lock().map_err(|_| poisoned())?.get(&key) {
        return Ok(b.clone());
    }
    let b = Arc::new(child_b_matrix(&child_tuple(c, dim), p_max, z)?);
    b_cache()
        .lock()
        .map_err(|_| poisoned())?
        .insert(key, b.clone());
    Ok(b)
}

/// p-catalog for explicit bubble indices `js` (each component `>= 2`).
pub fn p_catalog_from_indices(
    dim: usize,
    js: Vec<Vec<usize>>,
    frame_degree: usize,
    z: &[f64],
) -> Result<EnrichmentCatalog> {
    let frame = Frame::new(dim, frame_degree);
    for j in &js {
        if j.len() != dim || j.iter().any(|&v| v < 2 || v > frame_degree) {
            return invalid(format!(
                "bubble index {j:?} outside {{2..{frame_degree}}}^{dim}"
            ));
        }
    }
    let m = frame.size();
    let mut d = Vec::with_capacity(1 << dim);
    for c in 0..1usize << dim {
        let b = cached_child_b(dim, c, frame_degree, z)?;
        let mut di = DMatrix::zeros(js.len(), m);
        for (k, j) in js.iter().enumerate() {
            di.row_mut(k).copy_from(&b.matrix.row(frame.pos(j)));
        }
        d.push(di);
    }
    Ok(EnrichmentCatalog {
        candidate: Candidate::P,
        frame,
        z: z.to_vec(),
        functions: js.into_iter().map(EnrichmentFunction::Bubble).collect(),
        d,
    })
}

/// p-catalog of an element of degree `p_q`, in the frame of degree `frame_degree`.
pub fn build_p_catalog(
    dim: usize,
    p_q: usize,
    variant: PVariant,
    frame_degree: usize,
) -> Result<EnrichmentCatalog> {
    if p_q == 0 || p_q + 1 > frame_degree {
        return invalid(format!(
            "p-catalog for p_Q = {p_q} needs frame degree >= {}",
            p_q + 1
        ));
    }
    let mut js = box_tuples(dim, 2, p_q + 1);
    if variant == PVariant::Surplus {
        js.retain(|j| j.iter().sum::<usize>() >= p_q + dim);
    }
    p_catalog_from_indices(dim, js, frame_degree, &vec![0.0; dim])
}

/// hp-catalog for the refinement at `z` with the given child degrees.
pub fn build_hp_catalog(
    dim: usize,
    child_degrees: &[usize],
    z: &[f64],
    frame_degree: usize,
) -> Result<EnrichmentCatalog> {
    if child_degrees.len() != 1 << dim || z.len() != dim {
        return invalid("hp-catalog needs 2^d child degrees and a d-dimensional refinement point");
    }
    if child_degrees.iter().any(|&p| p == 0 || p > frame_degree) {
        return invalid(format!(
            "child degrees {child_degrees:?} outside 1..={frame_degree}"
        ));
    }
    if z.iter().any(|&v| !(v > -1.0 && v < 1.0)) {
        return invalid("refinement point must be interior");
    }
    let frame = Frame::new(dim, frame_degree);
    let mut functions = Vec::new();
    let mut rows: Vec<Vec<(usize, usize)>> = Vec::new();
    for node in internal_nodes(dim) {
        let r = node.dim();
        let inc = incident_children(&node, dim);
        let p_n = inc
            .iter()
            .map(|i| child_degrees[i.iter().enumerate().map(|(k, &b)| b << k).sum::<usize>()])
            .min()
            .unwrap_or(1);
        for p in box_tuples(r, 2, p_n) {
            let mut entries = Vec::with_capacity(inc.len());
            for i in &inc {
                let mut j: Vec<usize> = i.iter().map(|&b| 1 - b).collect();
                for (q, &a) in node.orientation.iter().enumerate() {
                    j[a - 1] = p[q];
                }
                let c: usize = i.iter().enumerate().map(|(k, &b)| b << k).sum();
                entries.push((c, frame.pos(&j)));
            }
            rows.push(entries);
            functions.push(EnrichmentFunction::Node {
                node: node.clone(),
                degrees: p,
            });
        }
    }
    let m = frame.size();
    let mut d = vec![DMatrix::zeros(rows.len(), m); 1 << dim];
    for (k, entries) in rows.iter().enumerate() {
        for &(c, l) in entries {
            d[c][(k, l)] = 1.0;
        }
    }
    Ok(EnrichmentCatalog {
        candidate: Candidate::Hp(child_degrees.to_vec()),
        frame,
        z: z.to_vec(),
        functions,
        d,
    })
}

type CatalogKey = (usize, Candidate, PVariant, usize);

fn catalog_cache() -> &'static Mutex<HashMap<CatalogKey, Arc<EnrichmentCatalog>>> {
    static C: OnceLock<Mutex<HashMap<CatalogKey, Arc<EnrichmentCatalog>>>> = OnceLock::new();
    C.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Catalog of a candidate for an element of degree `p_q` (midpoint refinement,
/// frame degree `p_q + 1`), shared between elements.
pub fn catalog_for(
    dim: usize,
    p_q: usize,
    candidate: &Candidate,
    variant: PVariant,
) -> Result<Arc<EnrichmentCatalog>> {
    let key = (dim, candidate.clone(), variant, p_q);
    let poisoned = || Error::Internal("catalog cache poisoned".into());
    if let Some(c) = catalog_cache().lock().map_err(|_| poisoned())?.get(&key) {
        return Ok(c.clone());
    }
    let cat = Arc::new(match candidate {
        Candidate::P => build_p_catalog(dim, p_q, variant, p_q + 1)?,
        Candidate::Hp(degs) => build_hp_catalog(dim, degs, &vec![0.0; dim], p_q + 1)?,
    });
    catalog_cache()
        .lock()
        .map_err(|_| poisoned())?
        .insert(key, cat.clone());
    Ok(cat)
}

/// Per-element quantities shared by all catalogs of that element.
#[derive(Debug, Clone)]
pub struct LocalContext {
    pub leaf: usize,
    pub degree: usize,
    pub frame: Frame,
    pub z: Vec<f64>,
    pub children: Vec<(Vec<f64>, Vec<f64>)>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    /// `A_i B_i^T C_Q^T u_tilde` per child.
    pub a_tilde: Vec<DVector<f64>>,
    pub u_loc_norm_sq: f64,
    pub b_u_loc: f64,
    pub global_energy_sq: f64,
}

impl LocalContext {
    pub fn new(
        space: &HpSpace,
        u: &DVector<f64>,
        leaf: usize,
        forms: &ProblemForms,
        global_energy_sq: f64,
    ) -> Result<Self> {
        let d = space.dim();
        let p_q = space.local(leaf)?.degree;
        let p = p_q + 1;
        let frame = Frame::new(d, p);
        let z = vec![0.0; d];
        let e = space.mesh.element(leaf);
        let children = refine_box(&e.lo, &e.hi, &z)?;
        let interior: std::collections::HashSet<usize> =
            space.local(leaf)?.interior.iter().copied().collect();
        let m = frame.size();
        let mut w_tilde = DVector::zeros(m);
        let mut w_loc = DVector::zeros(m);
        for (i, l, c) in space.restriction_terms(leaf, p)? {
            if interior.contains(&i) {
                w_loc[l] += c * u[i];
            } else {
                w_tilde[l] += c * u[i];
            }
        }
        let mut a = Vec::with_capacity(children.len());
        let mut b = Vec::with_capacity(children.len());
        let mut a_tilde = Vec::with_capacity(children.len());
        let mut u_loc_norm_sq = 0.0;
        let mut b_u_loc = 0.0;
        for (c, (lo, hi)) in children.iter().enumerate() {
            let cell = local_matrices(forms, lo, hi, p)?;
            let bm = cached_child_b(d, c, p, &z)?;
            let wt = bm.matrix.tr_mul(&w_tilde);
            let wl = bm.matrix.tr_mul(&w_loc);
            let al = &cell.a * &wl;
            u_loc_norm_sq += wl.dot(&al);
            b_u_loc += cell.b.dot(&wl);
            a_tilde.push(&cell.a * wt);
            a.push(cell.a);
            b.push(cell.b);
        }
        Ok(LocalContext {
            leaf,
            degree: p_q,
            frame,
            z,
            children,
            a,
            b,
            a_tilde,
            u_loc_norm_sq,
            b_u_loc,
            global_energy_sq,
        })
    }

    pub fn a00(&self) -> f64 {
        self.global_energy_sq + self.u_loc_norm_sq - 2.0 * self.b_u_loc
    }

    pub fn delta(&self) -> f64 {
        self.b_u_loc - self.u_loc_norm_sq
    }
}

/// The bordered local system.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSystem {
    pub a00: f64,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub delta: f64,
    pub rhs: DVector<f64>,
    pub u_loc_norm_sq: f64,
}

/// `A = sum D_i A_i D_i^T`, `b = sum D_i b_i`, `c = sum D_i A_i C_i^T u_tilde`.
pub fn assemble_from_context(
    ctx: &LocalContext,
    catalog: &EnrichmentCatalog,
) -> Result<LocalSystem> {
    if catalog.frame != ctx.frame || catalog.d.len() != ctx.a.len() {
        return invalid("catalog frame does not match the element context");
    }
    let l = catalog.len();
    let mut a = DMatrix::zeros(l, l);
    let mut b = DVector::zeros(l);
    let mut c = DVector::zeros(l);
    for (i, di) in catalog.d.iter().enumerate() {
        if di.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = di * &ctx.a[i];
        a += &g * di.transpose();
        b += di * &ctx.b[i];
        c += di * &ctx.a_tilde[i];
    }
    let a = 0.5 * (&a + a.transpose());
    let rhs = &b - &c;
    Ok(LocalSystem {
        a00: ctx.a00(),
        c,
        a,
        b,
        delta: ctx.delta(),
        rhs,
        u_loc_norm_sq: ctx.u_loc_norm_sq,
    })
}

/// Builds the local system of `catalog` on `leaf` directly.
pub fn assemble_local_system(
    space: &HpSpace,
    u: &DVector<f64>,
    leaf: usize,
    catalog: &EnrichmentCatalog,
    forms: &ProblemForms,
    global_energy_sq: f64,
) -> Result<LocalSystem> {
    let ctx = LocalContext::new(space, u, leaf, forms, global_energy_sq)?;
    assemble_from_context(&ctx, catalog)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub delta_e_sq: f64,
    pub eps: f64,
    pub y: DVector<f64>,
}

/// Threshold on `a00` below which `u_tilde` is treated as zero.
pub const A00_ZERO: f64 = 1e-14;

/// Solves the bordered system and evaluates the predicted reduction.
pub fn predicted_reduction(sys: &LocalSystem) -> Result<Prediction> {
    let l = sys.a.nrows();
    let dependent = |e: Error| match e {
        Error::SingularSystem {
            row,
            pivot,
            diagonal,
        } => Error::DependentEnrichment(format!(
            "pivot {pivot:e} at row {row} (diagonal {diagonal:e})"
        )),
        other => other,
    };
    let (eps, y) = if sys.a00 <= A00_ZERO {
        (0.0, cholesky_solve(&sys.a, &sys.rhs).map_err(dependent)?)
    } else {
        let mut m = DMatrix::zeros(l + 1, l + 1);
        m[(0, 0)] = sys.a00;
        for k in 0..l {
            m[(0, k + 1)] = sys.c[k];
            m[(k + 1, 0)] = sys.c[k];
        }
        m.view_mut((1, 1), (l, l)).copy_from(&sys.a);
        let mut r = DVector::zeros(l + 1);
        r[0] = sys.delta;
        r.rows_mut(1, l).copy_from(&sys.rhs);
        let x = cholesky_solve(&m, &r).map_err(dependent)?;
        (x[0], x.rows(1, l).into_owned())
    };
    let delta_e_sq = y.dot(&sys.rhs) - sys.u_loc_norm_sq + eps * sys.delta;
    Ok(Prediction { delta_e_sq, eps, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub p_variant: PVariant,
    /// Elements at this degree get no p-candidate.
    pub p_cap: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            p_variant: PVariant::Full,
            p_cap: 20,
        }
    }
}

/// Competing candidates for an element of degree `p_q`, in evaluation order.
pub fn candidates(dim: usize, p_q: usize, config: &PredictorConfig) -> Vec<Candidate> {
    let mut out = Vec::new();
    if p_q < config.p_cap {
        out.push(Candidate::P);
    }
    if dim == 1 {
        for p0 in 1..=p_q {
            out.push(Candidate::Hp(vec![p0, p_q + 1 - p0]));
        }
    } else {
        out.push(Candidate::Hp(vec![p_q; 1 << dim]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub candidate: Candidate,
    /// `None` when the enrichment set was numerically dependent.
    pub delta_e_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementPrediction {
    pub leaf: usize,
    pub best: Option<Candidate>,
    pub delta_e_sq: f64,
    pub candidates: Vec<CandidateResult>,
}

/// Evaluates all candidates on `leaf` and returns the best one. Later
/// candidates replace the current best only on a strictly larger reduction.
pub fn best_enrichment(
    space: &HpSpace,
    u: &DVector<f64>,
    leaf: usize,
    forms: &ProblemForms,
    global_energy_sq: f64,
    config: &PredictorConfig,
) -> Result<ElementPrediction> {
    let ctx = LocalContext::new(space, u, leaf, forms, global_energy_sq)?;
    let mut results = Vec::new();
    let mut best: Option<(Candidate, f64)> = None;
    for cand in candidates(space.dim(), ctx.degree, config) {
        let cat = catalog_for(space.dim(), ctx.degree, &cand, config.p_variant)?;
        let value = if cat.is_empty() {
            None
        } else {
            let sys = assemble_from_context(&ctx, &cat)?;
            match predicted_reduction(&sys) {
                Ok(p) => Some(p.delta_e_sq),
                Err(Error::DependentEnrichment(_)) => None,
                Err(e) => return Err(e),
            }
        };
        if let Some(v) = value {
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((cand.clone(), v));
            }
        }
        results.push(CandidateResult {
            candidate: cand,
            delta_e_sq: value,
        });
    }
    let (best, delta_e_sq) = match best {
        Some((c, v)) => (Some(c), v),
        None => (None, 0.0),
    };
    Ok(ElementPrediction {
        leaf,
        best,
        delta_e_sq,
        candidates: results,
    })
}

/// CSV dump: `element,candidate,delta_e_sq` (dependent candidates as `nan`).
pub fn write_predictions_csv(
    preds: &[ElementPrediction],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "element,candidate,delta_e_sq")?;
    for p in preds {
        for c in &p.candidates {
            match c.delta_e_sq {
                Some(v) => writeln!(out, "{},{},{:.16e}", p.leaf, c.candidate.label(), v)?,
                None => writeln!(out, "{},{},nan", p.leaf, c.candidate.label())?,
            }
        }
    }
    Ok(())
}
