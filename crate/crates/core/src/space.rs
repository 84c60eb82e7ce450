//! Conforming hp finite element space on a 1-irregular box mesh.
//!
//! Global basis: vertex hats, edge modes `j = 2..p_E` (2D, minimum rule over
//! all leaves touching the edge) and interior tensor bubbles `{2..p_Q}^d`.
//! Hanging vertices and the fine-side traces of hanging edges are eliminated
//! at build time through constraint coefficients, so every leaf carries an
//! explicit expansion of the global functions in its local frame.

use crate::basis::{frame_eval, psi, Frame, MAX_DEGREE};
use crate::constraint::cached_coeffs_1d;
use crate::error::{invalid, Error, Result};
use crate::mesh::Mesh;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DofKind {
    Vertex,
    EdgeMode,
    InteriorMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofInfo {
    pub kind: DofKind,
    /// Leaf owning the DOF (interior modes and edge modes), none for vertices.
    pub owner: Option<usize>,
    /// Vertex position, edge midpoint or cell center.
    pub location: Vec<f64>,
    /// Mode multi-index in the owner's frame (empty for vertices).
    pub tag: Vec<usize>,
}

/// Restriction of the global basis to one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalExpansion {
    pub degree: usize,
    /// `(dof, position in the native frame, coefficient)`, sorted.
    pub terms: Vec<(usize, usize, f64)>,
    /// Interior DOFs in native-frame position order.
    pub interior: Vec<usize>,
}

impl LocalExpansion {
    pub fn frame(&self, dim: usize) -> Frame {
        Frame::new(dim, self.degree)
    }

    /// Distinct DOFs supported on the leaf, ascending.
    pub fn dofs(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.terms.iter().map(|t| t.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Edge {
    normal: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    degree: usize,
    dirichlet: bool,
    has_slaves: bool,
    // global dof of mode j at index j - 2
    dofs: Vec<usize>,
    owner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Master(usize),
    Slave(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Vertex {
    Free(usize),
    Dirichlet,
    Hanging(usize),
}

/// Summary written next to run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub degrees: BTreeMap<usize, usize>,
    pub vertex_dofs: usize,
    pub edge_dofs: usize,
    pub interior_dofs: usize,
    pub constraints: usize,
}

#[derive(Debug, Clone)]
pub struct HpSpace {
    pub mesh: Arc<Mesh>,
    pub degrees: BTreeMap<usize, usize>,
    pub dofs: Vec<DofInfo>,
    /// `dirichlet[k][s]`: homogeneous Dirichlet condition on the domain side
    /// normal to axis `k` at the low (`s = 0`) or high end.
    pub dirichlet: Vec<[bool; 2]>,
    local: HashMap<usize, LocalExpansion>,
    leaves: Vec<usize>,
    constraints: usize,
}

type PointKey = Vec<u64>;

fn pkey(x: &[f64]) -> PointKey {
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn add_scaled(acc: &mut BTreeMap<usize, f64>, expr: &[(usize, f64)], s: f64) {
    for &(i, c) in expr {
        *acc.entry(i).or_insert(0.0) += s * c;
    }
}

/// Space with homogeneous Dirichlet conditions on the whole boundary.
pub fn build_space(mesh: Arc<Mesh>, degrees: &BTreeMap<usize, usize>) -> Result<HpSpace> {
    let d = mesh.dim;
    build_space_with(mesh, degrees, vec![[true, true]; d])
}

pub fn build_space_with(
    mesh: Arc<Mesh>,
    degrees: &BTreeMap<usize, usize>,
    dirichlet: Vec<[bool; 2]>,
) -> Result<HpSpace> {
    let d = mesh.dim;
    if d == 0 || d > 2 {
        return Err(Error::Unsupported(format!(
            "hp spaces are implemented for d = 1, 2, got {d}"
        )));
    }
    if dirichlet.len() != d {
        return invalid("one Dirichlet flag pair per axis required");
    }
    let leaves = mesh.leaves();
    let mut deg = BTreeMap::new();
    for &l in &leaves {
        match degrees.get(&l) {
            Some(&p) if (1..=MAX_DEGREE).contains(&p) => {
                deg.insert(l, p);
            }
            Some(&p) => return invalid(format!("leaf {l}: degree {p} outside 1..={MAX_DEGREE}")),
            None => return invalid(format!("no degree given for leaf {l}")),
        }
    }

    let on_dirichlet = |x: &[f64]| {
        (0..d).any(|k| {
            (dirichlet[k][0] && x[k] == mesh.domain_lo[k])
                || (dirichlet[k][1] && x[k] == mesh.domain_hi[k])
        })
    };

    // sides and master edges (2D only)
    let mut edges: Vec<Edge> = Vec::new();
    let mut edge_index: HashMap<(usize, PointKey, PointKey), usize> = HashMap::new();
    let mut sides: HashMap<usize, Vec<Side>> = HashMap::new();
    let mut constraints = 0;
    if d == 2 {
        for &l in &leaves {
            let e = mesh.element(l);
            let mut ls = Vec::with_capacity(4);
            for k in 0..2 {
                let t = 1 - k;
                for s in 0..2 {
                    let nb = mesh.face_neighbors(l, k, s);
                    let c = if s == 0 { e.lo[k] } else { e.hi[k] };
                    let coarse = (nb.len() == 1)
                        .then(|| mesh.element(nb[0]))
                        .filter(|n| n.hi[t] - n.lo[t] > e.hi[t] - e.lo[t]);
                    let (tlo, thi) = match coarse {
                        Some(n) => (n.lo[t], n.hi[t]),
                        None => (e.lo[t], e.hi[t]),
                    };
                    let mut lo = vec![0.0; 2];
                    let mut hi = vec![0.0; 2];
                    lo[k] = c;
                    hi[k] = c;
                    lo[t] = tlo;
                    hi[t] = thi;
                    let key = (k, pkey(&lo), pkey(&hi));
                    let idx = *edge_index.entry(key).or_insert_with(|| {
                        edges.push(Edge {
                            normal: k,
                            dirichlet: nb.is_empty() && dirichlet[k][s],
                            lo: lo.clone(),
                            hi: hi.clone(),
                            degree: usize::MAX,
                            has_slaves: false,
                            dofs: Vec::new(),
                            owner: coarse.map_or(l, |n| n.id),
                        });
                        edges.len() - 1
                    });
                    edges[idx].degree = edges[idx].degree.min(deg[&l]);
                    if coarse.is_some() {
                        edges[idx].has_slaves = true;
                        constraints += 1;
                        let half = usize::from(e.lo[t] != tlo);
                        ls.push(Side::Slave(idx, half));
                    } else {
                        ls.push(Side::Master(idx));
                    }
                }
            }
            sides.insert(l, ls);
        }
    }

    let mut hanging_mid: HashMap<PointKey, usize> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        if e.has_slaves {
            let mid: Vec<f64> = (0..2).map(|k| 0.5 * e.lo[k] + 0.5 * e.hi[k]).collect();
            hanging_mid.insert(pkey(&mid), i);
        }
    }

    let corner = |l: usize, v: usize| -> Vec<f64> {
        let e = mesh.element(l);
        (0..d)
            .map(|k| if v >> k & 1 == 1 { e.hi[k] } else { e.lo[k] })
            .collect()
    };

    let mut dofs = Vec::new();
    let mut vertices: HashMap<PointKey, Vertex> = HashMap::new();
    for &l in &leaves {
        for v in 0..1usize << d {
            let x = corner(l, v);
            let key = pkey(&x);
            if vertices.contains_key(&key) {
                continue;
            }
            let state = if let Some(&edge) = hanging_mid.get(&key) {
                constraints += 1;
                Vertex::Hanging(edge)
            } else if on_dirichlet(&x) {
                Vertex::Dirichlet
            } else {
                dofs.push(DofInfo {
                    kind: DofKind::Vertex,
                    owner: None,
                    location: x,
                    tag: Vec::new(),
                });
                Vertex::Free(dofs.len() - 1)
            };
            vertices.insert(key, state);
        }
    }
    for e in edges.iter_mut() {
        if e.dirichlet {
            continue;
        }
        let mid: Vec<f64> = (0..2).map(|k| 0.5 * e.lo[k] + 0.5 * e.hi[k]).collect();
        for j in 2..=e.degree {
            let mut tag = vec![0; 2];
            tag[1 - e.normal] = j;
            dofs.push(DofInfo {
                kind: DofKind::EdgeMode,
                owner: Some(e.owner),
                location: mid.clone(),
                tag,
            });
            e.dofs.push(dofs.len() - 1);
        }
    }

    // vertex expressions, resolving hanging vertices recursively
    fn vexpr(
        x: &[f64],
        vertices: &HashMap<PointKey, Vertex>,
        edges: &[Edge],
        memo: &mut HashMap<PointKey, Vec<(usize, f64)>>,
    ) -> Result<Vec<(usize, f64)>> {
        let key = pkey(x);
        if let Some(v) = memo.get(&key) {
            return Ok(v.clone());
        }
        let out = match vertices.get(&key) {
            Some(Vertex::Free(i)) => vec![(*i, 1.0)],
            Some(Vertex::Dirichlet) => Vec::new(),
            Some(Vertex::Hanging(ei)) => {
                let e = &edges[*ei];
                let mut acc = BTreeMap::new();
                add_scaled(&mut acc, &vexpr(&e.lo, vertices, edges, memo)?, 0.5);
                add_scaled(&mut acc, &vexpr(&e.hi, vertices, edges, memo)?, 0.5);
                for (m, &dof) in e.dofs.iter().enumerate() {
                    *acc.entry(dof).or_insert(0.0) += psi(m + 2, 0.0);
                }
                acc.into_iter().filter(|(_, c)| *c != 0.0).collect()
            }
            None => {
                // endpoint of a master edge that no leaf has as a corner
                return Err(Error::Internal(format!(
                    "vertex {x:?} missing from the catalog"
                )));
            }
        };
        memo.insert(key, out.clone());
        Ok(out)
    }

    let mut memo = HashMap::new();
    let mut local = HashMap::with_capacity(leaves.len());
    for &l in &leaves {
        let p = deg[&l];
        let frame = Frame::new(d, p);
        let mut terms = Vec::new();
        let mut interior = Vec::new();
        for pos in 0..frame.size() {
            let j = frame.multi(pos);
            let bubble: Vec<usize> = (0..d).filter(|&k| j[k] >= 2).collect();
            if bubble.is_empty() {
                let v: usize = (0..d).map(|k| j[k] << k).sum();
                for (dof, c) in vexpr(&corner(l, v), &vertices, &edges, &mut memo)? {
                    terms.push((dof, pos, c));
                }
            } else if bubble.len() == d {
                let mut loc = mesh.element(l).lo.clone();
                for k in 0..d {
                    loc[k] = 0.5 * (loc[k] + mesh.element(l).hi[k]);
                }
                dofs.push(DofInfo {
                    kind: DofKind::InteriorMode,
                    owner: Some(l),
                    location: loc,
                    tag: j.clone(),
                });
                let dof = dofs.len() - 1;
                interior.push(dof);
                terms.push((dof, pos, 1.0));
            } else {
                let t = bubble[0];
                let k = 1 - t;
                let m = j[t];
                match sides[&l][2 * k + j[k]] {
                    Side::Master(ei) => {
                        if let Some(&dof) = edges[ei].dofs.get(m - 2) {
                            terms.push((dof, pos, 1.0));
                        }
                    }
                    Side::Slave(ei, half) => {
                        let e = &edges[ei];
                        if e.dofs.is_empty() {
                            continue;
                        }
                        let (a, b) = if half == 0 { (-1.0, 0.0) } else { (0.0, 1.0) };
                        let table = cached_coeffs_1d(a, b, e.degree)?;
                        for i in m..=e.degree {
                            let c = table.get(i, m);
                            if c != 0.0 {
                                terms.push((e.dofs[i - 2], pos, c));
                            }
                        }
                    }
                }
            }
        }
        terms.sort_by_key(|t| (t.0, t.1));
        local.insert(
            l,
            LocalExpansion {
                degree: p,
                terms,
                interior,
            },
        );
    }

    Ok(HpSpace {
        mesh,
        degrees: deg,
        dofs,
        dirichlet,
        local,
        leaves,
        constraints,
    })
}

impl HpSpace {
    pub fn dim(&self) -> usize {
        self.mesh.dim
    }

    /// Number of global DOFs `N`.
    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn degree(&self, leaf: usize) -> usize {
        self.degrees[&leaf]
    }

    /// Hanging vertices plus slave leaf sides.
    pub fn constraint_count(&self) -> usize {
        self.constraints
    }

    pub fn local(&self, leaf: usize) -> Result<&LocalExpansion> {
        self.local.get(&leaf).ok_or_else(|| {
            Error::InvalidArgument(format!("element {leaf} is not a leaf of this space"))
        })
    }

    /// Interior DOFs of `leaf` (the index set of `W^loc`).
    pub fn local_interior_indices(&self, leaf: usize) -> Result<Vec<usize>> {
        Ok(self.local(leaf)?.interior.clone())
    }

    /// Splits `u` into its interior part on `leaf` and the remainder.
    pub fn project_local(
        &self,
        u: &DVector<f64>,
        leaf: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if u.len() != self.n_dofs() {
            return invalid(format!(
                "coefficient vector has length {}, expected {}",
                u.len(),
                self.n_dofs()
            ));
        }
        let mut u_loc = DVector::zeros(u.len());
        for &i in &self.local(leaf)?.interior {
            u_loc[i] = u[i];
        }
        let u_tilde = u - &u_loc;
        Ok((u_loc, u_tilde))
    }

    /// Sparse `C_Q` rows: `(dof, frame position, coefficient)` in the frame of
    /// degree `p_max`.
    pub fn restriction_terms(&self, leaf: usize, p_max: usize) -> Result<Vec<(usize, usize, f64)>> {
        let loc = self.local(leaf)?;
        if p_max < loc.degree {
            return invalid(format!(
                "frame degree {p_max} below element degree {}",
                loc.degree
            ));
        }
        let d = self.dim();
        let native = Frame::new(d, loc.degree);
        let target = Frame::new(d, p_max);
        Ok(loc
            .terms
            .iter()
            .map(|&(i, pos, c)| (i, target.pos(&native.multi(pos)), c))
            .collect())
    }

    /// Dense `N x M` representation matrix `C_Q` in the frame of degree `p_max`.
    pub fn restriction_matrix(&self, leaf: usize, p_max: usize) -> Result<DMatrix<f64>> {
        let m = Frame::new(self.dim(), p_max).size();
        let mut c = DMatrix::zeros(self.n_dofs(), m);
        for (i, l, v) in self.restriction_terms(leaf, p_max)? {
            c[(i, l)] += v;
        }
        Ok(c)
    }

    /// Local coefficients of `u|_Q` in the native frame.
    pub fn local_coefficients(&self, u: &DVector<f64>, leaf: usize) -> Result<Vec<f64>> {
        let loc = self.local(leaf)?;
        let mut out = vec![0.0; loc.frame(self.dim()).size()];
        for &(i, pos, c) in &loc.terms {
            out[pos] += c * u[i];
        }
        Ok(out)
    }

    /// Value and physical gradient of `u` at `F_Q(x_ref)`.
    pub fn eval_fe(&self, u: &DVector<f64>, leaf: usize, xr: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        let coef = self.local_coefficients(u, leaf)?;
        let (vals, grads) = frame_eval(Frame::new(d, self.degree(leaf)), xr);
        let e = self.mesh.element(leaf);
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        for (pos, c) in coef.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            value += c * vals[pos];
            for k in 0..d {
                grad[k] += c * grads[pos * d + k] * 2.0 / (e.hi[k] - e.lo[k]);
            }
        }
        Ok((value, grad))
    }

    /// Evaluates `u` at a physical point.
    pub fn eval_at(&self, u: &DVector<f64>, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let leaf = self
            .mesh
            .locate(x)
            .ok_or_else(|| Error::InvalidArgument(format!("point {x:?} outside the mesh")))?;
        let xr = self.mesh.element(leaf).to_reference(x);
        self.eval_fe(u, leaf, &xr)
    }

    pub fn summary(&self) -> SpaceSummary {
        let count = |k: DofKind| self.dofs.iter().filter(|d| d.kind == k).count();
        SpaceSummary {
            n: self.n_dofs(),
            degrees: self.degrees.clone(),
            vertex_dofs: count(DofKind::Vertex),
            edge_dofs: count(DofKind::EdgeMode),
            interior_dofs: count(DofKind::InteriorMode),
            constraints: self.constraints,
        }
    }
}
