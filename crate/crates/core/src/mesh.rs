//! Axis-parallel box meshes with midpoint refinement, internal-node
//! combinatorics of a refinement and the enumerations `iota` and `nu`.

use crate::basis::{psi, psi_deriv, MultiIndex};
use crate::constraint::child_box;
use crate::error::{invalid, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Multilinear map `F(x) = sum_{i in {0,1}^d} psi_i(x) v_i` from `[-1,1]^d`.
///
/// Vertex `v_i` is stored at position `sum_k i_k 2^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementMap {
    pub dim: usize,
    pub vertices: Vec<Vec<f64>>,
}

impl ElementMap {
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let d = lo.len();
        let vertices = (0..1usize << d)
            .map(|v| {
                (0..d)
                    .map(|k| if v >> k & 1 == 1 { hi[k] } else { lo[k] })
                    .collect()
            })
            .collect();
        ElementMap { dim: d, vertices }
    }

    /// Physical point and Jacobian `J[(r, c)] = dF_r / dx_c`.
    pub fn apply(&self, xr: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut x = vec![0.0; d];
        let mut jac = DMatrix::zeros(d, d);
        for (v, vert) in self.vertices.iter().enumerate() {
            let bits: Vec<usize> = (0..d).map(|k| v >> k & 1).collect();
            let w: f64 = (0..d).map(|k| psi(bits[k], xr[k])).product();
            for r in 0..d {
                x[r] += w * vert[r];
            }
            for c in 0..d {
                let dw: f64 = (0..d)
                    .map(|k| {
                        if k == c {
                            psi_deriv(bits[k], xr[k])
                        } else {
                            psi(bits[k], xr[k])
                        }
                    })
                    .product();
                for r in 0..d {
                    jac[(r, c)] += dw * vert[r];
                }
            }
        }
        (x, jac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub id: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub level: usize,
    pub parent: Option<usize>,
    /// Children ordered by `sum_k i_k 2^k`.
    pub children: Option<Vec<usize>>,
}

impl Element {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn map(&self) -> ElementMap {
        ElementMap::from_box(&self.lo, &self.hi)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Reference coordinates of a physical point of the box.
    pub fn to_reference(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|k| (2.0 * x[k] - self.lo[k] - self.hi[k]) / (self.hi[k] - self.lo[k]))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|k| self.lo[k] <= x[k] && x[k] <= self.hi[k])
    }
}

/// `F_Q(x_ref)` and its Jacobian.
pub fn element_map(q: &Element, xr: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    q.map().apply(xr)
}

/// Child boxes of `[lo, hi]` refined at the reference point `z`, ordered by
/// `sum_k i_k 2^k`.
pub fn refine_box(lo: &[f64], hi: &[f64], z: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = lo.len();
    if z.len() != d {
        return invalid("refinement point has the wrong dimension");
    }
    let map = ElementMap::from_box(lo, hi);
    (0..1usize << d)
        .map(|c| {
            let child: Vec<usize> = (0..d).map(|k| c >> k & 1).collect();
            let (rl, rh) = child_box(&child, z)?;
            Ok((map.apply(&rl).0, map.apply(&rh).0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub dim: usize,
    pub elements: Vec<Element>,
    pub roots: Vec<usize>,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
}

/// One leaf in a mesh dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub id: usize,
    pub level: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub degree: usize,
}

impl Mesh {
    /// Tensor mesh of `[lo, hi]` with `n` equal cells per axis, all level 0.
    pub fn uniform(lo: &[f64], hi: &[f64], n: usize) -> Result<Mesh> {
        let d = lo.len();
        if d == 0 || d != hi.len() || n == 0 || (0..d).any(|k| lo[k] >= hi[k]) {
            return invalid("uniform mesh needs matching nonempty bounds and n >= 1");
        }
        let cells = n.pow(d as u32);
        let mut elements = Vec::with_capacity(cells);
        for c in 0..cells {
            let mut rest = c;
            let mut elo = vec![0.0; d];
            let mut ehi = vec![0.0; d];
            for k in 0..d {
                let i = rest % n;
                rest /= n;
                let h = (hi[k] - lo[k]) / n as f64;
                elo[k] = lo[k] + h * i as f64;
                ehi[k] = if i + 1 == n {
                    hi[k]
                } else {
                    lo[k] + h * (i + 1) as f64
                };
            }
            elements.push(Element {
                id: c,
                lo: elo,
                hi: ehi,
                level: 0,
                parent: None,
                children: None,
            });
        }
        Ok(Mesh {
            dim: d,
            roots: (0..cells).collect(),
            elements,
            domain_lo: lo.to_vec(),
            domain_hi: hi.to_vec(),
        })
    }

    pub fn element(&self, id: usize) -> &Element {
        &self.elements[id]
    }

    /// Leaf ids in increasing order.
    pub fn leaves(&self) -> Vec<usize> {
        self.elements
            .iter()
            .filter(|e| e.is_leaf())
            .map(|e| e.id)
            .collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.elements.iter().filter(|e| e.is_leaf()).count()
    }

    /// Midpoint refinement of a leaf; returns the child ids.
    pub fn refine(&mut self, id: usize) -> Result<Vec<usize>> {
        let z = vec![0.0; self.dim];
        self.refine_at(id, &z)
    }

    /// Refinement of a leaf with respect to the reference point `z`.
    pub fn refine_at(&mut self, id: usize, z: &[f64]) -> Result<Vec<usize>> {
        let Some(e) = self.elements.get(id) else {
            return invalid(format!("no element {id}"));
        };
        if !e.is_leaf() {
            return invalid(format!("element {id} is already refined"));
        }
        let boxes = refine_box(&e.lo, &e.hi, z)?;
        let level = e.level + 1;
        let mut ids = Vec::with_capacity(boxes.len());
        for (lo, hi) in boxes {
            let cid = self.elements.len();
            self.elements.push(Element {
                id: cid,
                lo,
                hi,
                level,
                parent: Some(id),
                children: None,
            });
            ids.push(cid);
        }
        self.elements[id].children = Some(ids.clone());
        Ok(ids)
    }

    /// Leaves sharing the face of `leaf` normal to `axis` on `side`
    /// (0 = low, 1 = high) in a set of positive `(d-1)`-measure.
    pub fn face_neighbors(&self, leaf: usize, axis: usize, side: usize) -> Vec<usize> {
        let e = &self.elements[leaf];
        let c = if side == 0 { e.lo[axis] } else { e.hi[axis] };
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.roots.iter().rev().copied().collect();
        while let Some(id) = stack.pop() {
            let f = &self.elements[id];
            let across = if side == 0 {
                f.lo[axis] < c && f.hi[axis] >= c
            } else {
                f.hi[axis] > c && f.lo[axis] <= c
            };
            let overlap = (0..self.dim)
                .filter(|&k| k != axis)
                .all(|k| f.lo[k].max(e.lo[k]) < f.hi[k].min(e.hi[k]));
            if !(across && overlap) {
                continue;
            }
            match &f.children {
                Some(ch) => stack.extend(ch.iter().rev()),
                None => out.push(id),
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaf containing `x`, preferring the lowest id on shared boundaries.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut cur = self
            .roots
            .iter()
            .copied()
            .find(|&r| self.elements[r].contains(x))?;
        while let Some(ch) = &self.elements[cur].children {
            cur = ch.iter().copied().find(|&c| self.elements[c].contains(x))?;
        }
        Some(cur)
    }

    /// Every leaf face abuts neighbors at most one level finer.
    pub fn is_one_irregular(&self) -> bool {
        self.leaves().into_iter().all(|l| {
            let lev = self.elements[l].level;
            (0..self.dim).all(|k| {
                (0..2).all(|s| {
                    self.face_neighbors(l, k, s)
                        .iter()
                        .all(|&n| self.elements[n].level <= lev + 1)
                })
            })
        })
    }

    /// Refines coarse neighbors of newly created leaves until the mesh is
    /// 1-irregular again; returns the ids refined by the closure.
    pub fn close_one_irregular(&mut self, newly_refined: &[usize]) -> Result<Vec<usize>> {
        if self.dim == 1 {
            return Ok(Vec::new());
        }
        let mut extra = Vec::new();
        let mut work: Vec<usize> = newly_refined
            .iter()
            .filter_map(|&id| self.elements[id].children.clone())
            .flatten()
            .collect();
        while let Some(leaf) = work.pop() {
            if !self.elements[leaf].is_leaf() {
                continue;
            }
            let lev = self.elements[leaf].level;
            for k in 0..self.dim {
                for s in 0..2 {
                    for n in self.face_neighbors(leaf, k, s) {
                        if self.elements[n].is_leaf() && self.elements[n].level + 1 < lev {
                            let ch = self.refine(n)?;
                            extra.push(n);
                            work.extend(ch);
                            work.push(leaf);
                        }
                    }
                }
            }
        }
        Ok(extra)
    }

    /// JSON-lines dump, one object per leaf.
    pub fn write_leaves(
        &self,
        degrees: &BTreeMap<usize, usize>,
        out: &mut impl Write,
    ) -> std::io::Result<()> {
        for id in self.leaves() {
            let e = &self.elements[id];
            let rec = LeafRecord {
                id,
                level: e.level,
                lo: e.lo.clone(),
                hi: e.hi.clone(),
                degree: degrees.get(&id).copied().unwrap_or(1),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Internal node `(a, l)` of a refinement: orientation `a` (strictly
/// increasing, 1-based axes) and location `l` in `{0,1}^r`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InternalNode {
    pub orientation: Vec<usize>,
    pub location: Vec<usize>,
}

impl InternalNode {
    pub fn dim(&self) -> usize {
        self.orientation.len()
    }
}

/// All `r`-subsets of `1..=d` in lexicographic order.
pub fn orientations(d: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for a in start..=d {
            cur.push(a);
            rec(a + 1, d, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, d, r, &mut Vec::new(), &mut out);
    out
}

/// All internal nodes of a refinement in `d` dimensions, grouped by `r` and
/// ordered by `nu`.
pub fn internal_nodes(d: usize) -> Vec<InternalNode> {
    let mut out = Vec::new();
    for r in 0..=d {
        for a in orientations(d, r) {
            for l in 0..1usize << r {
                out.push(InternalNode {
                    orientation: a.clone(),
                    location: (0..r).map(|k| l >> k & 1).collect(),
                });
            }
        }
    }
    out
}

/// Children `i in {0,1}^d` sharing the node: `i_{a_k} = l_k` for all `k`.
pub fn incident_children(n: &InternalNode, d: usize) -> Vec<Vec<usize>> {
    (0..1usize << d)
        .map(|c| (0..d).map(|k| c >> k & 1).collect::<Vec<_>>())
        .filter(|i| {
            n.orientation
                .iter()
                .zip(&n.location)
                .all(|(&a, &l)| i[a - 1] == l)
        })
        .collect()
}

/// `iota(j) = 1 + sum_k (p_max + 1)^(k-1) j_k`.
pub fn index_iota(j: &MultiIndex, p_max: usize) -> Result<usize> {
    if let Some(&bad) = j.0.iter().find(|&&jk| jk > p_max) {
        return invalid(format!("index component {bad} exceeds p_max = {p_max}"));
    }
    Ok(1 + j.0.iter().rev().fold(0, |acc, &jk| acc * (p_max + 1) + jk))
}

/// Inverse of [`index_iota`].
pub fn index_iota_inverse(l: usize, dim: usize, p_max: usize) -> Result<MultiIndex> {
    let m = (p_max + 1).pow(dim as u32);
    if l == 0 || l > m {
        return invalid(format!("iota index {l} outside 1..={m}"));
    }
    let mut rest = l - 1;
    Ok(MultiIndex(
        (0..dim)
            .map(|_| {
                let jk = rest % (p_max + 1);
                rest /= p_max + 1;
                jk
            })
            .collect(),
    ))
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// `L_r = C(d, r) 2^r (p_unif - 1)^r`.
pub fn nu_block_size(d: usize, r: usize, p_unif: usize) -> usize {
    binomial(d, r) * (1 << r) * (p_unif - 1).pow(r as u32)
}

/// `nu_r(n) = 1 + 2^r rank(a) + sum_k 2^(k-1) l_k`, `rank` lexicographic in `D_r`.
pub fn index_nu_r(n: &InternalNode, d: usize) -> Result<usize> {
    let r = n.dim();
    if n.location.len() != r || n.location.iter().any(|&l| l > 1) {
        return invalid("location tuple must be binary with one entry per orientation");
    }
    let rank = orientations(d, r)
        .iter()
        .position(|a| *a == n.orientation)
        .ok_or_else(|| {
            crate::Error::InvalidArgument(format!(
                "orientation {:?} invalid for d = {d}",
                n.orientation
            ))
        })?;
    let loc: usize = n.location.iter().enumerate().map(|(k, &l)| l << k).sum();
    Ok(1 + (rank << r) + loc)
}

/// Enumeration of the hp-enrichment functions `(n, p)` for uniform degree
/// `p_unif`, onto `1..=L_0 + ... + L_d`.
pub fn index_nu(n: &InternalNode, p: &[usize], p_unif: usize, d: usize) -> Result<usize> {
    let r = n.dim();
    if p.len() != r || p.iter().any(|&pk| pk < 2 || pk > p_unif) {
        return invalid(format!("degree tuple {p:?} outside {{2..{p_unif}}}^{r}"));
    }
    let offset: usize = (0..r).map(|k| nu_block_size(d, k, p_unif)).sum();
    let w = p_unif - 1;
    let local: usize = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| w.pow(k as u32) * (pk - 2))
        .sum();
    Ok(1 + offset + (index_nu_r(n, d)? - 1) * w.pow(r as u32) + local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn element_map_vertices_and_jacobian() {
        let m = ElementMap::from_box(&[0.0, 0.0], &[1.0, 1.0]);
        for v in 0..4 {
            let xr: Vec<f64> = (0..2)
                .map(|k| if v >> k & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            assert_eq!(m.apply(&xr).0, m.vertices[v]);
        }
        let (x, j) = m.apply(&[0.0, 0.0]);
        assert_eq!(x, vec![0.5, 0.5]);
        assert_eq!(j, DMatrix::from_diagonal_element(2, 2, 0.5));
        let m1 = ElementMap::from_box(&[0.0], &[0.5]);
        let (x, j) = m1.apply(&[0.5]);
        assert!((x[0] - 0.375).abs() < 1e-15 && (j[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bilinear_jacobian_matches_finite_differences() {
        let m = ElementMap {
            dim: 2,
            vertices: vec![
                vec![0.0, 0.0],
                vec![2.0, 0.1],
                vec![0.2, 1.0],
                vec![1.7, 1.4],
            ],
        };
        let x = [0.3, -0.2];
        let (_, j) = m.apply(&x);
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let (fp, _) = m.apply(&xp);
            let (fm, _) = m.apply(&xm);
            for r in 0..2 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - j[(r, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn refinement_children() {
        let mut m = Mesh::uniform(&[0.0], &[1.0], 1).unwrap();
        let ch = m.refine(0).unwrap();
        assert_eq!(m.element(ch[0]).hi, vec![0.5]);
        assert_eq!(m.element(ch[1]).lo, vec![0.5]);
        let mut m = Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], 1).unwrap();
        let ch = m.refine(0).unwrap();
        let c10 = m.element(ch[1]);
        assert_eq!(
            (c10.lo.clone(), c10.hi.clone()),
            (vec![0.5, 0.0], vec![1.0, 0.5])
        );
        let vol: f64 = ch.iter().map(|&c| m.element(c).volume()).sum();
        assert!((vol - 1.0).abs() < 1e-14);
        assert!(m.refine(0).is_err());
        assert!(m.refine_at(ch[0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn general_refinement_point() {
        let boxes = refine_box(&[0.0, 0.0], &[2.0, 2.0], &[0.5, -0.5]).unwrap();
        assert_eq!(boxes[0], (vec![0.0, 0.0], vec![1.5, 0.5]));
        assert_eq!(boxes[3], (vec![1.5, 0.5], vec![2.0, 2.0]));
        let vol: f64 = boxes
            .iter()
            .map(|(l, h)| (h[0] - l[0]) * (h[1] - l[1]))
            .sum();
        assert!((vol - 4.0).abs() < 1e-14);
    }

    #[test]
    fn internal_node_counts() {
        let n1 = internal_nodes(1);
        assert_eq!(n1.len(), 3);
        assert_eq!(
            n1[1],
            InternalNode {
                orientation: vec![1],
                location: vec![0]
            }
        );
        assert_eq!(internal_nodes(2).len(), 9);
        let n3 = internal_nodes(3);
        let counts: Vec<usize> = (0..=3)
            .map(|r| n3.iter().filter(|n| n.dim() == r).count())
            .collect();
        assert_eq!(counts, vec![1, 6, 12, 8]);
        for d in 1..=8 {
            assert_eq!(internal_nodes(d).len(), 3usize.pow(d as u32));
        }
    }

    #[test]
    fn incident_children_sets() {
        let n = InternalNode {
            orientation: vec![1],
            location: vec![0],
        };
        let got: HashSet<Vec<usize>> = incident_children(&n, 3).into_iter().collect();
        let want: HashSet<Vec<usize>> =
            [vec![0, 0, 0], vec![0, 1, 0], vec![0, 1, 1], vec![0, 0, 1]]
                .into_iter()
                .collect();
        assert_eq!(got, want);
        let root = InternalNode {
            orientation: vec![],
            location: vec![],
        };
        assert_eq!(incident_children(&root, 2).len(), 4);
        let cell = InternalNode {
            orientation: vec![1, 2],
            location: vec![1, 0],
        };
        assert_eq!(incident_children(&cell, 2), vec![vec![1, 0]]);
        for d in 1..=4 {
            for n in internal_nodes(d) {
                assert_eq!(incident_children(&n, d).len(), 1 << (d - n.dim()));
            }
        }
    }

    #[test]
    fn iota_roundtrip() {
        assert_eq!(index_iota(&MultiIndex::zeros(3), 4).unwrap(), 1);
        assert_eq!(index_iota(&MultiIndex::new([2, 1]), 3).unwrap(), 7);
        assert!(index_iota(&MultiIndex::new([4, 1]), 3).is_err());
        for l in 1..=125 {
            let j = index_iota_inverse(l, 3, 4).unwrap();
            assert_eq!(index_iota(&j, 4).unwrap(), l);
        }
    }

    #[test]
    fn nu_is_bijective() {
        let root = InternalNode {
            orientation: vec![],
            location: vec![],
        };
        assert_eq!(index_nu(&root, &[], 3, 2).unwrap(), 1);
        assert_eq!((0..=2).map(|r| nu_block_size(2, r, 2)).sum::<usize>(), 9);
        for d in 1..=4 {
            for pu in 2..=5 {
                let total: usize = (0..=d).map(|r| nu_block_size(d, r, pu)).sum();
                let mut seen = HashSet::new();
                for n in internal_nodes(d) {
                    let r = n.dim();
                    for c in 0..(pu - 1).pow(r as u32) {
                        let p: Vec<usize> = (0..r)
                            .map(|k| 2 + c / (pu - 1).pow(k as u32) % (pu - 1))
                            .collect();
                        let v = index_nu(&n, &p, pu, d).unwrap();
                        assert!(v >= 1 && v <= total);
                        assert!(seen.insert(v), "collision at {v}");
                    }
                }
                assert_eq!(seen.len(), total);
            }
        }
        assert!(index_nu(&root, &[2], 3, 2).is_err());
    }

    #[test]
    fn neighbors_and_closure() {
        let mut m = Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap();
        let ch = m.refine(0).unwrap();
        assert!(m.close_one_irregular(&[0]).unwrap().is_empty());
        // element 1 = [1/2,1]x[0,1/2]; its low-x face sees the two right children of 0
        assert_eq!(m.face_neighbors(1, 0, 0), vec![ch[1], ch[3]]);
        assert_eq!(m.face_neighbors(ch[1], 0, 1), vec![1]);
        assert!(m.face_neighbors(ch[0], 0, 0).is_empty());
        // refine the child touching element 1 again: element 1 must be forced
        let target = ch[1];
        m.refine(target).unwrap();
        assert!(!m.is_one_irregular());
        let extra = m.close_one_irregular(&[target]).unwrap();
        assert_eq!(extra, vec![1]);
        assert!(m.is_one_irregular());
        let mut m1 = Mesh::uniform(&[0.0], &[1.0], 2).unwrap();
        m1.refine(0).unwrap();
        let c = m1.element(0).children.clone().unwrap()[1];
        m1.refine(c).unwrap();
        assert!(m1.close_one_irregular(&[c]).unwrap().is_empty());
    }

    #[test]
    fn locate_and_dump() {
        let mut m = Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap();
        m.refine(3).unwrap();
        let id = m.locate(&[0.9, 0.9]).unwrap();
        assert!(m.element(id).is_leaf() && m.element(id).level == 1);
        let mut buf = Vec::new();
        m.write_leaves(&BTreeMap::new(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        let rec: LeafRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.degree, 1);
    }
}
