//! Independent oracles: enrichment functions evaluated pointwise from their
//! definitions, local systems by direct quadrature, and explicit Galerkin
//! solves on the enrichment space.
#![allow(dead_code)]

use hpadapt::assembly::{assemble_global, energy_norm_sq, solve_spd, ProblemForms, Source};
use hpadapt::basis::{gauss_rule, psi, psi_deriv};
use hpadapt::mesh::Mesh;
use hpadapt::predictor::{
    assemble_local_system, candidates, catalog_for, predicted_reduction, Candidate,
    EnrichmentFunction, PVariant, PredictorConfig,
};
use hpadapt::space::{build_space, HpSpace};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Tensor Gauss points and weights on a box.
pub fn box_rule(lo: &[f64], hi: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let g = gauss_rule(n).unwrap();
    let d = lo.len();
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    for c in 0..n.pow(d as u32) {
        let mut x = vec![0.0; d];
        let mut w = 1.0;
        for k in 0..d {
            let q = c / n.pow(k as u32) % n;
            let h = 0.5 * (hi[k] - lo[k]);
            x[k] = 0.5 * (lo[k] + hi[k]) + h * g.nodes[q];
            w *= h * g.weights[q];
        }
        pts.push(x);
        wts.push(w);
    }
    (pts, wts)
}

/// `4^d` (two uniform refinements) sub-boxes of `[lo, hi]`.
pub fn subcells(lo: &[f64], hi: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = lo.len();
    (0..4usize.pow(d as u32))
        .map(|c| {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            for k in 0..d {
                let q = (c / 4usize.pow(k as u32) % 4) as f64;
                let h = (hi[k] - lo[k]) / 4.0;
                a[k] = lo[k] + q * h;
                b[k] = lo[k] + (q + 1.0) * h;
            }
            (a, b)
        })
        .collect()
}

/// Value and physical gradient of `prod_k psi_{j_k}` mapped to the box.
pub fn psi_on_box(j: &[usize], lo: &[f64], hi: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let d = j.len();
    let t: Vec<f64> = (0..d)
        .map(|k| (2.0 * x[k] - lo[k] - hi[k]) / (hi[k] - lo[k]))
        .collect();
    let v: Vec<f64> = (0..d).map(|k| psi(j[k], t[k])).collect();
    let dv: Vec<f64> = (0..d)
        .map(|k| psi_deriv(j[k], t[k]) * 2.0 / (hi[k] - lo[k]))
        .collect();
    let val = v.iter().product();
    let grad = (0..d)
        .map(|k| (0..d).map(|m| if m == k { dv[m] } else { v[m] }).product())
        .collect();
    (val, grad)
}

/// Enrichment function on `Q = [lo, hi]` (midpoint refinement), from its definition.
pub fn xi_eval(f: &EnrichmentFunction, lo: &[f64], hi: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let d = lo.len();
    match f {
        EnrichmentFunction::Bubble(j) => psi_on_box(j, lo, hi, x),
        EnrichmentFunction::Node { node, degrees } => {
            let mid: Vec<f64> = (0..d).map(|k| 0.5 * (lo[k] + hi[k])).collect();
            let i: Vec<usize> = (0..d).map(|k| usize::from(x[k] > mid[k])).collect();
            let incident = node
                .orientation
                .iter()
                .zip(&node.location)
                .all(|(&a, &l)| i[a - 1] == l);
            if !incident {
                return (0.0, vec![0.0; d]);
            }
            let mut j: Vec<usize> = i.iter().map(|&b| 1 - b).collect();
            for (q, &a) in node.orientation.iter().enumerate() {
                j[a - 1] = degrees[q];
            }
            let clo: Vec<f64> = (0..d)
                .map(|k| if i[k] == 0 { lo[k] } else { mid[k] })
                .collect();
            let chi: Vec<f64> = (0..d)
                .map(|k| if i[k] == 0 { mid[k] } else { hi[k] })
                .collect();
            psi_on_box(&j, &clo, &chi, x)
        }
    }
}

pub struct DirectSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub a00: f64,
    pub delta: f64,
    pub u_loc_norm_sq: f64,
    /// `f(u_tilde)` and `f(u_W)` by quadrature over all leaves.
    pub f_tilde: f64,
    pub f_w: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Local system of an enrichment set by direct quadrature on the twice
/// refined element and on every other leaf.
pub fn direct_system(
    space: &HpSpace,
    u: &DVector<f64>,
    leaf: usize,
    functions: &[EnrichmentFunction],
    forms: &ProblemForms,
) -> DirectSystem {
    let (eps, kap) = (forms.diffusion, forms.reaction);
    let (u_loc, u_tilde) = space.project_local(u, leaf).unwrap();
    let l = functions.len();
    let mut a = DMatrix::zeros(l, l);
    let mut b = DVector::zeros(l);
    let mut c = DVector::zeros(l);
    let (mut a00, mut uloc2, mut f_uloc, mut f_tilde, mut f_w) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let q = space.mesh.element(leaf).clone();
    for &other in space.leaves() {
        let e = space.mesh.element(other);
        let p = space.degree(other);
        let cells = if other == leaf {
            subcells(&e.lo, &e.hi)
        } else {
            vec![(e.lo.clone(), e.hi.clone())]
        };
        for (clo, chi) in cells {
            let (pts, wts) = box_rule(&clo, &chi, p + 8);
            for (x, w) in pts.iter().zip(&wts) {
                let xr = e.to_reference(x);
                let (vt, gt) = space.eval_fe(&u_tilde, other, &xr).unwrap();
                let (vw, _) = space.eval_fe(u, other, &xr).unwrap();
                let f = forms.source.value(x);
                a00 += w * (eps * dot(&gt, &gt) + kap * vt * vt);
                f_tilde += w * f * vt;
                f_w += w * f * vw;
                if other != leaf {
                    continue;
                }
                let (vl, gl) = space.eval_fe(&u_loc, other, &xr).unwrap();
                uloc2 += w * (eps * dot(&gl, &gl) + kap * vl * vl);
                f_uloc += w * f * vl;
                let xi: Vec<(f64, Vec<f64>)> = functions
                    .iter()
                    .map(|fun| xi_eval(fun, &q.lo, &q.hi, x))
                    .collect();
                for k in 0..l {
                    b[k] += w * f * xi[k].0;
                    c[k] += w * (eps * dot(&gt, &xi[k].1) + kap * vt * xi[k].0);
                    for m in 0..l {
                        a[(k, m)] += w * (eps * dot(&xi[k].1, &xi[m].1) + kap * xi[k].0 * xi[m].0);
                    }
                }
            }
        }
    }
    DirectSystem {
        a,
        b,
        c,
        a00,
        delta: f_uloc - uloc2,
        u_loc_norm_sq: uloc2,
        f_tilde,
        f_w,
    }
}

/// `|e_W|^2 - |e_Y|^2 = f(u_Y) - f(u_W)` with `u_Y` the Galerkin solution on
/// `span{u_tilde, xi_1..xi_L}`, solved with an SVD.
pub fn y_solve_reduction(sys: &DirectSystem) -> f64 {
    let l = sys.a.nrows();
    let keep_tilde = sys.a00 > 1e-14;
    let off = usize::from(keep_tilde);
    let n = l + off;
    let mut g = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    if keep_tilde {
        g[(0, 0)] = sys.a00;
        rhs[0] = sys.f_tilde;
        for k in 0..l {
            g[(0, k + 1)] = sys.c[k];
            g[(k + 1, 0)] = sys.c[k];
        }
    }
    g.view_mut((off, off), (l, l)).copy_from(&sys.a);
    rhs.rows_mut(off, l).copy_from(&sys.b);
    let x = g.svd(true, true).solve(&rhs, 1e-13).unwrap();
    rhs.dot(&x) - sys.f_w
}

/// A random small problem with its discrete solution.
pub struct Instance {
    pub space: HpSpace,
    pub u: DVector<f64>,
    pub forms: ProblemForms,
    pub energy: f64,
}

/// Random 1D (at most 6 elements, degrees at most 4) or 2D (at most 3x3
/// plus one refinement, degrees at most 3) instance with polynomial data.
pub fn random_instance(rng: &mut impl Rng, dim: usize) -> Instance {
    let (mut mesh, pmax) = if dim == 1 {
        (
            Mesh::uniform(&[0.0], &[1.0], rng.gen_range(2..=4)).unwrap(),
            4,
        )
    } else {
        (
            Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], rng.gen_range(2..=3)).unwrap(),
            3,
        )
    };
    if dim == 1 {
        while mesh.num_leaves() < 6 && rng.gen_bool(0.5) {
            let leaves = mesh.leaves();
            mesh.refine(leaves[rng.gen_range(0..leaves.len())]).unwrap();
        }
    } else if rng.gen_bool(0.5) {
        let leaves = mesh.leaves();
        let id = leaves[rng.gen_range(0..leaves.len())];
        mesh.refine(id).unwrap();
        mesh.close_one_irregular(&[id]).unwrap();
    }
    let degrees: BTreeMap<usize, usize> = mesh
        .leaves()
        .into_iter()
        .map(|l| (l, rng.gen_range(1..=pmax)))
        .collect();
    let coef: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let source = Source::Field(Arc::new(move |x: &[f64]| {
        x.iter()
            .enumerate()
            .map(|(k, &t)| coef[0] + coef[1 + k % 2] * t * (1.0 + k as f64 * t))
            .sum::<f64>()
            + 1.0
    }));
    let forms =
        ProblemForms::new(rng.gen_range(0.05..2.0), rng.gen_range(0.0..3.0), source).unwrap();
    let space = build_space(Arc::new(mesh), &degrees).unwrap();
    let (a, b) = assemble_global(&space, &forms).unwrap();
    let u = solve_spd(&a, &b).unwrap();
    let energy = energy_norm_sq(&a, &u);
    Instance {
        space,
        u,
        forms,
        energy,
    }
}

/// Comparison of one catalog on one element against the oracles.
pub struct CatalogCheck {
    pub label: String,
    pub is_p: bool,
    pub predicted: f64,
    pub oracle: f64,
    /// Largest entrywise deviation of `A`, `b`, `c` (relative to `max(1, |entry|)`).
    pub matrix_dev: f64,
    /// Deviation of `a00`, `delta` and `|u_loc|^2`.
    pub scalar_dev: f64,
}

/// Every candidate catalog of `leaf` (both p-variants) checked against the oracles.
pub fn check_element(inst: &Instance, leaf: usize) -> Vec<CatalogCheck> {
    let d = inst.space.dim();
    let p = inst.space.degree(leaf);
    let mut cats = Vec::new();
    for variant in [PVariant::Full, PVariant::Surplus] {
        for cand in candidates(
            d,
            p,
            &PredictorConfig {
                p_variant: variant,
                p_cap: 20,
            },
        ) {
            if variant == PVariant::Surplus && cand != Candidate::P {
                continue;
            }
            let label = if cand == Candidate::P {
                format!("p-{variant:?}")
            } else {
                cand.label()
            };
            cats.push((
                label,
                cand == Candidate::P,
                catalog_for(d, p, &cand, variant).unwrap(),
            ));
        }
    }
    let mut out = Vec::new();
    for (label, is_p, cat) in cats {
        if cat.is_empty() {
            continue;
        }
        let sys = assemble_local_system(&inst.space, &inst.u, leaf, &cat, &inst.forms, inst.energy)
            .unwrap();
        let pred = predicted_reduction(&sys).unwrap();
        let direct = direct_system(&inst.space, &inst.u, leaf, &cat.functions, &inst.forms);
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
        let mut matrix_dev: f64 = 0.0;
        for k in 0..cat.len() {
            matrix_dev = matrix_dev
                .max(rel(sys.b[k], direct.b[k]))
                .max(rel(sys.c[k], direct.c[k]));
            for m in 0..cat.len() {
                matrix_dev = matrix_dev.max(rel(sys.a[(k, m)], direct.a[(k, m)]));
            }
        }
        let scalar_dev = rel(sys.a00, direct.a00)
            .max(rel(sys.delta, direct.delta))
            .max(rel(sys.u_loc_norm_sq, direct.u_loc_norm_sq));
        out.push(CatalogCheck {
            label,
            is_p,
            predicted: pred.delta_e_sq,
            oracle: y_solve_reduction(&direct),
            matrix_dev,
            scalar_dev,
        });
    }
    out
}
