//! Model problems with exact references and exact-error evaluation.

use crate::adaptivity::{AdaptConfig, AdaptOutcome, IterationRecord, PhaseTimings, StopReason};
use crate::assembly::{local_matrices, ProblemForms, Source};
use crate::basis::{gauss_rule, graded_rule, psi_all, QuadRule};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::space::HpSpace;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

pub type Function1D = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Closed-form solution of a 1D problem.
#[derive(Clone)]
pub struct ExactSolution1D {
    pub u: Function1D,
    pub du: Function1D,
    /// Endpoint where `u'` blows up; cells touching it are integrated after
    /// the substitution `x = a + h t^4`.
    pub singular_at: Option<f64>,
}

impl fmt::Debug for ExactSolution1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExactSolution1D")
            .field("singular_at", &self.singular_at)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub forms: ProblemForms,
    pub mesh: Mesh,
    pub degrees: BTreeMap<usize, usize>,
    pub dirichlet: Vec<[bool; 2]>,
    pub exact: Option<ExactSolution1D>,
    /// `|u|^2` in the energy norm.
    pub energy_sq: Option<f64>,
    /// Marking parameter used for this problem's convergence study.
    pub default_theta: f64,
}

fn start(dim: usize, n: usize) -> Result<(Mesh, BTreeMap<usize, usize>)> {
    let mesh = Mesh::uniform(&vec![0.0; dim], &vec![1.0; dim], n)?;
    let degrees = mesh.leaves().into_iter().map(|l| (l, 1)).collect();
    Ok((mesh, degrees))
}

/// `-eps u'' + u = 1` on `(0,1)`, `u(0) = u(1) = 0`.
pub fn problem_singular_perturbation(epsilon: f64) -> Result<ProblemSpec> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let c = epsilon.powf(-0.5);
    let q = (-c).exp();
    let den = 1.0 + q;
    // symmetric form without overflow: 1 - (e^{-cx} + e^{-c(1-x)}) / (1 + e^{-c})
    let u: Function1D =
        Arc::new(move |x: f64| 1.0 - ((-c * x).exp() + (-c * (1.0 - x)).exp()) / den);
    let du: Function1D =
        Arc::new(move |x: f64| c * ((-c * x).exp() - (-c * (1.0 - x)).exp()) / den);
    let energy_sq = 1.0 - 2.0 * (1.0 - q) / (c * den);
    let (mesh, degrees) = start(1, 4)?;
    Ok(ProblemSpec {
        name: "sp1d".into(),
        dim: 1,
        forms: ProblemForms::new(epsilon, 1.0, Source::Constant(1.0))?,
        mesh,
        degrees,
        dirichlet: vec![[true, true]],
        exact: Some(ExactSolution1D {
            u,
            du,
            singular_at: None,
        }),
        energy_sq: Some(energy_sq),
        default_theta: 0.5,
    })
}

pub const SING_RATIO: f64 = 0.15;
pub const SING_PANELS: usize = 16;
pub const SING_POINTS: usize = 16;

/// `-u'' = (3/16) x^{-5/4}` on `(0,1)` with `u = x^{3/4} - x`.
pub fn problem_boundary_singularity() -> Result<ProblemSpec> {
    let source = Source::Field(Arc::new(|x: &[f64]| 3.0 / 16.0 * x[0].powf(-1.25)));
    let forms =
        ProblemForms::new(1.0, 0.0, source)?.with_load_rule(Arc::new(|lo: &[f64], hi: &[f64]| {
            if lo[0] != 0.0 {
                return None;
            }
            let (x, w) = graded_rule(0.0, hi[0], SING_RATIO, SING_PANELS, SING_POINTS).ok()?;
            Some((x.into_iter().map(|v| vec![v]).collect(), w))
        }));
    let (mesh, degrees) = start(1, 4)?;
    Ok(ProblemSpec {
        name: "sing1d".into(),
        dim: 1,
        forms,
        mesh,
        degrees,
        dirichlet: vec![[true, true]],
        exact: Some(ExactSolution1D {
            u: Arc::new(|x: f64| x.powf(0.75) - x),
            du: Arc::new(|x: f64| 0.75 * x.powf(-0.25) - 1.0),
            singular_at: Some(0.0),
        }),
        energy_sq: Some(0.125),
        default_theta: 0.5,
    })
}

/// Reference energy of the 2D Poisson problem.
pub const POISSON_2D_ENERGY: f64 = 0.035144253738788451;

/// `-Δu = 1` on the unit square with homogeneous Dirichlet data.
pub fn problem_poisson_2d() -> Result<ProblemSpec> {
    let (mesh, degrees) = start(2, 4)?;
    Ok(ProblemSpec {
        name: "poisson2d".into(),
        dim: 2,
        forms: ProblemForms::new(1.0, 0.0, Source::Constant(1.0))?,
        mesh,
        degrees,
        dirichlet: vec![[true, true]; 2],
        exact: None,
        energy_sq: Some(POISSON_2D_ENERGY),
        default_theta: 0.25,
    })
}

/// `(2/π)^6 Σ_{k,l odd} 1 / (k² l² (k² + l²))` with the sum over `l` taken
/// in closed form, `Σ_{l odd} 1/(l² (l² + k²)) = π²/(8k²) - π tanh(πk/2) / (4k³)`,
/// and `k <= kmax`.
pub fn poisson_2d_series_energy(kmax: usize) -> f64 {
    use std::f64::consts::PI;
    let odd: Vec<usize> = (1..=kmax).step_by(2).collect();
    let mut total = 0.0;
    for &k in odd.iter().rev() {
        let k = k as f64;
        let inner = PI * PI / (8.0 * k * k) - PI * (0.5 * PI * k).tanh() / (4.0 * k * k * k);
        total += inner / (k * k);
    }
    (2.0 / PI).powi(6) * total
}

/// Stock problem by CLI name.
pub fn problem_by_name(name: &str, epsilon: f64) -> Result<ProblemSpec> {
    match name {
        "sp1d" => problem_singular_perturbation(epsilon),
        "sing1d" => problem_boundary_singularity(),
        "poisson2d" => problem_poisson_2d(),
        other => Err(Error::InvalidArgument(format!(
            "unknown problem '{other}' (expected sp1d, sing1d or poisson2d)"
        ))),
    }
}

/// `|u|^2 - a(u_W, u_W)`, with `a(u_W, u_W)` accumulated leafwise.
pub fn exact_error_orthogonality(
    space: &HpSpace,
    u: &DVector<f64>,
    problem: &ProblemSpec,
) -> Result<f64> {
    let Some(energy) = problem.energy_sq else {
        return Err(Error::Unsupported(format!(
            "problem '{}' has no reference energy",
            problem.name
        )));
    };
    let mut a_uu = 0.0;
    for &leaf in space.leaves() {
        let e = space.mesh.element(leaf);
        let cell = local_matrices(&problem.forms, &e.lo, &e.hi, space.degree(leaf))?;
        let w = DVector::from_vec(space.local_coefficients(u, leaf)?);
        a_uu += w.dot(&(&cell.a * &w));
    }
    Ok(energy - a_uu)
}

fn gauss20() -> &'static QuadRule {
    static R: OnceLock<QuadRule> = OnceLock::new();
    R.get_or_init(|| gauss_rule(20).expect("20-point Gauss rule"))
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, depth: usize) -> f64 {
    let m = 0.5 * (a + b);
    let rule = gauss20();
    let left = rule.integrate_on(f, a, m);
    let right = rule.integrate_on(f, m, b);
    let halves = left + right;
    if depth == 0 || (halves - whole).abs() <= 1e-22 + 1e-14 * halves.abs() {
        return halves;
    }
    adaptive(f, a, m, left, depth - 1) + adaptive(f, m, b, right, depth - 1)
}

/// `a(u - u_W, u - u_W)` by direct quadrature (1D problems with a closed-form solution).
pub fn exact_error_direct(space: &HpSpace, u: &DVector<f64>, problem: &ProblemSpec) -> Result<f64> {
    let Some(exact) = &problem.exact else {
        return Err(Error::Unsupported(format!(
            "problem '{}' has no pointwise solution",
            problem.name
        )));
    };
    if space.dim() != 1 {
        return Err(Error::Unsupported(
            "direct error quadrature is one-dimensional".into(),
        ));
    }
    let (eps, kappa) = (problem.forms.diffusion, problem.forms.reaction);
    let mut total = 0.0;
    for &leaf in space.leaves() {
        let e = space.mesh.element(leaf);
        let (lo, hi) = (e.lo[0], e.hi[0]);
        let h = hi - lo;
        let p = space.degree(leaf);
        let w = space.local_coefficients(u, leaf)?;
        let density = |x: f64| {
            let t = (2.0 * x - lo - hi) / h;
            let mut vals = vec![0.0; p + 1];
            let mut ders = vec![0.0; p + 1];
            psi_all(p, t, &mut vals, &mut ders);
            let (mut v, mut dv) = (0.0, 0.0);
            for j in 0..=p {
                v += w[j] * vals[j];
                dv += w[j] * ders[j];
            }
            let ev = (exact.u)(x) - v;
            let ed = (exact.du)(x) - dv * 2.0 / h;
            eps * ed * ed + kappa * ev * ev
        };
        total += match exact.singular_at {
            Some(s) if s == lo || s == hi => {
                let sign = if s == lo { 1.0 } else { -1.0 };
                let g = |t: f64| 4.0 * h * t.powi(3) * density(s + sign * h * t.powi(4));
                let whole = gauss20().integrate_on(&g, 0.0, 1.0);
                adaptive(&g, 0.0, 1.0, whole, 30)
            }
            _ => {
                let whole = gauss20().integrate_on(&density, lo, hi);
                adaptive(&density, lo, hi, whole, 30)
            }
        };
    }
    Ok(total)
}

/// Squared energy error: direct quadrature when a pointwise 1D solution is
/// known, orthogonality otherwise. Tiny negative values are clamped to 0.
pub fn exact_error(space: &HpSpace, u: &DVector<f64>, problem: &ProblemSpec) -> Result<f64> {
    let e = if problem.exact.is_some() && space.dim() == 1 {
        exact_error_direct(space, u, problem)?
    } else {
        exact_error_orthogonality(space, u, problem)?
    };
    Ok(if e < 0.0 && e > -1e-12 { 0.0 } else { e })
}

/// Serializable summary of one adaptive run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub epsilon: Option<f64>,
    pub config: AdaptConfig,
    pub history: Vec<IterationRecord>,
    pub final_dofs: usize,
    pub final_elements: usize,
    pub final_error_sq: Option<f64>,
    pub stop: StopReason,
    pub timings: PhaseTimings,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn new(
        problem: &ProblemSpec,
        config: &AdaptConfig,
        outcome: &AdaptOutcome,
        wall_seconds: f64,
    ) -> Self {
        RunReport {
            problem: problem.name.clone(),
            epsilon: (problem.name == "sp1d").then_some(problem.forms.diffusion),
            config: *config,
            history: outcome.history.clone(),
            final_dofs: outcome.space.n_dofs(),
            final_elements: outcome.space.leaves().len(),
            final_error_sq: outcome.final_error_sq,
            stop: outcome.stop,
            timings: outcome.timings,
            wall_seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_global, solve_spd};
    use crate::space::build_space;

    fn solve(
        problem: &ProblemSpec,
        mesh: Mesh,
        degrees: &BTreeMap<usize, usize>,
    ) -> (HpSpace, DVector<f64>) {
        let space = build_space(Arc::new(mesh), degrees).unwrap();
        let (a, b) = assemble_global(&space, &problem.forms).unwrap();
        let u = solve_spd(&a, &b).unwrap();
        (space, u)
    }

    #[test]
    fn singular_perturbation_solution() {
        let pb = problem_singular_perturbation(1e-5).unwrap();
        let ex = pb.exact.clone().unwrap();
        assert_eq!((ex.u)(0.0), 0.0);
        assert!((ex.u)(1.0).abs() < 1e-15);
        assert!(((ex.u)(0.5) - 1.0).abs() < 1e-10);
        // -eps u'' + u = 1 by central differences at a layer point
        let eps = 1e-3;
        let pb = problem_singular_perturbation(eps).unwrap();
        let ex = pb.exact.unwrap();
        let (x, h) = (0.01, 1e-5);
        let upp = ((ex.du)(x + h) - (ex.du)(x - h)) / (2.0 * h);
        assert!((-eps * upp + (ex.u)(x) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn singularity_reference() {
        let pb = problem_boundary_singularity().unwrap();
        let ex = pb.exact.clone().unwrap();
        assert_eq!((ex.u)(1.0), 0.0);
        assert!((ex.du)(1e-8) > 70.0);
        // load against the antiderivative of f times the first hat on [0, h]
        for h in [0.25, 1.0 / 1024.0, 1e-9] {
            let (x, w) = (pb.forms.load_rule.as_ref().unwrap())(&[0.0], &[h]).unwrap();
            let q: f64 = x
                .iter()
                .zip(&w)
                .map(|(x, w)| w * pb.forms.source.value(x) * x[0] / h)
                .sum();
            let exact = 0.25 * h.powf(-0.25);
            assert!(
                (q - exact).abs() <= 1e-10 * exact.max(1.0),
                "h = {h}: {q} vs {exact}"
            );
        }
    }

    #[test]
    fn hat_only_toy_error() {
        let mut pb = problem_boundary_singularity().unwrap();
        pb.forms = ProblemForms::new(1.0, 0.0, Source::Constant(1.0)).unwrap();
        pb.exact = Some(ExactSolution1D {
            u: Arc::new(|x: f64| 0.5 * x * (1.0 - x)),
            du: Arc::new(|x: f64| 0.5 - x),
            singular_at: None,
        });
        pb.energy_sq = Some(1.0 / 12.0);
        let mesh = Mesh::uniform(&[0.0], &[1.0], 2).unwrap();
        let degs = mesh.leaves().into_iter().map(|l| (l, 1)).collect();
        let (space, u) = solve(&pb, mesh, &degs);
        let direct = exact_error_direct(&space, &u, &pb).unwrap();
        let orth = exact_error_orthogonality(&space, &u, &pb).unwrap();
        assert!((direct - 1.0 / 48.0).abs() < 1e-14);
        assert!((orth - 1.0 / 48.0).abs() < 1e-14);
        let degs = space.mesh.leaves().into_iter().map(|l| (l, 2)).collect();
        let (space, u) = solve(&pb, (*space.mesh).clone(), &degs);
        assert!(exact_error(&space, &u, &pb).unwrap().abs() < 1e-12);
    }

    #[test]
    fn error_paths_agree() {
        for pb in [
            problem_singular_perturbation(1e-3).unwrap(),
            problem_boundary_singularity().unwrap(),
        ] {
            let mesh = Mesh::uniform(&[0.0], &[1.0], 7).unwrap();
            let degs = mesh.leaves().into_iter().map(|l| (l, 1 + l % 5)).collect();
            let (space, u) = solve(&pb, mesh, &degs);
            let direct = exact_error_direct(&space, &u, &pb).unwrap();
            let orth = exact_error_orthogonality(&space, &u, &pb).unwrap();
            assert!(
                (direct - orth).abs() < 1e-8,
                "{}: {direct} vs {orth}",
                pb.name
            );
        }
    }

    #[test]
    fn singular_perturbation_energy_two_paths() {
        let pb = problem_singular_perturbation(1e-3).unwrap();
        let ex = pb.exact.clone().unwrap();
        let g = gauss_rule(30).unwrap();
        let mut by_quadrature = 0.0;
        for k in 0..200 {
            let (a, b) = (k as f64 / 200.0, (k + 1) as f64 / 200.0);
            by_quadrature += g.integrate_on(
                &|x: f64| 1e-3 * (ex.du)(x).powi(2) + (ex.u)(x).powi(2),
                a,
                b,
            );
        }
        assert!((by_quadrature - pb.energy_sq.unwrap()).abs() < 1e-12);
        let mesh = Mesh::uniform(&[0.0], &[1.0], 64).unwrap();
        let degs = mesh.leaves().into_iter().map(|l| (l, 8)).collect();
        let (space, u) = solve(&pb, mesh, &degs);
        let a_uu = pb.energy_sq.unwrap() - exact_error_orthogonality(&space, &u, &pb).unwrap();
        assert!((a_uu - by_quadrature).abs() < 1e-7);
    }

    #[test]
    fn poisson_series() {
        assert!((poisson_2d_series_energy(100_001) - POISSON_2D_ENERGY).abs() < 1e-15);
        assert!(problem_by_name("heat", 1.0).is_err());
        assert!(problem_singular_perturbation(0.0).is_err());
    }

    #[test]
    fn poisson_symmetry() {
        let pb = problem_poisson_2d().unwrap();
        let degs = pb.mesh.leaves().into_iter().map(|l| (l, 3)).collect();
        let (space, u) = solve(&pb, pb.mesh.clone(), &degs);
        for (x, y) in [(0.1, 0.3), (0.77, 0.41), (0.5, 0.9)] {
            let a = space.eval_at(&u, &[x, y]).unwrap().0;
            let b = space.eval_at(&u, &[y, x]).unwrap().0;
            assert!((a - b).abs() < 1e-10);
        }
        let e = exact_error(&space, &u, &pb).unwrap();
        assert!(e > 0.0 && e < 1e-3);
    }
}
