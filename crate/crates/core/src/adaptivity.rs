//! The adaptive loop: solve, predict, mark, enrich.

use crate::assembly::{assemble_global, solve_spd};
use crate::basis::MAX_DEGREE;
use crate::error::{invalid, Error, Result};
use crate::mesh::Mesh;
use crate::predictor::{best_enrichment, Candidate, ElementPrediction, PVariant, PredictorConfig};
use crate::problems::{exact_error, ProblemSpec};
use crate::space::{build_space_with, HpSpace};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub theta: f64,
    pub max_iterations: usize,
    pub max_dofs: usize,
    pub p_cap: usize,
    pub p_variant: PVariant,
    /// Prediction threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            theta: 0.5,
            max_iterations: 30,
            max_dofs: usize::MAX,
            p_cap: 20,
            p_variant: PVariant::Full,
            threads: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return invalid(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if self.p_cap == 0 || self.p_cap >= MAX_DEGREE {
            return invalid(format!(
                "p_cap must lie in 1..{MAX_DEGREE}, got {}",
                self.p_cap
            ));
        }
        if self.threads == Some(0) {
            return invalid("thread count must be positive");
        }
        Ok(())
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            p_variant: self.p_variant,
            p_cap: self.p_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementChoice {
    pub leaf: usize,
    pub candidate: Candidate,
    pub delta_e_sq: f64,
}

/// One pass of the loop, describing the solution it started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(rename = "N")]
    pub n_dofs: usize,
    pub n_elements: usize,
    pub error_sq: Option<f64>,
    /// Sum of the predicted reductions of the marked elements.
    pub predicted_total: f64,
    pub marked: Vec<usize>,
    pub choices: Vec<ElementChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    IterationBudget,
    DofBudget,
    EmptyMarking,
}

/// Accumulated wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub solve: f64,
    pub error: f64,
    pub predict: f64,
    pub mark: f64,
    pub enrich: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub history: Vec<IterationRecord>,
    pub space: HpSpace,
    pub solution: DVector<f64>,
    pub final_error_sq: Option<f64>,
    pub stop: StopReason,
    pub timings: PhaseTimings,
}

/// What an observer sees at each step. `predictions` is `None` for the final
/// solution.
pub struct StepView<'a> {
    pub iteration: usize,
    pub space: &'a HpSpace,
    pub solution: &'a DVector<f64>,
    pub error_sq: Option<f64>,
    pub predictions: Option<&'a [ElementPrediction]>,
}

/// Smallest set of largest values whose sum reaches `theta` times the total.
/// Values `<= 0` (and NaN) never enter; ties go to the smaller id. Returns
/// ids in ascending order.
pub fn doerfler_mark(values: &[(usize, f64)], theta: f64) -> Vec<usize> {
    let mut pos: Vec<(usize, f64)> = values.iter().copied().filter(|&(_, v)| v > 0.0).collect();
    pos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = pos.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let target = theta * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (id, v) in pos {
        out.push(id);
        acc += v;
        if acc >= target {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// Applies the chosen enrichments: p-choices raise the degree (saturating at
/// `p_cap`), hp-choices split at the midpoint with the given child degrees.
/// In 2D, closure refinements keep the parent degree on all children.
pub fn apply_enrichments(
    space: &HpSpace,
    choices: &[(usize, Candidate)],
    p_cap: usize,
) -> Result<(Mesh, BTreeMap<usize, usize>)> {
    let mut mesh = (*space.mesh).clone();
    let mut degrees = space.degrees.clone();
    let nchild = 1usize << mesh.dim;
    for (leaf, cand) in choices {
        let Some(&p) = degrees.get(leaf) else {
            return invalid(format!("element {leaf} is not a leaf of the current mesh"));
        };
        if let Candidate::P = cand {
            degrees.insert(*leaf, (p + 1).min(p_cap));
        }
    }
    let mut refined = Vec::new();
    for (leaf, cand) in choices {
        if let Candidate::Hp(child_degrees) = cand {
            if child_degrees.len() != nchild
                || child_degrees.iter().any(|&q| q == 0 || q >= MAX_DEGREE)
            {
                return invalid(format!(
                    "bad child degrees {child_degrees:?} for element {leaf}"
                ));
            }
            let ch = mesh.refine(*leaf)?;
            degrees.remove(leaf);
            for (c, &q) in ch.iter().zip(child_degrees) {
                degrees.insert(*c, q);
            }
            refined.push(*leaf);
        }
    }
    for parent in mesh.close_one_irregular(&refined)? {
        let Some(p) = degrees.remove(&parent) else {
            return Err(Error::Internal(format!(
                "closure refined a non-leaf {parent}"
            )));
        };
        for c in mesh.element(parent).children.clone().unwrap_or_default() {
            degrees.insert(c, p);
        }
    }
    Ok((mesh, degrees))
}

fn predict_all(
    space: &HpSpace,
    u: &DVector<f64>,
    problem: &ProblemSpec,
    energy: f64,
    config: &AdaptConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<ElementPrediction>> {
    let pc = config.predictor();
    let run = || {
        space
            .leaves()
            .par_iter()
            .map(|&leaf| best_enrichment(space, u, leaf, &problem.forms, energy, &pc))
            .collect::<Result<Vec<_>>>()
    };
    match pool {
        Some(p) => p.install(run),
        None => run(),
    }
}

/// Runs the adaptive loop without observer.
pub fn adapt_loop(problem: &ProblemSpec, config: &AdaptConfig) -> Result<AdaptOutcome> {
    adapt_loop_with(problem, config, &mut |_| Ok(()))
}

/// Runs the adaptive loop, calling `observer` after every prediction step and
/// once for the final solution.
pub fn adapt_loop_with(
    problem: &ProblemSpec,
    config: &AdaptConfig,
    observer: &mut dyn FnMut(&StepView) -> Result<()>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    let pool = match config.threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let mut mesh = Arc::new(problem.mesh.clone());
    let mut degrees = problem.degrees.clone();
    let mut history = Vec::new();
    let mut timings = PhaseTimings::default();
    let mut iteration = 0;
    loop {
        let ctx = |e: Error| Error::AtIteration {
            iteration,
            source: Box::new(e),
        };
        let t = Instant::now();
        let space =
            build_space_with(mesh.clone(), &degrees, problem.dirichlet.clone()).map_err(ctx)?;
        let (a, b) = assemble_global(&space, &problem.forms).map_err(ctx)?;
        let u = solve_spd(&a, &b).map_err(ctx)?;
        let energy = u.dot(&b);
        timings.solve += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let error_sq = match problem.energy_sq {
            Some(_) => Some(exact_error(&space, &u, problem).map_err(ctx)?),
            None => None,
        };
        timings.error += t.elapsed().as_secs_f64();

        let stop = if iteration >= config.max_iterations {
            Some(StopReason::IterationBudget)
        } else if space.n_dofs() >= config.max_dofs {
            Some(StopReason::DofBudget)
        } else {
            None
        };
        let finish = |space: HpSpace,
                      u: DVector<f64>,
                      stop,
                      history,
                      timings,
                      observer: &mut dyn FnMut(&StepView) -> Result<()>| {
            observer(&StepView {
                iteration,
                space: &space,
                solution: &u,
                error_sq,
                predictions: None,
            })?;
            Ok(AdaptOutcome {
                history,
                space,
                solution: u,
                final_error_sq: error_sq,
                stop,
                timings,
            })
        };
        if let Some(stop) = stop {
            return finish(space, u, stop, history, timings, observer);
        }

        let t = Instant::now();
        let preds = predict_all(&space, &u, problem, energy, config, pool.as_ref()).map_err(ctx)?;
        timings.predict += t.elapsed().as_secs_f64();
        observer(&StepView {
            iteration,
            space: &space,
            solution: &u,
            error_sq,
            predictions: Some(&preds),
        })
        .map_err(ctx)?;

        let t = Instant::now();
        let values: Vec<(usize, f64)> = preds.iter().map(|p| (p.leaf, p.delta_e_sq)).collect();
        let marked = doerfler_mark(&values, config.theta);
        timings.mark += t.elapsed().as_secs_f64();
        if marked.is_empty() {
            return finish(
                space,
                u,
                StopReason::EmptyMarking,
                history,
                timings,
                observer,
            );
        }
        let by_leaf: BTreeMap<usize, &ElementPrediction> =
            preds.iter().map(|p| (p.leaf, p)).collect();
        let mut choices = Vec::with_capacity(marked.len());
        for &leaf in &marked {
            let p = by_leaf[&leaf];
            let cand = p.best.clone().ok_or_else(|| {
                ctx(Error::Internal(format!(
                    "marked element {leaf} has no candidate"
                )))
            })?;
            choices.push(ElementChoice {
                leaf,
                candidate: cand,
                delta_e_sq: p.delta_e_sq,
            });
        }

        let t = Instant::now();
        let pairs: Vec<(usize, Candidate)> = choices
            .iter()
            .map(|c| (c.leaf, c.candidate.clone()))
            .collect();
        let (new_mesh, new_degrees) =
            apply_enrichments(&space, &pairs, config.p_cap).map_err(ctx)?;
        timings.enrich += t.elapsed().as_secs_f64();

        history.push(IterationRecord {
            iteration,
            n_dofs: space.n_dofs(),
            n_elements: space.leaves().len(),
            error_sq,
            predicted_total: choices.iter().map(|c| c.delta_e_sq).sum(),
            marked,
            choices,
        });
        mesh = Arc::new(new_mesh);
        degrees = new_degrees;
        iteration += 1;
    }
}

/// History CSV: `iter,N,error_sq,predicted_total,marked_count`, floats with
/// 17 significant digits (`nan` when no reference is available).
pub fn write_history_csv(history: &[IterationRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "iter,N,error_sq,predicted_total,marked_count")?;
    for r in history {
        let err = r
            .error_sq
            .map_or("nan".to_string(), |e| format!("{e:.16e}"));
        writeln!(
            out,
            "{},{},{},{:.16e},{}",
            r.iteration,
            r.n_dofs,
            err,
            r.predicted_total,
            r.marked.len()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{ProblemForms, Source};
    use crate::space::build_space;

    #[test]
    fn marking_examples() {
        let v = [(0, 4.0), (1, 3.0), (2, 2.0), (3, 1.0)];
        assert_eq!(doerfler_mark(&v, 0.5), vec![0, 1]);
        assert_eq!(doerfler_mark(&v, 1.0), vec![0, 1, 2, 3]);
        assert_eq!(
            doerfler_mark(&[(0, 0.0), (1, 0.0)], 0.5),
            Vec::<usize>::new()
        );
        assert_eq!(doerfler_mark(&[], 0.5), Vec::<usize>::new());
        assert_eq!(
            doerfler_mark(&[(5, 1.0), (2, 1.0), (9, -3.0)], 0.4),
            vec![2]
        );
        assert_eq!(
            doerfler_mark(&[(5, 1.0), (2, -1.0), (9, f64::NAN)], 1.0),
            vec![5]
        );
    }

    fn toy() -> ProblemSpec {
        let mut pb = crate::problems::problem_singular_perturbation(1.0).unwrap();
        pb.forms = ProblemForms::new(1.0, 0.0, Source::Constant(1.0)).unwrap();
        pb.mesh = Mesh::uniform(&[0.0], &[1.0], 2).unwrap();
        pb.degrees = pb.mesh.leaves().into_iter().map(|l| (l, 1)).collect();
        pb.exact = None;
        pb.energy_sq = Some(1.0 / 12.0);
        pb
    }

    #[test]
    fn enrichment_application() {
        let mesh = Arc::new(Mesh::uniform(&[0.0], &[1.0], 2).unwrap());
        let degs: BTreeMap<usize, usize> = [(0, 1), (1, 1)].into_iter().collect();
        let s = build_space(mesh, &degs).unwrap();
        let (m, d) = apply_enrichments(&s, &[(1, Candidate::P)], 20).unwrap();
        assert_eq!(m.num_leaves(), 2);
        assert_eq!(d[&1], 2);
        let (m, d) = apply_enrichments(&s, &[(0, Candidate::Hp(vec![1, 1]))], 20).unwrap();
        assert_eq!(m.num_leaves(), 3);
        assert_eq!(
            build_space(Arc::new(m), &d).unwrap().n_dofs(),
            s.n_dofs() + 1
        );
        let (_, d) = apply_enrichments(&s, &[(0, Candidate::P)], 1).unwrap();
        assert_eq!(d[&0], 1);
        assert!(apply_enrichments(&s, &[(7, Candidate::P)], 20).is_err());

        let mesh = Arc::new(Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap());
        let degs: BTreeMap<usize, usize> = mesh.leaves().into_iter().map(|l| (l, 2)).collect();
        let s = build_space(mesh, &degs).unwrap();
        let (m, d) = apply_enrichments(&s, &[(0, Candidate::Hp(vec![2; 4]))], 20).unwrap();
        assert_eq!(m.num_leaves(), 7);
        let s2 = build_space(Arc::new(m), &d).unwrap();
        assert!(s2.constraint_count() > 0);
    }

    #[test]
    fn closure_children_inherit_degree() {
        let mesh = Arc::new(Mesh::uniform(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap());
        let degs: BTreeMap<usize, usize> = mesh.leaves().into_iter().map(|l| (l, 3)).collect();
        let s = build_space(mesh, &degs).unwrap();
        let (m, d) = apply_enrichments(&s, &[(0, Candidate::Hp(vec![2; 4]))], 20).unwrap();
        let child = m.element(0).children.clone().unwrap()[3];
        let s = build_space(Arc::new(m), &d).unwrap();
        let (m, d) = apply_enrichments(&s, &[(child, Candidate::Hp(vec![1; 4]))], 20).unwrap();
        assert!(m.is_one_irregular());
        let closed: Vec<usize> = [1usize, 2, 3]
            .into_iter()
            .filter(|&e| m.element(e).children.is_some())
            .collect();
        assert!(!closed.is_empty());
        for e in closed {
            for c in m.element(e).children.clone().unwrap() {
                assert_eq!(d[&c], 3);
            }
        }
    }

    #[test]
    fn toy_loop_one_step() {
        let cfg = AdaptConfig {
            theta: 1.0,
            max_iterations: 1,
            ..Default::default()
        };
        let out = adapt_loop(&toy(), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        let h = &out.history[0];
        assert_eq!(h.n_dofs, 1);
        assert_eq!(h.marked, vec![0, 1]);
        assert!(h.choices.iter().all(|c| c.candidate == Candidate::P));
        assert!((h.predicted_total - 2.0 / 96.0).abs() < 1e-15);
        assert_eq!(out.space.n_dofs(), 3);
        assert_eq!(out.stop, StopReason::IterationBudget);
        // p-enrichment on both elements reproduces the quadratic solution
        assert!(out.final_error_sq.unwrap().abs() < 1e-14);
    }

    #[test]
    fn dof_budget_stops_immediately() {
        let cfg = AdaptConfig {
            max_dofs: 1,
            ..Default::default()
        };
        let out = adapt_loop(&toy(), &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.stop, StopReason::DofBudget);
        assert!(adapt_loop(
            &toy(),
            &AdaptConfig {
                theta: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn singular_perturbation_errors_decrease() {
        let pb = crate::problems::problem_singular_perturbation(1e-3).unwrap();
        let cfg = AdaptConfig {
            theta: 0.5,
            max_iterations: 15,
            ..Default::default()
        };
        let out = adapt_loop(&pb, &cfg).unwrap();
        let mut errs: Vec<f64> = out.history.iter().map(|r| r.error_sq.unwrap()).collect();
        errs.push(out.final_error_sq.unwrap());
        assert_eq!(errs.len(), 16);
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
        let ns: Vec<usize> = out.history.iter().map(|r| r.n_dofs).collect();
        assert!(ns.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn history_csv_format() {
        let cfg = AdaptConfig {
            theta: 1.0,
            max_iterations: 2,
            ..Default::default()
        };
        let out = adapt_loop(&toy(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&out.history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("iter,N,error_sq,predicted_total,marked_count")
        );
        assert!(lines.next().unwrap().starts_with("0,1,2.0833333333333"));
    }
}
