//! Sound interval branch-and-bound verification of compiled conditions.
//!
//! A condition `forall x in region: violation(x) < 0` is certified when
//! every surviving box has an interval enclosure with a negative upper
//! bound, falsified when a concrete region point with a nonnegative
//! violation is found, and otherwise reported unknown with the midpoints of
//! the undecided boxes. All interval arithmetic is outward-rounded, so
//! `Certified` and `Falsified` are both sound; only `Unknown` is
//! inconclusive.

pub mod smt;

use crate::expr::Hyperbox;
use crate::model::SetClass;
use crate::rules::{RuleError, VerificationCondition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error("malformed verification problem: {0}")]
    MalformedProblem(String),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierConfig {
    /// Boxes narrower than this fraction of the region's widest extent are
    /// given up on rather than split further.
    pub min_width_rel: f64,
    /// Budget on processed boxes before giving up.
    pub max_boxes: usize,
    /// Concrete falsification candidates evaluated per box (midpoint plus
    /// seeded-random points).
    pub samples_per_box: usize,
    /// Worker threads for the parallel frontier; 0 means the rayon default.
    /// Ignored by the sequential fallback.
    pub workers: usize,
    /// Force the sequential strategy even in parallel builds, for
    /// bit-reproducible runs.
    pub sequential: bool,
    pub seed: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            min_width_rel: 1e-3,
            max_boxes: 1_000_000,
            samples_per_box: 3,
            workers: 0,
            sequential: false,
            seed: 0,
        }
    }
}

/// Outcome of verifying one condition.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Certified {
        boxes_processed: usize,
    },
    /// A concrete region point whose violation is nonnegative.
    Falsified {
        counterexample: Vec<f64>,
        violation: f64,
    },
    /// Some boxes reached the width floor undecided; their midpoints are
    /// reported (capped) as pseudo-counterexamples for further training.
    Unknown {
        undecided: usize,
        smallest_width: f64,
        midpoints: Vec<Vec<f64>>,
        boxes_processed: usize,
    },
    /// The box budget ran out before a conclusion.
    ResourceExhausted {
        boxes_processed: usize,
    },
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified { .. })
    }
}

const MAX_REPORTED_MIDPOINTS: usize = 32;

/// What one box contributed: certified boxes produce nothing.
enum BoxOutcome {
    Done,
    Split(Hyperbox, Hyperbox),
    Undecided(Hyperbox),
    Falsified(Vec<f64>, f64),
}

/// Deterministic per-box RNG stream: worker assignment and processing order
/// never influence which candidate points a box receives.
fn box_rng(b: &Hyperbox, seed: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    for iv in b.intervals() {
        mix(iv.lo.to_bits());
        mix(iv.hi.to_bits());
    }
    ChaCha8Rng::seed_from_u64(h ^ seed)
}

fn process_box(
    vc: &VerificationCondition,
    b: Hyperbox,
    min_width: f64,
    samples_per_box: usize,
    seed: u64,
) -> BoxOutcome {
    match vc.region.classify(&b) {
        SetClass::Outside => return BoxOutcome::Done,
        SetClass::Inside | SetClass::Undecided => {}
    }
    if let Some(gate) = &vc.gate {
        if gate.provably_false_over(&vc.cert, &b) {
            return BoxOutcome::Done;
        }
    }
    // Concrete falsification candidates: midpoint first, then seeded
    // random points.
    let mut rng = box_rng(&b, seed);
    for k in 0..samples_per_box {
        let x: Vec<f64> = if k == 0 {
            b.midpoint()
        } else {
            b.intervals()
                .iter()
                .map(|iv| rng.gen_range(iv.lo..=iv.hi))
                .collect()
        };
        if !vc.region.contains(&x).unwrap_or(false) {
            continue;
        }
        if let Some(gate) = &vc.gate {
            if !gate.holds_at(&vc.cert, &x).unwrap_or(false) {
                continue;
            }
        }
        if let Ok(v) = vc.violation_with(&vc.cert, vc.ctrl.as_ref(), &x) {
            if v >= 0.0 {
                return BoxOutcome::Falsified(x, v);
            }
        }
    }
    // The enclosure is taken over the whole box, a superset of the gated
    // region inside it, so a negative upper bound is conclusive.
    if let Ok(iv) = vc.enclosure(&b) {
        if iv.hi < 0.0 {
            return BoxOutcome::Done;
        }
    }
    if b.max_width() < min_width {
        return BoxOutcome::Undecided(b);
    }
    let axis = b.widest_dim();
    let (left, right) = b.bisect(axis);
    BoxOutcome::Split(left, right)
}

struct Accumulator {
    processed: usize,
    undecided: usize,
    smallest_width: f64,
    midpoints: Vec<Vec<f64>>,
    falsified: Option<(Vec<f64>, f64)>,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            processed: 0,
            undecided: 0,
            smallest_width: f64::INFINITY,
            midpoints: Vec::new(),
            falsified: None,
        }
    }

    fn absorb(&mut self, outcome: &BoxOutcome) {
        match outcome {
            BoxOutcome::Done | BoxOutcome::Split(..) => {}
            BoxOutcome::Undecided(b) => {
                self.undecided += 1;
                self.smallest_width = self.smallest_width.min(b.max_width());
                if self.midpoints.len() < MAX_REPORTED_MIDPOINTS {
                    self.midpoints.push(b.midpoint());
                }
            }
            BoxOutcome::Falsified(x, v) => {
                if self.falsified.is_none() {
                    self.falsified = Some((x.clone(), *v));
                }
            }
        }
    }

    fn verdict(self) -> Verdict {
        if let Some((counterexample, violation)) = self.falsified {
            return Verdict::Falsified {
                counterexample,
                violation,
            };
        }
        if self.undecided > 0 {
            return Verdict::Unknown {
                undecided: self.undecided,
                smallest_width: self.smallest_width,
                midpoints: self.midpoints,
                boxes_processed: self.processed,
            };
        }
        Verdict::Certified {
            boxes_processed: self.processed,
        }
    }
}

/// Breadth-first sequential branch-and-bound.
pub fn verify_vc_sequential(vc: &VerificationCondition, config: &VerifierConfig) -> Verdict {
    let root = vc.region.include.base.clone();
    let min_width = config.min_width_rel * root.max_width();
    let mut queue = VecDeque::from([root]);
    let mut acc = Accumulator::new();
    while let Some(b) = queue.pop_front() {
        if acc.processed >= config.max_boxes {
            return Verdict::ResourceExhausted {
                boxes_processed: acc.processed,
            };
        }
        acc.processed += 1;
        let outcome = process_box(vc, b, min_width, config.samples_per_box, config.seed);
        acc.absorb(&outcome);
        if let Some((counterexample, violation)) = acc.falsified {
            return Verdict::Falsified {
                counterexample,
                violation,
            };
        }
        if let BoxOutcome::Split(l, r) = outcome {
            queue.push_back(l);
            queue.push_back(r);
        }
    }
    acc.verdict()
}

/// Parallel frontier-wave branch-and-bound. Each wave maps the current
/// frontier in parallel; per-box RNG streams make `Certified` and `Unknown`
/// outcomes identical to the sequential strategy, though which
/// counterexample surfaces first may differ.
#[cfg(feature = "parallel")]
pub fn verify_vc_parallel(vc: &VerificationCondition, config: &VerifierConfig) -> Verdict {
    use rayon::prelude::*;
    let run = || {
        let root = vc.region.include.base.clone();
        let min_width = config.min_width_rel * root.max_width();
        let mut frontier = vec![root];
        let mut acc = Accumulator::new();
        while !frontier.is_empty() {
            if acc.processed + frontier.len() > config.max_boxes {
                return Verdict::ResourceExhausted {
                    boxes_processed: acc.processed,
                };
            }
            acc.processed += frontier.len();
            let outcomes: Vec<BoxOutcome> = frontier
                .into_par_iter()
                .map(|b| process_box(vc, b, min_width, config.samples_per_box, config.seed))
                .collect();
            frontier = Vec::new();
            for outcome in &outcomes {
                acc.absorb(outcome);
            }
            if let Some((counterexample, violation)) = acc.falsified {
                return Verdict::Falsified {
                    counterexample,
                    violation,
                };
            }
            for outcome in outcomes {
                if let BoxOutcome::Split(l, r) = outcome {
                    frontier.push(l);
                    frontier.push(r);
                }
            }
        }
        acc.verdict()
    };
    if config.workers > 0 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
        {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    } else {
        run()
    }
}

/// Verify one condition with the default strategy for the build, unless
/// the config forces the sequential one.
pub fn verify_vc(vc: &VerificationCondition, config: &VerifierConfig) -> Verdict {
    if config.sequential {
        return verify_vc_sequential(vc, config);
    }
    #[cfg(feature = "parallel")]
    {
        verify_vc_parallel(vc, config)
    }
    #[cfg(not(feature = "parallel"))]
    {
        verify_vc_sequential(vc, config)
    }
}

/// Cheap falsification screen: evaluate the violation at random region
/// points and return the first nonnegative one.
pub fn falsify_random(
    vc: &VerificationCondition,
    attempts: usize,
    rng: &mut impl Rng,
) -> Option<(Vec<f64>, f64)> {
    let base = &vc.region.include.base;
    for _ in 0..attempts {
        let x: Vec<f64> = base
            .intervals()
            .iter()
            .map(|iv| rng.gen_range(iv.lo..=iv.hi))
            .collect();
        if !vc.region.contains(&x).unwrap_or(false) {
            continue;
        }
        if let Some(gate) = &vc.gate {
            if !gate.holds_at(&vc.cert, &x).unwrap_or(false) {
                continue;
            }
        }
        if let Ok(v) = vc.violation_with(&vc.cert, vc.ctrl.as_ref(), &x) {
            if v >= 0.0 {
                return Some((x, v));
            }
        }
    }
    None
}

/// Verify every condition, in order.
pub fn verify_all(
    vcs: &[VerificationCondition],
    config: &VerifierConfig,
) -> Result<Vec<(String, Verdict)>, VerifierError> {
    if vcs.is_empty() {
        return Err(VerifierError::MalformedProblem(
            "no verification conditions to check".into(),
        ));
    }
    Ok(vcs
        .iter()
        .map(|vc| (vc.id.clone(), verify_vc(vc, config)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims, Hyperbox};
    use crate::model::{
        validate_problem, ConstrainedSet, ProblemParts, RuleParams, Spec, System, SystemKind,
    };
    use crate::net::{Activation, Layer, Network, NetworkShape};
    use crate::rules::compile_rules;

    fn square_net(scale: f64) -> Network {
        Network {
            shape: NetworkShape::new(1, vec![(1, Activation::Square)], 1),
            layers: vec![
                Layer {
                    weights: vec![vec![1.0]],
                    bias: vec![0.0],
                    activation: Some(Activation::Square),
                },
                Layer {
                    weights: vec![vec![scale]],
                    bias: vec![0.0],
                    activation: None,
                },
            ],
        }
    }

    fn lyapunov_vcs(scale: f64) -> Vec<crate::rules::VerificationCondition> {
        let problem = validate_problem(ProblemParts {
            system: System {
                kind: SystemKind::ContinuousDeterministic,
                n_state: 1,
                n_input: 0,
                dynamics: vec![parse_expr("-x1", Dims::state_only(1)).unwrap()],
                noise: vec![],
                input_box: None,
            },
            domain: ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(-1.0, 1.0)]).unwrap()),
            spec: Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            certificate_shape: NetworkShape::new(1, vec![(1, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 0,
        })
        .unwrap();
        compile_rules(&problem, &square_net(scale), None).unwrap()
    }

    #[test]
    fn certifies_true_lyapunov_conditions() {
        for vc in lyapunov_vcs(1.0) {
            let verdict = verify_vc_sequential(&vc, &VerifierConfig::default());
            assert!(verdict.is_certified(), "{}: {verdict:?}", vc.id);
        }
    }

    #[test]
    fn falsifies_sign_flipped_certificate() {
        // V(x) = -x^2 fails positivity everywhere outside the ball.
        let vcs = lyapunov_vcs(-1.0);
        let pos = vcs.iter().find(|vc| vc.id == "stab/pos").unwrap();
        match verify_vc_sequential(pos, &VerifierConfig::default()) {
            Verdict::Falsified {
                counterexample,
                violation,
            } => {
                // The returned point really is a region point with a
                // nonnegative violation.
                assert!(pos.region.contains(&counterexample).unwrap());
                assert!(violation >= 0.0);
                assert_eq!(pos.violation(&counterexample).unwrap(), violation);
            }
            other => panic!("expected falsification, got {other:?}"),
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        // The decrease enclosure over the root box is inconclusive, so with
        // candidate sampling off and no width floor the search must split
        // past the tiny budget.
        let vcs = lyapunov_vcs(1.0);
        let dec = vcs.iter().find(|vc| vc.id == "stab/dec").unwrap();
        let config = VerifierConfig {
            max_boxes: 3,
            min_width_rel: 0.0,
            samples_per_box: 0,
            ..VerifierConfig::default()
        };
        match verify_vc_sequential(dec, &config) {
            Verdict::ResourceExhausted { boxes_processed } => assert!(boxes_processed <= 3),
            other => panic!("unexpected verdict {other:?}"),
        }
    }

    #[test]
    fn unknown_reports_midpoints() {
        // A hairline band gate hides every concrete candidate, while boxes
        // near the origin can neither be pruned (the certificate's range
        // touches zero) nor certified; a coarse width floor leaves them
        // undecided.
        let vcs = lyapunov_vcs(1.0);
        let dec = vcs.iter().find(|vc| vc.id == "stab/dec").unwrap();
        let mut gated = dec.clone();
        gated.gate = Some(crate::rules::Gate::AbsBand(1e-12));
        let config = VerifierConfig {
            min_width_rel: 0.2,
            ..VerifierConfig::default()
        };
        match verify_vc_sequential(&gated, &config) {
            Verdict::Certified { .. } => {}
            Verdict::Unknown {
                undecided,
                midpoints,
                ..
            } => {
                assert!(undecided > 0);
                assert!(!midpoints.is_empty());
            }
            other => panic!("unexpected verdict {other:?}"),
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_on_certify() {
        for vc in lyapunov_vcs(1.0) {
            let config = VerifierConfig {
                workers: 4,
                ..VerifierConfig::default()
            };
            let seq = verify_vc_sequential(&vc, &VerifierConfig::default());
            let par = verify_vc_parallel(&vc, &config);
            assert_eq!(seq, par, "{}", vc.id);
        }
    }

    #[test]
    fn random_falsification_finds_gross_violations() {
        let vcs = lyapunov_vcs(-1.0);
        let pos = vcs.iter().find(|vc| vc.id == "stab/pos").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, v) = falsify_random(pos, 100, &mut rng).unwrap();
        assert!(v >= 0.0);
        assert!(pos.region.contains(&x).unwrap());
    }

    #[test]
    fn verify_all_rejects_empty_input() {
        assert!(matches!(
            verify_all(&[], &VerifierConfig::default()),
            Err(VerifierError::MalformedProblem(_))
        ));
    }
}
