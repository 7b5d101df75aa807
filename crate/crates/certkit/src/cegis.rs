//! The counterexample-guided synthesis loop.
//!
//! Each iteration trains the networks on the current datasets, then tries
//! to falsify the compiled conditions cheaply with random sampling before
//! paying for branch-and-bound. Counterexamples (and midpoints of undecided
//! boxes) flow back into the datasets with increased weight. When the
//! learner plateaus without producing new counterexamples, the networks are
//! reinitialised from a fresh seed, up to a restart budget.

use crate::learner::{train, Dataset, TrainConfig, TrainError, TrainReport};
use crate::model::{ModelError, Problem, Spec};
use crate::net::Network;
use crate::rules::{compile_rules, RuleError, VerificationCondition};
use crate::verifier::{verify_all, Verdict, VerifierConfig, VerifierError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CegisError {
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CegisConfig {
    pub max_iterations: usize,
    /// Initial samples per condition region.
    pub initial_samples: usize,
    /// Perturbed copies added around each counterexample.
    pub cex_spread: usize,
    /// Perturbation radius as a fraction of the widest domain extent.
    pub cex_radius_rel: f64,
    /// Loss weight of counterexample samples.
    pub cex_weight: f64,
    /// Random falsification attempts per condition before branch-and-bound.
    pub falsify_attempts: usize,
    /// Network reinitialisations allowed after plateaus or divergence.
    pub max_restarts: usize,
    pub train: TrainConfig,
    pub verifier: VerifierConfig,
}

impl Default for CegisConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_samples: 500,
            cex_spread: 4,
            cex_radius_rel: 0.05,
            cex_weight: 10.0,
            falsify_attempts: 1000,
            max_restarts: 3,
            train: TrainConfig::default(),
            verifier: VerifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub restart: usize,
    pub train: TrainReport,
    /// Counterexamples absorbed this iteration, per condition id.
    pub counterexamples: Vec<(String, usize)>,
    /// Verdict ids and whether each certified, when branch-and-bound ran.
    pub verdicts: Vec<(String, bool)>,
}

/// A derived quantitative bound reported alongside a certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantitativeBound {
    pub description: String,
    pub value: f64,
    /// The bound carries no information (for example a probability above
    /// one).
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CegisResult {
    pub certified: bool,
    pub certificate: Network,
    pub controller: Option<Network>,
    /// Final verdict per condition id.
    pub verdicts: Vec<(String, Verdict)>,
    pub iterations: Vec<IterationRecord>,
    pub restarts: usize,
    pub bound: Option<QuantitativeBound>,
}

/// Compile and verify under fixed weights; the entry point behind the
/// `check` workflow.
pub fn check_certificate(
    problem: &Problem,
    cert: &Network,
    ctrl: Option<&Network>,
    config: &VerifierConfig,
) -> Result<Vec<(String, Verdict)>, CegisError> {
    let vcs = compile_rules(problem, cert, ctrl)?;
    Ok(verify_all(&vcs, config)?)
}

/// Quantitative consequence of a certified certificate, where the rule has
/// one.
pub fn quantitative_bound(problem: &Problem, cert: &Network) -> Option<QuantitativeBound> {
    match &problem.spec {
        Spec::ProbabilisticSafety { init, level, .. } => {
            // sup over the initial set of B / level bounds the probability
            // of ever reaching the unsafe set while inside the domain.
            let sup = cert.interval_forward(&init.base).ok()?[0].hi;
            let value = (sup / level).max(0.0);
            Some(QuantitativeBound {
                description: "probability of reaching the unsafe set from the initial set".into(),
                vacuous: value >= 1.0,
                value,
            })
        }
        Spec::Reachability { decrease, .. }
        | Spec::ReachWhileAvoid { decrease, .. }
        | Spec::ProbabilisticReachability { decrease, .. } => {
            let sup = cert.interval_forward(&problem.domain.base).ok()?[0].hi;
            let value = (sup / decrease).max(0.0);
            Some(QuantitativeBound {
                description: match &problem.spec {
                    Spec::ProbabilisticReachability { .. } => {
                        "bound on the expected number of steps to the target".into()
                    }
                    _ => "bound on the number of steps to the target".into(),
                },
                value,
                vacuous: false,
            })
        }
        _ => None,
    }
}

fn init_networks(problem: &Problem, seed: u64) -> (Network, Option<Network>) {
    let cert = Network::init(&problem.certificate_shape, seed);
    let ctrl = problem
        .controller_shape
        .as_ref()
        .map(|shape| Network::init(shape, seed.wrapping_add(0x9e3779b97f4a7c15)));
    (cert, ctrl)
}

fn initial_datasets(
    vcs: &[VerificationCondition],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Dataset>, ModelError> {
    vcs.iter()
        .map(|vc| Ok(Dataset::from_points(vc.region.sample(samples, rng)?)))
        .collect()
}

/// Run the loop to completion or exhaustion.
pub fn run_cegis(problem: &Problem, config: &CegisConfig) -> Result<CegisResult, CegisError> {
    let cex_radius = config.cex_radius_rel * problem.domain.base.max_width();
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed ^ 0xc2b2ae3d27d4eb4f);
    let mut restart = 0usize;
    let (mut cert, mut ctrl) = init_networks(problem, problem.seed);
    let mut vcs = compile_rules(problem, &cert, ctrl.as_ref())?;
    let mut datasets = initial_datasets(&vcs, config.initial_samples, &mut rng)?;
    let mut iterations = Vec::new();
    let mut last_verdicts: Vec<(String, Verdict)> = Vec::new();

    let do_restart = |cert: &mut Network,
                          ctrl: &mut Option<Network>,
                          vcs: &mut Vec<VerificationCondition>,
                          datasets: &mut Vec<Dataset>,
                          restart: &mut usize,
                          rng: &mut ChaCha8Rng|
     -> Result<bool, CegisError> {
        if *restart >= config.max_restarts {
            return Ok(false);
        }
        *restart += 1;
        let (c, k) = init_networks(problem, problem.seed.wrapping_add(*restart as u64));
        *cert = c;
        *ctrl = k;
        *vcs = compile_rules(problem, cert, ctrl.as_ref())?;
        *datasets = initial_datasets(vcs, config.initial_samples, rng)?;
        Ok(true)
    };

    for iteration in 1..=config.max_iterations {
        let report = match train(
            &vcs,
            &datasets,
            &mut cert,
            ctrl.as_mut(),
            &config.train,
        ) {
            Ok(r) => r,
            Err(TrainError::Divergence { .. }) => {
                if do_restart(
                    &mut cert,
                    &mut ctrl,
                    &mut vcs,
                    &mut datasets,
                    &mut restart,
                    &mut rng,
                )? {
                    continue;
                }
                return Err(TrainError::Divergence {
                    loss: f64::INFINITY,
                    initial: 0.0,
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        };
        // Refresh the weight snapshots the verifier and gates see.
        vcs = compile_rules(problem, &cert, ctrl.as_ref())?;

        let mut record = IterationRecord {
            iteration,
            restart,
            train: report,
            counterexamples: Vec::new(),
            verdicts: Vec::new(),
        };

        // Cheap falsification screen first; a hit skips branch-and-bound
        // for this iteration.
        let mut found_cheap = false;
        for (vc, data) in vcs.iter().zip(datasets.iter_mut()) {
            if let Some((x, _)) =
                crate::verifier::falsify_random(vc, config.falsify_attempts, &mut rng)
            {
                data.absorb_counterexample(
                    vc,
                    &x,
                    iteration,
                    config.cex_weight,
                    config.cex_spread,
                    cex_radius,
                    &mut rng,
                );
                record.counterexamples.push((vc.id.clone(), 1));
                found_cheap = true;
            }
        }
        if found_cheap {
            iterations.push(record);
            continue;
        }

        let verdicts = verify_all(&vcs, &config.verifier)?;
        record.verdicts = verdicts
            .iter()
            .map(|(id, v)| (id.clone(), v.is_certified()))
            .collect();
        let mut new_points = 0usize;
        for ((vc, data), (id, verdict)) in vcs.iter().zip(datasets.iter_mut()).zip(&verdicts) {
            debug_assert_eq!(&vc.id, id);
            match verdict {
                Verdict::Certified { .. } | Verdict::ResourceExhausted { .. } => {}
                Verdict::Falsified { counterexample, .. } => {
                    data.absorb_counterexample(
                        vc,
                        counterexample,
                        iteration,
                        config.cex_weight,
                        config.cex_spread,
                        cex_radius,
                        &mut rng,
                    );
                    record.counterexamples.push((vc.id.clone(), 1));
                    new_points += 1;
                }
                Verdict::Unknown { midpoints, .. } => {
                    // Undecided midpoints are pseudo-counterexamples: they
                    // mark where the enclosure could not be pushed below
                    // zero.
                    for x in midpoints {
                        data.absorb_counterexample(
                            vc,
                            x,
                            iteration,
                            config.cex_weight,
                            config.cex_spread,
                            cex_radius,
                            &mut rng,
                        );
                    }
                    record
                        .counterexamples
                        .push((vc.id.clone(), midpoints.len()));
                    new_points += midpoints.len();
                }
            }
        }
        let all_certified = verdicts.iter().all(|(_, v)| v.is_certified());
        iterations.push(record);
        last_verdicts = verdicts;
        if all_certified {
            let bound = quantitative_bound(problem, &cert);
            return Ok(CegisResult {
                certified: true,
                certificate: cert,
                controller: ctrl,
                verdicts: last_verdicts,
                iterations,
                restarts: restart,
                bound,
            });
        }
        // Plateau: the learner could not fit the data and verification
        // produced nothing new to learn from.
        if new_points == 0 {
            if !do_restart(
                &mut cert,
                &mut ctrl,
                &mut vcs,
                &mut datasets,
                &mut restart,
                &mut rng,
            )? {
                break;
            }
        }
    }

    if last_verdicts.is_empty() {
        last_verdicts = verify_all(&vcs, &config.verifier)?;
    }
    let certified = last_verdicts.iter().all(|(_, v)| v.is_certified());
    let bound = certified.then(|| quantitative_bound(problem, &cert)).flatten();
    Ok(CegisResult {
        certified,
        certificate: cert,
        controller: ctrl,
        verdicts: last_verdicts,
        iterations,
        restarts: restart,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims, Hyperbox};
    use crate::model::{
        validate_problem, ConstrainedSet, ProblemParts, RuleParams, Spec, System, SystemKind,
    };
    use crate::net::{Activation, NetworkShape};

    fn lyapunov_problem(seed: u64) -> Problem {
        validate_problem(ProblemParts {
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
            certificate_shape: NetworkShape::new(1, vec![(6, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed,
        })
        .unwrap()
    }

    fn fast_config() -> CegisConfig {
        CegisConfig {
            initial_samples: 200,
            train: TrainConfig {
                epochs: 1500,
                learning_rate: 5e-2,
                ..TrainConfig::default()
            },
            ..CegisConfig::default()
        }
    }

    #[test]
    fn synthesises_a_lyapunov_certificate() {
        let problem = lyapunov_problem(7);
        let result = run_cegis(&problem, &fast_config()).unwrap();
        assert!(result.certified, "verdicts: {:?}", result.verdicts);
        // The shipped certificate re-verifies from scratch.
        let verdicts = check_certificate(
            &problem,
            &result.certificate,
            None,
            &VerifierConfig::default(),
        )
        .unwrap();
        assert!(verdicts.iter().all(|(_, v)| v.is_certified()));
        assert!(result.bound.is_none());
    }

    #[test]
    fn run_is_deterministic() {
        let problem = lyapunov_problem(7);
        let a = run_cegis(&problem, &fast_config()).unwrap();
        let b = run_cegis(&problem, &fast_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reachability_bound_is_reported() {
        let problem = validate_problem(ProblemParts {
            system: System {
                kind: SystemKind::DiscreteDeterministic,
                n_state: 1,
                n_input: 0,
                dynamics: vec![parse_expr("x1-1", Dims::state_only(1)).unwrap()],
                noise: vec![],
                input_box: None,
            },
            domain: ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(0.0, 10.0)]).unwrap()),
            spec: Spec::Reachability {
                target: ConstrainedSet::unconstrained(
                    Hyperbox::from_bounds(&[(0.0, 1.0)]).unwrap(),
                ),
                decrease: 0.5,
            },
            certificate_shape: NetworkShape::new(1, vec![(4, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 11,
        })
        .unwrap();
        let result = run_cegis(&problem, &fast_config()).unwrap();
        if result.certified {
            let bound = result.bound.expect("ranking results carry a step bound");
            assert!(bound.value > 0.0);
            assert!(!bound.vacuous);
        }
    }
}
