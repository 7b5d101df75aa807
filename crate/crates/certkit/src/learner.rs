//! Gradient training of certificate and controller networks against
//! rule-violation losses.
//!
//! The loss is a sum of hinged violations over per-condition datasets, with
//! counterexamples up-weighted. Training is full-batch deterministic
//! gradient descent with a cosine-decayed step size, so a given seed always
//! produces the same parameters.

use crate::model::ModelError;
use crate::net::{Network, ParamGrads};
use crate::rules::{RuleError, VerificationCondition};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged: loss {loss:.3e} from initial {initial:.3e}")]
    Divergence { loss: f64, initial: f64 },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A sample point with its loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub weight: f64,
    /// CEGIS iteration that produced the point; 0 for initial samples.
    pub iteration: usize,
}

/// Training points for one verification condition, in the order they were
/// added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_points(points: Vec<Vec<f64>>) -> Self {
        Self {
            samples: points
                .into_iter()
                .map(|x| Sample {
                    x,
                    weight: 1.0,
                    iteration: 0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Add a counterexample plus `spread` perturbed copies, each rejected
    /// back into the condition's region. Exact duplicates of points already
    /// present are dropped.
    pub fn absorb_counterexample(
        &mut self,
        vc: &VerificationCondition,
        cex: &[f64],
        iteration: usize,
        cex_weight: f64,
        spread: usize,
        radius: f64,
        rng: &mut impl Rng,
    ) {
        let mut push = |x: Vec<f64>, weight: f64| {
            if !self.samples.iter().any(|s| s.x == x) {
                self.samples.push(Sample {
                    x,
                    weight,
                    iteration,
                });
            }
        };
        push(cex.to_vec(), cex_weight);
        let mut added = 0;
        let mut attempts = 0;
        while added < spread && attempts < 50 * spread.max(1) {
            attempts += 1;
            let x: Vec<f64> = cex
                .iter()
                .map(|&c| c + rng.gen_range(-radius..=radius))
                .collect();
            if vc.region.contains(&x).unwrap_or(false) {
                push(x, cex_weight);
                added += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hinge exponent; 1 or 2.
    pub penalty_exponent: u32,
    /// Consecutive zero-loss epochs before stopping early.
    pub zero_loss_patience: usize,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-2,
            penalty_exponent: 2,
            zero_loss_patience: 10,
            divergence_factor: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub epochs_run: usize,
    /// The best epoch ended with zero loss on every active sample.
    pub converged: bool,
}

/// Loss and parameter gradients of the full batch under the given weights.
/// Gate-carrying conditions contribute only at points where the gate
/// currently holds. Summation order is fixed by dataset order.
pub fn batch_loss(
    vcs: &[VerificationCondition],
    datasets: &[Dataset],
    cert: &Network,
    ctrl: Option<&Network>,
    p: u32,
) -> Result<(f64, ParamGrads, Option<ParamGrads>), TrainError> {
    let mut loss = 0.0;
    let mut cert_grads = ParamGrads::zeros_like(cert);
    let mut ctrl_grads = ctrl.map(ParamGrads::zeros_like);
    for (vc, data) in vcs.iter().zip(datasets) {
        for sample in &data.samples {
            if let Some(gate) = &vc.gate {
                if !gate.holds_at(cert, &sample.x).map_err(RuleError::from)? {
                    continue;
                }
            }
            let (v, grads) = vc.violation_grad(cert, ctrl, &sample.x)?;
            let hinge = (v + vc.train_margin).max(0.0);
            if hinge == 0.0 {
                continue;
            }
            let (l, dl) = match p {
                1 => (hinge, 1.0),
                _ => (hinge * hinge, 2.0 * hinge),
            };
            loss += sample.weight * l;
            let s = sample.weight * dl;
            cert_grads.add_scaled(&grads.cert, s);
            if let (Some(acc), Some(g)) = (ctrl_grads.as_mut(), grads.ctrl.as_ref()) {
                acc.add_scaled(g, s);
            }
        }
    }
    Ok((loss, cert_grads, ctrl_grads))
}

fn apply_step(net: &mut Network, grads: &ParamGrads, lr: f64) {
    for (layer, (dw, db)) in net.layers.iter_mut().zip(&grads.layers) {
        for (row, drow) in layer.weights.iter_mut().zip(dw) {
            for (w, d) in row.iter_mut().zip(drow) {
                *w -= lr * d;
            }
        }
        for (b, d) in layer.bias.iter_mut().zip(db) {
            *b -= lr * d;
        }
    }
}

/// Full-batch gradient descent; leaves the best-loss parameters in the
/// networks on return.
pub fn train(
    vcs: &[VerificationCondition],
    datasets: &[Dataset],
    cert: &mut Network,
    mut ctrl: Option<&mut Network>,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let (initial_loss, _, _) = batch_loss(vcs, datasets, cert, ctrl.as_deref(), config.penalty_exponent)?;
    let mut best_loss = initial_loss;
    let mut best = (cert.clone(), ctrl.as_deref().cloned());
    let divergence_limit = config.divergence_factor * initial_loss.max(1.0);
    let mut zero_streak = if initial_loss == 0.0 { 1 } else { 0 };
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        if zero_streak >= config.zero_loss_patience {
            break;
        }
        let lr = config.learning_rate
            * 0.5
            * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        let (_, cg, og) = batch_loss(vcs, datasets, cert, ctrl.as_deref(), config.penalty_exponent)?;
        apply_step(cert, &cg, lr);
        if let (Some(net), Some(g)) = (ctrl.as_deref_mut(), og.as_ref()) {
            apply_step(net, g, lr);
        }
        epochs_run = epoch + 1;
        let (loss, _, _) = batch_loss(vcs, datasets, cert, ctrl.as_deref(), config.penalty_exponent)?;
        if !loss.is_finite() || loss > divergence_limit {
            return Err(TrainError::Divergence {
                loss,
                initial: initial_loss,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best = (cert.clone(), ctrl.as_deref().cloned());
        }
        zero_streak = if loss == 0.0 { zero_streak + 1 } else { 0 };
    }
    *cert = best.0;
    if let (Some(net), Some(saved)) = (ctrl.as_deref_mut(), best.1) {
        *net = saved;
    }
    Ok(TrainReport {
        initial_loss,
        best_loss,
        epochs_run,
        converged: best_loss == 0.0,
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
    use crate::rules::compile_rules;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lyapunov_setup() -> (Vec<VerificationCondition>, Vec<Dataset>, Network) {
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
            certificate_shape: NetworkShape::new(1, vec![(6, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 7,
        })
        .unwrap();
        let cert = Network::init(&problem.certificate_shape, problem.seed);
        let vcs = compile_rules(&problem, &cert, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
        let datasets = vcs
            .iter()
            .map(|vc| Dataset::from_points(vc.region.sample(200, &mut rng).unwrap()))
            .collect();
        (vcs, datasets, cert)
    }

    #[test]
    fn training_reduces_lyapunov_loss_to_zero() {
        let (vcs, datasets, mut cert) = lyapunov_setup();
        let config = TrainConfig {
            epochs: 3000,
            learning_rate: 5e-2,
            ..TrainConfig::default()
        };
        let report = train(&vcs, &datasets, &mut cert, None, &config).unwrap();
        assert!(report.initial_loss > 0.0);
        // Squared hinges vanish only asymptotically; a small residual means
        // every sample violation sits just inside the training margin.
        assert!(
            report.best_loss < 1e-4 * report.initial_loss.max(1.0),
            "best loss {}",
            report.best_loss
        );
        let (loss, _, _) = batch_loss(&vcs, &datasets, &cert, None, 2).unwrap();
        assert_eq!(loss, report.best_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let (vcs, datasets, cert0) = lyapunov_setup();
        let mut a = cert0.clone();
        let mut b = cert0;
        let ra = train(&vcs, &datasets, &mut a, None, &TrainConfig::default()).unwrap();
        let rb = train(&vcs, &datasets, &mut b, None, &TrainConfig::default()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (vcs, datasets, cert) = lyapunov_setup();
        let small: Vec<Dataset> = datasets
            .iter()
            .map(|d| Dataset {
                samples: d.samples.iter().take(5).cloned().collect(),
            })
            .collect();
        let (_, grads, _) = batch_loss(&vcs, &small, &cert, None, 2).unwrap();
        let h = 1e-6;
        for l in 0..cert.layers.len() {
            for r in 0..cert.layers[l].weights.len() {
                for c in 0..cert.layers[l].weights[r].len() {
                    let mut plus = cert.clone();
                    plus.layers[l].weights[r][c] += h;
                    let mut minus = cert.clone();
                    minus.layers[l].weights[r][c] -= h;
                    let fp = batch_loss(&vcs, &small, &plus, None, 2).unwrap().0;
                    let fm = batch_loss(&vcs, &small, &minus, None, 2).unwrap().0;
                    let fd = (fp - fm) / (2.0 * h);
                    approx::assert_relative_eq!(
                        grads.layers[l].0[r][c],
                        fd,
                        max_relative = 1e-4,
                        epsilon = 1e-7
                    );
                }
            }
        }
    }

    #[test]
    fn counterexamples_are_upweighted_and_spread() {
        let (vcs, _, _) = lyapunov_setup();
        let vc = &vcs[0];
        let mut data = Dataset::from_points(vec![vec![0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        data.absorb_counterexample(vc, &[0.7], 1, 10.0, 4, 0.05, &mut rng);
        assert_eq!(data.len(), 6);
        assert_eq!(data.samples[1].x, vec![0.7]);
        assert_eq!(data.samples[1].weight, 10.0);
        assert_eq!(data.samples[1].iteration, 1);
        for s in &data.samples[2..] {
            assert!(vc.region.contains(&s.x).unwrap());
            assert!((s.x[0] - 0.7).abs() <= 0.05);
        }
        // Re-absorbing the same point adds no duplicate of it.
        let before = data.len();
        data.absorb_counterexample(vc, &[0.7], 2, 10.0, 0, 0.05, &mut rng);
        assert_eq!(data.len(), before);
    }

    #[test]
    fn divergence_is_reported() {
        let (vcs, datasets, mut cert) = lyapunov_setup();
        let config = TrainConfig {
            learning_rate: 1e4,
            ..TrainConfig::default()
        };
        match train(&vcs, &datasets, &mut cert, None, &config) {
            Err(TrainError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
