//! Trajectory simulation and Monte-Carlo spot checks.
//!
//! Nothing here carries a soundness guarantee; simulation is used to
//! sanity-check certified results (for example comparing a probabilistic
//! bound against empirical frequencies) and in tests as an independent
//! oracle.

use crate::model::{step, ConstrainedSet, ModelError, System};
use crate::net::Network;
use rand::Rng;

/// Draw a noise support index by cumulative probability; `None` for
/// deterministic systems.
pub fn sample_noise_index(system: &System, rng: &mut impl Rng) -> Option<usize> {
    if system.noise.is_empty() {
        return None;
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (m, (_, p)) in system.noise.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(m);
        }
    }
    Some(system.noise.len() - 1)
}

/// Discrete-time trajectory of up to `horizon` steps, including the initial
/// state.
pub fn simulate(
    system: &System,
    controller: Option<&Network>,
    x0: &[f64],
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut traj = Vec::with_capacity(horizon + 1);
    traj.push(x0.to_vec());
    for _ in 0..horizon {
        let m = sample_noise_index(system, rng);
        let next = step(system, controller, traj.last().unwrap(), m)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Classical fourth-order Runge-Kutta integration of a continuous system.
/// The returned trajectory is a numerical approximation only.
pub fn rk4(
    system: &System,
    controller: Option<&Network>,
    x0: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let f = |x: &[f64]| step(system, controller, x, None);
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for _ in 0..steps {
        let x = traj.last().unwrap().clone();
        let k1 = f(&x)?;
        let mid1: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
        let k2 = f(&mid1)?;
        let mid2: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
        let k3 = f(&mid2)?;
        let end: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
        let k4 = f(&end)?;
        let next: Vec<f64> = (0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        traj.push(next);
    }
    Ok(traj)
}

/// Empirical frequency of runs from `x0` that hit `event` within `horizon`
/// discrete steps. Runs that leave `domain` first are censored: they count
/// as not hitting the event.
pub fn hit_frequency(
    system: &System,
    controller: Option<&Network>,
    domain: &ConstrainedSet,
    event: &ConstrainedSet,
    x0: &[f64],
    horizon: usize,
    runs: usize,
    rng: &mut impl Rng,
) -> Result<f64, ModelError> {
    let mut hits = 0usize;
    for _ in 0..runs {
        let mut x = x0.to_vec();
        for _ in 0..=horizon {
            if event.contains(&x)? {
                hits += 1;
                break;
            }
            if !domain.contains(&x)? {
                break;
            }
            let m = sample_noise_index(system, rng);
            x = step(system, controller, &x, m)?;
        }
    }
    Ok(hits as f64 / runs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims, Hyperbox};
    use crate::model::SystemKind;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stochastic_contraction() -> System {
        System {
            kind: SystemKind::DiscreteStochastic,
            n_state: 1,
            n_input: 0,
            dynamics: vec![parse_expr("0.5*x1+w1", Dims::new(1, 0, 1)).unwrap()],
            noise: vec![(vec![-0.1], 0.5), (vec![0.1], 0.5)],
            input_box: None,
        }
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let system = System {
            kind: SystemKind::ContinuousDeterministic,
            n_state: 1,
            n_input: 0,
            dynamics: vec![parse_expr("-x1", Dims::state_only(1)).unwrap()],
            noise: vec![],
            input_box: None,
        };
        let traj = rk4(&system, None, &[1.0], 0.01, 100).unwrap();
        assert_relative_eq!(traj.last().unwrap()[0], (-1.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn stochastic_trajectories_stay_contracted() {
        let system = stochastic_contraction();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = simulate(&system, None, &[0.0], 1000, &mut rng).unwrap();
        assert_eq!(traj.len(), 1001);
        // From 0 the iterates stay within +-0.2 forever.
        assert!(traj.iter().all(|x| x[0].abs() <= 0.2 + 1e-12));
    }

    #[test]
    fn hit_frequency_is_zero_for_unreachable_event() {
        let system = stochastic_contraction();
        let domain = ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(-1.0, 1.0)]).unwrap());
        let unsafe_set =
            ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(0.9, 1.0)]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let freq =
            hit_frequency(&system, None, &domain, &unsafe_set, &[0.0], 200, 500, &mut rng).unwrap();
        assert_eq!(freq, 0.0);
    }

    #[test]
    fn hit_frequency_sees_certain_events() {
        // x+ = x - 1 from 5 reaches x <= 1 every run.
        let system = System {
            kind: SystemKind::DiscreteDeterministic,
            n_state: 1,
            n_input: 0,
            dynamics: vec![parse_expr("x1-1", Dims::state_only(1)).unwrap()],
            noise: vec![],
            input_box: None,
        };
        let domain = ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(0.0, 10.0)]).unwrap());
        let target = ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(0.0, 1.0)]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let freq =
            hit_frequency(&system, None, &domain, &target, &[5.0], 10, 20, &mut rng).unwrap();
        assert_eq!(freq, 1.0);
    }
}
