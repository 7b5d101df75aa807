//! Dynamical systems, constrained-set domains, and property specifications.

use crate::expr::{Expr, EvalError, Hyperbox, Interval};
use crate::net::{Network, NetworkShape};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value encountered: {0}")]
    Eval(#[from] EvalError),
    #[error("set appears empty: {0} consecutive rejected samples")]
    EmptySetSuspected(usize),
}

/// One structured validation diagnostic, with the offending field path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {message}")]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    ContinuousDeterministic,
    DiscreteDeterministic,
    DiscreteStochastic,
}

/// A dynamical model: `x' = f(x, u)` in continuous time, or
/// `x+ = f(x, u, w)` in discrete time with finite-support noise `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub kind: SystemKind,
    pub n_state: usize,
    pub n_input: usize,
    pub dynamics: Vec<Expr>,
    /// Finite noise support: `(support point, probability)` pairs.
    /// Nonempty only for `DiscreteStochastic`.
    pub noise: Vec<(Vec<f64>, f64)>,
    /// Admissible input box; present iff `n_input > 0`.
    pub input_box: Option<Hyperbox>,
}

impl System {
    pub fn n_noise(&self) -> usize {
        self.noise.first().map_or(0, |(w, _)| w.len())
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind == SystemKind::DiscreteStochastic
    }

    pub fn is_continuous(&self) -> bool {
        self.kind == SystemKind::ContinuousDeterministic
    }
}

/// `{ x in base : g_i(x) <= 0 for all i }`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedSet {
    pub base: Hyperbox,
    pub constraints: Vec<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetClass {
    Inside,
    Outside,
    Undecided,
}

const EMPTY_SET_REJECTION_LIMIT: usize = 1_000_000;

impl ConstrainedSet {
    pub fn unconstrained(base: Hyperbox) -> Self {
        Self {
            base,
            constraints: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Closed membership test: inside the base box with all constraints
    /// satisfied.
    pub fn contains(&self, x: &[f64]) -> Result<bool, ModelError> {
        if !self.base.contains_point(x) {
            return Ok(false);
        }
        for g in &self.constraints {
            if g.eval(x, &[], &[])? > 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Sound box classification against the set. `Inside` and `Outside` are
    /// never returned incorrectly; interval failures degrade to `Undecided`.
    pub fn classify_box(&self, b: &Hyperbox) -> SetClass {
        if !self.base.intersects(b) {
            return SetClass::Outside;
        }
        let empty = Hyperbox::empty();
        let mut inside = self.base.contains_box(b);
        for g in &self.constraints {
            match g.interval_eval(b, &empty, &empty) {
                Ok(iv) => {
                    if iv.lo > 0.0 {
                        return SetClass::Outside;
                    }
                    if iv.hi > 0.0 {
                        inside = false;
                    }
                }
                Err(_) => inside = false,
            }
        }
        if inside {
            SetClass::Inside
        } else {
            SetClass::Undecided
        }
    }

    /// Rejection sampling, uniform on the base box. Deterministic for a
    /// given RNG stream.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(count);
        let mut consecutive_rejections = 0usize;
        while out.len() < count {
            let x: Vec<f64> = self
                .base
                .intervals()
                .iter()
                .map(|iv| rng.gen_range(iv.lo..=iv.hi))
                .collect();
            if self.contains(&x).unwrap_or(false) {
                consecutive_rejections = 0;
                out.push(x);
            } else {
                consecutive_rejections += 1;
                if consecutive_rejections >= EMPTY_SET_REJECTION_LIMIT {
                    return Err(ModelError::EmptySetSuspected(consecutive_rejections));
                }
            }
        }
        Ok(out)
    }
}

/// The property to certify.
#[derive(Debug, Clone, PartialEq)]
pub enum Spec {
    Stability {
        equilibrium: Vec<f64>,
        exclusion_radius: f64,
    },
    Safety {
        init: ConstrainedSet,
        unsafe_set: ConstrainedSet,
    },
    Invariance {
        inv: ConstrainedSet,
    },
    Reachability {
        target: ConstrainedSet,
        decrease: f64,
    },
    ReachWhileAvoid {
        init: ConstrainedSet,
        target: ConstrainedSet,
        avoid: ConstrainedSet,
        decrease: f64,
    },
    ProbabilisticSafety {
        init: ConstrainedSet,
        unsafe_set: ConstrainedSet,
        level: f64,
    },
    ProbabilisticReachability {
        target: ConstrainedSet,
        decrease: f64,
    },
}

impl Spec {
    pub fn name(&self) -> &'static str {
        match self {
            Spec::Stability { .. } => "stability",
            Spec::Safety { .. } => "safety",
            Spec::Invariance { .. } => "invariance",
            Spec::Reachability { .. } => "reachability",
            Spec::ReachWhileAvoid { .. } => "reach-while-avoid",
            Spec::ProbabilisticSafety { .. } => "probabilistic-safety",
            Spec::ProbabilisticReachability { .. } => "probabilistic-reachability",
        }
    }

    fn requires_stochastic(&self) -> bool {
        matches!(
            self,
            Spec::ProbabilisticSafety { .. } | Spec::ProbabilisticReachability { .. }
        )
    }

    fn sets(&self) -> Vec<(&'static str, &ConstrainedSet)> {
        match self {
            Spec::Stability { .. } => vec![],
            Spec::Safety { init, unsafe_set } => {
                vec![("spec.init", init), ("spec.unsafe", unsafe_set)]
            }
            Spec::Invariance { inv } => vec![("spec.inv", inv)],
            Spec::Reachability { target, .. } => vec![("spec.target", target)],
            Spec::ReachWhileAvoid {
                init,
                target,
                avoid,
                ..
            } => vec![
                ("spec.init", init),
                ("spec.target", target),
                ("spec.avoid", avoid),
            ],
            Spec::ProbabilisticSafety {
                init, unsafe_set, ..
            } => vec![("spec.init", init), ("spec.unsafe", unsafe_set)],
            Spec::ProbabilisticReachability { target, .. } => vec![("spec.target", target)],
        }
    }
}

/// Rule margins; see the rules module for how each is consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleParams {
    /// Positivity margin, scaled by domain size at problem validation.
    pub mu_pos: f64,
    /// Decrease margin.
    pub mu_dec: f64,
    /// Barrier band halfwidth.
    pub eps_band: f64,
    /// Emit the `f(x) in D u T` condition for reachability rules.
    pub check_domain_invariance: bool,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            mu_pos: 1e-4,
            mu_dec: 1e-4,
            eps_band: 0.1,
            check_domain_invariance: true,
        }
    }
}

/// A fully validated synthesis task.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub system: System,
    pub domain: ConstrainedSet,
    pub spec: Spec,
    pub certificate_shape: NetworkShape,
    pub controller_shape: Option<NetworkShape>,
    pub rule_params: RuleParams,
    pub seed: u64,
}

/// Unvalidated problem description, as assembled by a frontend.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemParts {
    pub system: System,
    pub domain: ConstrainedSet,
    pub spec: Spec,
    pub certificate_shape: NetworkShape,
    pub controller_shape: Option<NetworkShape>,
    pub rule_params: RuleParams,
    pub seed: u64,
}

const PROB_SUM_TOLERANCE: f64 = 1e-12;

/// Check every structural invariant; returns one diagnostic per violation.
pub fn validate_problem(parts: ProblemParts) -> Result<Problem, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let mut push = |path: &str, message: String| {
        diags.push(Diagnostic {
            path: path.to_string(),
            message,
        })
    };
    let sys = &parts.system;
    let n = sys.n_state;

    if n == 0 {
        push("system.n_state", "state dimension must be positive".into());
    }
    if sys.dynamics.len() != n {
        push(
            "system.dynamics",
            format!("expected {} equations, found {}", n, sys.dynamics.len()),
        );
    }
    match sys.kind {
        SystemKind::DiscreteStochastic => {
            if sys.noise.is_empty() {
                push(
                    "system.noise",
                    "stochastic system requires a nonempty noise support".into(),
                );
            } else {
                let total: f64 = sys.noise.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
                    push("system.noise", format!("noise probabilities sum to {total}"));
                }
                for (m, (w, p)) in sys.noise.iter().enumerate() {
                    if *p <= 0.0 {
                        push("system.noise", format!("support point {m}: probability {p} is not positive"));
                    }
                    if w.len() != sys.n_noise() {
                        push("system.noise", format!("support point {m}: dimension mismatch"));
                    }
                }
            }
        }
        _ => {
            if !sys.noise.is_empty() {
                push(
                    "system.noise",
                    "noise support given for a deterministic system".into(),
                );
            }
            if sys.dynamics.iter().any(|e| e.uses_noise()) {
                push(
                    "system.dynamics",
                    "noise variables appear in deterministic dynamics".into(),
                );
            }
        }
    }
    if sys.n_input == 0 {
        if sys.dynamics.iter().any(|e| e.uses_input()) {
            push(
                "system.dynamics",
                "input variables appear but n_input = 0".into(),
            );
        }
        if sys.input_box.is_some() {
            push("system.input_box", "input box given but n_input = 0".into());
        }
        if parts.controller_shape.is_some() {
            push(
                "controller",
                "controller shape given but the system has no inputs".into(),
            );
        }
    } else {
        match &sys.input_box {
            None => push(
                "system.input_box",
                "controlled system requires an input box".into(),
            ),
            Some(b) if b.dim() != sys.n_input => push(
                "system.input_box",
                format!("input box has dimension {}, expected {}", b.dim(), sys.n_input),
            ),
            _ => {}
        }
        if parts.controller_shape.is_none() {
            push(
                "controller",
                "system has inputs but no controller shape was given".into(),
            );
        }
    }

    if parts.domain.dim() != n {
        push(
            "domain.box",
            format!("domain has dimension {}, expected {}", parts.domain.dim(), n),
        );
    }

    // Spec / system compatibility.
    if parts.spec.requires_stochastic() && sys.kind != SystemKind::DiscreteStochastic {
        push(
            "spec.kind",
            format!(
                "{} requires a stochastic system; got a deterministic one",
                parts.spec.name()
            ),
        );
    }
    if sys.kind == SystemKind::DiscreteStochastic
        && matches!(parts.spec, Spec::Safety { .. })
    {
        push(
            "spec.kind",
            "deterministic safety on a stochastic system; use probabilistic-safety with a level"
                .into(),
        );
    }
    if sys.kind == SystemKind::ContinuousDeterministic
        && !matches!(
            parts.spec,
            Spec::Stability { .. } | Spec::Safety { .. } | Spec::Invariance { .. }
        )
    {
        push(
            "spec.kind",
            format!(
                "continuous-time systems support stability, safety, and invariance; got {}",
                parts.spec.name()
            ),
        );
    }

    match &parts.spec {
        Spec::Stability {
            equilibrium,
            exclusion_radius,
        } => {
            if equilibrium.len() != n {
                push("spec.equilibrium", "dimension mismatch".into());
            } else if !parts.domain.contains(equilibrium).unwrap_or(false) {
                push("spec.equilibrium", "equilibrium lies outside the domain".into());
            }
            if *exclusion_radius <= 0.0 {
                push("spec.exclusion_radius", "must be positive".into());
            }
        }
        Spec::Reachability { decrease, .. }
        | Spec::ReachWhileAvoid { decrease, .. }
        | Spec::ProbabilisticReachability { decrease, .. } => {
            if *decrease <= 0.0 {
                push("spec.decrease", "must be positive".into());
            }
        }
        Spec::ProbabilisticSafety { level, .. } => {
            if *level <= 0.0 {
                push("spec.level", "must be positive".into());
            }
        }
        _ => {}
    }
    for (path, set) in parts.spec.sets() {
        if set.dim() != n {
            push(path, "dimension mismatch with the state space".into());
        } else if !parts.domain.base.contains_box(&set.base) {
            push(path, "base box is not contained in the domain box".into());
        }
        if set.constraints.iter().any(|g| g.uses_input() || g.uses_noise()) {
            push(path, "set constraints may use state variables only".into());
        }
    }
    if parts
        .domain
        .constraints
        .iter()
        .any(|g| g.uses_input() || g.uses_noise())
    {
        push("domain.constraints", "set constraints may use state variables only".into());
    }

    // Network shapes.
    if let Err(e) = parts.certificate_shape.validate_certificate(n) {
        push("certificate", e);
    }
    if let (Some(shape), Some(input_box)) = (&parts.controller_shape, &sys.input_box) {
        if let Err(e) = shape.validate_controller(n, sys.n_input, input_box) {
            push("controller", e);
        }
    }

    let rp = &parts.rule_params;
    if rp.mu_pos <= 0.0 || rp.mu_dec <= 0.0 || rp.eps_band <= 0.0 {
        push("rules", "all margins must be positive".into());
    }

    if diags.is_empty() {
        Ok(Problem {
            system: parts.system,
            domain: parts.domain,
            spec: parts.spec,
            certificate_shape: parts.certificate_shape,
            controller_shape: parts.controller_shape,
            rule_params: parts.rule_params,
            seed: parts.seed,
        })
    } else {
        Err(diags)
    }
}

/// One application of the dynamics: the vector field value for continuous
/// systems, the successor state for discrete ones.
pub fn step(
    system: &System,
    controller: Option<&Network>,
    x: &[f64],
    noise_index: Option<usize>,
) -> Result<Vec<f64>, ModelError> {
    let u = match controller {
        Some(net) => net.forward(x).map_err(|_| EvalError::NonFiniteResult)?,
        None => Vec::new(),
    };
    let w: &[f64] = match noise_index {
        Some(m) => &system.noise[m].0,
        None => &[],
    };
    system
        .dynamics
        .iter()
        .map(|e| e.eval(x, &u, w).map_err(ModelError::from))
        .collect()
}

/// Interval image of one dynamics application over a state box, with the
/// controller's output enclosed by its interval forward pass.
pub fn step_box(
    system: &System,
    controller: Option<&Network>,
    b: &Hyperbox,
    noise_index: Option<usize>,
) -> Result<Hyperbox, crate::expr::IntervalError> {
    let bu = match controller {
        Some(net) => Hyperbox::new(net.interval_forward(b)?),
        None => Hyperbox::empty(),
    };
    let bw = match noise_index {
        Some(m) => Hyperbox::new(
            system.noise[m]
                .0
                .iter()
                .map(|&v| Interval::point(v))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => Hyperbox::empty(),
    };
    let dims = system
        .dynamics
        .iter()
        .map(|e| e.interval_eval(b, &bu, &bw))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Hyperbox::new(dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims};
    use crate::net::{Activation, NetworkShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dyn1(text: &str) -> Vec<Expr> {
        vec![parse_expr(text, Dims::state_only(1)).unwrap()]
    }

    fn continuous_parts() -> ProblemParts {
        ProblemParts {
            system: System {
                kind: SystemKind::ContinuousDeterministic,
                n_state: 1,
                n_input: 0,
                dynamics: dyn1("-x1"),
                noise: Vec::new(),
                input_box: None,
            },
            domain: ConstrainedSet::unconstrained(
                Hyperbox::from_bounds(&[(-1.0, 1.0)]).unwrap(),
            ),
            spec: Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            certificate_shape: NetworkShape::new(1, vec![(4, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 0,
        }
    }

    #[test]
    fn validate_accepts_a_simple_stability_problem() {
        assert!(validate_problem(continuous_parts()).is_ok());
    }

    #[test]
    fn validate_names_the_offending_fields() {
        let mut parts = continuous_parts();
        parts.system.kind = SystemKind::DiscreteStochastic;
        parts.system.noise = vec![(vec![-1.0], 0.5), (vec![1.0], 0.4)];
        parts.system.dynamics = vec![parse_expr("x1 + w1", Dims::new(1, 0, 1)).unwrap()];
        let diags = validate_problem(parts).unwrap_err();
        assert!(diags
            .iter()
            .any(|d| d.path == "system.noise" && d.message.contains("sum to 0.9")));

        let mut parts = continuous_parts();
        parts.controller_shape = Some(NetworkShape::new(1, vec![(4, Activation::Tanh)], 1));
        let diags = validate_problem(parts).unwrap_err();
        assert!(diags.iter().any(|d| d.path == "controller"));
    }

    #[test]
    fn step_matches_hand_computations() {
        let discrete = System {
            kind: SystemKind::DiscreteDeterministic,
            n_state: 1,
            n_input: 0,
            dynamics: dyn1("0.5*x1"),
            noise: Vec::new(),
            input_box: None,
        };
        assert_eq!(step(&discrete, None, &[4.0], None).unwrap(), vec![2.0]);

        let stochastic = System {
            kind: SystemKind::DiscreteStochastic,
            n_state: 1,
            n_input: 0,
            dynamics: vec![parse_expr("x1 - 1 + w1", Dims::new(1, 0, 1)).unwrap()],
            noise: vec![(vec![-1.0], 0.5), (vec![1.0], 0.5)],
            input_box: None,
        };
        assert_eq!(step(&stochastic, None, &[3.0], Some(1)).unwrap(), vec![3.0]);

        let continuous = System {
            kind: SystemKind::ContinuousDeterministic,
            n_state: 1,
            n_input: 0,
            dynamics: dyn1("-x1"),
            noise: Vec::new(),
            input_box: None,
        };
        assert_eq!(step(&continuous, None, &[2.0], None).unwrap(), vec![-2.0]);
    }

    fn disc_set() -> ConstrainedSet {
        ConstrainedSet {
            base: Hyperbox::from_bounds(&[(-1.0, 1.0)]).unwrap(),
            constraints: vec![parse_expr("x1*x1 - 0.25", Dims::state_only(1)).unwrap()],
        }
    }

    #[test]
    fn membership_respects_base_and_constraints() {
        let s = disc_set();
        assert!(s.contains(&[0.4]).unwrap());
        assert!(!s.contains(&[0.6]).unwrap());
        assert!(!s.contains(&[2.0]).unwrap());
    }

    #[test]
    fn classify_box_is_sound_on_hand_cases() {
        let s = disc_set();
        let b = |lo, hi| Hyperbox::from_bounds(&[(lo, hi)]).unwrap();
        assert_eq!(s.classify_box(&b(-0.1, 0.1)), SetClass::Inside);
        assert_eq!(s.classify_box(&b(0.6, 0.9)), SetClass::Outside);
        assert_eq!(s.classify_box(&b(0.4, 0.6)), SetClass::Undecided);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_constraints() {
        let s = ConstrainedSet {
            base: Hyperbox::from_bounds(&[(0.0, 1.0)]).unwrap(),
            constraints: vec![parse_expr("0.5 - x1", Dims::state_only(1)).unwrap()],
        };
        let a = s.sample(20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = s.sample(20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x[0] >= 0.5));
    }

    #[test]
    fn sampling_an_empty_set_fails() {
        let s = ConstrainedSet {
            base: Hyperbox::from_bounds(&[(0.0, 1.0)]).unwrap(),
            constraints: vec![parse_expr("x1 + 2", Dims::state_only(1)).unwrap()],
        };
        assert!(matches!(
            s.sample(1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ModelError::EmptySetSuspected(_))
        ));
    }
}
